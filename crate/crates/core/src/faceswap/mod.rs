//! Miniature face-swap autoencoders: a shared encoder, one decoder per
//! identity, mask-weighted reconstruction losses and the mask blend that
//! produces the deepfake.

mod losses;
mod model;
pub(crate) mod net;
mod train;

pub use losses::{loss_face, loss_face_node, loss_mask, loss_mask_node, loss_rec, loss_rec_node};
pub use model::{blend_node, Architecture, Forward, Side, SwapModel};
pub use train::{
    evaluate_loss, gather, pretrain, stack_batch, train_step, train_step_tensors, BatchSampler, TrainConfig,
    TrainLog, Trainer, DESK_LEARNING_RATE,
};
