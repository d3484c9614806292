//! Differentiable tensor core: forward operators recorded on a [`Graph`],
//! reverse-mode gradients, Adam, seeded counter-based randomness and the
//! manifest + blob checkpoint format.
//!
//! Conventions: f32 everywhere, N×H×W×C layout, losses reduce by mean,
//! sign(0) = 0, single-threaded fixed-order reductions.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod rng;
mod tensor;

pub use checkpoint::{blob_path, manifest_path, Checkpoint, Manifest, ManifestEntry, FORMAT};
pub use graph::{sign0, Gradients, Graph, NodeId, Op};
pub use kernels::SampleMap;
pub use params::{Bound, OptimConfig, Param, ParamSet};
pub use rng::{stream_id, RngState, SeededRng};
pub use tensor::Tensor;

pub(crate) use tensor::Nhwc;
