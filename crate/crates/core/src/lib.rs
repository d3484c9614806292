//! Desk-scale laboratory for training-resistant adversarial attacks on
//! face-swapping autoencoders.
//!
//! The crate is layered bottom-up:
//!
//! * [`diffengine`]: tensors, a recording graph with reverse-mode gradients,
//!   Adam, seeded counter-based randomness and the checkpoint format.
//! * [`transforms`]: affine distortions and the training augmentation pipeline.
//! * [`synthdata`]: procedural identity videos with analytic masks, dataset
//!   partitions and PPM/PGM frame directories.
//! * [`faceswap`]: shared-encoder dual-decoder autoencoders, reconstruction
//!   losses, training and the mask blend.
//! * [`attacks`]: the PGD distorting attack and the OGAN generator with its
//!   alternating bilevel training loop.
//! * [`metrics`]: temporal-consistency scores.
//! * [`harness`]: experiment plans, arms, curves and reports behind the CLI.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod diffengine;
mod error;
pub mod faceswap;
pub mod harness;
pub mod metrics;
pub mod synthdata;
pub mod transforms;

pub use error::{Error, Result};
