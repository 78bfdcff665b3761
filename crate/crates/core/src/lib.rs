//! Contrastive action-representation learning from paired pose and calcium-imaging
//! windows, with cross-subject swapping, calcium-decay and mixing augmentations.
//!
//! Layout:
//! - [`tensor`]: dense tensors, reverse-mode tape, Adam, NSWT files
//! - [`encoders`]: behavior/neural encoders, attention pooling, projection heads
//! - [`objectives`]: symmetric InfoNCE, domain-masked InfoNCE, GRL discriminator loss, MMD
//! - [`augment`]: neighbor index, swapping, calcium and mix augmentations, jitter
//! - [`synthdata`]: synthetic multi-animal world, window pairing, train/test split
//! - [`preprocess`]: optical-flow registration and ΔF/F
//! - [`harness`]: training, baselines, linear probes, benchmarks, ablation

pub mod augment;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod objectives;
pub mod par;
pub mod preprocess;
pub mod rng;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
