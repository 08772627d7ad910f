//! Semi-supervised domain adaptation with enhanced categorical and
//! consistency alignment.
//!
//! The crate is `no_std` (with `alloc`) so the numerical core can be embedded
//! anywhere; file formats, the command line and thread pools live in the
//! companion `ecacl` crate.
//!
//! Layout:
//!
//! * [`tensor`]: dense `f64` tensors and a reverse-mode [`Tape`].
//! * [`model`]: MLP encoder, (normalized) linear classifier, gradient reversal.
//! * [`alignment`]: prototypes, prototypical loss, hard-triplet mining and loss.
//! * [`augment`]: weak (flip/translate) and strong (random op chain + cutout) views.
//! * [`consistency`]: confidence-gated pseudo-labels and the consistency loss.
//! * [`uda`]: pluggable unsupervised alignment term (none / entropy / minimax entropy).
//! * [`data`]: synthetic two-domain data, landmark splits, class-balanced batches.
//! * [`train`]: optimizer, learning-rate policy, the training step and evaluation.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod alignment;
pub mod augment;
pub mod consistency;
pub mod data;
pub mod gradcheck;
mod error;
pub mod math;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod uda;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
