//! A sentence model built from hierarchies of feature-wise 1-D convolutions
//! and a speaker-conditioned recurrent discourse model on top of it, with
//! supervised training, greedy dialogue-act decoding, and discourse-vector
//! nearest-neighbour lookup.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense f64 vector/matrix kernels, convolution, softmax,
//!   cross-entropy, and the finite-difference gradient oracle.
//! - [`hcnn`]: the hierarchical convolutional sentence model (kernel-size
//!   schedule, forward pass, exact backward pass).
//! - [`discourse`]: the recurrent discourse model (agent-conditioned
//!   recurrence, depth-d windowed prediction, greedy decoding,
//!   discourse vectors, nearest neighbours).
//! - [`corpus`]: Switchboard ingestion, tokenization, lexicon and label-set
//!   management, and a synthetic corpus generator for desk-scale tests.
//! - [`training`]: the cross-entropy + L2 objective, full backpropagation
//!   through the unravelled model, L-BFGS/Adam/SGD optimizers, gradient
//!   checking, and evaluation.
//! - [`model_file`]: the versioned binary model format.
//! - [`cli`]: the subcommand implementations behind the `rcnn` binary.
//!
//! Everything is deterministic given a seed: fixed summation orders, seeded
//! RNGs, and thread-count-invariant gradient reduction.

pub mod cli;
pub mod corpus;
pub mod discourse;
pub mod error;
pub mod hcnn;
pub mod model_file;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
