//! Attribute-assisted video person re-identification.
//!
//! This crate is the allocation-only core: a small reverse-mode autodiff
//! engine, the network blocks, the five-branch ASA-Net graph with its
//! cross-attention enhancement, the training objectives, a deterministic
//! synthetic pedestrian generator, the optimizer/trainer state machine and
//! the CMC/mAP ranking metrics. File formats, the CLI and anything touching
//! the filesystem live in the `asanet` companion crate.

#![no_std]
// Index loops over flat row-major buffers are the clearest form for kernels.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

extern crate alloc;

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
