//! Self-calibrating neural classifiers via bilevel optimization.
//!
//! The crate is `no_std` (it needs `alloc`) and carries every numerical
//! piece of the pipeline:
//!
//! - [`autodiff`]: a reverse-mode tape over dense `f64` tensors. Gradients can
//!   be materialised back onto the tape, which is what lets a whole unrolled
//!   gradient-descent loop be differentiated with respect to per-sample weights.
//! - [`model`]: a feed-forward classifier whose confidence is a Boltzmann
//!   smooth maximum of its softmax output.
//! - [`optim`]: gradient descent (value and on-tape) and Adam.
//! - [`bilevel`]: the sample-weight learning loop and its hypergradient.
//! - [`calibration`]: reliability binning, ECE and isotonic post-calibration.
//! - [`data`]: seeded synthetic generators and splits.
//!
//! File formats, configuration and the command line live in the `selfcal`
//! companion crate.
#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]
// `!(x > 0.0)` is the NaN-rejecting comparison used throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod bilevel;
pub mod calibration;
pub mod data;
mod error;
pub mod model;
pub mod optim;
mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
