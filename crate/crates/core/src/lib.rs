//! Identification of induction-motor parameters from direct-on-line startup
//! waveforms.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod dq;
pub mod error;
pub mod identify;
pub mod integrate;
pub mod model;
pub mod qp;
pub mod sensitivity;
pub mod sensors;
pub mod solver;

pub use error::{Error, Result};
