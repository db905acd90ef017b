//! Subject-conditioned layers: a shared weight plus a per-subject low-rank
//! correction selected by the subject identity of each sample, together with
//! the reference models, synthetic multi-subject benchmark and experiment
//! harness built around them.

pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
