//! Shared-plus-low-rank subject layers and their plain and adapter-only
//! counterparts.
//!
//! A subject-conditioned layer computes
//! `σ(X W_generalᵀ + bias + Σ_s (M_s X)(α/r) A_s B_s)`: the shared path sees
//! every row, and each row additionally passes through the low-rank adapter
//! of its own subject. Rows whose subject is unknown use the shared path only.

mod conv;
mod count;
mod linear;
mod routing;
mod similarity;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Param, Tensor};

pub use conv::{composed_kernel, ConvShape, LowRankConv, PlainConv, SubjectConditionedConv};
pub use count::ParamCount;
pub use linear::{LinearShape, LowRankLinear, PlainLinear, SubjectConditionedLinear};
pub use routing::{route, SubjectMask};
pub use similarity::{adapter_similarity, cosine_similarity_matrix, AdapterBank};

/// Identifier of a subject (recording participant).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectId(pub u32);

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl SubjectId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Rank and scale of a low-rank correction. The product `A B` is multiplied
/// by `alpha / rank` at forward time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRank {
    pub rank: usize,
    pub alpha: f64,
}

impl LowRank {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn validate(&self, max_rank: usize, layer: &str) -> Result<()> {
        if self.rank == 0 || self.rank > max_rank {
            return Err(Error::Config(format!(
                "{layer}: rank {} outside 1..={max_rank}",
                self.rank
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("{layer}: alpha must be finite and >= 0")));
        }
        Ok(())
    }
}

/// One subject's adapter pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub a: Param,
    pub b: Param,
}

impl Adapter {
    pub fn numel(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

fn normal_param(name: String, shape: &[usize], variance: f64, seed: u64) -> Param {
    let len = shape.iter().product();
    let mut r = rng::stream(seed, &name);
    let data = rng::normal_vec(&mut r, len, variance.sqrt());
    Param::new(name, Tensor::new(shape.to_vec(), data).expect("shape and data agree"))
}

fn zero_param(name: String, shape: &[usize]) -> Param {
    Param::new(name, Tensor::zeros(shape))
}

fn check_batch(rows: usize, ids: usize) -> Result<()> {
    if ids == 0 || rows == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if rows != ids {
        return Err(Error::dim(
            "subject layer",
            format!("{rows} rows but {ids} subject ids"),
        ));
    }
    Ok(())
}
