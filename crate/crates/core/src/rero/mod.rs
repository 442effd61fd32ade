//! Token importance from temporal embedding distance and the two-stage
//! redundancy-robust selection built on it.

mod heatmap;
mod select;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::TokenGrid;
use crate::numerics::Real;

pub use heatmap::{export_heatmap, write_pgm, MaskDump};
pub use select::{
    baseline_mask, select_rero, select_with_order, subsample_visible, BaselineKind, BaselineMask, ReRoMask,
    SelectionOrder, VisibleSet, PAIR_PRODUCT,
};

#[derive(Debug, Error)]
pub enum ReroError {
    #[error("vector dims differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("distance needs at least one dimension")]
    Empty,
    #[error("importance needs at least 2 frame pairs, got {0}")]
    TooFewPairs(usize),
    #[error("ratio {name} = {value} must lie in (0, 1]")]
    Ratio { name: &'static str, value: f64 },
    #[error("rho_pre = {rho} keeps no tokens out of {total}")]
    EmptySelection { rho: f64, total: usize },
    #[error("rho_post = {rho} leaves no visible tokens out of {selected}")]
    EmptyVisible { rho: f64, selected: usize },
    #[error("rho_pre * rho_post = {product} but 0.1 is required (pass the ratio override to allow it)")]
    RatioConstraint { product: f64 },
    #[error("importance map has {got} values, expected {expected}")]
    Shape { got: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Distance `S` between two token embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    #[default]
    L2,
    L1,
    NegCosine,
    NegLinearCka,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::L2 => "l2",
            MetricKind::L1 => "l1",
            MetricKind::NegCosine => "neg-cosine",
            MetricKind::NegLinearCka => "neg-cka",
        })
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(MetricKind::L2),
            "l1" => Ok(MetricKind::L1),
            "neg-cosine" | "cosine" => Ok(MetricKind::NegCosine),
            "neg-cka" | "neg-linear-cka" | "cka" => Ok(MetricKind::NegLinearCka),
            other => Err(format!("unknown metric {other:?} (expected l2, l1, neg-cosine, neg-cka)")),
        }
    }
}

/// Norms below this count as zero for the cosine-type metrics.
const ZERO_NORM: f64 = 1e-12;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Distance between two embeddings, evaluated in double precision.
///
/// `NegLinearCka` treats each vector as a one-sample representation:
/// linear CKA of mean-centred vectors reduces to their squared cosine.
pub fn distance<T: Real>(a: &[T], b: &[T], metric: MetricKind) -> Result<f64, ReroError> {
    if a.len() != b.len() {
        return Err(ReroError::DimMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(ReroError::Empty);
    }
    let a: Vec<f64> = a.iter().map(|v| v.to_f64_lossy()).collect();
    let b: Vec<f64> = b.iter().map(|v| v.to_f64_lossy()).collect();
    Ok(match metric {
        MetricKind::L2 => a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        MetricKind::L1 => a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum(),
        MetricKind::NegCosine => -cosine(&a, &b),
        MetricKind::NegLinearCka => {
            let c = cosine(&centered(&a), &centered(&b));
            -(c * c)
        }
    })
}

/// Per-token importance, `tau x j`, row-major by pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    pub tau: usize,
    pub j: usize,
    pub values: Vec<f64>,
}

impl ImportanceMap {
    pub fn new(tau: usize, j: usize, values: Vec<f64>) -> Result<Self, ReroError> {
        if values.len() != tau * j || values.is_empty() {
            return Err(ReroError::Shape { got: values.len(), expected: tau * j });
        }
        Ok(Self { tau, j, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.j + j]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Importance of every token: distance to the same spatial slot one pair
/// earlier. Pair 0 has no predecessor and reuses the pair-1 distance.
pub fn importance_map<T: Real>(grid: &TokenGrid<T>, metric: MetricKind) -> Result<ImportanceMap, ReroError> {
    if grid.tau < 2 {
        return Err(ReroError::TooFewPairs(grid.tau));
    }
    let mut values = vec![0.0; grid.tau * grid.j];
    for i in 1..grid.tau {
        for j in 0..grid.j {
            values[i * grid.j + j] = distance(grid.token(i, j), grid.token(i - 1, j), metric)?;
        }
    }
    let (first, rest) = values.split_at_mut(grid.j);
    first.copy_from_slice(&rest[..grid.j]);
    ImportanceMap::new(grid.tau, grid.j, values)
}

/// Nearest integer with halves rounded up. A tolerance of 1e-9 absorbs
/// representation error in products such as `0.35 * 10`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}
