//! The W-MSE loss and the compared/ablated losses. Each loss is a
//! scalar-valued graph construction over a batch of projected features
//! already present in a graph as node `v` (shape K x k, K = N*d, row
//! `i*d + j` = view j of origin i).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, NodeId};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::slicing::{self, make_sliceplan, SliceplanConfig, Sliceplan};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("zero vector cannot be L2-normalized")]
    ZeroVector,
    #[error("batch of {rows} rows is not divisible by d = {d}")]
    BadLayout { rows: usize, d: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("margin must be non-negative, got {0}")]
    BadMargin(f64),
    #[error(transparent)]
    Slicing(#[from] slicing::SlicingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Wmse,
    Contrastive,
    Triplet,
    BnMse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Positives per origin image.
    pub d: usize,
    /// L2-normalize before distance/similarity.
    pub normalize: bool,
    /// Whiten before the contrastive loss (ablation variant).
    pub whiten: bool,
    /// Contrastive temperature.
    pub tau: f64,
    /// Triplet margin.
    pub margin: f64,
    pub sliceplan: SliceplanConfig,
    /// Ridge added before factorization; negative requests the data-scaled
    /// default.
    pub ridge: f64,
}

impl LossConfig {
    pub fn wmse(d: usize, embedding_dim: usize) -> Self {
        Self {
            kind: LossKind::Wmse,
            d,
            normalize: true,
            whiten: true,
            tau: 0.5,
            margin: 0.0,
            sliceplan: SliceplanConfig::with_default_sub_size(d, embedding_dim),
            ridge: -1.0,
        }
    }

    pub fn contrastive(tau: f64, normalize: bool, whiten: bool, embedding_dim: usize) -> Self {
        Self {
            kind: LossKind::Contrastive,
            d: 2,
            normalize,
            whiten,
            tau,
            margin: 0.0,
            sliceplan: SliceplanConfig::with_default_sub_size(2, embedding_dim),
            ridge: -1.0,
        }
    }

    pub fn bn_mse(d: usize, embedding_dim: usize) -> Self {
        Self {
            kind: LossKind::BnMse,
            d,
            normalize: true,
            whiten: false,
            tau: 0.5,
            margin: 0.0,
            sliceplan: SliceplanConfig::with_default_sub_size(d, embedding_dim),
            ridge: -1.0,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.kind == LossKind::Contrastive && self.tau <= 0.0 {
            return Err(LossError::BadTemperature(self.tau));
        }
        if self.margin < 0.0 {
            return Err(LossError::BadMargin(self.margin));
        }
        Ok(())
    }
}

/// Distance between two embeddings: squared Euclidean distance, optionally
/// after L2 normalization (then equal to 2 - 2 cos, range [0, 4]).
pub fn pair_dist(z_i: &[f64], z_j: &[f64], normalize: bool) -> Result<f64, LossError> {
    if normalize {
        let ni: f64 = z_i.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nj: f64 = z_j.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ni == 0.0 || nj == 0.0 {
            return Err(LossError::ZeroVector);
        }
        Ok(z_i
            .iter()
            .zip(z_j)
            .map(|(&a, &b)| {
                let d = a / ni - b / nj;
                d * d
            })
            .sum())
    } else {
        Ok(z_i
            .iter()
            .zip(z_j)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum())
    }
}

/// All (left, right) row indices of positive pairs in the `i*d + j` layout.
pub fn positive_pairs(n: usize, d: usize) -> (Vec<usize>, Vec<usize>) {
    let mut left = Vec::with_capacity(n * d * (d - 1) / 2);
    let mut right = Vec::with_capacity(left.capacity());
    for origin in 0..n {
        for a in 0..d {
            for b in a + 1..d {
                left.push(origin * d + a);
                right.push(origin * d + b);
            }
        }
    }
    (left, right)
}

fn pair_mse<T: Scalar>(graph: &mut Graph<T>, z: NodeId, n: usize, d: usize, normalize: bool) -> NodeId {
    let z = if normalize { graph.l2_normalize_rows(z) } else { z };
    let (left, right) = positive_pairs(n, d);
    let a = graph.slice_rows(z, left);
    let b = graph.slice_rows(z, right);
    graph.mse_mean(a, b)
}

/// Build the W-MSE loss onto `graph`: whiten per slicing plan, normalize,
/// average the squared distance over all N*d*(d-1)/2 positive pairs, and
/// average the scalar over `iterations` independently drawn plans.
pub fn wmse_loss<T: Scalar, R: Rng>(
    graph: &mut Graph<T>,
    v: NodeId,
    n: usize,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<NodeId, LossError> {
    let d = cfg.d;
    let iterations = cfg.sliceplan.iterations.max(1);
    let mut total: Option<NodeId> = None;
    let weight = T::cast_from(1.0 / iterations as f64);
    for _ in 0..iterations {
        let plan = make_sliceplan(n, &cfg.sliceplan, rng)?;
        let z = graph.whitening(v, plan, cfg.ridge);
        let loss = pair_mse(graph, z, n, d, cfg.normalize);
        total = Some(match total {
            None => graph.scale_add(loss, loss, weight, T::zero()),
            Some(acc) => graph.scale_add(acc, loss, T::one(), weight),
        });
    }
    Ok(total.expect("at least one iteration"))
}

/// InfoNCE over all K ordered anchors (d = 2): for anchor i the positive is
/// its sibling view, negatives are every other sample in the batch.
/// Optionally whitens (full batch, single plan) and/or normalizes first.
pub fn contrastive_loss<T: Scalar, R: Rng>(
    graph: &mut Graph<T>,
    v: NodeId,
    n: usize,
    cfg: &LossConfig,
    _rng: &mut R,
) -> Result<NodeId, LossError> {
    cfg.validate()?;
    let k = n * 2;
    let mut z = v;
    if cfg.whiten {
        // Whole batch whitened with one set of statistics: degenerate plan.
        let plan = Sliceplan { d: 1, n: k, sub_size: k, assignment: vec![(0, 0); k] };
        z = graph.whitening(z, plan, cfg.ridge);
    }
    if cfg.normalize {
        z = graph.l2_normalize_rows(z);
    }
    let sims = graph.matmul_nt(z, z);
    // Mask self-similarity out of the log-sum-exp.
    let mut mask = Matrix::zeros(k, k);
    for i in 0..k {
        mask[(i, i)] = T::cast_from(-1e9);
    }
    let mask = graph.constant(mask);
    let logits = graph.scale_add(sims, mask, T::cast_from(1.0 / cfg.tau), T::one());
    let targets: Vec<usize> = (0..k).map(|i| if i % 2 == 0 { i + 1 } else { i - 1 }).collect();
    Ok(graph.softmax_cross_entropy(logits, targets))
}

/// Standard hinge triplet on similarities: max(z_i.z_k - z_i.z_j + m, 0).
pub fn triplet_loss(z_i: &[f64], z_j: &[f64], z_k: &[f64], margin: f64) -> f64 {
    let sim = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<f64>();
    (sim(z_i, z_k) - sim(z_i, z_j) + margin).max(0.0)
}

/// The collapse ablation: per-dimension standardization of the full batch
/// substituted for whitening, then the same normalized pair MSE.
pub fn bn_mse_loss<T: Scalar>(
    graph: &mut Graph<T>,
    v: NodeId,
    n: usize,
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    let z = graph.batch_standardize_plain(v);
    Ok(pair_mse(graph, z, n, cfg.d, cfg.normalize))
}

/// Dispatch on the configured loss kind. The rng drives slicing plans only.
pub fn build_loss<T: Scalar, R: Rng>(
    graph: &mut Graph<T>,
    v: NodeId,
    n: usize,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<NodeId, LossError> {
    cfg.validate()?;
    match cfg.kind {
        LossKind::Wmse => wmse_loss(graph, v, n, cfg, rng),
        LossKind::Contrastive => contrastive_loss(graph, v, n, cfg, rng),
        LossKind::BnMse => bn_mse_loss(graph, v, n, cfg),
        LossKind::Triplet => unreachable!("triplet is a per-sample scalar, not a batch graph loss"),
    }
}
