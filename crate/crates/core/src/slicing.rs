//! Batch slicing: partition the batch by positive index, draw one shared
//! permutation of the origins, split each partition into sub-batches and
//! whiten every sub-batch with its own statistics.
//!
//! Batch layout convention used throughout: position `i*d + j` is view `j`
//! of origin `i`.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::linalg::{self, Matrix, WhiteningStats};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum SlicingError {
    #[error("origin count {n} not divisible by sub-batch size {sub_size}")]
    Indivisible { n: usize, sub_size: usize },
    #[error("sub-batch size {sub_size} below embedding_dim + 1 = {min}")]
    SubBatchTooSmall { sub_size: usize, min: usize },
    #[error("positives per origin must be at least 2, got {d}")]
    TooFewPositives { d: usize },
    #[error("plan covers {expected} rows but batch has {actual}")]
    PlanMismatch { expected: usize, actual: usize },
    #[error("whitening failed in sub-batch (partition {partition}, slot {slot}): {source}")]
    Whitening {
        partition: usize,
        slot: usize,
        source: linalg::LinalgError,
    },
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct SliceplanConfig {
    /// Positives extracted per origin image.
    pub d: usize,
    /// Samples per sub-batch (number of origins each whitening sees).
    pub sub_size: usize,
    /// How many independent plans to average over (w_iter).
    pub iterations: usize,
}

impl SliceplanConfig {
    /// Default heuristic: sub-batch size twice the embedding dimension.
    pub fn with_default_sub_size(d: usize, embedding_dim: usize) -> Self {
        Self { d, sub_size: 2 * embedding_dim, iterations: 1 }
    }

    pub fn validate(&self, embedding_dim: usize) -> Result<(), SlicingError> {
        if self.d < 2 {
            return Err(SlicingError::TooFewPositives { d: self.d });
        }
        if self.sub_size < embedding_dim + 1 {
            return Err(SlicingError::SubBatchTooSmall {
                sub_size: self.sub_size,
                min: embedding_dim + 1,
            });
        }
        Ok(())
    }
}

/// For each of the K = N*d batch positions, which partition and sub-batch
/// slot the position whitens with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sliceplan {
    pub d: usize,
    pub n: usize,
    pub sub_size: usize,
    /// (partition, slot) per batch position.
    pub assignment: Vec<(usize, usize)>,
}

impl Sliceplan {
    pub fn rows(&self) -> usize {
        self.assignment.len()
    }

    pub fn slots(&self) -> usize {
        self.n / self.sub_size
    }

    /// Row indices of one sub-batch, in deterministic order.
    pub fn sub_batch_rows(&self, partition: usize, slot: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &(p, s))| p == partition && s == slot)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Draw a slicing plan: one shared permutation of the origin order, reused
/// for every partition, then consecutive chunks of `sub_size` origins.
pub fn make_sliceplan<R: Rng>(
    n: usize,
    cfg: &SliceplanConfig,
    rng: &mut R,
) -> Result<Sliceplan, SlicingError> {
    if cfg.d < 2 {
        return Err(SlicingError::TooFewPositives { d: cfg.d });
    }
    if n % cfg.sub_size != 0 {
        return Err(SlicingError::Indivisible { n, sub_size: cfg.sub_size });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut assignment = vec![(0usize, 0usize); n * cfg.d];
    for (rank, &origin) in order.iter().enumerate() {
        let slot = rank / cfg.sub_size;
        for view in 0..cfg.d {
            assignment[origin * cfg.d + view] = (view, slot);
        }
    }
    Ok(Sliceplan { d: cfg.d, n, sub_size: cfg.sub_size, assignment })
}

/// Whiten each sub-batch with its own statistics; rows come back at their
/// original positions. Also returns the per-sub-batch stats and row sets,
/// which the backward pass needs.
pub fn whiten_sliced_with_stats<T: Scalar>(
    v: &Matrix<T>,
    plan: &Sliceplan,
    ridge: f64,
) -> Result<(Matrix<T>, Vec<(Vec<usize>, WhiteningStats)>), SlicingError> {
    if plan.rows() != v.rows() {
        return Err(SlicingError::PlanMismatch { expected: plan.rows(), actual: v.rows() });
    }
    let k = v.cols();
    let mut z = Matrix::zeros(v.rows(), k);
    let mut groups = Vec::with_capacity(plan.d * plan.slots());
    for partition in 0..plan.d {
        for slot in 0..plan.slots() {
            let rows = plan.sub_batch_rows(partition, slot);
            let sub = Matrix::from_rows(&rows.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>());
            let (sub_z, stats) = linalg::whiten_batch(&sub, ridge)
                .map_err(|source| SlicingError::Whitening { partition, slot, source })?;
            for (local, &global) in rows.iter().enumerate() {
                z.row_mut(global).copy_from_slice(sub_z.row(local));
            }
            groups.push((rows, stats));
        }
    }
    Ok((z, groups))
}

pub fn whiten_sliced<T: Scalar>(
    v: &Matrix<T>,
    plan: &Sliceplan,
    ridge: f64,
) -> Result<Matrix<T>, SlicingError> {
    whiten_sliced_with_stats(v, plan, ridge).map(|(z, _)| z)
}
