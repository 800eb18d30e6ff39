//! Differentiable top-k selection by successive halving, plus the hard
//! top-k and iterative-softmax baselines it is measured against.
//!
//! A halving round sorts the candidates by score (optional), pairs the
//! `i`-th best with the `i`-th worst and replaces every pair by the convex
//! combination weighted by a peaked softmax of the two scores. The scores
//! themselves are combined the same way. `log2(n / k)` rounds leave `k`
//! vectors. Every step is recorded on a [`Tape`](crate::Tape), so gradients
//! reach both the embeddings and the scores.

mod baselines;
mod halving;

pub use baselines::{hard_topk, hard_topk_indices, hard_topk_values, iterative_soft_topk};
pub use halving::{
    successive_halving_topk, successive_halving_values, tournament_round, HalvingOutput, PairRecord,
    PooledBatch,
};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::matrix::Matrix;

/// Score assigned to padding rows, relative to the minimum real score.
pub const PAD_SCORE_OFFSET: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub k: usize,
    /// Sharpness of the pairwise softmax, at least 1.
    pub tau: f64,
    pub sort: bool,
    /// Reorder outputs by the original position of their dominant input.
    pub restore_order: bool,
}

impl PoolConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            tau: 1.0,
            sort: true,
            restore_order: true,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            return Err(contract("k must be at least 1"));
        }
        if self.k > n {
            return Err(contract(format!("cannot select k = {} of n = {n}", self.k)));
        }
        if !(self.tau >= 1.0) || !self.tau.is_finite() {
            return Err(contract(format!("tau must be finite and >= 1, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Softmax of `(tau a, tau b)`, shifted by `max(a, b)`.
pub fn peaked_softmax_pair(a: f64, b: f64, tau: f64) -> (f64, f64) {
    let m = a.max(b);
    let ea = (tau * (a - m)).exp();
    let eb = (tau * (b - m)).exp();
    let total = ea + eb;
    (ea / total, eb / total)
}

/// Stable descending order of `scores`: equal scores keep their relative
/// order. `perm[r]` is the original index of the row ranked `r`.
pub fn sort_permutation(scores: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..scores.len()).collect();
    perm.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    perm
}

/// Rows of `e` and entries of `v` in descending score order.
pub fn sort_by_score(e: &Matrix, v: &[f64]) -> Result<(Matrix, Vec<f64>, Vec<usize>)> {
    if e.rows() != v.len() {
        return Err(contract(format!("{} rows but {} scores", e.rows(), v.len())));
    }
    let perm = sort_permutation(v);
    let sorted = perm.iter().map(|&i| v[i]).collect();
    Ok((e.gather_rows(&perm), sorted, perm))
}
