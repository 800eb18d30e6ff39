use crate::error::{contract, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

use super::sort_permutation;

/// Indices of the `k` largest scores in ascending index order. Ties go to
/// the lower index.
pub fn hard_topk_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > v.len() {
        return Err(contract(format!("cannot select k = {k} of n = {}", v.len())));
    }
    let mut idx = sort_permutation(v);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Exact top-k rows. The result does not depend on `v` through the tape, so
/// the score cotangent is identically zero.
pub fn hard_topk(tape: &mut Tape, e: Var, v: Var, k: usize) -> Result<(Var, Vec<usize>)> {
    if tape.shape(v) != (tape.shape(e).0, 1) {
        return Err(contract("hard_topk scores must be an n x 1 column"));
    }
    let idx = hard_topk_indices(tape.value(v).data(), k)?;
    let out = tape.gather_rows(e, &idx)?;
    Ok((out, idx))
}

pub fn hard_topk_values(e: &Matrix, v: &[f64], k: usize) -> Result<(Matrix, Vec<usize>)> {
    if e.rows() != v.len() {
        return Err(contract(format!("{} rows but {} scores", e.rows(), v.len())));
    }
    let idx = hard_topk_indices(v, k)?;
    Ok((e.gather_rows(&idx), idx))
}

/// Masked-softmax relaxation that extracts one soft row per iteration.
///
/// Each iteration takes `p = softmax(tau (v + mask))`, emits `p^T E` and
/// lowers the mask by `log(1 - p)`, clamped at `-1e9`. Rows come out in
/// extraction (score) order.
pub fn iterative_soft_topk(e: &Matrix, v: &[f64], k: usize, tau: f64) -> Result<Matrix> {
    let (n, d) = e.shape();
    if v.len() != n {
        return Err(contract(format!("{n} rows but {} scores", v.len())));
    }
    if k > n {
        return Err(contract(format!("cannot select k = {k} of n = {n}")));
    }
    let mut mask = vec![0.0; n];
    let mut logits = Matrix::zeros(1, n);
    let mut out = Matrix::zeros(k, d);
    for r in 0..k {
        for i in 0..n {
            logits.data_mut()[i] = tau * (v[i] + mask[i]);
        }
        let p = logits.row_softmax();
        let row = out.row_mut(r);
        for (i, &pi) in p.data().iter().enumerate() {
            if pi != 0.0 {
                for (o, x) in row.iter_mut().zip(e.row(i)) {
                    *o += pi * x;
                }
            }
            mask[i] += (1.0 - pi).ln().max(-1e9);
        }
    }
    Ok(out)
}
