use crate::error::{contract, Error, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

use super::{sort_permutation, PoolConfig, PAD_SCORE_OFFSET};

/// One pairing of a tournament round, in the positions of that round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairRecord {
    pub upper: usize,
    pub lower: usize,
    pub upper_weight: f64,
    pub lower_weight: f64,
}

/// Result of [`successive_halving_topk`], still attached to the tape.
#[derive(Clone, Debug)]
pub struct PooledBatch {
    /// `k x d` pooled vectors.
    pub pooled: Var,
    /// `k x 1` pooled scores.
    pub scores: Var,
    /// Zero-based original index of each output's dominant input.
    pub provenance: Vec<usize>,
    /// Number of pairwise softmaxes evaluated.
    pub pair_evaluations: usize,
    /// Smallest gap between neighbours in any sorted round. Gradients are
    /// only defined while perturbations stay below it.
    pub min_score_gap: f64,
}

/// Value-only counterpart of [`PooledBatch`].
#[derive(Clone, Debug)]
pub struct HalvingOutput {
    pub pooled: Matrix,
    pub scores: Vec<f64>,
    pub provenance: Vec<usize>,
    pub pair_evaluations: usize,
    pub min_score_gap: f64,
}

#[derive(Clone, Copy)]
struct Dominant {
    leaf: usize,
    weight: f64,
}

/// `order`, when given, is applied to the rows before pairing; folding it
/// into the gathers saves a full copy of the embeddings per round.
fn round_on_tape(tape: &mut Tape, e: Var, v: Var, tau: f64, order: Option<&[usize]>) -> Result<(Var, Var, Vec<PairRecord>)> {
    let len = tape.shape(e).0;
    if len % 2 != 0 {
        return Err(contract(format!("tournament round needs an even count, got {len}")));
    }
    let m = len / 2;
    let v = match order {
        Some(perm) => tape.gather_rows(v, perm)?,
        None => v,
    };
    let weights = tape.pair_softmax(v, tau)?;
    let w_upper = tape.slice_cols(weights, 0, 1)?;
    let w_lower = tape.slice_cols(weights, 1, 1)?;

    let (e_upper, e_lower) = match order {
        Some(perm) => {
            let lower: Vec<usize> = perm[m..].iter().rev().copied().collect();
            (tape.gather_rows(e, &perm[..m])?, tape.gather_rows(e, &lower)?)
        }
        None => {
            let reversed: Vec<usize> = (m..len).rev().collect();
            (tape.slice_rows(e, 0, m)?, tape.gather_rows(e, &reversed)?)
        }
    };
    let a = tape.mul_col(e_upper, w_upper)?;
    let b = tape.mul_col(e_lower, w_lower)?;
    let e_next = tape.add(a, b)?;

    let reversed: Vec<usize> = (m..len).rev().collect();
    let v_upper = tape.slice_rows(v, 0, m)?;
    let v_lower = tape.gather_rows(v, &reversed)?;
    let a = tape.mul(v_upper, w_upper)?;
    let b = tape.mul(v_lower, w_lower)?;
    let v_next = tape.add(a, b)?;

    let w = tape.value(weights);
    let records = (0..m)
        .map(|i| PairRecord {
            upper: i,
            lower: len - 1 - i,
            upper_weight: w[(i, 0)],
            lower_weight: w[(i, 1)],
        })
        .collect();
    Ok((e_next, v_next, records))
}

/// One tournament round on plain values: pairs `(i, 2m - 1 - i)` of the
/// current order are merged into `m` convex combinations.
pub fn tournament_round(e: &Matrix, v: &[f64], tau: f64) -> Result<(Matrix, Vec<f64>, Vec<PairRecord>)> {
    if e.rows() != v.len() {
        return Err(contract(format!("{} rows but {} scores", e.rows(), v.len())));
    }
    let mut tape = Tape::new();
    let ev = tape.leaf(e.clone());
    let vv = tape.leaf(Matrix::column(v));
    let (en, vn, records) = round_on_tape(&mut tape, ev, vv, tau, None)?;
    Ok((tape.value(en).clone(), tape.value(vn).data().to_vec(), records))
}

/// Successive halving top-k of the rows of `e` (`n x d`) scored by `v`
/// (`n x 1`).
///
/// Inputs whose sizes are not powers of two are padded with zero rows
/// scored far below the minimum; `k` is rounded up to a power of two and the
/// surplus outputs with the lowest pooled scores are dropped.
pub fn successive_halving_topk(tape: &mut Tape, e: Var, v: Var, cfg: &PoolConfig) -> Result<PooledBatch> {
    let (n, d) = tape.shape(e);
    if tape.shape(v) != (n, 1) {
        return Err(Error::Shape {
            op: "successive_halving_topk",
            left: (n, d),
            right: tape.shape(v),
        });
    }
    cfg.validate(n)?;
    if !tape.value(v).is_finite() {
        return Err(contract("scores must be finite"));
    }

    let k_pad = cfg.k.next_power_of_two();
    let n_pad = n.next_power_of_two().max(k_pad);
    let (mut cur_e, mut cur_v) = (e, v);
    if n_pad > n {
        let min = tape.value(v).data().iter().copied().fold(f64::INFINITY, f64::min);
        let pad_e = tape.leaf(Matrix::zeros(n_pad - n, d));
        let pad_v = tape.leaf(Matrix::filled(n_pad - n, 1, min - PAD_SCORE_OFFSET));
        cur_e = tape.concat_rows(&[e, pad_e])?;
        cur_v = tape.concat_rows(&[v, pad_v])?;
    }

    let mut dominant: Vec<Dominant> = (0..n_pad).map(|leaf| Dominant { leaf, weight: 1.0 }).collect();
    let mut pair_evaluations = 0;
    let mut min_score_gap = f64::INFINITY;
    let mut len = n_pad;
    while len > k_pad {
        let mut order = None;
        if cfg.sort {
            let scores = tape.value(cur_v).data();
            let perm = sort_permutation(scores);
            for w in perm.windows(2) {
                // padding rows tie among themselves but move together
                if dominant[w[0]].leaf < n || dominant[w[1]].leaf < n {
                    min_score_gap = min_score_gap.min(scores[w[0]] - scores[w[1]]);
                }
            }
            dominant = perm.iter().map(|&i| dominant[i]).collect();
            order = Some(perm);
        }
        let (next_e, next_v, records) = round_on_tape(tape, cur_e, cur_v, cfg.tau, order.as_deref())?;
        dominant = records
            .iter()
            .map(|r| {
                let up = dominant[r.upper];
                let low = dominant[r.lower];
                let (wu, wl) = (r.upper_weight * up.weight, r.lower_weight * low.weight);
                if wu >= wl {
                    Dominant { leaf: up.leaf, weight: wu }
                } else {
                    Dominant { leaf: low.leaf, weight: wl }
                }
            })
            .collect();
        pair_evaluations += records.len();
        cur_e = next_e;
        cur_v = next_v;
        len /= 2;
    }

    let mut keep: Vec<usize> = (0..len).collect();
    if len > cfg.k {
        keep = sort_permutation(tape.value(cur_v).data());
        keep.truncate(cfg.k);
        keep.sort_unstable();
    }
    if cfg.restore_order {
        keep.sort_by_key(|&i| dominant[i].leaf);
    }
    if keep.len() != len || keep.iter().enumerate().any(|(pos, &i)| pos != i) {
        cur_e = tape.gather_rows(cur_e, &keep)?;
        cur_v = tape.gather_rows(cur_v, &keep)?;
    }
    Ok(PooledBatch {
        pooled: cur_e,
        scores: cur_v,
        provenance: keep.iter().map(|&i| dominant[i].leaf).collect(),
        pair_evaluations,
        min_score_gap,
    })
}

/// [`successive_halving_topk`] on plain values with a private tape.
pub fn successive_halving_values(e: &Matrix, v: &[f64], cfg: &PoolConfig) -> Result<HalvingOutput> {
    if e.rows() != v.len() {
        return Err(contract(format!("{} rows but {} scores", e.rows(), v.len())));
    }
    let mut tape = Tape::new();
    let ev = tape.leaf(e.clone());
    let vv = tape.leaf(Matrix::column(v));
    let out = successive_halving_topk(&mut tape, ev, vv, cfg)?;
    Ok(HalvingOutput {
        pooled: tape.value(out.pooled).clone(),
        scores: tape.value(out.scores).data().to_vec(),
        provenance: out.provenance,
        pair_evaluations: out.pair_evaluations,
        min_score_gap: out.min_score_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::topk::peaked_softmax_pair;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unordered(k: usize) -> PoolConfig {
        PoolConfig {
            restore_order: false,
            ..PoolConfig::new(k)
        }
    }

    /// Straight-line recursive evaluation, independent of the tape.
    fn oracle(e: Vec<Vec<f64>>, v: Vec<f64>, k: usize, tau: f64, sort: bool) -> Vec<Vec<f64>> {
        if e.len() == k {
            return e;
        }
        let (e, v) = if sort {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
            (
                idx.iter().map(|&i| e[i].clone()).collect::<Vec<_>>(),
                idx.iter().map(|&i| v[i]).collect::<Vec<_>>(),
            )
        } else {
            (e, v)
        };
        let len = v.len();
        let mut next_e = Vec::new();
        let mut next_v = Vec::new();
        for i in 0..len / 2 {
            let j = len - 1 - i;
            let mx = if v[i] > v[j] { v[i] } else { v[j] };
            let ea = (tau * (v[i] - mx)).exp();
            let eb = (tau * (v[j] - mx)).exp();
            let (wa, wb) = (ea / (ea + eb), eb / (ea + eb));
            next_e.push(e[i].iter().zip(&e[j]).map(|(x, y)| x * wa + y * wb).collect());
            next_v.push(v[i] * wa + v[j] * wb);
        }
        oracle(next_e, next_v, k, tau, sort)
    }

    fn random_instance(seed: u64, n: usize, d: usize) -> (Matrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Matrix::uniform(n, d, -1.0, 1.0, &mut rng);
        let v = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        (e, v)
    }

    fn rows(m: &Matrix) -> Vec<Vec<f64>> {
        (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
    }

    #[test]
    fn round_example() {
        let e = Matrix::from_rows(&[[1.0], [2.0], [3.0], [4.0]]).unwrap();
        let (_, v, rec) = tournament_round(&e, &[4.0, 3.0, 2.0, 1.0], 1.0).unwrap();
        assert_eq!(v.len(), 2);
        assert!((rec[0].upper_weight - 0.952_574_126_822_433_1).abs() < 1e-12);
        assert!((v[0] - 3.857_722_380_467_299).abs() < 1e-12);
        assert_eq!((rec[0].upper, rec[0].lower), (0, 3));
    }

    #[test]
    fn equal_scores_average_pairs() {
        let e = Matrix::from_rows(&[[1.0, 0.0], [2.0, 2.0], [3.0, 4.0], [5.0, 8.0]]).unwrap();
        let (out, _, _) = tournament_round(&e, &[0.5; 4], 2.0).unwrap();
        assert_eq!(out.row(0), &[3.0, 4.0]);
        assert_eq!(out.row(1), &[2.5, 3.0]);
    }

    #[test]
    fn odd_round_rejected() {
        let e = Matrix::zeros(3, 2);
        assert!(matches!(tournament_round(&e, &[0.0; 3], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn two_to_one_examples() {
        let e = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let out = successive_halving_values(&e, &[0.0, 0.0], &PoolConfig::new(1)).unwrap();
        assert_eq!(out.pooled.row(0), &[0.5, 0.5]);
        let out = successive_halving_values(&e, &[3f64.ln(), 0.0], &PoolConfig::new(1)).unwrap();
        assert!((out.pooled[(0, 0)] - 0.75).abs() < 1e-15);
        assert!((out.pooled[(0, 1)] - 0.25).abs() < 1e-15);
        assert_eq!(out.provenance, vec![0]);
    }

    #[test]
    fn saturated_score_wins() {
        let (e, _) = random_instance(3, 4, 5);
        let out = successive_halving_values(&e, &[100.0, 0.0, 0.0, 0.0], &PoolConfig::new(1)).unwrap();
        assert!(out.pooled.max_abs_diff(&e.slice_rows(0, 1)) < 1e-8);
    }

    #[test]
    fn matches_oracle_seed_7() {
        let (e, v) = random_instance(7, 8, 4);
        let out = successive_halving_values(&e, &v, &unordered(2)).unwrap();
        assert_eq!(rows(&out.pooled), oracle(rows(&e), v, 2, 1.0, true));
    }

    #[test]
    fn unsorted_matches_oracle() {
        let (e, v) = random_instance(8, 16, 3);
        let cfg = PoolConfig {
            sort: false,
            ..unordered(4)
        };
        let out = successive_halving_values(&e, &v, &cfg).unwrap();
        assert_eq!(rows(&out.pooled), oracle(rows(&e), v, 4, 1.0, false));
    }

    #[test]
    fn k_larger_than_n_rejected() {
        let (e, v) = random_instance(1, 4, 2);
        assert!(matches!(
            successive_halving_values(&e, &v, &PoolConfig::new(5)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn padding_for_non_powers_of_two() {
        let (e, v) = random_instance(5, 11, 3);
        let out = successive_halving_values(&e, &v, &PoolConfig::new(3)).unwrap();
        assert_eq!(out.pooled.rows(), 3);
        assert_eq!(out.provenance.len(), 3);
        assert!(out.provenance.iter().all(|&p| p < 11));
        assert!(out.provenance.windows(2).all(|w| w[0] < w[1]));
        assert!(out.pooled.is_finite());
        // 16 -> 4 after padding
        assert_eq!(out.pair_evaluations, 12);

        let (e, v) = random_instance(6, 5, 2);
        let out = successive_halving_values(&e, &v, &PoolConfig::new(5)).unwrap();
        assert_eq!(out.provenance, vec![0, 1, 2, 3, 4]);
        assert_eq!(out.pooled, e);
    }

    #[test]
    fn hard_selection_of_padded_k_equal_n() {
        let e = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let out = successive_halving_values(&e, &[0.1, 0.9, 0.5], &PoolConfig::new(3)).unwrap();
        assert_eq!(out.pooled, e);
        assert_eq!(out.pair_evaluations, 0);
    }

    #[test]
    fn gradients_reach_embeddings_and_scores() {
        let mut checked = 0;
        for seed in 0..10 {
            let (e, v) = random_instance(100 + seed, 16, 3);
            let out = successive_halving_values(&e, &v, &PoolConfig::new(4)).unwrap();
            if out.min_score_gap < 1e-4 {
                continue;
            }
            let proj = Matrix::uniform(4, 3, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let report = check_gradients(&[e, Matrix::column(&v)], 1e-5, 1e-6, |t, x| {
                let b = successive_halving_topk(t, x[0], x[1], &PoolConfig::new(4))?;
                let p = t.leaf(proj.clone());
                let y = t.mul(b.pooled, p)?;
                Ok(t.sum(y))
            })
            .unwrap();
            assert!(report.pass, "seed {seed}: {report:?}");
            checked += 1;
        }
        assert!(checked >= 8);
    }

    #[test]
    fn monotone_in_upper_score() {
        let v = [0.9, 0.6, 0.4, 0.1];
        let w = |x: f64| peaked_softmax_pair(x, v[3], 1.0).0;
        let e = Matrix::zeros(4, 1);
        let (_, _, rec) = tournament_round(&e, &v, 1.0).unwrap();
        assert_eq!(rec[0].upper_weight, w(0.9));
        assert!(w(0.95) > w(0.9));
    }

    proptest! {
        #[test]
        fn structural_invariants(
            log_n in 1u32..7,
            log_ratio in 0u32..7,
            seed in any::<u64>(),
            tau in 1.0f64..8.0,
            sort in any::<bool>(),
        ) {
            let n = 1usize << log_n;
            let k = (n >> log_ratio.min(log_n)).max(1);
            let (e, v) = random_instance(seed, n, 3);
            let cfg = PoolConfig { k, tau, sort, restore_order: true };
            let out = successive_halving_values(&e, &v, &cfg).unwrap();
            prop_assert_eq!(out.pair_evaluations, n - k);
            prop_assert!(out.pair_evaluations <= 2 * n);
            prop_assert_eq!(out.pooled.shape(), (k, 3));
            prop_assert_eq!(out.scores.len(), k);
            prop_assert!(out.provenance.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(out.provenance.iter().all(|&p| p < n));
            prop_assert!(out.pooled.is_finite());
        }

        #[test]
        fn separated_scores_saturate_to_hard(seed in any::<u64>(), log_n in 1u32..9, log_ratio in 0u32..5) {
            use rand::seq::SliceRandom;
            let n = 1usize << log_n;
            let k = (n >> log_ratio.min(log_n)).max(1);
            let (e, _) = random_instance(seed, n, 4);
            // distinct ranks one apart; at tau 40 every pair weight is within 1e-17 of 0 or 1
            let mut v: Vec<f64> = (0..n).map(|i| i as f64).collect();
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let out = successive_halving_values(&e, &v, &PoolConfig { k, tau: 40.0, sort: true, restore_order: true }).unwrap();
            let (hard, _) = crate::topk::hard_topk_values(&e, &v, k).unwrap();
            prop_assert!(crate::metrics::nccs(&out.pooled, &hard).unwrap() > 1.0 - 1e-12);
        }

        #[test]
        fn sorted_pairs_favour_the_stronger(seed in any::<u64>(), log_n in 1u32..8, tau in 1.0f64..5.0) {
            let n = 1usize << log_n;
            let (e, v) = random_instance(seed, n, 2);
            let (se, sv, _) = crate::topk::sort_by_score(&e, &v).unwrap();
            let (_, _, records) = tournament_round(&se, &sv, tau).unwrap();
            for r in records {
                prop_assert!((r.upper_weight + r.lower_weight - 1.0).abs() < 1e-15);
                prop_assert!(r.upper_weight >= 0.5);
                prop_assert!(r.upper_weight > 0.0 && r.upper_weight < 1.0);
                prop_assert!(r.lower_weight > 0.0 && r.lower_weight < 1.0);
            }
        }
    }
}
