//! Quality and timing sweep of the top-k operators on random matrices.

use std::fmt::Write as _;
use std::time::Instant;

use halvingpool::matrix::Matrix;
use halvingpool::metrics::nccs;
use halvingpool::topk::{hard_topk_values, iterative_soft_topk, successive_halving_values, PoolConfig};
use halvingpool::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::BenchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    HalvingSorted,
    HalvingUnsorted,
    Iterative,
    HardOracle,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::HalvingSorted,
        Variant::HalvingUnsorted,
        Variant::Iterative,
        Variant::HardOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::HalvingSorted => "halving-sorted",
            Variant::HalvingUnsorted => "halving-unsorted",
            Variant::Iterative => "iterative",
            Variant::HardOracle => "hard-oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub k: usize,
    pub variant: Variant,
    pub seed: usize,
    pub nccs: f64,
    pub elapsed_seconds: f64,
    pub pair_ops: usize,
}

pub const CSV_HEADER: &str = "n,k,variant,seed,nccs,elapsed_seconds,pair_ops";

/// `E` uniform on [-1, 1] and scores uniform on [0, 1], fixed by
/// `(base_seed, n, k, seed)`.
pub fn instance(base_seed: u64, n: usize, k: usize, seed: usize, dim: usize) -> (Matrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(seed as u64));
    rng.set_stream(((n as u64) << 32) ^ k as u64);
    let e = Matrix::uniform(n, dim, -1.0, 1.0, &mut rng);
    let v = (0..n).map(|_| rng.gen::<f64>()).collect();
    (e, v)
}

/// Runs one operator; returns its output and the number of pairwise (or
/// per-row) softmax evaluations it performed.
pub fn run_variant(variant: Variant, e: &Matrix, v: &[f64], k: usize, tau: f64) -> Result<(Matrix, usize)> {
    match variant {
        Variant::HalvingSorted | Variant::HalvingUnsorted => {
            let cfg = PoolConfig {
                tau,
                sort: variant == Variant::HalvingSorted,
                ..PoolConfig::new(k)
            };
            let out = successive_halving_values(e, v, &cfg)?;
            Ok((out.pooled, out.pair_evaluations))
        }
        Variant::Iterative => Ok((iterative_soft_topk(e, v, k, tau)?, k * e.rows())),
        Variant::HardOracle => Ok((hard_topk_values(e, v, k)?.0, 0)),
    }
}

/// Median wall time of `reps` calls after `warmup` untimed ones.
pub fn median_seconds(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    })
}

/// Every (n, k, variant, seed) cell, sorted in that order.
pub fn run(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in &cfg.ns {
        for &k in &cfg.ks {
            for seed in 0..cfg.seeds {
                let (e, v) = instance(cfg.seed, n, k, seed, cfg.dim);
                let (reference, _) = run_variant(Variant::HardOracle, &e, &v, k, cfg.tau)?;
                for variant in Variant::ALL {
                    let (out, pair_ops) = run_variant(variant, &e, &v, k, cfg.tau)?;
                    let elapsed_seconds = median_seconds(cfg.reps, cfg.warmup, || {
                        run_variant(variant, &e, &v, k, cfg.tau).map(|_| ())
                    })?;
                    rows.push(BenchRow {
                        n,
                        k,
                        variant,
                        seed,
                        nccs: nccs(&out, &reference)?,
                        elapsed_seconds,
                        pair_ops,
                    });
                }
            }
        }
    }
    rows.sort_by_key(|r| (r.n, r.k, r.variant, r.seed));
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.n,
            r.k,
            r.variant.name(),
            r.seed,
            r.nccs,
            r.elapsed_seconds,
            r.pair_ops
        );
    }
    out
}
