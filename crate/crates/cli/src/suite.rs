//! Gradient-check suite: every differentiable tape operation, the
//! successive halving pooler and a small end-to-end model, each compared
//! against central finite differences at random points.

use std::fmt::Write as _;

use halvingpool::attention::{scaled_dot_attention, AttentionConfig};
use halvingpool::gradcheck::{finite_diff_grad, max_relative_error};
use halvingpool::matrix::Matrix;
use halvingpool::model::{Model, ModelConfig, PoolSchedule, PoolerKind, EOS, SPECIAL_TOKENS};
use halvingpool::params::Bound;
use halvingpool::scorers::{compute_scores, ScorerSpec};
use halvingpool::topk::{successive_halving_topk, PoolConfig};
use halvingpool::{Result, Tape, Var, WindowMode};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite-difference step.
pub const EPSILON: f64 = 1e-5;

/// Seeds whose tournament sorts have neighbours closer than this are
/// skipped: a perturbation of `EPSILON` could reorder them.
pub const MIN_TIE_GAP: f64 = 1e-3;

/// Model points with a ReLU input or max-window gap below this are skipped
/// for the same reason.
pub const MIN_KINK_MARGIN: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Op,
    Model,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub level: Level,
    pub seeds_checked: usize,
    pub seeds_skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CaseReport {
    pub fn pass(&self) -> bool {
        self.seeds_checked > 0 && self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seeds: usize,
    pub op_tolerance: f64,
    pub model_tolerance: f64,
    pub seed: u64,
    /// Name of a case whose analytic gradient is deliberately corrupted.
    pub inject_fault: Option<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 50,
            op_tolerance: 1e-6,
            model_tolerance: 1e-5,
            seed: 0,
            inject_fault: None,
        }
    }
}

/// A random point: the checked inputs plus anything the builder needs.
struct Point {
    inputs: Vec<Matrix>,
    /// Whether finite differences are trustworthy here.
    smooth: bool,
}

type Build<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>;

struct Case<'a> {
    name: &'static str,
    level: Level,
    sample: Box<dyn Fn(&mut ChaCha8Rng) -> Point + 'a>,
    build: Box<dyn Fn(&Point) -> Build<'a> + 'a>,
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::uniform(r, c, -1.0, 1.0, rng)
}

/// Entries bounded away from zero, for kinked operations.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    let data = (0..r * c)
        .map(|_| {
            let x = rng.gen_range(0.05..1.0);
            if rng.gen() {
                x
            } else {
                -x
            }
        })
        .collect();
    Matrix::new(r, c, data).expect("shape")
}

/// Distinct entries at least 0.1 apart, in random order.
fn separated(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    let mut ranks: Vec<usize> = (0..r * c).collect();
    ranks.shuffle(rng);
    let data = ranks.iter().map(|&i| 0.1 * i as f64 + rng.gen_range(0.0..0.05)).collect();
    Matrix::new(r, c, data).expect("shape")
}

/// Scalar `sum(out * w)` with fixed random weights so that no output entry
/// cancels out of the check.
fn project(tape: &mut Tape, out: Var, weights: &Matrix) -> Result<Var> {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn smooth(inputs: Vec<Matrix>) -> Point {
    Point { inputs, smooth: true }
}

fn op<'a>(
    name: &'static str,
    sample: impl Fn(&mut ChaCha8Rng) -> Vec<Matrix> + 'a,
    out_shape: (usize, usize),
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Clone + 'a,
) -> Case<'a> {
    Case {
        name,
        level: Level::Op,
        sample: Box::new(move |rng| {
            let mut inputs = sample(rng);
            // the projection weights ride along as the last, unchecked input
            inputs.push(uniform(rng, out_shape.0, out_shape.1));
            smooth(inputs)
        }),
        build: Box::new(move |p| {
            let w = p.inputs.last().expect("weights").clone();
            let f = f.clone();
            Box::new(move |t, v| {
                let out = f(t, v)?;
                project(t, out, &w)
            })
        }),
    }
}

fn halving_case<'a>(name: &'static str, n: usize, k: usize, sort: bool) -> Case<'a> {
    let cfg = PoolConfig {
        sort,
        ..PoolConfig::new(k)
    };
    Case {
        name,
        level: Level::Op,
        sample: Box::new(move |rng| {
            let e = uniform(rng, n, 4);
            let v = Matrix::uniform(n, 1, 0.0, 1.0, rng);
            let mut tape = Tape::new();
            let (ev, vv) = (tape.leaf(e.clone()), tape.leaf(v.clone()));
            let out = successive_halving_topk(&mut tape, ev, vv, &cfg).expect("valid pool");
            let mut scores = tape.value(out.scores).data().to_vec();
            scores.sort_by(f64::total_cmp);
            let final_gap = scores.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
            let ok = out.min_score_gap >= MIN_TIE_GAP && (k.is_power_of_two() || final_gap >= MIN_TIE_GAP);
            Point {
                inputs: vec![e, v, uniform(rng, k, 4), uniform(rng, k, 1)],
                smooth: ok,
            }
        }),
        build: Box::new(move |p| {
            let (we, wv) = (p.inputs[2].clone(), p.inputs[3].clone());
            Box::new(move |t, v| {
                let out = successive_halving_topk(t, v[0], v[1], &cfg)?;
                let a = project(t, out.pooled, &we)?;
                let b = project(t, out.scores, &wv)?;
                t.add(a, b)
            })
        }),
    }
}

fn micro_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        max_input_len: 16,
        max_target_len: 5,
        encoder_layers: 2,
        decoder_layers: 1,
        attention: AttentionConfig {
            d_model: 8,
            heads: 2,
            ffn_dim: 16,
            block_size: 8,
            dropout: 0.0,
        },
        schedule: PoolSchedule::new(vec![8, 4]).expect("valid schedule"),
        scorer: ScorerSpec::Linear,
        pooler: PoolerKind::SuccessiveHalving { tau: 1.0, sort: true },
        zero_init_head: false,
        init_seed: seed,
    }
}

fn model_case<'a>() -> Case<'a> {
    Case {
        name: "micro_model",
        level: Level::Model,
        sample: Box::new(|rng| {
            let mut model = Model::new(micro_config(rng.gen())).expect("valid micro model");
            for m in model.params_mut().values_mut() {
                let (r, c) = m.shape();
                *m = m.add(&Matrix::uniform(r, c, -0.2, 0.2, rng)).expect("shape");
            }
            let tokens: Vec<usize> = (0..16).map(|_| rng.gen_range(SPECIAL_TOKENS..11)).collect();
            let mut targets: Vec<usize> = (0..3).map(|_| rng.gen_range(SPECIAL_TOKENS..11)).collect();
            targets.push(EOS);
            let mut tape = Tape::new();
            let b = model.params().bind(&mut tape);
            let enc = model.encode(&mut tape, &b, &tokens, 0).expect("encode");
            model.decode_train(&mut tape, &b, &enc, &targets).expect("decode");
            let ok = enc.traces.iter().all(|t| t.min_gap >= MIN_TIE_GAP) && tape.kink_margin() >= MIN_KINK_MARGIN;
            // tokens and targets travel as an unchecked last row of the point
            let meta: Vec<f64> = tokens.iter().chain(&targets).map(|&t| t as f64).collect();
            let mut inputs = model.params().values().to_vec();
            inputs.push(Matrix::new(1, meta.len(), meta).expect("shape"));
            Point { inputs, smooth: ok }
        }),
        build: Box::new(|p| {
            let count = p.inputs.len() - 1;
            let meta: Vec<usize> = p.inputs[count].data().iter().map(|&x| x as usize).collect();
            let (tokens, targets) = (meta[..16].to_vec(), meta[16..].to_vec());
            // the seed only shapes initial values, which come from the point
            let config = micro_config(0);
            let model = Model::from_parts(config, p.inputs[..count].to_vec()).expect("valid parts");
            Box::new(move |t, v| {
                let b = Bound::new(v[..count].to_vec());
                let enc = model.encode(t, &b, &tokens, 0)?;
                Ok(model.decode_train(t, &b, &enc, &targets)?.loss)
            })
        }),
    }
}

/// Number of leading inputs of a point that are checked.
fn checked_inputs(case: &Case, p: &Point) -> usize {
    if case.name.starts_with("halving") {
        2
    } else {
        p.inputs.len() - 1
    }
}

fn cases<'a>() -> Vec<Case<'a>> {
    let targets: Vec<Option<usize>> = vec![Some(2), None, Some(0), Some(4)];
    vec![
        op("matmul", |r| vec![uniform(r, 3, 4), uniform(r, 4, 2)], (3, 2), |t, v| t.matmul(v[0], v[1])),
        op("transpose", |r| vec![uniform(r, 3, 4)], (4, 3), |t, v| Ok(t.transpose(v[0]))),
        op("add", |r| vec![uniform(r, 3, 4), uniform(r, 3, 4)], (3, 4), |t, v| t.add(v[0], v[1])),
        op("sub", |r| vec![uniform(r, 3, 4), uniform(r, 3, 4)], (3, 4), |t, v| t.sub(v[0], v[1])),
        op("mul", |r| vec![uniform(r, 3, 4), uniform(r, 3, 4)], (3, 4), |t, v| t.mul(v[0], v[1])),
        op("add_row", |r| vec![uniform(r, 3, 4), uniform(r, 1, 4)], (3, 4), |t, v| t.add_row(v[0], v[1])),
        op("mul_col", |r| vec![uniform(r, 3, 4), uniform(r, 3, 1)], (3, 4), |t, v| t.mul_col(v[0], v[1])),
        op("tanh", |r| vec![uniform(r, 3, 4)], (3, 4), |t, v| Ok(t.tanh(v[0]))),
        op("relu", |r| vec![away_from_zero(r, 3, 4)], (3, 4), |t, v| Ok(t.relu(v[0]))),
        op("scale", |r| vec![uniform(r, 3, 4)], (3, 4), |t, v| Ok(t.scale(v[0], -1.7))),
        op("add_const", |r| vec![uniform(r, 3, 4)], (3, 4), |t, v| Ok(t.add_const(v[0], 0.3))),
        op("row_softmax", |r| vec![uniform(r, 3, 5)], (3, 5), |t, v| Ok(t.row_softmax(v[0]))),
        op("sum", |r| vec![uniform(r, 3, 4)], (1, 1), |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        }),
        op("slice_rows", |r| vec![uniform(r, 5, 3)], (2, 3), |t, v| t.slice_rows(v[0], 1, 2)),
        op("slice_cols", |r| vec![uniform(r, 3, 5)], (3, 2), |t, v| t.slice_cols(v[0], 2, 2)),
        op("concat_rows", |r| vec![uniform(r, 2, 3), uniform(r, 1, 3)], (3, 3), |t, v| {
            t.concat_rows(&[v[0], v[1]])
        }),
        op("concat_cols", |r| vec![uniform(r, 3, 2), uniform(r, 3, 1)], (3, 3), |t, v| {
            t.concat_cols(&[v[0], v[1]])
        }),
        op("gather_rows", |r| vec![uniform(r, 4, 3)], (5, 3), |t, v| t.gather_rows(v[0], &[3, 0, 3, 1, 0])),
        op(
            "layer_norm",
            |r| vec![uniform(r, 3, 6), uniform(r, 1, 6), uniform(r, 1, 6)],
            (3, 6),
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        op("cross_entropy", |r| vec![uniform(r, 4, 5)], (1, 1), move |t, v| {
            t.cross_entropy(v[0], &targets)
        }),
        op("pair_softmax", |r| vec![uniform(r, 6, 1)], (3, 2), |t, v| t.pair_softmax(v[0], 2.0)),
        op("window_pool_mean", |r| vec![uniform(r, 7, 3)], (4, 3), |t, v| {
            t.window_pool(v[0], WindowMode::Mean, 3, 2)
        }),
        op("window_pool_max", |r| vec![separated(r, 7, 3)], (4, 3), |t, v| {
            t.window_pool(v[0], WindowMode::Max, 3, 2)
        }),
        op(
            "scaled_dot_attention",
            |r| vec![uniform(r, 3, 4), uniform(r, 5, 4), uniform(r, 5, 2)],
            (3, 2),
            |t, v| Ok(scaled_dot_attention(t, v[0], v[1], v[2], None)?.0),
        ),
        op(
            "nonlinear_scorer",
            |r| {
                vec![
                    uniform(r, 5, 4),
                    uniform(r, 4, 4),
                    uniform(r, 1, 4),
                    uniform(r, 4, 1),
                    uniform(r, 1, 1),
                ]
            },
            (5, 1),
            |t, v| compute_scores(t, v[0], &ScorerSpec::Nonlinear { width_one: false }, &v[1..], None),
        ),
        halving_case("halving_sorted", 16, 4, true),
        halving_case("halving_unsorted", 16, 4, false),
        halving_case("halving_padded", 12, 3, true),
        model_case(),
    ]
}

/// Names of every case, in run order.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

fn check_point(case: &Case, p: &Point, corrupt: bool) -> Result<f64> {
    let build = (case.build)(p);
    let checked = checked_inputs(case, p);
    let mut tape = Tape::new();
    let vars: Vec<Var> = p.inputs[..checked].iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    for (i, input) in p.inputs[..checked].iter().enumerate() {
        let mut analytic = grads.get(vars[i]);
        if corrupt {
            analytic = analytic.map(|g| 1.01 * g + 1e-3);
        }
        let mut values = p.inputs[..checked].to_vec();
        let numeric = finite_diff_grad(
            |x| {
                values[i] = x.clone();
                let mut t = Tape::new();
                let vs: Vec<Var> = values.iter().map(|m| t.leaf(m.clone())).collect();
                build(&mut t, &vs).map_or(f64::NAN, |o| t.value(o).item())
            },
            input,
            EPSILON,
        )?;
        let err = max_relative_error(&analytic, &numeric);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(worst)
}

fn run_case(case: &Case, cfg: &SuiteConfig, index: usize) -> Result<CaseReport> {
    let corrupt = cfg.inject_fault.as_deref() == Some(case.name);
    let tolerance = match case.level {
        Level::Op => cfg.op_tolerance,
        Level::Model => cfg.model_tolerance,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    // near-tie draws are replaced, up to a generous cap
    while checked < cfg.seeds && skipped < 4 * cfg.seeds {
        let p = (case.sample)(&mut rng);
        if !p.smooth {
            skipped += 1;
            continue;
        }
        worst = worst.max(check_point(case, &p, corrupt)?);
        checked += 1;
    }
    if checked < cfg.seeds {
        worst = f64::INFINITY;
    }
    Ok(CaseReport {
        name: case.name,
        level: case.level,
        seeds_checked: checked,
        seeds_skipped: skipped,
        max_rel_error: worst,
        tolerance,
    })
}

/// Runs the cases whose names pass `filter`.
pub fn run_filtered(cfg: &SuiteConfig, filter: impl Fn(&str) -> bool) -> Result<Vec<CaseReport>> {
    cases()
        .iter()
        .enumerate()
        .filter(|(_, c)| filter(c.name))
        .map(|(i, c)| run_case(c, cfg, i))
        .collect()
}

pub fn run(cfg: &SuiteConfig) -> Result<Vec<CaseReport>> {
    run_filtered(cfg, |_| true)
}

pub const CSV_HEADER: &str = "op,level,seeds_checked,seeds_skipped,max_rel_error,tolerance,pass";

pub fn to_csv(reports: &[CaseReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let level = match r.level {
            Level::Op => "op",
            Level::Model => "model",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{:e},{:e},{}",
            r.name,
            level,
            r.seeds_checked,
            r.seeds_skipped,
            r.max_rel_error,
            r.tolerance,
            r.pass()
        );
    }
    out
}
