//! Usefulness scores for the pooler, and the fixed-window pooling baselines.
//!
//! Trainable kinds (linear, nonlinear) read their parameters from the tape;
//! the remaining kinds add no parameters. Mean and max window pooling do not
//! score at all and reduce the sequence directly through [`window_pool`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var, WindowMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScorerSpec {
    /// `S(e) = e^T w + b`.
    Linear,
    /// `S(e) = tanh(e^T W1 + b1) w2 + b2`. The hidden layer is `d` wide
    /// unless `width_one` is set, which makes `W1` a single column.
    Nonlinear {
        #[serde(default)]
        width_one: bool,
    },
    /// Column sums of the preceding layer's head-averaged attention.
    PowerLike,
    /// A fixed coordinate of the representation (zero-based).
    Embedding { coordinate: usize },
    /// `U[0, 1)` scores from a seeded generator.
    Random { seed: u64 },
    /// Ones at every `n / k`-th position, zeros elsewhere.
    Index { k: usize },
    MeanWindow { window: usize, stride: usize },
    MaxWindow { window: usize, stride: usize },
}

impl ScorerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ScorerSpec::Linear => "linear",
            ScorerSpec::Nonlinear { .. } => "nonlinear",
            ScorerSpec::PowerLike => "power-like",
            ScorerSpec::Embedding { .. } => "embedding",
            ScorerSpec::Random { .. } => "random",
            ScorerSpec::Index { .. } => "index",
            ScorerSpec::MeanWindow { .. } => "mean-window",
            ScorerSpec::MaxWindow { .. } => "max-window",
        }
    }

    /// Parses the CLI spelling of a scorer kind with default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "linear" => ScorerSpec::Linear,
            "nonlinear" => ScorerSpec::Nonlinear { width_one: false },
            "power-like" => ScorerSpec::PowerLike,
            "embedding" => ScorerSpec::Embedding { coordinate: 0 },
            "random" => ScorerSpec::Random { seed: 0 },
            "index" => ScorerSpec::Index { k: 1 },
            "mean-window" => ScorerSpec::MeanWindow { window: 4, stride: 4 },
            "max-window" => ScorerSpec::MaxWindow { window: 4, stride: 4 },
            other => return Err(config(format!("unknown scorer kind {other:?}"))),
        })
    }

    /// Window kinds replace scoring plus top-k by direct pooling.
    pub fn window(&self) -> Option<(WindowMode, usize, usize)> {
        match *self {
            ScorerSpec::MeanWindow { window, stride } => Some((WindowMode::Mean, window, stride)),
            ScorerSpec::MaxWindow { window, stride } => Some((WindowMode::Max, window, stride)),
            _ => None,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match *self {
            ScorerSpec::Embedding { coordinate } if coordinate >= d => Err(config(format!(
                "embedding coordinate {coordinate} outside model dimension {d}"
            ))),
            ScorerSpec::Index { k: 0 } => Err(config("index scorer needs k >= 1")),
            ScorerSpec::MeanWindow { window, stride } | ScorerSpec::MaxWindow { window, stride }
                if window == 0 || stride == 0 =>
            {
                Err(config("window and stride must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Shapes of the trainable parameters for model dimension `d`.
    pub fn param_shapes(&self, d: usize) -> Vec<(usize, usize)> {
        match *self {
            ScorerSpec::Linear => vec![(d, 1), (1, 1)],
            ScorerSpec::Nonlinear { width_one } => {
                let h = if width_one { 1 } else { d };
                vec![(d, h), (1, h), (h, 1), (1, 1)]
            }
            _ => Vec::new(),
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Vec<Matrix> {
        self.param_shapes(d)
            .into_iter()
            .map(|(r, c)| {
                if r == 1 {
                    Matrix::zeros(r, c)
                } else {
                    let a = (6.0 / (r + c) as f64).sqrt();
                    Matrix::uniform(r, c, -a, a, rng)
                }
            })
            .collect()
    }
}

/// Scores of the `n` rows of `e` as an `n x 1` column.
///
/// `params` must match [`ScorerSpec::param_shapes`]; `ctx` carries the
/// `n x n` attention probabilities and is required exactly for the
/// power-like kind.
pub fn compute_scores(
    tape: &mut Tape,
    e: Var,
    spec: &ScorerSpec,
    params: &[Var],
    ctx: Option<&Matrix>,
) -> Result<Var> {
    let (n, d) = tape.shape(e);
    spec.validate(d)?;
    let expected = spec.param_shapes(d);
    if params.len() != expected.len() {
        return Err(contract(format!(
            "{} scorer takes {} parameters, got {}",
            spec.name(),
            expected.len(),
            params.len()
        )));
    }
    for (&p, &shape) in params.iter().zip(&expected) {
        if tape.shape(p) != shape {
            return Err(Error::Shape {
                op: "compute_scores",
                left: shape,
                right: tape.shape(p),
            });
        }
    }
    match (spec, ctx) {
        (ScorerSpec::PowerLike, None) => return Err(contract("power-like scorer needs attention context")),
        (ScorerSpec::PowerLike, Some(_)) | (_, None) => {}
        (_, Some(_)) => return Err(contract(format!("{} scorer takes no attention context", spec.name()))),
    }

    match spec {
        ScorerSpec::Linear => {
            let proj = tape.matmul(e, params[0])?;
            tape.add_row(proj, params[1])
        }
        ScorerSpec::Nonlinear { .. } => {
            let hidden = tape.matmul(e, params[0])?;
            let hidden = tape.add_row(hidden, params[1])?;
            let hidden = tape.tanh(hidden);
            let out = tape.matmul(hidden, params[2])?;
            tape.add_row(out, params[3])
        }
        ScorerSpec::PowerLike => {
            let a = ctx.expect("checked above");
            if a.shape() != (n, n) {
                return Err(Error::Shape {
                    op: "power-like scores",
                    left: (n, n),
                    right: a.shape(),
                });
            }
            let mut v = Matrix::zeros(n, 1);
            for i in 0..n {
                for (s, x) in v.data_mut().iter_mut().zip(a.row(i)) {
                    *s += x;
                }
            }
            Ok(tape.leaf(v))
        }
        ScorerSpec::Embedding { coordinate } => tape.slice_cols(e, *coordinate, 1),
        ScorerSpec::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok(tape.leaf(Matrix::uniform(n, 1, 0.0, 1.0, &mut rng)))
        }
        ScorerSpec::Index { k } => Ok(tape.leaf(index_scores(n, *k)?)),
        ScorerSpec::MeanWindow { .. } | ScorerSpec::MaxWindow { .. } => Err(contract(
            "window kinds pool directly and produce no scores; use window_pool",
        )),
    }
}

/// Ones at positions `s, 2s, ..., ks` (one-based) with stride `s = n / k`.
pub fn index_scores(n: usize, k: usize) -> Result<Matrix> {
    if k == 0 || k > n {
        return Err(contract(format!("index scorer cannot mark {k} of {n} positions")));
    }
    let stride = n / k;
    let mut v = Matrix::zeros(n, 1);
    for j in 1..=k {
        v.data_mut()[j * stride - 1] = 1.0;
    }
    Ok(v)
}

/// Column-wise mean or max over windows of `window` rows taken every
/// `stride` rows; the final window may be partial.
pub fn window_pool(tape: &mut Tape, e: Var, mode: WindowMode, window: usize, stride: usize) -> Result<Var> {
    tape.window_pool(e, mode, window, stride)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn scores(e: &Matrix, spec: &ScorerSpec, params: &[Matrix], ctx: Option<&Matrix>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let ev = tape.leaf(e.clone());
        let pv: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let v = compute_scores(&mut tape, ev, spec, &pv, ctx)?;
        Ok(tape.value(v).data().to_vec())
    }

    #[test]
    fn linear_basis_projection() {
        let e = Matrix::uniform(5, 3, -1.0, 1.0, &mut rng(1));
        let w = Matrix::column(&[1.0, 0.0, 0.0]);
        let v = scores(&e, &ScorerSpec::Linear, &[w, Matrix::zeros(1, 1)], None).unwrap();
        let first: Vec<f64> = (0..5).map(|i| e[(i, 0)]).collect();
        assert_eq!(v, first);
    }

    #[test]
    fn power_like_uniform_attention() {
        let n = 6;
        let e = Matrix::uniform(n, 2, -1.0, 1.0, &mut rng(2));
        let a = Matrix::filled(n, n, 1.0 / n as f64);
        let v = scores(&e, &ScorerSpec::PowerLike, &[], Some(&a)).unwrap();
        assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-15));
        assert!(scores(&e, &ScorerSpec::PowerLike, &[], None).is_err());
        assert!(scores(&e, &ScorerSpec::Linear, &ScorerSpec::Linear.init_params(2, &mut rng(0)), Some(&a)).is_err());
    }

    #[test]
    fn power_like_conserves_mass() {
        let n = 9;
        let a = Matrix::uniform(n, n, -3.0, 3.0, &mut rng(3)).row_softmax();
        let e = Matrix::zeros(n, 2);
        let v = scores(&e, &ScorerSpec::PowerLike, &[], Some(&a)).unwrap();
        assert!((v.iter().sum::<f64>() - n as f64).abs() < 1e-12);
    }

    #[test]
    fn index_marks_every_stride() {
        let v = index_scores(8, 2).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        for (n, k) in [(10, 3), (256, 32), (5, 5), (7, 1)] {
            let v = index_scores(n, k).unwrap();
            assert_eq!(v.sum(), k as f64);
            assert!(v.data().iter().all(|&x| x == 0.0 || x == 1.0));
        }
    }

    #[test]
    fn embedding_coordinate() {
        let e = Matrix::uniform(4, 3, -1.0, 1.0, &mut rng(4));
        let v = scores(&e, &ScorerSpec::Embedding { coordinate: 2 }, &[], None).unwrap();
        assert_eq!(v, (0..4).map(|i| e[(i, 2)]).collect::<Vec<_>>());
        assert!(scores(&e, &ScorerSpec::Embedding { coordinate: 3 }, &[], None).is_err());
    }

    #[test]
    fn random_is_reproducible() {
        let e = Matrix::zeros(16, 2);
        let spec = ScorerSpec::Random { seed: 42 };
        let a = scores(&e, &spec, &[], None).unwrap();
        let b = scores(&e, &spec, &[], None).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| (0.0..1.0).contains(&x)));
        let c = scores(&e, &ScorerSpec::Random { seed: 43 }, &[], None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn nonlinear_gradients() {
        for width_one in [false, true] {
            let spec = ScorerSpec::Nonlinear { width_one };
            let e = Matrix::uniform(5, 4, -1.0, 1.0, &mut rng(5));
            let mut inputs = vec![e];
            let mut params = spec.init_params(4, &mut rng(6));
            // non-zero biases so every path is exercised
            params[1] = Matrix::uniform(params[1].rows(), params[1].cols(), -0.5, 0.5, &mut rng(7));
            inputs.extend(params);
            let report = check_gradients(&inputs, 1e-5, 1e-6, |t, v| {
                let s = compute_scores(t, v[0], &spec, &v[1..], None)?;
                let sq = t.mul(s, s)?;
                Ok(t.sum(sq))
            })
            .unwrap();
            assert!(report.pass, "{report:?}");
            assert!(report.max_rel_error.len() == 5);
        }
    }

    #[test]
    fn trainable_kinds_receive_gradient() {
        let e = Matrix::uniform(6, 4, -1.0, 1.0, &mut rng(8));
        for spec in [ScorerSpec::Linear, ScorerSpec::Nonlinear { width_one: false }] {
            let mut tape = Tape::new();
            let ev = tape.leaf(e.clone());
            let params: Vec<Var> = spec.init_params(4, &mut rng(9)).into_iter().map(|p| tape.leaf(p)).collect();
            let v = compute_scores(&mut tape, ev, &spec, &params, None).unwrap();
            let w = tape.leaf(Matrix::uniform(6, 1, -1.0, 1.0, &mut rng(10)));
            let y = tape.mul(v, w).unwrap();
            let l = tape.sum(y);
            let g = tape.backward(l).unwrap();
            assert!(g.get(params[0]).data().iter().any(|&x| x != 0.0), "{}", spec.name());
        }
    }

    #[test]
    fn window_pool_examples() {
        let e = Matrix::from_rows(&[[0.0, 0.0], [2.0, 2.0], [4.0, 4.0], [6.0, 6.0]]).unwrap();
        let run = |mode, w, s| {
            let mut tape = Tape::new();
            let x = tape.leaf(e.clone());
            let y = window_pool(&mut tape, x, mode, w, s).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(WindowMode::Mean, 2, 2).data(), &[1.0, 1.0, 5.0, 5.0]);
        assert_eq!(run(WindowMode::Max, 2, 2).data(), &[2.0, 2.0, 6.0, 6.0]);
        assert_eq!(run(WindowMode::Mean, 1, 1), e);
        assert_eq!(run(WindowMode::Mean, 4, 3).data(), &[3.0, 3.0, 6.0, 6.0]);
    }

    #[test]
    fn window_kinds_do_not_score() {
        let e = Matrix::zeros(4, 2);
        assert!(scores(&e, &ScorerSpec::MeanWindow { window: 4, stride: 4 }, &[], None).is_err());
    }

    #[test]
    fn names_round_trip() {
        for name in ["linear", "nonlinear", "power-like", "embedding", "random", "index", "mean-window", "max-window"] {
            assert_eq!(ScorerSpec::from_name(name).unwrap().name(), name);
        }
        assert!(ScorerSpec::from_name("cosine").is_err());
    }
}
