//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Moment estimates for one parameter matrix.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(shape: (usize, usize), config: AdamConfig) -> Self {
        Self {
            first_moment: Matrix::zeros(shape.0, shape.1),
            second_moment: Matrix::zeros(shape.0, shape.1),
            step: 0,
            config,
        }
    }
}

pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState) -> Result<()> {
    for other in [grad, &state.first_moment] {
        if other.shape() != param.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: param.shape(),
                right: other.shape(),
            });
        }
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// One [`AdamState`] per parameter matrix.
#[derive(Clone, Debug)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &[Matrix], config: AdamConfig) -> Self {
        Self {
            states: params.iter().map(|p| AdamState::new(p.shape(), config)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != params.len() {
            return Err(crate::error::contract("parameter count changed under the optimizer"));
        }
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            adam_step(p, g, s)?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = Matrix::from_rows(&[[1.5, -2.0]]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new((1, 2), AdamConfig::default());
        adam_step(&mut p, &Matrix::zeros(1, 2), &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let lr = 0.01;
        let mut p = Matrix::zeros(1, 3);
        let g = Matrix::from_rows(&[[3.0, -0.2, 40.0]]).unwrap();
        let mut s = AdamState::new((1, 3), AdamConfig::with_learning_rate(lr));
        adam_step(&mut p, &g, &mut s).unwrap();
        for (x, gi) in p.data().iter().zip(g.data()) {
            assert!((x + lr * gi.signum()).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn converges_on_parabola() {
        let mut x = Matrix::scalar(1.0);
        let mut s = AdamState::new((1, 1), AdamConfig::with_learning_rate(0.1));
        for _ in 0..100 {
            let g = Matrix::scalar(2.0 * x.item());
            adam_step(&mut x, &g, &mut s).unwrap();
        }
        assert!(x.item().abs() < 0.05, "{}", x.item());
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let mut s = AdamState::new((2, 2), AdamConfig::default());
        assert!(adam_step(&mut p, &Matrix::zeros(1, 2), &mut s).is_err());
    }
}
