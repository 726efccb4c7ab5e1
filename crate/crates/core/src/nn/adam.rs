use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = usize>) -> AdamState {
        let sizes: Vec<usize> = shapes.into_iter().collect();
        AdamState {
            step: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient
    /// entry is non-finite.
    pub fn update(&mut self, config: &AdamConfig, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Dimension(format!(
                "{} parameter tensors, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[i].len() {
                return Err(Error::Dimension(format!(
                    "tensor {i}: {} parameters, {} gradient entries",
                    p.len(),
                    g.len()
                )));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient entry {j} of tensor {i} is {}",
                    g[j]
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
                *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain scalar re-derivation of Adam on f(w) = w^2, kept separate from
    /// the tensor implementation.
    fn scalar_oracle(lr: f64, steps: u32) -> f64 {
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=steps {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + 1e-8);
        }
        w
    }

    fn run_quadratic(lr: f64, steps: u32) -> f64 {
        let config = AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new([1]);
        let mut w = vec![1.0];
        for _ in 0..steps {
            let g = vec![2.0 * w[0]];
            state.update(&config, &mut [&mut w], &[&g]).unwrap();
        }
        w[0]
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let config = AdamConfig::default();
        for g in [1e-3, 0.5, -7.0, 1e4] {
            let mut state = AdamState::new([1]);
            let mut w = vec![0.25];
            state.update(&config, &mut [&mut w], &[&[g]]).unwrap();
            let delta = w[0] - 0.25;
            assert!((delta + 0.001 * g.signum()).abs() < 1e-8, "g = {g}, delta = {delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut state = AdamState::new([3]);
        let mut w = vec![1.0, -2.0, 3.0];
        state.update(&AdamConfig::default(), &mut [&mut w], &[&[0.0; 3]]).unwrap();
        assert_eq!(w, vec![1.0, -2.0, 3.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn quadratic_converges() {
        // frozen from scalar_oracle
        assert!((scalar_oracle(0.01, 200) - 0.015_572_485_317_246_587).abs() < 1e-12);
        let w = run_quadratic(0.01, 200);
        assert!((w - scalar_oracle(0.01, 200)).abs() < 1e-14);
        assert!(w.abs() < 0.05);
    }

    #[test]
    fn quadratic_at_default_rate_matches_oracle() {
        let w = run_quadratic(0.001, 200);
        assert!((scalar_oracle(0.001, 200) - 0.808_481_391_081_934_1).abs() < 1e-12);
        assert!((w - scalar_oracle(0.001, 200)).abs() < 1e-14);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut state = AdamState::new([2]);
        let mut w = vec![1.0, 1.0];
        let err = state.update(&AdamConfig::default(), &mut [&mut w], &[&[0.1, f64::NAN]]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(w, vec![1.0, 1.0]);
        assert_eq!(state.step, 0);
    }
}
