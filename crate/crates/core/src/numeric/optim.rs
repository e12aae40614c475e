use serde::{Deserialize, Serialize};

use super::nn::Parameters;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay and linear warmup.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Learning rate for the step about to be taken (1-based step count).
    pub fn effective_lr(&self, step: usize) -> f64 {
        let c = &self.config;
        if c.warmup_steps > 0 && step < c.warmup_steps {
            c.learning_rate * step as f64 / c.warmup_steps as f64
        } else {
            c.learning_rate
        }
    }

    /// One update over a list of parameter slices and matching gradients.
    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradient tensors", params.len()),
                actual: grads.len().to_string(),
            });
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.first.get(i).map(Vec::len) != Some(p.len()) {
                return Err(Error::ShapeMismatch {
                    expected: format!("tensor {i} of length {}", p.len()),
                    actual: g.len().to_string(),
                });
            }
        }
        self.step += 1;
        let t = self.step;
        let c = self.config.clone();
        let lr = self.effective_lr(t);
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            adamw_update(p, g, &mut self.first[i], &mut self.second[i], &c, lr, bc1, bc2);
        }
        Ok(())
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut gs: Vec<&[f64]> = Vec::new();
        grads.visit(&mut |s| gs.push(s));
        let mut lens = Vec::new();
        params.visit(&mut |s| lens.push(s.len()));
        if lens.len() != gs.len() || lens.iter().zip(&gs).any(|(a, g)| *a != g.len()) {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameter tensors", lens.len()),
                actual: format!("{} gradient tensors", gs.len()),
            });
        }
        if self.first.is_empty() {
            self.first = lens.iter().map(|&n| vec![0.0; n]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != lens.len() || self.first.iter().zip(&lens).any(|(m, &n)| m.len() != n) {
            return Err(Error::ShapeMismatch {
                expected: "parameters matching optimizer state".into(),
                actual: "different layout".into(),
            });
        }
        self.step += 1;
        let t = self.step;
        let c = self.config.clone();
        let lr = self.effective_lr(t);
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        let (first, second) = (&mut self.first, &mut self.second);
        let mut i = 0;
        params.visit_mut(&mut |p| {
            adamw_update(p, gs[i], &mut first[i], &mut second[i], &c, lr, bc1, bc2);
            i += 1;
        });
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn adamw_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], c: &AdamWConfig, lr: f64, bc1: f64, bc2: f64) {
    for j in 0..p.len() {
        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
        let mhat = m[j] / bc1;
        let vhat = v[j] / bc2;
        p[j] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[j]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            learning_rate: lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut st = OptimState::new(cfg(0.1, 0.0));
        let mut p = vec![1.0, -2.0, 3.5];
        for _ in 0..5 {
            st.step_slices(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn zero_gradient_decays_geometrically() {
        let (lr, d) = (0.01, 0.1);
        let mut st = OptimState::new(cfg(lr, d));
        let mut p = vec![2.0];
        for _ in 0..3 {
            st.step_slices(&mut [&mut p], &[&[0.0]]).unwrap();
        }
        assert!((p[0] - 2.0 * (1.0 - lr * d).powi(3)).abs() < 1e-15);
    }

    #[test]
    fn scripted_three_step_trajectory() {
        // Independent scalar script of the update rule, constant gradient 0.5.
        let (lr, wd, b1, b2, eps) = (0.1, 0.01, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 0.5;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * (mh / (vh.sqrt() + eps) + wd * x);
            expected.push(x);
        }
        let mut st = OptimState::new(cfg(lr, wd));
        let mut p = vec![1.0];
        for want in expected {
            st.step_slices(&mut [&mut p], &[&[0.5]]).unwrap();
            assert!((p[0] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn warmup_is_linear() {
        let st = OptimState::new(AdamWConfig {
            learning_rate: 2e-5,
            warmup_steps: 2000,
            ..AdamWConfig::default()
        });
        assert!((st.effective_lr(500) - 5e-6).abs() < 1e-20);
        assert_eq!(st.effective_lr(2000), 2e-5);
    }

    #[test]
    fn shape_mismatch() {
        let mut st = OptimState::new(cfg(0.1, 0.0));
        let mut p = vec![1.0, 2.0];
        assert!(st.step_slices(&mut [&mut p], &[&[0.0]]).is_err());
    }
}
