use serde::{Deserialize, Serialize};

use super::{Param, Parameters};
use crate::error::{input_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update at step `t` (1-based) over `params`,
/// reading each parameter's accumulated `grad`.
pub fn adam_step(params: &mut [&mut Param], lr: f64, cfg: AdamConfig, t: u64) -> Result<()> {
    if !(lr > 0.0) {
        return input_err(format!("learning rate must be positive, got {lr}"));
    }
    if t == 0 {
        return input_err("adam step counter starts at 1");
    }
    let AdamConfig { beta1, beta2, eps } = cfg;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for p in params.iter_mut() {
        p.ensure_buffers();
        let Param { value, grad, adam_m, adam_v, .. } = &mut **p;
        for i in 0..value.len() {
            let g = grad[i];
            adam_m[i] = beta1 * adam_m[i] + (1.0 - beta1) * g;
            adam_v[i] = beta2 * adam_v[i] + (1.0 - beta2) * g * g;
            let m_hat = adam_m[i] / bc1;
            let v_hat = adam_v[i] / bc2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Stateful wrapper that owns the step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0 }
    }

    pub fn step<M: Parameters + ?Sized>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        self.t += 1;
        let mut params = model.params_mut();
        adam_step(&mut params, lr, self.config, self.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Param::from_values("w", 1, 3, vec![0.5, -1.0, 2.0]);
        let before = p.value.clone();
        for t in 1..=5 {
            adam_step(&mut [&mut p], 0.1, AdamConfig::default(), t).unwrap();
        }
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g², so the step is lr·g/(|g|+eps) ≈ lr·sign(g).
        let mut p = Param::from_values("w", 1, 2, vec![0.0, 0.0]);
        p.grad = vec![3.0, -0.25];
        adam_step(&mut [&mut p], 0.1, AdamConfig::default(), 1).unwrap();
        assert!((p.value[0] + 0.1).abs() < 1e-8);
        assert!((p.value[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_lr() {
        let mut p = Param::zeros("w", 1, 1);
        assert!(adam_step(&mut [&mut p], 0.0, AdamConfig::default(), 1).is_err());
        assert!(adam_step(&mut [&mut p], -1.0, AdamConfig::default(), 1).is_err());
    }

    #[test]
    fn minimizes_quadratic_bowl() {
        // f(w) = ||w||², start at f = 1.
        let mut p = Param::from_values("w", 1, 4, vec![0.5; 4]);
        let f = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let mut trace = vec![f(&p.value)];
        for t in 1..=200 {
            p.grad = p.value.iter().map(|x| 2.0 * x).collect();
            adam_step(&mut [&mut p], 0.1, AdamConfig::default(), t).unwrap();
            trace.push(f(&p.value));
        }
        assert!((trace[0] - 1.0).abs() < 1e-12);
        assert!(*trace.last().unwrap() < 1e-3, "final {}", trace.last().unwrap());
        // Downward trend over successive 20-step windows.
        let window_mean = |s: usize| trace[s..s + 20].iter().sum::<f64>() / 20.0;
        assert!(window_mean(0) > window_mean(40));
        assert!(window_mean(40) > window_mean(180));
    }
}
