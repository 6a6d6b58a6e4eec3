use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::Parameters;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Tensors larger than this are checked on a random subsample of this
    /// many entries; `None` checks every entry.
    pub max_entries_per_tensor: Option<usize>,
    /// Magnitude below which errors are measured against the floor instead
    /// of the gradient itself.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-6, max_entries_per_tensor: Some(200), floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Tensors sorted by decreasing error.
    pub fn worst(&self, n: usize) -> Vec<&TensorCheck> {
        let mut v: Vec<&TensorCheck> = self.tensors.iter().collect();
        v.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
        v.truncate(n);
        v
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradients currently stored in `model` against central
/// differences of `loss`. The caller must have run the backward pass that
/// fills the `grad` buffers at the current parameter values.
pub fn grad_check<M, F>(model: &mut M, mut loss: F, opts: GradCheckOptions) -> GradCheckReport
where
    M: Parameters,
    F: FnMut(&M) -> f64,
{
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tensors = Vec::with_capacity(analytic.len());

    for (ti, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let indices: Vec<usize> = match opts.max_entries_per_tensor {
            Some(m) if n > m => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut check = TensorCheck {
            name: names[ti].clone(),
            checked: indices.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &indices {
            let orig = model.params_mut()[ti].value[i];
            model.params_mut()[ti].value[i] = orig + opts.h;
            let plus = loss(model);
            model.params_mut()[ti].value[i] = orig - opts.h;
            let minus = loss(model);
            model.params_mut()[ti].value[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let e = rel_err(grad[i], numeric, opts.floor);
            if e > check.max_rel_err || e.is_nan() {
                check.max_rel_err = e;
                check.worst_index = i;
                check.analytic = grad[i];
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    GradCheckReport { tensors, max_rel_err, tol: opts.tol, passed: max_rel_err < opts.tol }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{softmax_xent, Param};

    struct Linear {
        w: Param,
    }

    impl Parameters for Linear {
        fn params(&self) -> Vec<&Param> {
            vec![&self.w]
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.w]
        }
    }

    #[test]
    fn linear_loss_is_exact() {
        let a = [0.3, -1.2, 2.5, 0.0];
        let mut m = Linear { w: Param::from_values("w", 1, 4, vec![1.0, 2.0, -3.0, 0.5]) };
        m.w.grad = a.to_vec();
        let report = grad_check(
            &mut m,
            |m| m.w.value.iter().zip(&a).map(|(w, a)| w * a).sum(),
            GradCheckOptions { tol: 1e-8, ..Default::default() },
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn softmax_xent_logit_grads() {
        let logits = vec![0.2, -1.3, 0.7, 2.1, -0.4];
        let mut m = Linear { w: Param::from_values("logits", 1, 5, logits.clone()) };
        m.w.grad = softmax_xent(&logits, 3).unwrap().dlogits;
        let report = grad_check(
            &mut m,
            |m| softmax_xent(&m.w.value, 3).unwrap().loss,
            GradCheckOptions { tol: 1e-7, ..Default::default() },
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let mut m = Linear { w: Param::from_values("w", 1, 2, vec![1.0, 1.0]) };
        m.w.grad = vec![1.0, 0.0];
        let report = grad_check(&mut m, |m| m.w.value[0] + m.w.value[1], GradCheckOptions::default());
        assert!(!report.passed);
        assert_eq!(report.tensors[0].worst_index, 1);
    }
}
