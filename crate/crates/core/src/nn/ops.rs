use rand::Rng;

use super::{add_outer, matvec, matvec_t_acc};
use crate::error::{input_err, Result};

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| sigmoid_scalar(x)).collect()
}

pub fn tanh(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.tanh()).collect()
}

/// `W x + b` with `W` row-major `b.len() × x.len()`.
pub fn dense_forward(x: &[f64], w: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if w.len() != b.len() * x.len() {
        return input_err(format!(
            "dense: weight has {} entries, expected {}x{}",
            w.len(),
            b.len(),
            x.len()
        ));
    }
    let mut out = vec![0.0; b.len()];
    matvec(w, b.len(), x.len(), x, &mut out);
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

/// Gradients of `W x + b` given the upstream gradient `dy`.
pub fn dense_backward(x: &[f64], w: &[f64], dy: &[f64]) -> Result<DenseGrads> {
    if w.len() != dy.len() * x.len() {
        return input_err(format!(
            "dense backward: weight has {} entries, expected {}x{}",
            w.len(),
            dy.len(),
            x.len()
        ));
    }
    let mut dx = vec![0.0; x.len()];
    matvec_t_acc(w, dy.len(), x.len(), dy, &mut dx);
    let mut dw = vec![0.0; w.len()];
    add_outer(&mut dw, dy, x);
    Ok(DenseGrads { dx, dw, db: dy.to_vec() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Inverted dropout. Returns the output and the per-entry scale that was
/// applied (0 or `1/(1-rate)` in train mode, 1 in eval mode), which is also
/// the local derivative.
pub fn dropout(
    v: &[f64],
    rate: f64,
    mode: DropoutMode,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..1.0).contains(&rate) {
        return input_err(format!("dropout rate {rate} outside [0, 1)"));
    }
    if mode == DropoutMode::Eval || rate == 0.0 {
        return Ok((v.to_vec(), vec![1.0; v.len()]));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = v
        .iter()
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let out = v.iter().zip(&mask).map(|(a, m)| a * m).collect();
    Ok((out, mask))
}

pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Xent {
    pub loss: f64,
    pub probs: Vec<f64>,
    pub dlogits: Vec<f64>,
}

/// Cross-entropy of `softmax(logits)` against class `target`:
/// `-logits[target] + logsumexp(logits)`.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<Xent> {
    if target >= logits.len() {
        return input_err(format!("target {target} out of range for {} classes", logits.len()));
    }
    let loss = logsumexp(logits) - logits[target];
    let probs = softmax(logits);
    let mut dlogits = probs.clone();
    dlogits[target] -= 1.0;
    Ok(Xent { loss, probs, dlogits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_tanh_at_zero() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(tanh(&[0.0])[0], 0.0);
    }

    #[test]
    fn sigmoid_symmetry_and_saturation() {
        for &x in &[-1000.0, -30.0, -1.5, 0.3, 7.0, 1000.0] {
            let s = sigmoid_scalar(x);
            assert!((sigmoid_scalar(-x) - (1.0 - s)).abs() < 1e-12);
            assert!(s.is_finite() && (0.0..=1.0).contains(&s));
        }
        assert!(tanh(&[1000.0])[0] <= 1.0);
    }

    #[test]
    fn dense_identity() {
        let w = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(dense_forward(&[3.0, -2.0], &w, &[0.0, 0.0]).unwrap(), vec![3.0, -2.0]);
        assert!(dense_forward(&[1.0], &w, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn dense_weight_grad_is_outer_product() {
        let x = [1.0, 2.0, 3.0];
        let w = vec![0.1; 6];
        let g = dense_backward(&x, &w, &[0.5, -1.0]).unwrap();
        assert_eq!(g.dw, vec![0.5, 1.0, 1.5, -1.0, -2.0, -3.0]);
        assert_eq!(g.db, vec![0.5, -1.0]);
        assert!((g.dx[0] - (-0.05)).abs() < 1e-15);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = vec![1.0, -2.0, 3.0];
        assert_eq!(dropout(&v, 0.0, DropoutMode::Train, &mut rng).unwrap().0, v);
        assert_eq!(dropout(&v, 0.9, DropoutMode::Eval, &mut rng).unwrap().0, v);
        assert!(dropout(&v, 1.0, DropoutMode::Train, &mut rng).is_err());
    }

    #[test]
    fn xent_uniform_and_stable() {
        let x = softmax_xent(&[2.0; 4], 1).unwrap();
        assert!((x.loss - 4f64.ln()).abs() < 1e-12);
        assert!(x.probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
        let s = softmax_xent(&[1000.0, 0.0], 0).unwrap();
        assert!(s.loss.is_finite() && s.loss.abs() < 1e-12);
        assert!(softmax_xent(&[0.0, 0.0], 2).is_err());
    }
}
