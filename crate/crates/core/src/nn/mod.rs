//! Dense numerics shared by every model in the crate: parameter storage,
//! row-major matrix kernels, activations, dropout, softmax cross-entropy,
//! Adam and a finite-difference gradient checker.
//!
//! Everything is `f64`. Matrices are stored row-major in flat `Vec<f64>`s;
//! a matrix with `rows` rows maps an input of length `cols` to an output of
//! length `rows`.

mod adam;
mod gradcheck;
mod ops;
mod projection;

pub use adam::{adam_step, Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, TensorCheck};
pub use ops::{
    dense_backward, dense_forward, dropout, logsumexp, sigmoid, sigmoid_scalar, softmax,
    softmax_xent, tanh, DenseGrads, DropoutMode, Xent,
};
pub use projection::{InputTable, RowGrads, RowProjection};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// A trainable tensor with its gradient and Adam moment buffers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
    #[serde(skip)]
    pub adam_m: Vec<f64>,
    #[serde(skip)]
    pub adam_v: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::from_values(name, rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_values(name: impl Into<String>, rows: usize, cols: usize, value: Vec<f64>) -> Self {
        assert_eq!(value.len(), rows * cols, "param buffer does not match shape");
        let n = value.len();
        Self {
            name: name.into(),
            rows,
            cols,
            value,
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        }
    }

    /// Xavier/Glorot uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    pub fn xavier(name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let value = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        Self::from_values(name, rows, cols, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Restores the grad/moment buffers after deserialization.
    pub fn ensure_buffers(&mut self) {
        let n = self.value.len();
        for buf in [&mut self.grad, &mut self.adam_m, &mut self.adam_v] {
            if buf.len() != n {
                *buf = vec![0.0; n];
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.value.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Uniform access to every [`Param`] a model owns, in a fixed order.
pub trait Parameters {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// `out = m · x` for a row-major `rows × cols` matrix.
pub fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(&m[r * cols..(r + 1) * cols], x);
    }
}

/// `out += mᵀ · y`.
pub fn matvec_t_acc(m: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        axpy(yr, &m[r * cols..(r + 1) * cols], out);
    }
}

/// `m += a ⊗ b` where `a` has length `rows` and `b` length `cols`.
pub fn add_outer(m: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    debug_assert_eq!(m.len(), a.len() * cols);
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        axpy(ar, b, &mut m[r * cols..(r + 1) * cols]);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn add_assign(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose_agree() {
        // 2x3
        let m = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 2];
        matvec(&m, 2, 3, &[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, [-2.0, -2.0]);
        let mut back = [0.0; 3];
        matvec_t_acc(&m, 2, 3, &[1.0, 1.0], &mut back);
        assert_eq!(back, [5.0, 7.0, 9.0]);
    }

    #[test]
    fn outer_accumulates() {
        let mut m = vec![0.0; 6];
        add_outer(&mut m, &[1.0, 2.0], &[1.0, 0.0, 3.0]);
        assert_eq!(m, vec![1.0, 0.0, 3.0, 2.0, 0.0, 6.0]);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
