use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::nn::{matvec, matvec_t_acc, sigmoid_scalar, Param};

/// Gate weights stacked row-wise in the order input, forget, output,
/// candidate: `w` is `4H × D`, `u` is `4H × H`, `b` is `4H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub w: Param,
    pub u: Param,
    pub b: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub u: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Gradients leaving a cell: pre-activation gradient of the stacked gates
/// and the gradients for the parent's state.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrads {
    pub dz: Vec<f64>,
    pub dh_pt: Vec<f64>,
    pub dc_pt: Vec<f64>,
}

impl CellParams {
    pub fn new(hidden: usize, input: usize, forget_bias: f64, rng: &mut impl Rng) -> Self {
        let mut b = Param::zeros("cell.b", 4 * hidden, 1);
        b.value[hidden..2 * hidden].iter_mut().for_each(|v| *v = forget_bias);
        Self {
            w: Param::xavier("cell.W", 4 * hidden, input, rng),
            u: Param::xavier("cell.U", 4 * hidden, hidden, rng),
            b,
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            w: Param::zeros("cell.W", 4 * hidden, input),
            u: Param::zeros("cell.U", 4 * hidden, hidden),
            b: Param::zeros("cell.b", 4 * hidden, 1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols
    }

    /// Runs the cell given the precomputed input projection `zx = W x`.
    /// With `self_loop` the candidate's recurrent term is dropped.
    pub fn step(&self, zx: &[f64], h_pt: &[f64], c_pt: &[f64], self_loop: bool) -> Result<CellState> {
        let h = self.hidden();
        if zx.len() != 4 * h || h_pt.len() != h || c_pt.len() != h {
            return input_err(format!(
                "cell: expected input projection {} and parent state {h}, got {}, {}, {}",
                4 * h,
                zx.len(),
                h_pt.len(),
                c_pt.len()
            ));
        }
        let mut z = vec![0.0; 4 * h];
        let rows = if self_loop { 3 * h } else { 4 * h };
        matvec(&self.u.value[..rows * h], rows, h, h_pt, &mut z[..rows]);
        for r in 0..4 * h {
            z[r] += zx[r] + self.b.value[r];
        }
        let i: Vec<f64> = z[..h].iter().map(|&v| sigmoid_scalar(v)).collect();
        let f: Vec<f64> = z[h..2 * h].iter().map(|&v| sigmoid_scalar(v)).collect();
        let o: Vec<f64> = z[2 * h..3 * h].iter().map(|&v| sigmoid_scalar(v)).collect();
        let u: Vec<f64> = z[3 * h..].iter().map(|v| v.tanh()).collect();
        let c: Vec<f64> = (0..h).map(|j| i[j] * u[j] + f[j] * c_pt[j]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let hh = (0..h).map(|j| o[j] * tanh_c[j]).collect();
        Ok(CellState { i, f, o, u, c, tanh_c, h: hh })
    }

    /// `W x` for a raw input vector.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return input_err(format!("cell input has dimension {}, expected {}", x.len(), self.input_dim()));
        }
        let mut zx = vec![0.0; self.w.rows];
        matvec(&self.w.value, self.w.rows, self.w.cols, x, &mut zx);
        Ok(zx)
    }
}

/// One cell step from a raw input vector.
pub fn cell_forward(x: &[f64], h_pt: &[f64], c_pt: &[f64], params: &CellParams) -> Result<CellState> {
    params.step(&params.project(x)?, h_pt, c_pt, false)
}

/// Backpropagates `dh`, `dc` (total gradients at this node's state)
/// through one cell step. Weight gradients are left to the caller:
/// `dW += dz ⊗ x`, `dU += dz ⊗ h_pt`, `db += dz`.
pub fn cell_backward(
    s: &CellState,
    c_pt: &[f64],
    dh: &[f64],
    dc: &[f64],
    params: &CellParams,
    self_loop: bool,
) -> CellGrads {
    let h = s.h.len();
    let mut dz = vec![0.0; 4 * h];
    let mut dc_pt = vec![0.0; h];
    for j in 0..h {
        let dct = dc[j] + dh[j] * s.o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]);
        let d_o = dh[j] * s.tanh_c[j];
        let di = dct * s.u[j];
        let du = dct * s.i[j];
        let df = dct * c_pt[j];
        dc_pt[j] = dct * s.f[j];
        dz[j] = di * s.i[j] * (1.0 - s.i[j]);
        dz[h + j] = df * s.f[j] * (1.0 - s.f[j]);
        dz[2 * h + j] = d_o * s.o[j] * (1.0 - s.o[j]);
        dz[3 * h + j] = du * (1.0 - s.u[j] * s.u[j]);
    }
    let mut dh_pt = vec![0.0; h];
    let rows = if self_loop { 3 * h } else { 4 * h };
    matvec_t_acc(&params.u.value[..rows * h], rows, h, &dz[..rows], &mut dh_pt);
    CellGrads { dz, dh_pt, dc_pt }
}
