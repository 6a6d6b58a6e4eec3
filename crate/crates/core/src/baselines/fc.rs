use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::DiffusionTree;
use crate::error::{input_err, Error, Result};
use crate::features::{social_dim, DEFAULT_REGIONS, NUM_CATEGORIES};
use crate::nn::{
    add_outer, axpy, dense_forward, dropout, matvec_t_acc, DropoutMode, InputTable, Param, Parameters, RowGrads,
    RowProjection,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcConfig {
    /// Social feature dimension; the model input is `48 + input_dim`.
    pub input_dim: usize,
    pub k: usize,
    pub widths: [usize; 2],
    pub dropout: f64,
}

impl Default for FcConfig {
    fn default() -> Self {
        Self { input_dim: social_dim(DEFAULT_REGIONS), k: 1000, widths: [128, 128], dropout: 0.5 }
    }
}

impl FcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.k == 0 || self.widths.contains(&0) {
            return Err(Error::Config("FC dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Three dense layers: `tanh → dropout → tanh → dropout → k + 1 scores`.
/// The first layer's weight is `[content columns | social columns]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcBaseline {
    pub config: FcConfig,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub w3: Param,
    pub b3: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcCache {
    pub content: Option<usize>,
    pub row: usize,
    pub a1: Vec<f64>,
    pub m1: Vec<f64>,
    pub a1_in: Vec<f64>,
    pub a2: Vec<f64>,
    pub m2: Vec<f64>,
    pub a2_in: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcGrads {
    pub w1_rows: RowGrads,
    /// Gradient for the content columns of `w1`, `h1 × 48`.
    pub w1_content: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl Parameters for FcBaseline {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }
}

impl FcGrads {
    pub fn zeros(m: &FcBaseline) -> Self {
        Self {
            w1_rows: RowGrads::default(),
            w1_content: vec![0.0; m.w1.rows * NUM_CATEGORIES],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
            w3: vec![0.0; m.w3.len()],
            b3: vec![0.0; m.b3.len()],
        }
    }

    pub fn add_scaled(&mut self, o: &FcGrads, scale: f64) {
        self.w1_rows.merge(&o.w1_rows, scale);
        for (a, b) in [
            (&mut self.w1_content, &o.w1_content),
            (&mut self.b1, &o.b1),
            (&mut self.w2, &o.w2),
            (&mut self.b2, &o.b2),
            (&mut self.w3, &o.w3),
            (&mut self.b3, &o.b3),
        ] {
            axpy(scale, b, a);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w1_rows.scale(s);
        for v in [&mut self.w1_content, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3] {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn apply(&self, m: &mut FcBaseline, table: &InputTable, scale: f64) {
        self.w1_rows.apply(&mut m.w1, NUM_CATEGORIES, table, scale);
        let cols = m.w1.cols;
        for r in 0..m.w1.rows {
            axpy(scale, &self.w1_content[r * NUM_CATEGORIES..(r + 1) * NUM_CATEGORIES], &mut m.w1.grad[r * cols..r * cols + NUM_CATEGORIES]);
        }
        for (p, g) in [(&mut m.b1, &self.b1), (&mut m.w2, &self.w2), (&mut m.b2, &self.b2), (&mut m.w3, &self.w3), (&mut m.b3, &self.b3)] {
            p.ensure_buffers();
            axpy(scale, g, &mut p.grad);
        }
    }
}

impl FcBaseline {
    pub fn new(config: FcConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let [h1, h2] = config.widths;
        let n = config.k + 1;
        Ok(Self {
            w1: Param::xavier("fc1.W", h1, NUM_CATEGORIES + config.input_dim, rng),
            b1: Param::zeros("fc1.b", h1, 1),
            w2: Param::xavier("fc2.W", h2, h1, rng),
            b2: Param::zeros("fc2.b", h2, 1),
            w3: Param::xavier("fc3.W", n, h2, rng),
            b3: Param::zeros("fc3.b", n, 1),
            config,
        })
    }

    pub fn zeros(config: FcConfig) -> Result<Self> {
        config.validate()?;
        let [h1, h2] = config.widths;
        let n = config.k + 1;
        Ok(Self {
            w1: Param::zeros("fc1.W", h1, NUM_CATEGORIES + config.input_dim),
            b1: Param::zeros("fc1.b", h1, 1),
            w2: Param::zeros("fc2.W", h2, h1),
            b2: Param::zeros("fc2.b", h2, 1),
            w3: Param::zeros("fc3.W", n, h2),
            b3: Param::zeros("fc3.b", n, 1),
            config,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.k + 1
    }

    /// Social-column projections of the given table rows.
    pub fn project_inputs(&self, table: &InputTable, rows: impl IntoIterator<Item = usize>) -> Result<RowProjection> {
        RowProjection::new(&self.w1, NUM_CATEGORIES, table, rows)
    }

    /// Forward pass given the social projection `zx` of the input row.
    pub fn forward(&self, content: Option<usize>, row: usize, zx: &[f64], mode: DropoutMode, rng: &mut impl Rng) -> Result<FcCache> {
        let h1 = self.w1.rows;
        if zx.len() != h1 {
            return input_err(format!("FC projection has length {}, expected {h1}", zx.len()));
        }
        let mut pre = zx.to_vec();
        axpy(1.0, &self.b1.value, &mut pre);
        if let Some(c) = content {
            if c >= NUM_CATEGORIES {
                return input_err(format!("category {c} outside [0, {NUM_CATEGORIES})"));
            }
            pre.iter_mut().enumerate().for_each(|(r, v)| *v += self.w1.value[r * self.w1.cols + c]);
        }
        let a1: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let (a1_in, m1) = dropout(&a1, self.config.dropout, mode, rng)?;
        let a2: Vec<f64> = dense_forward(&a1_in, &self.w2.value, &self.b2.value)?.iter().map(|v| v.tanh()).collect();
        let (a2_in, m2) = dropout(&a2, self.config.dropout, mode, rng)?;
        let logits = dense_forward(&a2_in, &self.w3.value, &self.b3.value)?;
        Ok(FcCache { content, row, a1, m1, a1_in, a2, m2, a2_in, logits })
    }

    /// Eval-mode logits for a full input `[content one-hot; social]`.
    pub fn fc_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let a1: Vec<f64> = dense_forward(x, &self.w1.value, &self.b1.value)?.iter().map(|v| v.tanh()).collect();
        let a2: Vec<f64> = dense_forward(&a1, &self.w2.value, &self.b2.value)?.iter().map(|v| v.tanh()).collect();
        let (a2, _) = dropout(&a2, self.config.dropout, DropoutMode::Eval, &mut rng)?;
        dense_forward(&a2, &self.w3.value, &self.b3.value)
    }

    pub fn backward(&self, c: &FcCache, dlogits: &[f64], g: &mut FcGrads) {
        let [h1, h2] = self.config.widths;
        let n = self.num_classes();
        add_outer(&mut g.w3, dlogits, &c.a2_in);
        axpy(1.0, dlogits, &mut g.b3);
        let mut da2 = vec![0.0; h2];
        matvec_t_acc(&self.w3.value, n, h2, dlogits, &mut da2);
        let dp2: Vec<f64> = (0..h2).map(|j| da2[j] * c.m2[j] * (1.0 - c.a2[j] * c.a2[j])).collect();
        add_outer(&mut g.w2, &dp2, &c.a1_in);
        axpy(1.0, &dp2, &mut g.b2);
        let mut da1 = vec![0.0; h1];
        matvec_t_acc(&self.w2.value, h2, h1, &dp2, &mut da1);
        let dp1: Vec<f64> = (0..h1).map(|j| da1[j] * c.m1[j] * (1.0 - c.a1[j] * c.a1[j])).collect();
        axpy(1.0, &dp1, &mut g.b1);
        if let Some(cat) = c.content {
            for (r, d) in dp1.iter().enumerate() {
                g.w1_content[r * NUM_CATEGORIES + cat] += d;
            }
        }
        g.w1_rows.add(c.row, &dp1);
    }

    /// Eval-mode logits for every node; node `n` reads table row `rows[n]`.
    pub fn predict_tree(&self, tree: &DiffusionTree, content: Option<usize>, rows: &[usize], proj: &RowProjection) -> Result<Vec<Vec<f64>>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        (0..tree.len())
            .map(|n| Ok(self.forward(content, rows[n], proj.get(rows[n])?, DropoutMode::Eval, &mut rng)?.logits))
            .collect()
    }
}
