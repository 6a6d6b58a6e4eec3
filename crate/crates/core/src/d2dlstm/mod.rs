//! The top-down tree LSTM.
//!
//! State flows from a parent to each of its children: a node's cell reads
//! its own input and its parent's `(h, c)`. The root reads `h = 0` and a
//! memory cell projected from the content one-hot. Each node's hidden state
//! goes through a small head that scores the `k + 1` classes for the node's
//! children (the last class means "no further shares"). In the backward
//! pass a parent receives the sum of its children's state gradients.

mod cell;
mod check;
mod tree;

pub use check::{check_random_trees, random_tree, TreeCheckConfig, TreeCheckReport};
pub use cell::{cell_backward, cell_forward, CellGrads, CellParams, CellState};
pub use tree::{NodeCache, TreeBackward, TreeForward, TreeGrads};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::TerminalTargets;
use crate::error::{Error, Result};
use crate::features::NUM_CATEGORIES;
use crate::nn::{dropout, softmax, DropoutMode, Param, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub input_dim: usize,
    /// Number of prototypes; the head scores `k + 1` classes.
    pub k: usize,
    /// Dropout on the hidden state before the FC layer.
    pub dropout_hidden: f64,
    /// Dropout between the FC layer and the classifier.
    pub dropout_fc: f64,
    pub terminal_targets: TerminalTargets,
    /// Literal reading of the candidate update, which refers to the node's
    /// own hidden state: the recurrent term of `u` is replaced by zero.
    pub candidate_self_loop: bool,
    pub forget_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            input_dim: crate::features::social_dim(crate::features::DEFAULT_REGIONS),
            k: 1000,
            dropout_hidden: 0.5,
            dropout_fc: 0.5,
            terminal_targets: TerminalTargets::Leaves,
            candidate_self_loop: false,
            forget_bias: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        self.k + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.input_dim == 0 || self.k == 0 {
            return Err(Error::Config("hidden, input_dim and k must be positive".into()));
        }
        for r in [self.dropout_hidden, self.dropout_fc] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Parameters of the whole model: cell, content projection and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct D2dLstm {
    pub config: ModelConfig,
    pub cell: CellParams,
    /// `c0 = content_w · onehot(category) + content_b`.
    pub content_w: Param,
    pub content_b: Param,
    pub fc_w: Param,
    pub fc_b: Param,
    pub out_w: Param,
    pub out_b: Param,
}

impl Parameters for D2dLstm {
    fn params(&self) -> Vec<&Param> {
        vec![
            &self.cell.w,
            &self.cell.u,
            &self.cell.b,
            &self.content_w,
            &self.content_b,
            &self.fc_w,
            &self.fc_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.cell.w,
            &mut self.cell.u,
            &mut self.cell.b,
            &mut self.content_w,
            &mut self.content_b,
            &mut self.fc_w,
            &mut self.fc_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }
}

/// Activations of the head for one hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub h_mask: Vec<f64>,
    pub h_in: Vec<f64>,
    pub a: Vec<f64>,
    pub a_mask: Vec<f64>,
    pub a_in: Vec<f64>,
    pub logits: Vec<f64>,
}

impl D2dLstm {
    /// Xavier-uniform weights, zero biases, forget-gate bias from the config.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (h, n) = (config.hidden, config.num_classes());
        let cell = CellParams::new(h, config.input_dim, config.forget_bias, rng);
        Ok(Self {
            cell,
            content_w: Param::xavier("content.W", h, NUM_CATEGORIES, rng),
            content_b: Param::zeros("content.b", h, 1),
            fc_w: Param::xavier("fc.W", h, h, rng),
            fc_b: Param::zeros("fc.b", h, 1),
            out_w: Param::xavier("out.W", n, h, rng),
            out_b: Param::zeros("out.b", n, 1),
            config,
        })
    }

    /// All-zero parameters (every gate at 0.5, uniform predictions).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (h, n) = (config.hidden, config.num_classes());
        Ok(Self {
            cell: CellParams::zeros(h, config.input_dim),
            content_w: Param::zeros("content.W", h, NUM_CATEGORIES),
            content_b: Param::zeros("content.b", h, 1),
            fc_w: Param::zeros("fc.W", h, h),
            fc_b: Param::zeros("fc.b", h, 1),
            out_w: Param::zeros("out.W", n, h),
            out_b: Param::zeros("out.b", n, 1),
            config,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    /// Initial memory for content of the given category; `None` stands for
    /// a masked (all-zero) content vector.
    pub fn initial_memory(&self, category: Option<usize>) -> Result<Vec<f64>> {
        let mut c0 = self.content_b.value.clone();
        if let Some(cat) = category {
            if cat >= NUM_CATEGORIES {
                return Err(Error::Input(format!("category {cat} outside [0, {NUM_CATEGORIES})")));
            }
            c0.iter_mut().enumerate().for_each(|(r, v)| *v += self.content_w.value[r * NUM_CATEGORIES + cat]);
        }
        Ok(c0)
    }

    /// Scores for the children of a node with hidden state `h`.
    pub fn head(&self, h: &[f64], mode: DropoutMode, rng: &mut impl Rng) -> Result<Head> {
        let (h_in, h_mask) = dropout(h, self.config.dropout_hidden, mode, rng)?;
        let a: Vec<f64> = crate::nn::dense_forward(&h_in, &self.fc_w.value, &self.fc_b.value)?.iter().map(|v| v.tanh()).collect();
        let (a_in, a_mask) = dropout(&a, self.config.dropout_fc, mode, rng)?;
        let logits = crate::nn::dense_forward(&a_in, &self.out_w.value, &self.out_b.value)?;
        Ok(Head { h_mask, h_in, a, a_mask, a_in, logits })
    }

    /// Eval-mode class scores for hidden state `h`.
    pub fn head_logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.head(h, DropoutMode::Eval, &mut rand::rngs::mock::StepRng::new(0, 0))?.logits)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (h, d, n) = (self.config.hidden, self.config.input_dim, self.num_classes());
        let shapes = [
            (&self.cell.w, 4 * h, d),
            (&self.cell.u, 4 * h, h),
            (&self.cell.b, 4 * h, 1),
            (&self.content_w, h, NUM_CATEGORIES),
            (&self.content_b, h, 1),
            (&self.fc_w, h, h),
            (&self.fc_b, h, 1),
            (&self.out_w, n, h),
            (&self.out_b, n, 1),
        ];
        for (p, r, c) in shapes {
            if p.rows != r || p.cols != c || p.value.len() != r * c {
                return Err(Error::Input(format!("parameter {} has shape {}x{}, expected {r}x{c}", p.name, p.rows, p.cols)));
            }
            if p.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("parameter {} has non-finite entries", p.name)));
            }
        }
        Ok(())
    }
}

/// Distribution over the `k + 1` classes for a node's children.
pub fn predict_children_distribution(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { hidden: 4, input_dim: 3, k: 5, ..Default::default() }
    }

    #[test]
    fn init_shapes_and_forget_bias() {
        let m = D2dLstm::new(cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.validate().unwrap();
        assert_eq!(m.out_w.rows, 6);
        assert_eq!(&m.cell.b.value[4..8], &[1.0; 4]);
        assert!(m.cell.b.value[..4].iter().chain(&m.cell.b.value[8..]).all(|&v| v == 0.0));
        assert_eq!(m.num_parameters(), 16 * 3 + 16 * 4 + 16 + 4 * 48 + 4 + 16 + 4 + 24 + 6);
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = D2dLstm::zeros(cfg()).unwrap();
        let p = predict_children_distribution(&m.head_logits(&[0.3, -0.2, 0.0, 0.9]).unwrap());
        assert!(p.iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn distribution_properties() {
        let l = [0.3, -2.0, 5.0, 1.0];
        let p = predict_children_distribution(&l);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(crate::nn::argmax(&p), crate::nn::argmax(&l));
        assert!(predict_children_distribution(&[1.0; 3]).iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn bad_config() {
        assert!(D2dLstm::zeros(ModelConfig { dropout_fc: 1.0, ..cfg() }).is_err());
        assert!(D2dLstm::zeros(ModelConfig { hidden: 0, ..cfg() }).is_err());
    }
}
