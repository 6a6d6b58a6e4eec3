use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{path_targets, ChainLstm, FcBaseline, FcConfig, FcGrads};
use crate::cascade::TerminalTargets;
use crate::d2dlstm::{D2dLstm, ModelConfig, TreeGrads};
use crate::error::Result;
use crate::nn::{softmax_xent, DropoutMode, InputTable, Param, Parameters, RowProjection};

use super::data::TreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    D2dLstm,
    Lstm,
    Fc,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::D2dLstm => "D2D-LSTM",
            ModelKind::Lstm => "LSTM",
            ModelKind::Fc => "FC",
        }
    }

    pub fn has_memory(&self) -> bool {
        !matches!(self, ModelKind::Fc)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "d2d_lstm" | "d2dlstm" | "d2d" => Ok(ModelKind::D2dLstm),
            "lstm" | "chain" => Ok(ModelKind::Lstm),
            "fc" => Ok(ModelKind::Fc),
            other => Err(crate::Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// One training example: a whole tree, or one root-to-leaf path of a tree
/// for the chain model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unit {
    Tree(usize),
    Path(usize, Vec<usize>),
}

impl Unit {
    pub fn tree(&self) -> usize {
        match self {
            Unit::Tree(t) | Unit::Path(t, _) => *t,
        }
    }
}

/// What the training loop needs from a model.
pub trait Learner: Parameters + Clone + Send + Sync {
    type Grads: Send;

    fn kind(&self) -> ModelKind;
    fn num_classes(&self) -> usize;
    fn project(&self, table: &InputTable, rows: &mut dyn Iterator<Item = usize>) -> Result<RowProjection>;
    /// Training units for a set of trees.
    fn units(&self, set: &TreeSet) -> Vec<Unit>;
    /// Summed loss over the `(node, label)` pairs of one unit, the
    /// gradients of that sum and the number of pairs.
    fn unit_grads(&self, set: &TreeSet, unit: &Unit, proj: &RowProjection, rng: &mut dyn rand::RngCore) -> Result<(f64, Self::Grads, usize)>;
    /// `acc += scale * g`.
    fn add_grads(acc: &mut Self::Grads, g: &Self::Grads, scale: f64);
    fn scale_grads(g: &mut Self::Grads, scale: f64);
    fn apply_grads(&mut self, g: &Self::Grads, table: &InputTable, scale: f64);
    /// Eval-mode logits for every node of tree `t`.
    fn predict(&self, set: &TreeSet, t: usize, proj: &RowProjection) -> Result<Vec<Vec<f64>>>;
}

fn d2d_unit(net: &D2dLstm, set: &TreeSet, t: usize, proj: &RowProjection, rng: &mut impl Rng) -> Result<(f64, TreeGrads, usize)> {
    let f = net.tree_forward(&set.trees[t], set.content(t), &set.rows[t], proj, DropoutMode::Train, rng)?;
    let (loss, dl, pairs) = net.tree_loss_sum(&f, &set.targets[t])?;
    Ok((loss, net.tree_backward(&f, &dl)?.grads, pairs))
}

impl Learner for D2dLstm {
    type Grads = TreeGrads;

    fn kind(&self) -> ModelKind {
        ModelKind::D2dLstm
    }

    fn num_classes(&self) -> usize {
        D2dLstm::num_classes(self)
    }

    fn project(&self, table: &InputTable, rows: &mut dyn Iterator<Item = usize>) -> Result<RowProjection> {
        self.project_inputs(table, rows)
    }

    fn units(&self, set: &TreeSet) -> Vec<Unit> {
        (0..set.trees.len()).map(Unit::Tree).collect()
    }

    fn unit_grads(&self, set: &TreeSet, unit: &Unit, proj: &RowProjection, mut rng: &mut dyn rand::RngCore) -> Result<(f64, TreeGrads, usize)> {
        d2d_unit(self, set, unit.tree(), proj, &mut rng)
    }

    fn add_grads(acc: &mut TreeGrads, g: &TreeGrads, scale: f64) {
        acc.add_scaled(g, scale);
    }

    fn scale_grads(g: &mut TreeGrads, scale: f64) {
        g.scale(scale);
    }

    fn apply_grads(&mut self, g: &TreeGrads, table: &InputTable, scale: f64) {
        g.apply(self, table, scale);
    }

    fn predict(&self, set: &TreeSet, t: usize, proj: &RowProjection) -> Result<Vec<Vec<f64>>> {
        self.predict_tree(&set.trees[t], set.content(t), &set.rows[t], proj)
    }
}

impl Learner for ChainLstm {
    type Grads = TreeGrads;

    fn kind(&self) -> ModelKind {
        ModelKind::Lstm
    }

    fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    fn project(&self, table: &InputTable, rows: &mut dyn Iterator<Item = usize>) -> Result<RowProjection> {
        self.net.project_inputs(table, rows)
    }

    fn units(&self, set: &TreeSet) -> Vec<Unit> {
        let mut out = Vec::new();
        for (t, tree) in set.trees.iter().enumerate() {
            for p in crate::baselines::root_to_leaf_paths(tree) {
                out.push(Unit::Path(t, p));
            }
        }
        out
    }

    fn unit_grads(&self, set: &TreeSet, unit: &Unit, proj: &RowProjection, mut rng: &mut dyn rand::RngCore) -> Result<(f64, TreeGrads, usize)> {
        let Unit::Path(t, path) = unit else {
            return Err(crate::Error::Internal("chain model given a whole-tree unit".into()));
        };
        let rows: Vec<usize> = path.iter().map(|&n| set.rows[*t][n]).collect();
        let f = self.chain_forward(set.content(*t), &rows, proj, DropoutMode::Train, &mut rng)?;
        let targets = path_targets(&set.trees[*t], path, set.terminal_class)?;
        let (loss, dl) = self.chain_loss_sum(&f, &targets)?;
        Ok((loss, self.chain_backward(&f, &dl)?, targets.len()))
    }

    fn add_grads(acc: &mut TreeGrads, g: &TreeGrads, scale: f64) {
        acc.add_scaled(g, scale);
    }

    fn scale_grads(g: &mut TreeGrads, scale: f64) {
        g.scale(scale);
    }

    fn apply_grads(&mut self, g: &TreeGrads, table: &InputTable, scale: f64) {
        g.apply(&mut self.net, table, scale);
    }

    fn predict(&self, set: &TreeSet, t: usize, proj: &RowProjection) -> Result<Vec<Vec<f64>>> {
        self.predict_tree(&set.trees[t], set.content(t), &set.rows[t], proj)
    }
}

impl Learner for FcBaseline {
    type Grads = FcGrads;

    fn kind(&self) -> ModelKind {
        ModelKind::Fc
    }

    fn num_classes(&self) -> usize {
        FcBaseline::num_classes(self)
    }

    fn project(&self, table: &InputTable, rows: &mut dyn Iterator<Item = usize>) -> Result<RowProjection> {
        self.project_inputs(table, rows)
    }

    fn units(&self, set: &TreeSet) -> Vec<Unit> {
        (0..set.trees.len()).map(Unit::Tree).collect()
    }

    fn unit_grads(&self, set: &TreeSet, unit: &Unit, proj: &RowProjection, mut rng: &mut dyn rand::RngCore) -> Result<(f64, FcGrads, usize)> {
        let t = unit.tree();
        let targets = &set.targets[t];
        let mut pairs = 0;
        let mut g = FcGrads::zeros(self);
        let mut loss = 0.0;
        for (n, ts) in targets.iter().enumerate() {
            if ts.is_empty() {
                continue;
            }
            let row = set.rows[t][n];
            let cache = self.forward(set.content(t), row, proj.get(row)?, DropoutMode::Train, &mut rng)?;
            let mut dl = vec![0.0; cache.logits.len()];
            for &target in ts {
                let x = softmax_xent(&cache.logits, target)?;
                loss += x.loss;
                crate::nn::axpy(1.0, &x.dlogits, &mut dl);
                pairs += 1;
            }
            self.backward(&cache, &dl, &mut g);
        }
        Ok((loss, g, pairs))
    }

    fn add_grads(acc: &mut FcGrads, g: &FcGrads, scale: f64) {
        acc.add_scaled(g, scale);
    }

    fn scale_grads(g: &mut FcGrads, scale: f64) {
        g.scale(scale);
    }

    fn apply_grads(&mut self, g: &FcGrads, table: &InputTable, scale: f64) {
        g.apply(self, table, scale);
    }

    fn predict(&self, set: &TreeSet, t: usize, proj: &RowProjection) -> Result<Vec<Vec<f64>>> {
        self.predict_tree(&set.trees[t], set.content(t), &set.rows[t], proj)
    }
}

/// Architecture settings shared by the three model kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: usize,
    pub dropout_hidden: f64,
    pub dropout_fc: f64,
    pub fc_widths: [usize; 2],
    pub terminal_targets: TerminalTargets,
    pub candidate_self_loop: bool,
    pub forget_bias: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            hidden: m.hidden,
            dropout_hidden: m.dropout_hidden,
            dropout_fc: m.dropout_fc,
            fc_widths: [128, 128],
            terminal_targets: m.terminal_targets,
            candidate_self_loop: m.candidate_self_loop,
            forget_bias: m.forget_bias,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, input_dim: usize, k: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            input_dim,
            k,
            dropout_hidden: self.dropout_hidden,
            dropout_fc: self.dropout_fc,
            terminal_targets: self.terminal_targets,
            candidate_self_loop: self.candidate_self_loop,
            forget_bias: self.forget_bias,
        }
    }

    pub fn fc_config(&self, input_dim: usize, k: usize) -> FcConfig {
        FcConfig { input_dim, k, widths: self.fc_widths, dropout: self.dropout_fc }
    }
}

/// Any of the three models, for code that picks the kind at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnyModel {
    D2dLstm(D2dLstm),
    Lstm(ChainLstm),
    Fc(FcBaseline),
}

impl AnyModel {
    pub fn init(kind: ModelKind, arch: &ArchConfig, input_dim: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(match kind {
            ModelKind::D2dLstm => AnyModel::D2dLstm(D2dLstm::new(arch.model_config(input_dim, k), rng)?),
            ModelKind::Lstm => AnyModel::Lstm(ChainLstm::new(arch.model_config(input_dim, k), rng)?),
            ModelKind::Fc => AnyModel::Fc(FcBaseline::new(arch.fc_config(input_dim, k), rng)?),
        })
    }

    /// All-zero model of the given kind and shape.
    pub fn zeros(kind: ModelKind, arch: &ArchConfig, input_dim: usize, k: usize) -> Result<Self> {
        Ok(match kind {
            ModelKind::D2dLstm => AnyModel::D2dLstm(D2dLstm::zeros(arch.model_config(input_dim, k))?),
            ModelKind::Lstm => AnyModel::Lstm(ChainLstm::from_shared(D2dLstm::zeros(arch.model_config(input_dim, k))?)),
            ModelKind::Fc => AnyModel::Fc(FcBaseline::zeros(arch.fc_config(input_dim, k))?),
        })
    }

    /// The architecture settings this model was built with.
    pub fn arch(&self) -> ArchConfig {
        match self.as_d2d() {
            Some(m) => {
                let c = &m.config;
                ArchConfig {
                    hidden: c.hidden,
                    dropout_hidden: c.dropout_hidden,
                    dropout_fc: c.dropout_fc,
                    terminal_targets: c.terminal_targets,
                    candidate_self_loop: c.candidate_self_loop,
                    forget_bias: c.forget_bias,
                    ..ArchConfig::default()
                }
            }
            None => {
                let AnyModel::Fc(m) = self else { unreachable!("as_d2d covers the recurrent kinds") };
                ArchConfig { fc_widths: m.config.widths, dropout_fc: m.config.dropout, ..ArchConfig::default() }
            }
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::D2dLstm(_) => ModelKind::D2dLstm,
            AnyModel::Lstm(_) => ModelKind::Lstm,
            AnyModel::Fc(_) => ModelKind::Fc,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            AnyModel::D2dLstm(m) => m.num_classes(),
            AnyModel::Lstm(m) => m.net.num_classes(),
            AnyModel::Fc(m) => m.num_classes(),
        }
    }

    /// Social input dimension.
    pub fn input_dim(&self) -> usize {
        match self {
            AnyModel::D2dLstm(m) => m.config.input_dim,
            AnyModel::Lstm(m) => m.net.config.input_dim,
            AnyModel::Fc(m) => m.config.input_dim,
        }
    }

    pub fn as_d2d(&self) -> Option<&D2dLstm> {
        match self {
            AnyModel::D2dLstm(m) => Some(m),
            AnyModel::Lstm(m) => Some(&m.net),
            AnyModel::Fc(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AnyModel::D2dLstm(m) => m.validate(),
            AnyModel::Lstm(m) => m.net.validate(),
            AnyModel::Fc(m) => {
                m.config.validate()?;
                for p in m.params() {
                    if p.value.iter().any(|v| !v.is_finite()) {
                        return Err(crate::Error::Input(format!("parameter {} has non-finite entries", p.name)));
                    }
                }
                Ok(())
            }
        }
    }
}

impl Parameters for AnyModel {
    fn params(&self) -> Vec<&Param> {
        match self {
            AnyModel::D2dLstm(m) => m.params(),
            AnyModel::Lstm(m) => m.params(),
            AnyModel::Fc(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            AnyModel::D2dLstm(m) => m.params_mut(),
            AnyModel::Lstm(m) => m.params_mut(),
            AnyModel::Fc(m) => m.params_mut(),
        }
    }
}
