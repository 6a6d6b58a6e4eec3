//! Training loop, evaluation, learning-rate schedule and experiment grids.
//!
//! Batches are reduced in a fixed order: units are processed in parallel
//! in fixed-size chunks, each chunk sums its gradients sequentially and the
//! chunk sums are added in chunk order. Every unit draws its dropout masks
//! from its own random stream. Results therefore do not depend on the
//! number of worker threads.

mod checkpoint;
mod data;
mod experiments;
mod learner;
mod metrics;

pub use checkpoint::{load_model, save_model, Checkpoint, ModelHeader, ParamEntry, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use data::{TrainData, TreeSet};
pub use experiments::{ablation_grid, ablation_plan, prototype_sweep, AblationReport, AblationRow, SweepInput, SweepReport, SweepRow};
pub use learner::{AnyModel, ArchConfig, Learner, ModelKind, Unit};
pub use metrics::{convergence_step, EpochRecord, EvalResult, MetricsHistory, StepRecord};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::FeatureMask;
use crate::error::{Error, Result};
use crate::nn::{argmax, logsumexp, Adam, AdamConfig, InputTable, Parameters, RowProjection};
use crate::rng::{stream, tags};

/// Units per sequential reduction chunk.
const CHUNK: usize = 4;

/// How the pairs of a batch are weighted in its loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Mean over each unit's pairs, then mean over the units, so every tree
    /// (or path) counts the same whatever its size.
    #[default]
    PerUnit,
    /// Mean over all pairs of the batch, so every pair counts the same.
    /// This is the weighting the reported accuracy uses.
    PerPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub arch: ArchConfig,
    pub lr_initial: f64,
    pub lr_reduced: f64,
    /// Epochs without enough validation improvement before the one-time
    /// learning-rate drop.
    pub plateau_patience: usize,
    /// Relative validation-loss improvement that counts as progress.
    pub min_rel_improvement: f64,
    pub epochs: usize,
    /// Trees per optimizer step (paths for the chain model).
    pub batch_size: usize,
    pub loss_weighting: LossWeighting,
    pub seed: u64,
    pub mask: FeatureMask,
    /// Validation trees scored after every step for the convergence measure.
    pub probe_trees: usize,
    pub convergence_window: usize,
    pub convergence_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::D2dLstm,
            arch: ArchConfig::default(),
            lr_initial: 0.1,
            lr_reduced: 0.01,
            plateau_patience: 3,
            min_rel_improvement: 1e-3,
            epochs: 60,
            batch_size: 32,
            loss_weighting: LossWeighting::PerUnit,
            seed: 0,
            mask: FeatureMask::FULL,
            probe_trees: 32,
            convergence_window: 20,
            convergence_tol: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_initial > self.lr_reduced && self.lr_reduced > 0.0) {
            return Err(Error::Config(format!(
                "need lr_initial > lr_reduced > 0, got {} and {}",
                self.lr_initial, self.lr_reduced
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// What the per-epoch callback sees.
pub struct EpochEvent<'a, M> {
    pub epoch: usize,
    pub model: &'a M,
    pub history: &'a MetricsHistory,
    /// True when this epoch has the best validation loss so far.
    pub is_best: bool,
}

/// Loss and accuracy over every `(node, label)` pair of a tree set.
pub fn evaluate<M: Learner>(model: &M, table: &InputTable, set: &TreeSet) -> Result<EvalResult> {
    if set.is_empty() {
        return Ok(EvalResult { loss: 0.0, accuracy: 0.0, pairs: 0 });
    }
    let proj = model.project(table, &mut set.rows.iter().flatten().copied())?;
    let per_tree: Vec<Result<(f64, usize, usize)>> = (0..set.len())
        .into_par_iter()
        .map(|t| {
            let logits = model.predict(set, t, &proj)?;
            let mut loss = 0.0;
            let (mut correct, mut pairs) = (0, 0);
            for (l, ts) in logits.iter().zip(&set.targets[t]) {
                if ts.is_empty() {
                    continue;
                }
                let lse = logsumexp(l);
                let best = argmax(l);
                for &target in ts {
                    loss += lse - l[target];
                    correct += usize::from(target == best);
                    pairs += 1;
                }
            }
            Ok((loss, correct, pairs))
        })
        .collect();
    let (mut loss, mut correct, mut pairs) = (0.0, 0, 0);
    for r in per_tree {
        let (l, c, p) = r?;
        loss += l;
        correct += c;
        pairs += p;
    }
    if pairs == 0 {
        return Ok(EvalResult { loss: 0.0, accuracy: 0.0, pairs });
    }
    Ok(EvalResult { loss: loss / pairs as f64, accuracy: correct as f64 / pairs as f64, pairs })
}

/// Batch loss under `weighting`, the summed weighted gradients and the
/// divisor that turns them into the mean.
fn batch_grads<M: Learner>(
    model: &M,
    set: &TreeSet,
    units: &[&Unit],
    proj: &RowProjection,
    seed: u64,
    first_index: u64,
    weighting: LossWeighting,
) -> Result<(f64, M::Grads, f64)> {
    let chunks: Vec<Result<(f64, M::Grads, usize)>> = units
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc: Option<(f64, M::Grads, usize)> = None;
            for (j, u) in chunk.iter().enumerate() {
                let idx = first_index + (ci * CHUNK + j) as u64;
                let mut rng = stream(seed, tags::DROPOUT, idx);
                let (l, mut g, pairs) = model.unit_grads(set, u, proj, &mut rng)?;
                if pairs == 0 {
                    return Err(Error::Input(format!("training unit of tree {} has no targets", u.tree())));
                }
                let w = match weighting {
                    LossWeighting::PerUnit => 1.0 / pairs as f64,
                    LossWeighting::PerPair => 1.0,
                };
                match acc.as_mut() {
                    None => {
                        if w != 1.0 {
                            M::scale_grads(&mut g, w);
                        }
                        acc = Some((l * w, g, pairs));
                    }
                    Some((al, ag, ap)) => {
                        *al += l * w;
                        M::add_grads(ag, &g, w);
                        *ap += pairs;
                    }
                }
            }
            acc.ok_or_else(|| Error::Internal("empty reduction chunk".into()))
        })
        .collect();
    let mut total: Option<(f64, M::Grads, usize)> = None;
    for c in chunks {
        let (l, g, p) = c?;
        match total.as_mut() {
            None => total = Some((l, g, p)),
            Some((tl, tg, tp)) => {
                *tl += l;
                M::add_grads(tg, &g, 1.0);
                *tp += p;
            }
        }
    }
    let (l, g, pairs) = total.ok_or_else(|| Error::Internal("empty batch".into()))?;
    let denom = match weighting {
        LossWeighting::PerUnit => units.len() as f64,
        LossWeighting::PerPair => pairs as f64,
    };
    Ok((l / denom, g, denom))
}

fn param_norms<M: Parameters>(model: &M) -> String {
    model.params().iter().map(|p| format!("{}={:.3e}", p.name, p.norm())).collect::<Vec<_>>().join(", ")
}

/// Trains `model` in place of a copy and returns it with its history.
pub fn train_model<M: Learner>(
    config: &TrainConfig,
    data: &TrainData,
    mut model: M,
    on_epoch: &mut dyn FnMut(EpochEvent<'_, M>) -> Result<()>,
) -> Result<(M, MetricsHistory)> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Input("no training trees".into()));
    }
    let units = model.units(&data.train);
    let probe = data.val.head(config.probe_trees);
    let mut adam = Adam::new(AdamConfig::default());
    let mut lr = config.lr_initial;
    let mut best = f64::INFINITY;
    let mut bad_epochs = 0;
    let mut hist = MetricsHistory::default();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..units.len()).collect();
        order.shuffle(&mut stream(config.seed, tags::SHUFFLE, epoch as u64));
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let batch_units: Vec<&Unit> = batch.iter().map(|&i| &units[i]).collect();
            let proj = model.project(&data.table, &mut batch_units.iter().flat_map(|u| data.train.rows[u.tree()].iter().copied()))?;
            let first = ((epoch - 1) * units.len() + b * config.batch_size) as u64;
            let (loss, grads, denom) =
                batch_grads(&model, &data.train, &batch_units, &proj, config.seed, first, config.loss_weighting)?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, detail: format!("loss {loss}; parameter norms: {}", param_norms(&model)) });
            }
            model.zero_grad();
            model.apply_grads(&grads, &data.table, 1.0 / denom);
            if model.params().iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
                return Err(Error::Diverged { step, detail: format!("non-finite gradient; parameter norms: {}", param_norms(&model)) });
            }
            adam.step(&mut model, lr)?;
            let probe_loss = if probe.is_empty() { None } else { Some(evaluate(&model, &data.table, &probe)?.loss) };
            hist.steps.push(StepRecord { step, epoch, lr, train_loss: loss, probe_loss });
        }
        let train = evaluate(&model, &data.table, &data.train)?;
        let val = evaluate(&model, &data.table, &data.val)?;
        let test = evaluate(&model, &data.table, &data.test)?;
        if !val.loss.is_finite() {
            return Err(Error::Diverged { step, detail: format!("validation loss {}; parameter norms: {}", val.loss, param_norms(&model)) });
        }
        hist.epochs.push(EpochRecord { epoch, lr, steps: step, train, val, test });
        let is_best = val.loss < best;
        if val.loss < best * (1.0 - config.min_rel_improvement) {
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
        }
        if is_best {
            best = val.loss;
            hist.best_val_epoch = Some(epoch);
        }
        if hist.lr_reduced_after_epoch.is_none() && bad_epochs >= config.plateau_patience {
            lr = config.lr_reduced;
            hist.lr_reduced_after_epoch = Some(epoch);
        }
        on_epoch(EpochEvent { epoch, model: &model, history: &hist, is_best })?;
    }
    let series = hist.probe_series();
    let series = if series.is_empty() { hist.steps.iter().map(|s| s.train_loss).collect() } else { series };
    hist.convergence_step = convergence_step(&series, config.convergence_window, config.convergence_tol);
    Ok((model, hist))
}

/// Builds a fresh model of `config.model` and trains it.
pub fn train(
    config: &TrainConfig,
    data: &TrainData,
    on_epoch: &mut dyn FnMut(EpochEvent<'_, AnyModel>) -> Result<()>,
) -> Result<(AnyModel, MetricsHistory)> {
    let mut rng = stream(config.seed, tags::INIT, 0);
    let model = AnyModel::init(config.model, &config.arch, data.input_dim(), data.k, &mut rng)?;
    train_any(config, data, model, on_epoch)
}

/// Trains an existing model of any kind.
pub fn train_any(
    config: &TrainConfig,
    data: &TrainData,
    model: AnyModel,
    on_epoch: &mut dyn FnMut(EpochEvent<'_, AnyModel>) -> Result<()>,
) -> Result<(AnyModel, MetricsHistory)> {
    macro_rules! run {
        ($m:expr, $wrap:path) => {{
            let (m, h) = train_model(config, data, $m, &mut |e| {
                let wrapped = $wrap(e.model.clone());
                on_epoch(EpochEvent { epoch: e.epoch, model: &wrapped, history: e.history, is_best: e.is_best })
            })?;
            Ok(($wrap(m), h))
        }};
    }
    match model {
        AnyModel::D2dLstm(m) => run!(m, AnyModel::D2dLstm),
        AnyModel::Lstm(m) => run!(m, AnyModel::Lstm),
        AnyModel::Fc(m) => run!(m, AnyModel::Fc),
    }
}

pub fn evaluate_any(model: &AnyModel, table: &InputTable, set: &TreeSet) -> Result<EvalResult> {
    match model {
        AnyModel::D2dLstm(m) => evaluate(m, table, set),
        AnyModel::Lstm(m) => evaluate(m, table, set),
        AnyModel::Fc(m) => evaluate(m, table, set),
    }
}

/// A callback that does nothing.
pub fn no_callback<M>(_: EpochEvent<'_, M>) -> Result<()> {
    Ok(())
}
