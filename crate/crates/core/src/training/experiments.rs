use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{train, no_callback, ModelKind, TrainConfig, TrainData};
use crate::baselines::FeatureMask;
use crate::cascade::{label_trees, split, DatasetSplit, DiffusionTree};
use crate::error::Result;
use crate::features::UserId;
use crate::nn::InputTable;
use crate::prototypes::{build_prototypes, map_users};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: ModelKind,
    pub mask: FeatureMask,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub memory: bool,
    pub convergence_step: usize,
    pub total_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "Yes"
    } else {
        "No"
    }
}

impl AblationReport {
    /// The row for a model kind and mask, if present.
    pub fn find(&self, model: ModelKind, mask: FeatureMask) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.model == model && r.mask == mask)
    }

    pub const COLUMNS: [&'static str; 12] = [
        "Model", "Content", "Type", "Share", "Time", "Region", "Train Acc", "Test Acc", "Train Loss", "Test Loss", "Memory",
        "Convergence Step",
    ];

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let m = r.mask;
                vec![
                    r.model.name().to_string(),
                    yes_no(m.use_content).into(),
                    yes_no(m.use_type).into(),
                    yes_no(m.use_share).into(),
                    yes_no(m.use_time).into(),
                    yes_no(m.use_region).into(),
                    format!("{:.3}%", 100.0 * r.train_accuracy),
                    format!("{:.3}%", 100.0 * r.test_accuracy),
                    format!("{:.4}", r.train_loss),
                    format!("{:.4}", r.test_loss),
                    yes_no(r.memory).into(),
                    r.convergence_step.to_string(),
                ]
            })
            .collect()
    }

    /// Aligned text table.
    pub fn to_text(&self) -> String {
        let rows = self.cells();
        let mut widths: Vec<usize> = Self::COLUMNS.iter().map(|c| c.len()).collect();
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: Vec<&str>| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                if i > 0 {
                    s += " | ";
                }
                let _ = write!(s, "{c:<w$}");
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = line(Self::COLUMNS.to_vec());
        out += &(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-") + "\n");
        for r in &rows {
            out += &line(r.iter().map(String::as_str).collect());
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = "model,content,type,share,time,region,train_accuracy,test_accuracy,train_loss,test_loss,memory,convergence_step\n".to_string();
        for r in &self.rows {
            let m = r.mask;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.model.name(),
                m.use_content,
                m.use_type,
                m.use_share,
                m.use_time,
                m.use_region,
                r.train_accuracy,
                r.test_accuracy,
                r.train_loss,
                r.test_loss,
                r.memory,
                r.convergence_step
            );
        }
        out
    }
}

/// The six model/mask combinations of the comparison table, in order.
pub fn ablation_plan() -> Vec<(ModelKind, FeatureMask)> {
    vec![
        (ModelKind::Fc, FeatureMask::FULL),
        (ModelKind::Lstm, FeatureMask::FULL),
        (ModelKind::D2dLstm, FeatureMask::with_time_region(false, false)),
        (ModelKind::D2dLstm, FeatureMask::with_time_region(true, false)),
        (ModelKind::D2dLstm, FeatureMask::with_time_region(false, true)),
        (ModelKind::D2dLstm, FeatureMask::FULL),
    ]
}

/// Trains every row of [`ablation_plan`] with the same seed and data.
/// `table` holds the unmasked prototype inputs. `progress` is called after
/// each finished row.
pub fn ablation_grid(
    base: &TrainConfig,
    table: &InputTable,
    data: &DatasetSplit,
    progress: &mut dyn FnMut(&AblationRow),
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (model, mask) in ablation_plan() {
        let cfg = TrainConfig { model, mask, ..base.clone() };
        let td = TrainData::from_table(table.clone(), data, mask, cfg.arch.terminal_targets)?;
        let (_, h) = train(&cfg, &td, &mut no_callback)?;
        let last = h.last().expect("at least one epoch");
        let row = AblationRow {
            model,
            mask,
            train_accuracy: last.train.accuracy,
            test_accuracy: last.test.accuracy,
            train_loss: last.train.loss,
            test_loss: last.test.loss,
            memory: model.has_memory(),
            convergence_step: h.convergence_step,
            total_steps: h.total_steps(),
        };
        progress(&row);
        rows.push(row);
    }
    Ok(AblationReport { rows })
}

/// Inputs shared by every point of a prototype-count sweep.
#[derive(Debug, Clone)]
pub struct SweepInput {
    /// Normalized social features per user.
    pub features: BTreeMap<UserId, Vec<f64>>,
    /// Trees with user ids (labels are replaced for every `k`).
    pub trees: Vec<DiffusionTree>,
    pub split_ratios: (f64, f64, f64),
    pub split_seed: u64,
    pub cluster_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub convergence_step: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Values of `k` that were skipped, with the reason.
    pub skipped: Vec<(usize, String)>,
}

impl SweepReport {
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.iter().max_by(|a, b| a.test_accuracy.total_cmp(&b.test_accuracy))
    }

    pub fn get(&self, k: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:>6} | {:>9} | {:>9} | {:>9} | {:>11}\n", "k", "Train Acc", "Test Acc", "Test Loss", "Conv. Step");
        s += &format!("{}\n", "-".repeat(56));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6} | {:>8.3}% | {:>8.3}% | {:>9.4} | {:>11}",
                r.k,
                100.0 * r.train_accuracy,
                100.0 * r.test_accuracy,
                r.test_loss,
                r.convergence_step
            );
        }
        for (k, why) in &self.skipped {
            let _ = writeln!(s, "{k:>6} | skipped: {why}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = "k,train_accuracy,test_accuracy,test_loss,convergence_step\n".to_string();
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.k, r.train_accuracy, r.test_accuracy, r.test_loss, r.convergence_step);
        }
        s
    }
}

/// Re-clusters the users for every `k`, relabels the trees and trains a
/// fresh model. The split assigns the same trees to each part for every
/// `k`.
pub fn prototype_sweep(
    ks: &[usize],
    input: &SweepInput,
    base: &TrainConfig,
    progress: &mut dyn FnMut(&SweepRow),
) -> Result<SweepReport> {
    let users: Vec<Vec<f64>> = input.features.values().cloned().collect();
    let mut report = SweepReport::default();
    for &k in ks {
        if k == 0 || k > users.len() {
            report.skipped.push((k, format!("k must be in [1, {}]", users.len())));
            continue;
        }
        let protos = build_prototypes(&users, k, input.cluster_seed)?;
        let map = map_users(&input.features, &protos)?;
        let mut trees = input.trees.clone();
        label_trees(&mut trees, &map)?;
        let parts = split(&trees, input.split_ratios, input.split_seed)?;
        let td = TrainData::new(&protos, &parts, base.mask, base.arch.terminal_targets)?;
        let (_, h) = train(base, &td, &mut no_callback)?;
        let last = h.last().expect("at least one epoch");
        let row = SweepRow {
            k,
            train_accuracy: last.train.accuracy,
            test_accuracy: last.test.accuracy,
            test_loss: last.test.loss,
            convergence_step: h.convergence_step,
        };
        progress(&row);
        report.rows.push(row);
    }
    Ok(report)
}
