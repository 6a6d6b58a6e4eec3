//! Finite-difference check of the whole model on random small trees.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{D2dLstm, ModelConfig};
use crate::cascade::{DiffusionTree, TerminalTargets};
use crate::error::{Error, Result};
use crate::features::NUM_CATEGORIES;
use crate::nn::{grad_check, DropoutMode, GradCheckOptions, Parameters};
use crate::rng::{stream, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeCheckConfig {
    pub trees: usize,
    /// Largest tree size; sizes are uniform in `1..=max_nodes`.
    pub max_nodes: usize,
    pub hidden: usize,
    pub k: usize,
    pub input_dim: usize,
    pub dropout: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for TreeCheckConfig {
    fn default() -> Self {
        Self { trees: 100, max_nodes: 10, hidden: 8, k: 5, input_dim: 10, dropout: 0.2, tol: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeCheckReport {
    pub trees: usize,
    /// Parameter entries compared, summed over trees.
    pub entries: usize,
    pub max_rel_err: f64,
    /// Tensor holding the largest error.
    pub worst_tensor: String,
    /// Index of the tree with the largest error.
    pub worst_tree: usize,
    pub tol: f64,
    pub passed: bool,
}

/// A random tree of `1..=max_nodes` nodes with labels in `0..k`.
pub fn random_tree(rng: &mut impl Rng, max_nodes: usize, k: usize) -> DiffusionTree {
    let n = rng.gen_range(1..=max_nodes.max(1));
    let parents: Vec<Option<usize>> = (0..n).map(|i| (i > 0).then(|| rng.gen_range(0..i))).collect();
    let protos: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    DiffusionTree::from_parents(rng.gen_range(0..NUM_CATEGORIES), &parents, &protos).expect("parents precede children")
}

/// Checks every parameter entry of a freshly initialized model (biases
/// moved off their initial values) against central differences, once per
/// random tree, with dropout active under a fixed mask.
pub fn check_random_trees(cfg: &TreeCheckConfig) -> Result<TreeCheckReport> {
    if cfg.trees == 0 || cfg.max_nodes == 0 || cfg.k == 0 {
        return Err(Error::Config("trees, max_nodes and k must be positive".into()));
    }
    let results: Vec<Result<(usize, f64, String)>> = (0..cfg.trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, tags::INIT, i as u64);
            let mc = ModelConfig {
                hidden: cfg.hidden,
                input_dim: cfg.input_dim,
                k: cfg.k,
                dropout_hidden: cfg.dropout,
                dropout_fc: cfg.dropout,
                ..Default::default()
            };
            let mut m = D2dLstm::new(mc, &mut rng)?;
            for p in m.params_mut() {
                if p.cols == 1 {
                    p.value.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
                }
            }
            let t = random_tree(&mut rng, cfg.max_nodes, cfg.k);
            let xs: Vec<Vec<f64>> = (0..t.len()).map(|_| (0..cfg.input_dim).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let targets = t.node_targets(cfg.k, TerminalTargets::Leaves)?;
            let drop_seed = rng.gen::<u64>();
            let run = |m: &D2dLstm| {
                let mut r = stream(drop_seed, tags::DROPOUT, 0);
                m.tree_forward_inputs(&t, &xs, DropoutMode::Train, &mut r)
            };
            let (fwd, table, _) = run(&m)?;
            let (_, dl) = m.tree_loss(&fwd, &targets)?;
            let back = m.tree_backward(&fwd, &dl)?;
            m.zero_grad();
            back.grads.apply(&mut m, &table, 1.0);
            let report = grad_check(
                &mut m,
                |m| run(m).and_then(|(f, _, _)| m.tree_loss(&f, &targets)).map(|(l, _)| l).unwrap_or(f64::NAN),
                GradCheckOptions { tol: cfg.tol, max_entries_per_tensor: None, seed: cfg.seed, ..Default::default() },
            );
            let entries = report.tensors.iter().map(|t| t.checked).sum();
            let worst = report.worst(1).first().map(|t| t.name.clone()).unwrap_or_default();
            Ok((entries, report.max_rel_err, worst))
        })
        .collect();
    let mut out = TreeCheckReport {
        trees: cfg.trees,
        entries: 0,
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_tree: 0,
        tol: cfg.tol,
        passed: true,
    };
    for (i, r) in results.into_iter().enumerate() {
        let (entries, err, name) = r?;
        out.entries += entries;
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err > out.max_rel_err {
            out.max_rel_err = err;
            out.worst_tensor = name;
            out.worst_tree = i;
        }
    }
    out.passed = out.max_rel_err < cfg.tol;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes() {
        let r = check_random_trees(&TreeCheckConfig { trees: 5, ..Default::default() }).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.entries > 5 * 300);
    }

    #[test]
    fn random_trees_are_valid() {
        let mut rng = stream(1, 0, 0);
        for _ in 0..50 {
            let t = random_tree(&mut rng, 10, 3);
            t.validate().unwrap();
            assert!((1..=10).contains(&t.len()));
        }
    }
}
