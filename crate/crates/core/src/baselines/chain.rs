use rand::Rng;

use crate::cascade::DiffusionTree;
use crate::d2dlstm::{cell_backward, D2dLstm, ModelConfig, NodeCache, TreeGrads};
use crate::error::{input_err, Error, Result};
use crate::features::NUM_CATEGORIES;
use crate::nn::{add_outer, axpy, softmax_xent, DropoutMode, Param, Parameters, RowProjection};

/// A chain-structured LSTM over one root-to-leaf path. Step `t` reads the
/// input of path node `t` and predicts the prototype of node `t + 1`; the
/// last step predicts the terminal class.
///
/// The parameters are a [`D2dLstm`]'s, so a chain model and a tree model
/// can share weights exactly.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChainLstm {
    pub net: D2dLstm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainForward {
    pub content: Option<usize>,
    pub rows: Vec<usize>,
    pub c0: Vec<f64>,
    pub steps: Vec<NodeCache>,
}

impl Parameters for ChainLstm {
    fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }
}

impl ChainLstm {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self { net: D2dLstm::new(config, rng)? })
    }

    pub fn from_shared(net: D2dLstm) -> Self {
        Self { net }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn chain_forward(
        &self,
        content: Option<usize>,
        rows: &[usize],
        proj: &RowProjection,
        mode: DropoutMode,
        rng: &mut impl Rng,
    ) -> Result<ChainForward> {
        if rows.is_empty() {
            return input_err("chain forward on an empty path");
        }
        let net = &self.net;
        let c0 = net.initial_memory(content)?;
        let mut h = vec![0.0; net.hidden()];
        let mut c = c0.clone();
        let mut steps = Vec::with_capacity(rows.len());
        for &r in rows {
            let state = net.cell.step(proj.get(r)?, &h, &c, net.config.candidate_self_loop)?;
            let head = net.head(&state.h, mode, rng)?;
            h.clone_from(&state.h);
            c.clone_from(&state.c);
            steps.push(NodeCache { state, head });
        }
        Ok(ChainForward { content, rows: rows.to_vec(), c0, steps })
    }

    /// Mean cross-entropy over the steps and the per-step logit gradients.
    pub fn chain_loss(&self, fwd: &ChainForward, targets: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        let (loss, mut dl) = self.chain_loss_sum(fwd, targets)?;
        let inv = 1.0 / targets.len() as f64;
        dl.iter_mut().flatten().for_each(|v| *v *= inv);
        Ok((loss * inv, dl))
    }

    /// Summed cross-entropy over the steps and its logit gradients.
    pub fn chain_loss_sum(&self, fwd: &ChainForward, targets: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        if targets.len() != fwd.steps.len() {
            return input_err(format!("{} targets for a path of {} steps", targets.len(), fwd.steps.len()));
        }
        let mut loss = 0.0;
        let mut dl = Vec::with_capacity(targets.len());
        for (s, &t) in fwd.steps.iter().zip(targets) {
            let x = softmax_xent(&s.head.logits, t)?;
            loss += x.loss;
            dl.push(x.dlogits);
        }
        Ok((loss, dl))
    }

    /// Backpropagation through time along the path.
    pub fn chain_backward(&self, fwd: &ChainForward, dlogits: &[Vec<f64>]) -> Result<TreeGrads> {
        let n = fwd.steps.len();
        if dlogits.len() != n {
            return Err(Error::Internal(format!("{} logit gradients for {n} cached steps", dlogits.len())));
        }
        let net = &self.net;
        let h = net.hidden();
        let self_loop = net.config.candidate_self_loop;
        let rec_rows = if self_loop { 3 * h } else { 4 * h };
        let mut g = TreeGrads::zeros(net);
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let zero = vec![0.0; h];
        for t in (0..n).rev() {
            let step = &fwd.steps[t];
            let mut dh = net.head_backward(&step.head, &dlogits[t], &mut g);
            axpy(1.0, &dh_next, &mut dh);
            let (h_prev, c_prev) = if t == 0 {
                (&zero, &fwd.c0)
            } else {
                (&fwd.steps[t - 1].state.h, &fwd.steps[t - 1].state.c)
            };
            let cg = cell_backward(&step.state, c_prev, &dh, &dc_next, &net.cell, self_loop);
            add_outer(&mut g.u[..rec_rows * h], &cg.dz[..rec_rows], h_prev);
            axpy(1.0, &cg.dz, &mut g.b);
            g.w_rows.add(fwd.rows[t], &cg.dz);
            dh_next = cg.dh_pt;
            dc_next = cg.dc_pt;
        }
        for r in 0..h {
            if let Some(cat) = fwd.content {
                g.content_w[r * NUM_CATEGORIES + cat] += dc_next[r];
            }
            g.content_b[r] += dc_next[r];
        }
        Ok(g)
    }

    /// Eval-mode logits for every node of a tree: each root-to-leaf path is
    /// run separately and a node keeps the logits from the first path that
    /// reaches it.
    pub fn predict_tree(
        &self,
        tree: &DiffusionTree,
        content: Option<usize>,
        rows: &[usize],
        proj: &RowProjection,
    ) -> Result<Vec<Vec<f64>>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut out: Vec<Option<Vec<f64>>> = vec![None; tree.len()];
        for path in root_to_leaf_paths(tree) {
            let path_rows: Vec<usize> = path.iter().map(|&n| rows[n]).collect();
            let f = self.chain_forward(content, &path_rows, proj, DropoutMode::Eval, &mut rng)?;
            for (&n, s) in path.iter().zip(f.steps) {
                if out[n].is_none() {
                    out[n] = Some(s.head.logits);
                }
            }
        }
        Ok(out.into_iter().map(|l| l.expect("every node lies on a root-to-leaf path")).collect())
    }
}

/// Node ids of every root-to-leaf path, in preorder of the leaves.
pub fn root_to_leaf_paths(tree: &DiffusionTree) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut stack = vec![vec![tree.root]];
    while let Some(path) = stack.pop() {
        let last = *path.last().expect("paths are never empty");
        let children = &tree.nodes[last].children;
        if children.is_empty() {
            out.push(path);
            continue;
        }
        for &c in children.iter().rev() {
            let mut p = path.clone();
            p.push(c);
            stack.push(p);
        }
    }
    out
}

/// Class targets along a path: the next node's prototype, then terminal.
pub fn path_targets(tree: &DiffusionTree, path: &[usize], terminal_class: usize) -> Result<Vec<usize>> {
    let mut t = Vec::with_capacity(path.len());
    for &n in &path[1..] {
        t.push(tree.nodes[n].proto.ok_or_else(|| Error::Input(format!("node {n} has no prototype")))?);
    }
    t.push(terminal_class);
    Ok(t)
}
