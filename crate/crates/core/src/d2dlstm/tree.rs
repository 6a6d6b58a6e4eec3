use rand::Rng;

use super::cell::{cell_backward, CellState};
use super::{D2dLstm, Head};
use crate::cascade::DiffusionTree;
use crate::error::{input_err, Error, Result};
use crate::features::NUM_CATEGORIES;
use crate::nn::{add_outer, axpy, matvec_t_acc, softmax_xent, DropoutMode, InputTable, Param, RowGrads, RowProjection};

#[derive(Debug, Clone, PartialEq)]
pub struct NodeCache {
    pub state: CellState,
    pub head: Head,
}

/// Everything the backward pass needs from one forward pass over a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeForward {
    pub category: Option<usize>,
    /// Input-table row of every node.
    pub rows: Vec<usize>,
    pub parents: Vec<Option<usize>>,
    /// Preorder: parents before children.
    pub order: Vec<usize>,
    pub c0: Vec<f64>,
    pub nodes: Vec<NodeCache>,
}

impl TreeForward {
    pub fn logits(&self, node: usize) -> &[f64] {
        &self.nodes[node].head.logits
    }

    pub fn all_logits(&self) -> Vec<Vec<f64>> {
        self.nodes.iter().map(|n| n.head.logits.clone()).collect()
    }
}

/// Parameter gradients from one tree (or a sum over trees). The input
/// weight gradient is kept per input row; see [`RowGrads`].
#[derive(Debug, Clone, PartialEq)]
pub struct TreeGrads {
    pub w_rows: RowGrads,
    pub u: Vec<f64>,
    pub b: Vec<f64>,
    pub content_w: Vec<f64>,
    pub content_b: Vec<f64>,
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

impl TreeGrads {
    pub fn zeros(m: &D2dLstm) -> Self {
        let z = |p: &Param| vec![0.0; p.len()];
        Self {
            w_rows: RowGrads::default(),
            u: z(&m.cell.u),
            b: z(&m.cell.b),
            content_w: z(&m.content_w),
            content_b: z(&m.content_b),
            fc_w: z(&m.fc_w),
            fc_b: z(&m.fc_b),
            out_w: z(&m.out_w),
            out_b: z(&m.out_b),
        }
    }

    pub fn add_scaled(&mut self, other: &TreeGrads, scale: f64) {
        self.w_rows.merge(&other.w_rows, scale);
        for (a, b) in [
            (&mut self.u, &other.u),
            (&mut self.b, &other.b),
            (&mut self.content_w, &other.content_w),
            (&mut self.content_b, &other.content_b),
            (&mut self.fc_w, &other.fc_w),
            (&mut self.fc_b, &other.fc_b),
            (&mut self.out_w, &other.out_w),
            (&mut self.out_b, &other.out_b),
        ] {
            axpy(scale, b, a);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w_rows.scale(s);
        for v in [
            &mut self.u,
            &mut self.b,
            &mut self.content_w,
            &mut self.content_b,
            &mut self.fc_w,
            &mut self.fc_b,
            &mut self.out_w,
            &mut self.out_b,
        ] {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Adds `scale ·` these gradients into the model's `grad` buffers.
    pub fn apply(&self, m: &mut D2dLstm, table: &InputTable, scale: f64) {
        self.w_rows.apply(&mut m.cell.w, 0, table, scale);
        for (p, g) in [
            (&mut m.cell.u, &self.u),
            (&mut m.cell.b, &self.b),
            (&mut m.content_w, &self.content_w),
            (&mut m.content_b, &self.content_b),
            (&mut m.fc_w, &self.fc_w),
            (&mut m.fc_b, &self.fc_b),
            (&mut m.out_w, &self.out_w),
            (&mut m.out_b, &self.out_b),
        ] {
            p.ensure_buffers();
            axpy(scale, g, &mut p.grad);
        }
    }
}

/// Result of the backward pass over one tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeBackward {
    pub grads: TreeGrads,
    /// Total gradient reaching each node's hidden state: its own head plus
    /// the sum over its children.
    pub dh: Vec<Vec<f64>>,
    pub dc0: Vec<f64>,
}

impl D2dLstm {
    /// Projects the given input-table rows through the cell's input weights.
    pub fn project_inputs(&self, table: &InputTable, rows: impl IntoIterator<Item = usize>) -> Result<RowProjection> {
        RowProjection::new(&self.cell.w, 0, table, rows)
    }

    /// Forward pass over a tree whose node `n` reads input row `rows[n]`.
    /// `content` is the tree's category, or `None` when content is masked.
    pub fn tree_forward(
        &self,
        tree: &DiffusionTree,
        content: Option<usize>,
        rows: &[usize],
        proj: &RowProjection,
        mode: DropoutMode,
        rng: &mut impl Rng,
    ) -> Result<TreeForward> {
        if rows.len() != tree.len() {
            return input_err(format!("{} input rows for a tree of {} nodes", rows.len(), tree.len()));
        }
        let h = self.hidden();
        let c0 = self.initial_memory(content)?;
        let zero = vec![0.0; h];
        let order = tree.preorder();
        let parents = tree.parents();
        let mut nodes: Vec<Option<NodeCache>> = vec![None; tree.len()];
        for &n in &order {
            let (h_pt, c_pt) = match parents[n] {
                None => (&zero, &c0),
                Some(p) => {
                    let s = &nodes[p].as_ref().expect("preorder visits parents first").state;
                    (&s.h, &s.c)
                }
            };
            let state = self.cell.step(proj.get(rows[n])?, h_pt, c_pt, self.config.candidate_self_loop)?;
            let head = self.head(&state.h, mode, rng)?;
            nodes[n] = Some(NodeCache { state, head });
        }
        Ok(TreeForward {
            category: content,
            rows: rows.to_vec(),
            parents,
            order,
            c0,
            nodes: nodes.into_iter().map(|n| n.expect("every node visited")).collect(),
        })
    }

    /// Convenience forward pass from explicit per-node input vectors.
    pub fn tree_forward_inputs(
        &self,
        tree: &DiffusionTree,
        inputs: &[Vec<f64>],
        mode: DropoutMode,
        rng: &mut impl Rng,
    ) -> Result<(TreeForward, InputTable, RowProjection)> {
        let table = InputTable::new(self.config.input_dim, inputs)?;
        let proj = RowProjection::all(&self.cell.w, 0, &table)?;
        let rows: Vec<usize> = (0..inputs.len()).collect();
        let fwd = self.tree_forward(tree, Some(tree.category), &rows, &proj, mode, rng)?;
        Ok((fwd, table, proj))
    }

    /// Mean cross-entropy over all `(node, label)` pairs and its gradient
    /// with respect to every node's logits.
    pub fn tree_loss(&self, fwd: &TreeForward, targets: &[Vec<usize>]) -> Result<(f64, Vec<Vec<f64>>)> {
        let (sum, mut dlogits, count) = self.tree_loss_sum(fwd, targets)?;
        if count == 0 {
            return input_err("tree has no targets");
        }
        let inv = 1.0 / count as f64;
        dlogits.iter_mut().flatten().for_each(|v| *v *= inv);
        Ok((sum * inv, dlogits))
    }

    /// Summed cross-entropy, its logit gradients and the number of pairs.
    pub fn tree_loss_sum(&self, fwd: &TreeForward, targets: &[Vec<usize>]) -> Result<(f64, Vec<Vec<f64>>, usize)> {
        if targets.len() != fwd.nodes.len() {
            return input_err(format!("{} target lists for {} nodes", targets.len(), fwd.nodes.len()));
        }
        let n_cls = self.num_classes();
        let mut loss = 0.0;
        let mut count = 0;
        let mut dlogits = vec![vec![0.0; n_cls]; fwd.nodes.len()];
        for (n, ts) in targets.iter().enumerate() {
            for &t in ts {
                let x = softmax_xent(fwd.logits(n), t)?;
                loss += x.loss;
                axpy(1.0, &x.dlogits, &mut dlogits[n]);
                count += 1;
            }
        }
        Ok((loss, dlogits, count))
    }

    /// Backpropagates logit gradients through the head of node `n`,
    /// accumulating head weight gradients, and returns the gradient for `h`.
    pub(crate) fn head_backward(&self, head: &Head, dlogits: &[f64], g: &mut TreeGrads) -> Vec<f64> {
        let h = self.hidden();
        let n_cls = self.num_classes();
        add_outer(&mut g.out_w, dlogits, &head.a_in);
        axpy(1.0, dlogits, &mut g.out_b);
        let mut da = vec![0.0; h];
        matvec_t_acc(&self.out_w.value, n_cls, h, dlogits, &mut da);
        let dpre: Vec<f64> = (0..h).map(|j| da[j] * head.a_mask[j] * (1.0 - head.a[j] * head.a[j])).collect();
        add_outer(&mut g.fc_w, &dpre, &head.h_in);
        axpy(1.0, &dpre, &mut g.fc_b);
        let mut dh_in = vec![0.0; h];
        matvec_t_acc(&self.fc_w.value, h, h, &dpre, &mut dh_in);
        dh_in.iter_mut().zip(&head.h_mask).for_each(|(d, m)| *d *= m);
        dh_in
    }

    /// Backward pass given `dlogits[n]` for every node. Nodes are processed
    /// children first; each parent's state gradient is the sum of what its
    /// children send back plus its own head gradient.
    pub fn tree_backward(&self, fwd: &TreeForward, dlogits: &[Vec<f64>]) -> Result<TreeBackward> {
        let n = fwd.nodes.len();
        if dlogits.len() != n {
            return Err(Error::Internal(format!("{} logit gradients for {n} cached nodes", dlogits.len())));
        }
        let h = self.hidden();
        let self_loop = self.config.candidate_self_loop;
        let mut g = TreeGrads::zeros(self);
        let mut dh_acc = vec![vec![0.0; h]; n];
        let mut dc_acc = vec![vec![0.0; h]; n];
        let mut dc0 = vec![0.0; h];
        let zero = vec![0.0; h];
        for &node in fwd.order.iter().rev() {
            let cache = &fwd.nodes[node];
            if dlogits[node].iter().any(|&v| v != 0.0) {
                let dh_head = self.head_backward(&cache.head, &dlogits[node], &mut g);
                axpy(1.0, &dh_head, &mut dh_acc[node]);
            }
            let (h_pt, c_pt) = match fwd.parents[node] {
                None => (&zero, &fwd.c0),
                Some(p) => (&fwd.nodes[p].state.h, &fwd.nodes[p].state.c),
            };
            let cg = cell_backward(&cache.state, c_pt, &dh_acc[node], &dc_acc[node], &self.cell, self_loop);
            let rec_rows = if self_loop { 3 * h } else { 4 * h };
            add_outer(&mut g.u[..rec_rows * h], &cg.dz[..rec_rows], h_pt);
            axpy(1.0, &cg.dz, &mut g.b);
            g.w_rows.add(fwd.rows[node], &cg.dz);
            match fwd.parents[node] {
                Some(p) => {
                    axpy(1.0, &cg.dh_pt, &mut dh_acc[p]);
                    axpy(1.0, &cg.dc_pt, &mut dc_acc[p]);
                }
                None => axpy(1.0, &cg.dc_pt, &mut dc0),
            }
        }
        for r in 0..h {
            if let Some(cat) = fwd.category {
                g.content_w[r * NUM_CATEGORIES + cat] += dc0[r];
            }
            g.content_b[r] += dc0[r];
        }
        Ok(TreeBackward { grads: g, dh: dh_acc, dc0 })
    }

    /// Eval-mode logits for every node.
    pub fn predict_tree(
        &self,
        tree: &DiffusionTree,
        content: Option<usize>,
        rows: &[usize],
        proj: &RowProjection,
    ) -> Result<Vec<Vec<f64>>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Ok(self.tree_forward(tree, content, rows, proj, DropoutMode::Eval, &mut rng)?.all_logits())
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use crate::cascade::TerminalTargets;
    use crate::nn::{grad_check, GradCheckOptions, Parameters};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(hidden: usize, k: usize, d: usize, seed: u64) -> D2dLstm {
        let cfg = ModelConfig { hidden, input_dim: d, k, dropout_hidden: 0.3, dropout_fc: 0.2, ..Default::default() };
        let mut m = D2dLstm::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        // Move biases off zero so every path is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for p in m.params_mut() {
            if p.cols == 1 {
                p.value.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
            }
        }
        m
    }

    fn inputs(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()
    }

    fn seven_node_tree() -> DiffusionTree {
        DiffusionTree::from_parents(7, &[None, Some(0), Some(0), Some(1), Some(1), Some(2), Some(0)], &[0, 1, 2, 3, 2, 0, 1])
            .unwrap()
    }

    #[test]
    fn single_node_gives_one_logit_vector() {
        let m = model(4, 3, 5, 0);
        let t = DiffusionTree::single(0, None, Some(1));
        let (f, _, _) = m.tree_forward_inputs(&t, &inputs(1, 5, 1), DropoutMode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(f.nodes.len(), 1);
        assert_eq!(f.logits(0).len(), 4);
    }

    #[test]
    fn star_children_share_parent_state() {
        let m = model(4, 3, 5, 0);
        let t = DiffusionTree::from_parents(0, &[None, Some(0), Some(0), Some(0)], &[0, 1, 1, 1]).unwrap();
        let x = inputs(1, 5, 3);
        let xs = vec![x[0].clone(); 4];
        let (f, _, _) = m.tree_forward_inputs(&t, &xs, DropoutMode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(f.nodes[1].state, f.nodes[2].state);
        assert_eq!(f.nodes[2].state, f.nodes[3].state);
    }

    #[test]
    fn states_are_bounded() {
        let m = model(6, 3, 5, 4);
        let t = seven_node_tree();
        let (f, _, _) = m.tree_forward_inputs(&t, &inputs(7, 5, 2), DropoutMode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for n in &f.nodes {
            assert!(n.state.h.iter().all(|v| v.abs() < 1.0));
            assert!(n.state.i.iter().chain(&n.state.f).chain(&n.state.o).all(|&v| v > 0.0 && v < 1.0));
        }
    }

    fn check_gradients(m: &mut D2dLstm, t: &DiffusionTree, xs: &[Vec<f64>], drop_seed: u64) -> f64 {
        let targets = t.node_targets(m.config.k, TerminalTargets::Leaves).unwrap();
        let (f, table, _) = m.tree_forward_inputs(t, xs, DropoutMode::Train, &mut ChaCha8Rng::seed_from_u64(drop_seed)).unwrap();
        let (_, dl) = m.tree_loss(&f, &targets).unwrap();
        let back = m.tree_backward(&f, &dl).unwrap();
        m.zero_grad();
        back.grads.apply(m, &table, 1.0);
        let report = grad_check(
            m,
            |m| {
                let (f, _, _) = m.tree_forward_inputs(t, xs, DropoutMode::Train, &mut ChaCha8Rng::seed_from_u64(drop_seed)).unwrap();
                m.tree_loss(&f, &targets).unwrap().0
            },
            GradCheckOptions { tol: 1e-4, ..Default::default() },
        );
        assert!(report.passed, "{:?}", report.worst(3));
        report.max_rel_err
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = model(8, 5, 6, 11);
        check_gradients(&mut m, &seven_node_tree(), &inputs(7, 6, 5), 77);
    }

    #[test]
    fn gradients_with_self_loop_and_all_node_terminals() {
        let mut m = model(5, 4, 3, 12);
        m.config.candidate_self_loop = true;
        m.config.terminal_targets = TerminalTargets::AllNodes;
        check_gradients(&mut m, &seven_node_tree(), &inputs(7, 3, 6), 78);
    }

    #[test]
    fn child_gradients_add_at_parent() {
        let m = model(6, 4, 5, 21);
        let t = DiffusionTree::from_parents(2, &[None, Some(0), Some(0)], &[0, 1, 2]).unwrap();
        let (f, _, _) = m.tree_forward_inputs(&t, &inputs(3, 5, 8), DropoutMode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let only = |node: usize| {
            let mut targets = vec![vec![]; 3];
            targets[node] = vec![3];
            let (_, dl, _) = m.tree_loss_sum(&f, &targets).unwrap();
            m.tree_backward(&f, &dl).unwrap().dh[0].clone()
        };
        let (a, b) = (only(1), only(2));
        let (_, dl, _) = m.tree_loss_sum(&f, &[vec![], vec![3], vec![3]]).unwrap();
        let both = m.tree_backward(&f, &dl).unwrap().dh[0].clone();
        for j in 0..6 {
            assert!((both[j] - a[j] - b[j]).abs() < 1e-12);
        }
    }
}
