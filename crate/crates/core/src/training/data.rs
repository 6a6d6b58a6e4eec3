use crate::baselines::FeatureMask;
use crate::cascade::{DatasetSplit, DiffusionTree, TerminalTargets};
use crate::error::{input_err, Result};
use crate::nn::InputTable;
use crate::prototypes::PrototypeModel;

/// Prototype-labeled trees with their per-node input rows and class targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSet {
    pub trees: Vec<DiffusionTree>,
    /// Input-table row of every node (its prototype).
    pub rows: Vec<Vec<usize>>,
    pub targets: Vec<Vec<Vec<usize>>>,
    pub terminal_class: usize,
    pub use_content: bool,
}

impl TreeSet {
    pub fn new(trees: Vec<DiffusionTree>, k: usize, policy: TerminalTargets, use_content: bool) -> Result<Self> {
        let mut rows = Vec::with_capacity(trees.len());
        let mut targets = Vec::with_capacity(trees.len());
        for t in &trees {
            let p = t.protos()?;
            if let Some(&bad) = p.iter().find(|&&p| p >= k) {
                return input_err(format!("prototype {bad} out of range for k = {k}"));
            }
            rows.push(p);
            targets.push(t.node_targets(k, policy)?);
        }
        Ok(Self { trees, rows, targets, terminal_class: k, use_content })
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn content(&self, t: usize) -> Option<usize> {
        self.use_content.then_some(self.trees[t].category)
    }

    /// Number of `(node, label)` pairs.
    pub fn pairs(&self) -> usize {
        self.targets.iter().flatten().map(Vec::len).sum()
    }

    /// Sub-set of the first `n` trees.
    pub fn head(&self, n: usize) -> TreeSet {
        let n = n.min(self.len());
        TreeSet {
            trees: self.trees[..n].to_vec(),
            rows: self.rows[..n].to_vec(),
            targets: self.targets[..n].to_vec(),
            terminal_class: self.terminal_class,
            use_content: self.use_content,
        }
    }
}

/// Masked prototype inputs plus the three tree sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub table: InputTable,
    pub k: usize,
    pub mask: FeatureMask,
    pub train: TreeSet,
    pub val: TreeSet,
    pub test: TreeSet,
}

impl TrainData {
    pub fn new(protos: &PrototypeModel, split: &DatasetSplit, mask: FeatureMask, policy: TerminalTargets) -> Result<Self> {
        Self::from_table(protos.input_table()?, split, mask, policy)
    }

    /// `table` holds one unmasked input row per prototype.
    pub fn from_table(mut table: InputTable, split: &DatasetSplit, mask: FeatureMask, policy: TerminalTargets) -> Result<Self> {
        let k = table.len();
        table.map_rows(|r| mask.apply_social(r));
        let set = |t: &Vec<DiffusionTree>| TreeSet::new(t.clone(), k, policy, mask.use_content);
        Ok(Self { k, mask, train: set(&split.train)?, val: set(&split.val)?, test: set(&split.test)?, table })
    }

    pub fn input_dim(&self) -> usize {
        self.table.dim()
    }
}
