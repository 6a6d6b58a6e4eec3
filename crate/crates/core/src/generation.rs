//! Growing whole trees from a trained model, and scoring them against the
//! observed tree.
//!
//! Generation starts from a root prototype and a content category. Every
//! node feeds its prototype's input row to the model; the resulting class
//! distribution decides the node's children. Depth and branching caps keep
//! every tree finite.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::distributions::{Distribution, WeightedIndex};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::DiffusionTree;
use crate::d2dlstm::D2dLstm;
use crate::error::{input_err, Error, Result};
use crate::features::NUM_CATEGORIES;
use crate::nn::{argmax, softmax, InputTable};
use crate::rng::{stream, tags};
use crate::training::AnyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    /// One argmax per node: a leaf when it is the terminal class, otherwise
    /// exactly one child of that class.
    Greedy,
    /// Independent draws until the terminal class or the branching cap.
    #[default]
    Sample,
}

impl std::str::FromStr for GenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "sample" => Ok(Self::Sample),
            _ => Err(Error::Config(format!("unknown generation mode {s:?} (expected greedy or sample)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub mode: GenMode,
    pub max_depth: usize,
    pub max_branch: usize,
    /// Softmax temperature for sampling.
    pub temperature: f64,
    /// Feed the content category to the model. Turn off for models trained
    /// without content.
    pub use_content: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { mode: GenMode::Sample, max_depth: 6, max_branch: 4, temperature: 1.0, use_content: true, seed: 0 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 || self.max_branch == 0 {
            return Err(Error::Config("max_depth and max_branch must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    /// Largest possible node count under the caps.
    pub fn node_cap(&self) -> usize {
        (0..=self.max_depth).fold(0usize, |acc, d| acc.saturating_add(self.max_branch.saturating_pow(d as u32)))
    }
}

/// Recurrent state carried from a parent to its children.
#[derive(Clone)]
enum State {
    Lstm { h: Vec<f64>, c: Vec<f64> },
    Stateless,
}

struct Stepper<'a> {
    model: &'a AnyModel,
    table: &'a InputTable,
    content: Option<usize>,
    zx: HashMap<usize, Vec<f64>>,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a AnyModel, table: &'a InputTable, content: Option<usize>) -> Result<Self> {
        if table.dim() != model.input_dim() {
            return input_err(format!("input table has dimension {}, model expects {}", table.dim(), model.input_dim()));
        }
        if let Some(c) = content {
            if c >= NUM_CATEGORIES {
                return input_err(format!("category {c} outside [0, {NUM_CATEGORIES})"));
            }
        }
        Ok(Self { model, table, content, zx: HashMap::new() })
    }

    fn root_state(&self) -> Result<State> {
        Ok(match self.model {
            AnyModel::D2dLstm(m) => lstm_root(m, self.content)?,
            AnyModel::Lstm(m) => lstm_root(&m.net, self.content)?,
            AnyModel::Fc(_) => State::Stateless,
        })
    }

    /// The node's own state and the logits for its children.
    fn step(&mut self, proto: usize, parent: &State) -> Result<(State, Vec<f64>)> {
        if proto >= self.table.len() {
            return input_err(format!("prototype {proto} outside the input table ({} rows)", self.table.len()));
        }
        match (self.model, parent) {
            (AnyModel::D2dLstm(m), State::Lstm { h, c }) => self.lstm_step(m, proto, h, c),
            (AnyModel::Lstm(m), State::Lstm { h, c }) => self.lstm_step(&m.net, proto, h, c),
            (AnyModel::Fc(m), State::Stateless) => {
                let mut x = vec![0.0; NUM_CATEGORIES];
                if let Some(c) = self.content {
                    x[c] = 1.0;
                }
                x.extend_from_slice(self.table.row(proto));
                Ok((State::Stateless, m.fc_forward(&x)?))
            }
            _ => Err(Error::Internal("state does not match the model kind".into())),
        }
    }

    fn lstm_step(&mut self, m: &D2dLstm, proto: usize, h: &[f64], c: &[f64]) -> Result<(State, Vec<f64>)> {
        if !self.zx.contains_key(&proto) {
            let z = m.cell.project(self.table.row(proto))?;
            self.zx.insert(proto, z);
        }
        let s = m.cell.step(&self.zx[&proto], h, c, m.config.candidate_self_loop)?;
        let logits = m.head_logits(&s.h)?;
        Ok((State::Lstm { h: s.h, c: s.c }, logits))
    }
}

fn lstm_root(m: &D2dLstm, content: Option<usize>) -> Result<State> {
    Ok(State::Lstm { h: vec![0.0; m.hidden()], c: m.initial_memory(content)? })
}

fn tempered(logits: &[f64], temperature: f64) -> Vec<f64> {
    softmax(&logits.iter().map(|l| l / temperature).collect::<Vec<_>>())
}

fn grow(
    model: &AnyModel,
    table: &InputTable,
    root_proto: usize,
    category: usize,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DiffusionTree> {
    cfg.validate()?;
    let k = model.num_classes() - 1;
    if root_proto >= k {
        return input_err(format!("root prototype {root_proto} outside [0, {k})"));
    }
    let mut stepper = Stepper::new(model, table, cfg.use_content.then_some(category))?;
    let mut parents: Vec<Option<usize>> = vec![None];
    let mut protos = vec![root_proto];
    let mut depth = vec![0usize];
    let mut states = vec![stepper.root_state()?];
    let mut stack = vec![0usize];
    while let Some(i) = stack.pop() {
        let parent_state = match parents[i] {
            Some(p) => states[p].clone(),
            None => states[0].clone(),
        };
        let (state, logits) = stepper.step(protos[i], &parent_state)?;
        states[i] = state;
        if depth[i] >= cfg.max_depth {
            continue;
        }
        let mut kids = Vec::new();
        match cfg.mode {
            GenMode::Greedy => {
                let c = argmax(&logits);
                if c < k {
                    kids.push(c);
                }
            }
            GenMode::Sample => {
                let dist = WeightedIndex::new(tempered(&logits, cfg.temperature))
                    .map_err(|e| Error::Internal(format!("class distribution: {e}")))?;
                while kids.len() < cfg.max_branch {
                    let c = dist.sample(rng);
                    if c == k {
                        break;
                    }
                    kids.push(c);
                }
            }
        }
        let first = protos.len();
        for c in kids {
            parents.push(Some(i));
            protos.push(c);
            depth.push(depth[i] + 1);
            states.push(State::Stateless);
        }
        stack.extend((first..protos.len()).rev());
    }
    DiffusionTree::from_parents(category, &parents, &protos)
}

/// One tree grown from `root_proto` for content of `category`. `table`
/// holds the model's input row for every prototype, masked the same way as
/// in training.
pub fn generate_tree(
    model: &AnyModel,
    table: &InputTable,
    root_proto: usize,
    category: usize,
    cfg: &GenConfig,
) -> Result<DiffusionTree> {
    grow(model, table, root_proto, category, cfg, &mut stream(cfg.seed, tags::GENERATE, 0))
}

/// One tree per `(root prototype, category)` request. Request `i` draws from
/// its own random stream, so the output does not depend on thread count.
pub fn generate_trees(
    model: &AnyModel,
    table: &InputTable,
    requests: &[(usize, usize)],
    cfg: &GenConfig,
) -> Result<Vec<DiffusionTree>> {
    requests
        .par_iter()
        .enumerate()
        .map(|(i, &(root, cat))| grow(model, table, root, cat, cfg, &mut stream(cfg.seed, tags::GENERATE, i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    /// Matched, same prototype.
    Correct,
    /// Matched, different prototype.
    Wrong,
    /// Observed but not predicted.
    Missing,
    /// Predicted but not observed.
    Extra,
}

impl Tag {
    pub fn color(self) -> &'static str {
        match self {
            Tag::Correct => "green",
            Tag::Wrong => "red",
            Tag::Missing => "gray",
            Tag::Extra => "orange",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeDiff {
    pub correct: usize,
    pub wrong: usize,
    pub missing: usize,
    pub extra: usize,
    /// Tag of every predicted node, by node id.
    pub predicted_tags: Vec<Tag>,
    /// Tag of every observed node, by node id.
    pub truth_tags: Vec<Tag>,
    /// Observed partner of every matched predicted node.
    pub matches: Vec<(usize, usize)>,
}

impl TreeDiff {
    pub fn is_identical(&self) -> bool {
        self.wrong == 0 && self.missing == 0 && self.extra == 0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("diff serializes")
    }
}

fn mark_subtree(t: &DiffusionTree, n: usize, tag: Tag, tags: &mut [Option<Tag>]) {
    let mut stack = vec![n];
    while let Some(i) = stack.pop() {
        tags[i] = Some(tag);
        stack.extend(&t.nodes[i].children);
    }
}

/// Greedy level-order matching. Roots are matched. The children of a
/// matched pair are first paired by equal prototype, then the leftovers are
/// paired in order as wrong guesses. Unpaired observed subtrees are
/// missing and unpaired predicted subtrees are extra.
pub fn compare_trees(predicted: &DiffusionTree, truth: &DiffusionTree) -> Result<TreeDiff> {
    let pp = predicted.protos()?;
    let tp = truth.protos()?;
    let mut ptags: Vec<Option<Tag>> = vec![None; predicted.len()];
    let mut ttags: Vec<Option<Tag>> = vec![None; truth.len()];
    let mut matches = Vec::new();
    let mut queue = std::collections::VecDeque::from([(predicted.root, truth.root)]);
    while let Some((a, b)) = queue.pop_front() {
        let tag = if pp[a] == tp[b] { Tag::Correct } else { Tag::Wrong };
        ptags[a] = Some(tag);
        ttags[b] = Some(tag);
        matches.push((a, b));
        let pk = &predicted.nodes[a].children;
        let tk = &truth.nodes[b].children;
        let mut t_used = vec![false; tk.len()];
        let mut p_left = Vec::new();
        for &c in pk {
            match (0..tk.len()).find(|&j| !t_used[j] && tp[tk[j]] == pp[c]) {
                Some(j) => {
                    t_used[j] = true;
                    queue.push_back((c, tk[j]));
                }
                None => p_left.push(c),
            }
        }
        let mut t_left = (0..tk.len()).filter(|&j| !t_used[j]).map(|j| tk[j]);
        for c in p_left {
            match t_left.next() {
                Some(t) => queue.push_back((c, t)),
                None => mark_subtree(predicted, c, Tag::Extra, &mut ptags),
            }
        }
        for t in t_left {
            mark_subtree(truth, t, Tag::Missing, &mut ttags);
        }
    }
    let ptags: Vec<Tag> = ptags.into_iter().map(|t| t.expect("every predicted node is tagged")).collect();
    let ttags: Vec<Tag> = ttags.into_iter().map(|t| t.expect("every observed node is tagged")).collect();
    let count = |tags: &[Tag], x: Tag| tags.iter().filter(|&&t| t == x).count();
    Ok(TreeDiff {
        correct: count(&ptags, Tag::Correct),
        wrong: count(&ptags, Tag::Wrong),
        missing: count(&ttags, Tag::Missing),
        extra: count(&ptags, Tag::Extra),
        predicted_tags: ptags,
        truth_tags: ttags,
        matches,
    })
}

/// Graphviz rendering of a comparison: predicted nodes colored by tag, and
/// missing observed nodes drawn gray and dotted under their nearest
/// matched ancestor.
pub fn diff_to_dot(predicted: &DiffusionTree, truth: &DiffusionTree, diff: &TreeDiff) -> Result<String> {
    let pp = predicted.protos()?;
    let tp = truth.protos()?;
    let partner: HashMap<usize, usize> = diff.matches.iter().map(|&(a, b)| (b, a)).collect();
    let pred_of: HashMap<usize, usize> = diff.matches.iter().copied().collect();
    let mut s = String::from("digraph diff {\n  node [shape=circle, style=filled, fontcolor=white];\n");
    for (i, tag) in diff.predicted_tags.iter().enumerate() {
        let label = match (tag, pred_of.get(&i)) {
            (Tag::Wrong, Some(&t)) => format!("{}/{}", pp[i], tp[t]),
            _ => pp[i].to_string(),
        };
        let _ = writeln!(s, "  p{i} [label=\"{label}\", fillcolor={}];", tag.color());
    }
    for (i, n) in predicted.nodes.iter().enumerate() {
        for c in &n.children {
            let _ = writeln!(s, "  p{i} -> p{c};");
        }
    }
    for (i, tag) in diff.truth_tags.iter().enumerate() {
        if *tag != Tag::Missing {
            continue;
        }
        let _ = writeln!(s, "  t{i} [label=\"{}\", fillcolor={}, style=\"filled,dotted\"];", tp[i], tag.color());
    }
    let parents = truth.parents();
    for (i, tag) in diff.truth_tags.iter().enumerate() {
        if *tag != Tag::Missing {
            continue;
        }
        if let Some(p) = parents[i] {
            let from = match partner.get(&p) {
                Some(a) => format!("p{a}"),
                None => format!("t{p}"),
            };
            let _ = writeln!(s, "  {from} -> t{i} [style=dotted, color=gray];");
        }
    }
    s += "}\n";
    Ok(s)
}
