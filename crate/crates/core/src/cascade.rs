//! Diffusion trees: reconstruction from transfer logs, JSON Lines I/O and
//! dataset splitting.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::features::{TransferRecord, UserId, NUM_CATEGORIES};
use crate::io;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub user: Option<UserId>,
    pub proto: Option<usize>,
    pub children: Vec<usize>,
}

/// A rooted tree of share events for one content item. `nodes[i].id == i`
/// always holds; children are kept in chronological order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TreeDoc", into = "TreeDoc")]
pub struct DiffusionTree {
    pub category: usize,
    pub root: usize,
    pub nodes: Vec<TreeNode>,
}

#[derive(Serialize, Deserialize)]
struct TreeDoc {
    cat: usize,
    root: usize,
    nodes: Vec<TreeNode>,
}

impl From<DiffusionTree> for TreeDoc {
    fn from(t: DiffusionTree) -> Self {
        TreeDoc { cat: t.category, root: t.root, nodes: t.nodes }
    }
}

impl TryFrom<TreeDoc> for DiffusionTree {
    type Error = Error;

    fn try_from(mut d: TreeDoc) -> Result<Self> {
        d.nodes.sort_by_key(|n| n.id);
        if let Some((i, n)) = d.nodes.iter().enumerate().find(|(i, n)| n.id != *i) {
            return input_err(format!("node ids must be 0..{} without gaps (found {} at position {i})", d.nodes.len(), n.id));
        }
        let t = DiffusionTree { category: d.cat, root: d.root, nodes: d.nodes };
        t.validate()?;
        Ok(t)
    }
}

/// Which nodes are supervised with the terminal class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalTargets {
    /// Only leaves, once each.
    #[default]
    Leaves,
    /// Every node, once, after its children.
    AllNodes,
}

impl DiffusionTree {
    pub fn single(category: usize, user: Option<UserId>, proto: Option<usize>) -> Self {
        Self { category, root: 0, nodes: vec![TreeNode { id: 0, user, proto, children: vec![] }] }
    }

    /// Tree from a parent list (`None` marks the root) and per-node
    /// prototypes. Children keep index order.
    pub fn from_parents(category: usize, parents: &[Option<usize>], protos: &[usize]) -> Result<Self> {
        if parents.len() != protos.len() || parents.is_empty() {
            return input_err("parent and prototype lists must be non-empty and equally long");
        }
        let mut nodes: Vec<TreeNode> = protos
            .iter()
            .enumerate()
            .map(|(id, &p)| TreeNode { id, user: None, proto: Some(p), children: vec![] })
            .collect();
        let mut root = None;
        for (i, p) in parents.iter().enumerate() {
            match *p {
                None if root.is_none() => root = Some(i),
                None => return input_err("more than one root"),
                Some(p) if p < nodes.len() => nodes[p].children.push(i),
                Some(p) => return input_err(format!("parent {p} out of range")),
            }
        }
        let t = Self { category, root: root.ok_or_else(|| Error::Input("no root".into()))?, nodes };
        t.validate()?;
        Ok(t)
    }

    pub fn path(category: usize, protos: &[usize]) -> Result<Self> {
        let parents: Vec<Option<usize>> = (0..protos.len()).map(|i| i.checked_sub(1)).collect();
        Self::from_parents(category, &parents, protos)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.children.len()).sum()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.children.is_empty()).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return input_err("tree has no nodes");
        }
        if self.category >= NUM_CATEGORIES {
            return input_err(format!("category {} outside [0, {NUM_CATEGORIES})", self.category));
        }
        if self.root >= n {
            return input_err(format!("root {} is not a node", self.root));
        }
        let mut parent = vec![None; n];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return input_err(format!("node at position {i} has id {}", node.id));
            }
            for &c in &node.children {
                if c >= n {
                    return input_err(format!("node {i} has dangling child {c}"));
                }
                if parent[c].replace(i).is_some() {
                    return input_err(format!("node {c} has more than one parent"));
                }
            }
        }
        if let Some(r) = (0..n).find(|&i| parent[i].is_none() && i != self.root) {
            return input_err(format!("multiple roots ({} and {r})", self.root));
        }
        if parent[self.root].is_some() {
            return input_err("root has a parent");
        }
        if self.preorder().len() != n {
            return input_err("tree has a cycle or unreachable nodes");
        }
        Ok(())
    }

    /// Node ids in depth-first preorder, children in stored order.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            out.push(i);
            stack.extend(self.nodes[i].children.iter().rev().copied());
        }
        out
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut p = vec![None; self.nodes.len()];
        for n in &self.nodes {
            for &c in &n.children {
                p[c] = Some(n.id);
            }
        }
        p
    }

    /// Depth of every node; the root has depth 0.
    pub fn depths(&self) -> Vec<usize> {
        let mut d = vec![0; self.nodes.len()];
        for i in self.preorder() {
            for &c in &self.nodes[i].children {
                d[c] = d[i] + 1;
            }
        }
        d
    }

    pub fn depth(&self) -> usize {
        self.depths().into_iter().max().unwrap_or(0)
    }

    pub fn max_branch(&self) -> usize {
        self.nodes.iter().map(|n| n.children.len()).max().unwrap_or(0)
    }

    pub fn is_path(&self) -> bool {
        self.max_branch() <= 1
    }

    /// Renumbers nodes in preorder so the root is node 0.
    pub fn canonicalize(&mut self) {
        let order = self.preorder();
        let mut new_id = vec![0; self.nodes.len()];
        for (new, &old) in order.iter().enumerate() {
            new_id[old] = new;
        }
        let nodes = order
            .iter()
            .enumerate()
            .map(|(new, &old)| {
                let n = &self.nodes[old];
                TreeNode { id: new, user: n.user, proto: n.proto, children: n.children.iter().map(|&c| new_id[c]).collect() }
            })
            .collect();
        self.nodes = nodes;
        self.root = 0;
    }

    /// Prototype of every node; fails if any node is unlabeled.
    pub fn protos(&self) -> Result<Vec<usize>> {
        self.nodes
            .iter()
            .map(|n| n.proto.ok_or_else(|| Error::Input(format!("node {} has no prototype label", n.id))))
            .collect()
    }

    /// Class labels supervised at each node: the prototype of every child,
    /// in order, then the terminal class where the policy asks for it.
    pub fn node_targets(&self, terminal_class: usize, policy: TerminalTargets) -> Result<Vec<Vec<usize>>> {
        let protos = self.protos()?;
        if let Some(&p) = protos.iter().find(|&&p| p >= terminal_class) {
            return input_err(format!("prototype {p} out of range for k = {terminal_class}"));
        }
        Ok(self
            .nodes
            .iter()
            .map(|n| {
                let mut t: Vec<usize> = n.children.iter().map(|&c| protos[c]).collect();
                if t.is_empty() || policy == TerminalTargets::AllNodes {
                    t.push(terminal_class);
                }
                t
            })
            .collect())
    }

    /// Sets node prototypes from user ids.
    pub fn label(&mut self, map: &BTreeMap<UserId, usize>) -> Result<()> {
        for n in &mut self.nodes {
            let u = n.user.ok_or_else(|| Error::Input(format!("node {} has no user id", n.id)))?;
            n.proto = Some(*map.get(&u).ok_or_else(|| Error::Input(format!("user {u} has no prototype")))?);
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("tree serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })
    }
}

pub fn serialize_tree(tree: &DiffusionTree) -> String {
    tree.to_json_line()
}

pub fn parse_tree(line: &str) -> Result<DiffusionTree> {
    DiffusionTree::from_json_line(line)
}

pub fn label_trees(trees: &mut [DiffusionTree], map: &BTreeMap<UserId, usize>) -> Result<()> {
    trees.iter_mut().try_for_each(|t| t.label(map))
}

pub fn read_trees(path: impl AsRef<Path>) -> Result<Vec<DiffusionTree>> {
    io::read_jsonl(path)
}

pub fn parse_trees(text: &str) -> Result<Vec<DiffusionTree>> {
    io::parse_jsonl(text.as_bytes())
}

pub fn write_trees(path: impl AsRef<Path>, trees: &[DiffusionTree]) -> Result<()> {
    let mut w = io::create_write(path)?;
    for t in trees {
        writeln!(w, "{}", t.to_json_line())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildReport {
    pub trees: Vec<DiffusionTree>,
    /// Records whose sender is also the receiver.
    pub self_records: usize,
    /// Transfers to a user that already had a parent (or would close a cycle).
    pub dropped_edges: usize,
}

/// Reconstructs diffusion trees from transfer logs.
///
/// Per content item, transfers are replayed in `(ts, sender, receiver)`
/// order. A receiver's first inbound transfer makes the sender its parent;
/// later inbound transfers are dropped, as are transfers that would make a
/// user its own ancestor. Every user left without a parent roots a tree.
/// Trees come out ordered by content id, then by the time their root
/// first appears.
pub fn build_trees(records: &[TransferRecord]) -> Result<BuildReport> {
    let mut by_content: BTreeMap<u64, Vec<&TransferRecord>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        by_content.entry(r.content).or_default().push(r);
    }
    let mut report = BuildReport::default();
    for (_, mut recs) in by_content {
        recs.sort_by_key(|r| (r.ts, r.sender, r.receiver));
        let category = recs[0].category;
        let mut index: HashMap<UserId, usize> = HashMap::new();
        let mut users: Vec<UserId> = Vec::new();
        let mut parent: Vec<Option<usize>> = Vec::new();
        let mut children: Vec<Vec<usize>> = Vec::new();
        let mut node = |u: UserId, users: &mut Vec<UserId>, parent: &mut Vec<Option<usize>>, children: &mut Vec<Vec<usize>>| {
            *index.entry(u).or_insert_with(|| {
                users.push(u);
                parent.push(None);
                children.push(Vec::new());
                users.len() - 1
            })
        };
        for r in recs {
            let s = node(r.sender, &mut users, &mut parent, &mut children);
            if r.is_self() {
                report.self_records += 1;
                continue;
            }
            let c = node(r.receiver, &mut users, &mut parent, &mut children);
            let mut cycle = false;
            let mut a = Some(s);
            while let Some(x) = a {
                if x == c {
                    cycle = true;
                    break;
                }
                a = parent[x];
            }
            if parent[c].is_some() || cycle {
                report.dropped_edges += 1;
                continue;
            }
            parent[c] = Some(s);
            children[s].push(c);
        }
        for root in (0..users.len()).filter(|&i| parent[i].is_none()) {
            let mut t = DiffusionTree {
                category,
                root,
                nodes: (0..users.len())
                    .map(|i| TreeNode { id: i, user: Some(users[i]), proto: None, children: children[i].clone() })
                    .collect(),
            };
            // Keep only this root's component.
            let keep = t.preorder();
            let mut sub = DiffusionTree { category, root: 0, nodes: Vec::with_capacity(keep.len()) };
            let mut new_id = HashMap::new();
            for (k, &old) in keep.iter().enumerate() {
                new_id.insert(old, k);
            }
            for &old in &keep {
                let n = &t.nodes[old];
                sub.nodes.push(TreeNode {
                    id: new_id[&old],
                    user: n.user,
                    proto: None,
                    children: n.children.iter().map(|c| new_id[c]).collect(),
                });
            }
            t = sub;
            t.canonicalize();
            report.trees.push(t);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T = DiffusionTree> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle followed by a partition into whole items.
pub fn split<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit<T>> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return input_err("split ratios must be positive");
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return input_err(format!("split ratios sum to {}, expected 1", a + b + c));
    }
    let n = items.len();
    if n < 3 {
        return input_err(format!("need at least 3 trees to split, got {n}"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::rng::stream(seed, crate::rng::tags::SPLIT, 0));
    let n_train = ((a * n as f64).round() as usize).clamp(1, n - 2);
    let n_val = ((b * n as f64).round() as usize).clamp(1, n - n_train - 1);
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(s: u64, r: u64, ts: i64) -> TransferRecord {
        TransferRecord { sender: s, receiver: r, content: 1, category: 3, ts, lat: 0.0, lon: 0.0 }
    }

    fn users(t: &DiffusionTree) -> Vec<(u64, Vec<u64>)> {
        t.nodes
            .iter()
            .map(|n| (n.user.unwrap(), n.children.iter().map(|&c| t.nodes[c].user.unwrap()).collect()))
            .collect()
    }

    #[test]
    fn builds_simple_tree() {
        let r = build_trees(&[rec(1, 2, 0), rec(1, 3, 1), rec(2, 4, 2)]).unwrap();
        assert_eq!(r.trees.len(), 1);
        assert_eq!(users(&r.trees[0]), vec![(1, vec![2, 3]), (2, vec![4]), (4, vec![]), (3, vec![])]);
    }

    #[test]
    fn first_inbound_wins_and_self_records() {
        let r = build_trees(&[rec(1, 2, 0), rec(3, 2, 5), rec(7, 7, 1)]).unwrap();
        assert_eq!(r.dropped_edges, 1);
        assert_eq!(r.self_records, 1);
        assert_eq!(r.trees.len(), 3);
        assert_eq!(users(&r.trees[0]), vec![(1, vec![2]), (2, vec![])]);
        assert_eq!(users(&r.trees[1]), vec![(7, vec![])]);
        assert_eq!(users(&r.trees[2]), vec![(3, vec![])]);
    }

    #[test]
    fn later_root_absorbs_earlier_and_cycles_drop() {
        let r = build_trees(&[rec(1, 2, 0), rec(3, 1, 1), rec(2, 3, 2)]).unwrap();
        assert_eq!(r.dropped_edges, 1);
        assert_eq!(r.trees.len(), 1);
        assert_eq!(users(&r.trees[0])[0], (3, vec![1]));
    }

    #[test]
    fn ties_broken_by_sender() {
        let a = build_trees(&[rec(5, 9, 0), rec(4, 9, 0)]).unwrap();
        let b = build_trees(&[rec(4, 9, 0), rec(5, 9, 0)]).unwrap();
        assert_eq!(a, b);
        assert_eq!(users(&a.trees[0])[0], (4, vec![9]));
    }

    #[test]
    fn json_round_trip_and_errors() {
        let t = DiffusionTree::single(3, Some(11), Some(2));
        assert_eq!(t.to_json_line(), r#"{"cat":3,"root":0,"nodes":[{"id":0,"user":11,"proto":2,"children":[]}]}"#);
        let t = DiffusionTree::from_parents(0, &[None, Some(0), Some(0), Some(1)], &[0, 1, 2, 3]).unwrap();
        assert_eq!(parse_tree(&t.to_json_line()).unwrap(), t);
        assert!(parse_tree(r#"{"cat":3,"root":0,"nodes":[{"id":0,"user":1,"proto":0,"children":[4]}]}"#).is_err());
        let two_roots = r#"{"cat":3,"root":0,"nodes":[{"id":0,"user":1,"proto":0,"children":[]},{"id":1,"user":2,"proto":0,"children":[]}]}"#;
        assert!(parse_tree(two_roots).is_err());
        let cyc = r#"{"cat":3,"root":0,"nodes":[{"id":0,"user":1,"proto":0,"children":[]},{"id":1,"user":2,"proto":0,"children":[2]},{"id":2,"user":2,"proto":0,"children":[1]}]}"#;
        assert!(parse_tree(cyc).is_err());
        let text = format!("{}\nnot json\n", t.to_json_line());
        assert!(matches!(parse_trees(&text), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn targets() {
        let t = DiffusionTree::from_parents(0, &[None, Some(0), Some(0), Some(1)], &[0, 1, 2, 3]).unwrap();
        let leaves = t.node_targets(5, TerminalTargets::Leaves).unwrap();
        assert_eq!(leaves, vec![vec![1, 2], vec![3], vec![5], vec![5]]);
        let n: usize = leaves.iter().map(Vec::len).sum();
        assert_eq!(n, t.edge_count() + t.leaf_count());
        let all = t.node_targets(5, TerminalTargets::AllNodes).unwrap();
        assert_eq!(all[0], vec![1, 2, 5]);
        assert!(t.node_targets(3, TerminalTargets::Leaves).is_err());
    }

    #[test]
    fn split_sizes() {
        let items: Vec<usize> = (0..10).collect();
        let s = split(&items, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert_eq!(split(&items, (0.8, 0.1, 0.1), 7).unwrap(), s);
        assert!(split(&items, (0.7, 0.1, 0.1), 7).is_err());
        assert!(split(&items[..2], (0.8, 0.1, 0.1), 7).is_err());
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, items);
    }
}
