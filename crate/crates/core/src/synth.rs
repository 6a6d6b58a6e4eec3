//! Planted cascade simulator.
//!
//! Every tree is a branching process over prototypes: a node of prototype
//! `p` carrying content of category `c` draws children i.i.d. from a
//! transition row over the `k` prototypes plus a terminal class until the
//! terminal class comes up or `b_max` children exist. Users are drawn from
//! the chosen prototype's user pool and the emitted transfer records carry
//! times, categories and positions sampled from per-prototype profiles, so
//! the feature pipeline can recover the prototypes.
//!
//! The `planted` preset makes the process depend on history. Categories
//! fall into `groups` content groups. Each group has a pool of prototypes
//! built from whole prototype pairs `(2j, 2j + 1)`. Pool members keep
//! spreading inside the pool; everyone else mostly stops. On top of that,
//! a weight `lambda` of each pool member's row goes to a single class (a
//! pool member or the terminal class) picked by fixed random offsets of
//! the member's own slot and its parent's prototype. The best guess for a
//! node's children therefore needs the grandparent as well as the parent.
//! Pair mates share hour and category habits and differ only by home
//! region.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{DiffusionTree, TerminalTargets, TreeNode};
use crate::error::{Error, Result};
use crate::features::{TransferRecord, UserId, HOURS, NUM_CATEGORIES};
use crate::rng::{stream, tags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Pools plus grandparent dependence (see the module docs).
    Planted,
    /// `p -> p + 1` with certainty until `chain_stop`, which is terminal.
    /// Every tree starts at prototype 0.
    Chain,
    /// Every node is a leaf.
    Terminal,
    /// Every row is uniform over the `k + 1` classes.
    Uniform,
    /// Rows come from `transitions[category][prototype]`.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub preset: Preset,
    pub k: usize,
    pub users_per_prototype: usize,
    pub n_trees: usize,
    pub b_max: usize,
    pub max_depth: usize,
    /// Weight of the grandparent-dependent class in pool members' rows.
    pub lambda: f64,
    pub groups: usize,
    /// Prototype pairs per group pool.
    pub pairs_per_pool: usize,
    /// Terminal probability of a pool member before mixing.
    pub terminal_active: f64,
    /// Terminal probability of a prototype outside the content's pool.
    pub terminal_stop: f64,
    /// Share of a pool member's spreading mass that leaks to any prototype.
    pub noise: f64,
    pub chain_stop: usize,
    /// When false, pair mates share a home region.
    pub region_informative: bool,
    pub home_prob: f64,
    /// Standard deviation of positions around a home, in degrees.
    pub gps_jitter: f64,
    pub hour_peak_mass: f64,
    pub favorite_category_mass: f64,
    pub transitions: Option<Vec<Vec<Vec<f64>>>>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Planted,
            k: 20,
            users_per_prototype: 20,
            n_trees: 5000,
            b_max: 4,
            max_depth: 6,
            lambda: 0.3,
            groups: 10,
            pairs_per_pool: 1,
            terminal_active: 0.6,
            terminal_stop: 0.9,
            noise: 0.02,
            chain_stop: 3,
            region_informative: true,
            home_prob: 1.0,
            gps_jitter: 0.01,
            hour_peak_mass: 0.85,
            favorite_category_mass: 0.8,
            transitions: None,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Deterministic path `0 - 1 - ... - stop`.
    pub fn chain(k: usize, stop: usize) -> Self {
        Self { preset: Preset::Chain, k, chain_stop: stop, b_max: 1, n_trees: 100, ..Self::default() }
    }
}

/// Sampling habits shared by the users of one prototype.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrototypeProfile {
    pub hour_weights: Vec<f64>,
    pub category_weights: Vec<f64>,
    pub home: [f64; 2],
}

pub const GPS_CENTER: [f64; 2] = [28.6, 77.2];
pub const GPS_HALF_WIDTH: f64 = 1.0;
const GRID_STEP: f64 = 0.2;
const BASE_TS: i64 = 1_600_000_000;
const START_SPREAD: i64 = 30 * 86_400;

#[derive(Debug, Clone)]
pub struct CascadeGenerator {
    config: GeneratorConfig,
    pools: Vec<Vec<usize>>,
    /// Offsets per group that pick the grandparent-dependent class: `sigma`
    /// indexed by own slot, `rho` by parent prototype with the last entry
    /// for "no parent".
    sigma: Vec<Vec<usize>>,
    rho: Vec<Vec<usize>>,
    /// Classes the grandparent-dependent share can point at, per group: the
    /// pool members and the terminal class.
    targets: Vec<Vec<usize>>,
    memberships: Vec<Vec<usize>>,
    profiles: Vec<PrototypeProfile>,
    users: Vec<Vec<UserId>>,
    user_proto: BTreeMap<UserId, usize>,
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return cfg_err(format!("{what}: negative or non-finite probability"));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return cfg_err(format!("{what}: row sums to {s}"));
    }
    Ok(())
}

fn prob(v: f64, name: &str) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        cfg_err(format!("{name} = {v} outside [0, 1]"))
    }
}

impl CascadeGenerator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        let c = &config;
        if c.k == 0 || c.users_per_prototype == 0 || c.b_max == 0 || c.max_depth == 0 {
            return cfg_err("k, users_per_prototype, b_max and max_depth must be positive");
        }
        for (v, name) in [
            (c.lambda, "lambda"),
            (c.terminal_active, "terminal_active"),
            (c.terminal_stop, "terminal_stop"),
            (c.noise, "noise"),
            (c.home_prob, "home_prob"),
            (c.hour_peak_mass, "hour_peak_mass"),
            (c.favorite_category_mass, "favorite_category_mass"),
        ] {
            prob(v, name)?;
        }
        if !(c.gps_jitter >= 0.0) {
            return cfg_err("gps_jitter must be non-negative");
        }
        let mut rng = stream(c.seed, tags::GENERATOR_SETUP, 0);
        let n_pairs = c.k.div_ceil(2);
        let pair = |j: usize| -> Vec<usize> { (2 * j..(2 * j + 2).min(c.k)).collect() };

        let (mut pools, mut sigma, mut rho, mut targets) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        if c.preset == Preset::Planted {
            if c.groups == 0 || c.groups > NUM_CATEGORIES || c.pairs_per_pool == 0 || c.pairs_per_pool > n_pairs {
                return cfg_err("planted preset needs 0 < groups <= 48 and 0 < pairs_per_pool <= k/2");
            }
            let mut order: Vec<usize> = (0..n_pairs).collect();
            order.shuffle(&mut rng);
            for g in 0..c.groups {
                let pool: Vec<usize> =
                    (0..c.pairs_per_pool).flat_map(|j| pair(order[(g * c.pairs_per_pool + j) % n_pairs])).collect();
                let mut out = pool.clone();
                out.push(c.k);
                let n = out.len();
                let s: Vec<usize> = (0..pool.len()).map(|_| rng.gen_range(0..n)).collect();
                let r: Vec<usize> = (0..=c.k).map(|_| rng.gen_range(0..n)).collect();
                targets.push(out);
                pools.push(pool);
                sigma.push(s);
                rho.push(r);
            }
        }
        if c.preset == Preset::Chain && c.chain_stop >= c.k {
            return cfg_err(format!("chain_stop {} must be below k = {}", c.chain_stop, c.k));
        }
        if c.preset == Preset::Explicit {
            let Some(t) = &c.transitions else {
                return cfg_err("explicit preset needs a transitions tensor");
            };
            if t.len() != NUM_CATEGORIES || t.iter().any(|rows| rows.len() != c.k) {
                return cfg_err(format!("transitions must have shape [{NUM_CATEGORIES}][{}][{}]", c.k, c.k + 1));
            }
            for (ci, rows) in t.iter().enumerate() {
                for (p, row) in rows.iter().enumerate() {
                    if row.len() != c.k + 1 {
                        return cfg_err(format!("transitions[{ci}][{p}] has {} entries, expected {}", row.len(), c.k + 1));
                    }
                    check_row(row, &format!("transitions[{ci}][{p}]"))?;
                }
            }
        }
        let memberships: Vec<Vec<usize>> =
            (0..c.k).map(|p| (0..pools.len()).filter(|&g| pools[g].contains(&p)).collect()).collect();

        // Profiles: habits per pair, homes per prototype (or per pair).
        let cells = (2.0 * GPS_HALF_WIDTH / GRID_STEP).round() as usize + 1;
        let mut grid: Vec<[f64; 2]> = (0..cells * cells)
            .map(|i| {
                [
                    GPS_CENTER[0] - GPS_HALF_WIDTH + GRID_STEP * (i / cells) as f64,
                    GPS_CENTER[1] - GPS_HALF_WIDTH + GRID_STEP * (i % cells) as f64,
                ]
            })
            .collect();
        grid.shuffle(&mut rng);
        let mut profiles = Vec::with_capacity(c.k);
        let mut pair_habits = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            let peaks: Vec<usize> = rand::seq::index::sample(&mut rng, HOURS, 2).into_vec();
            let mut hours = vec![(1.0 - c.hour_peak_mass) / HOURS as f64; HOURS];
            for &h in &peaks {
                hours[h] += c.hour_peak_mass / peaks.len() as f64;
            }
            let favs = rand::seq::index::sample(&mut rng, NUM_CATEGORIES, 6).into_vec();
            let mut cats = vec![(1.0 - c.favorite_category_mass) / NUM_CATEGORIES as f64; NUM_CATEGORIES];
            for &f in &favs {
                cats[f] += c.favorite_category_mass / favs.len() as f64;
            }
            pair_habits.push((hours, cats));
        }
        for p in 0..c.k {
            let home_slot = if c.region_informative { p } else { p / 2 };
            let (hours, cats) = pair_habits[p / 2].clone();
            profiles.push(PrototypeProfile { hour_weights: hours, category_weights: cats, home: grid[home_slot % grid.len()] });
        }

        let mut ids: Vec<UserId> = (0..(c.k * c.users_per_prototype) as u64).collect();
        ids.shuffle(&mut rng);
        let users: Vec<Vec<UserId>> = ids.chunks(c.users_per_prototype).map(|ch| ch.to_vec()).collect();
        let user_proto = users.iter().enumerate().flat_map(|(p, us)| us.iter().map(move |&u| (u, p))).collect();
        Ok(Self { config, pools, sigma, rho, targets, memberships, profiles, users, user_proto })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn terminal_class(&self) -> usize {
        self.config.k
    }

    pub fn group_of(&self, category: usize) -> usize {
        category % self.config.groups.max(1)
    }

    pub fn pools(&self) -> &[Vec<usize>] {
        &self.pools
    }

    pub fn profiles(&self) -> &[PrototypeProfile] {
        &self.profiles
    }

    /// Planted prototype of every simulated user.
    pub fn user_map(&self) -> &BTreeMap<UserId, usize> {
        &self.user_proto
    }

    /// Child distribution of a node of prototype `p` whose parent has
    /// prototype `gp` (`None` at the root), over `k + 1` classes.
    pub fn row(&self, category: usize, p: usize, gp: Option<usize>) -> Vec<f64> {
        let c = &self.config;
        let (k, t) = (c.k, c.k);
        let mut r = vec![0.0; k + 1];
        match c.preset {
            Preset::Terminal => r[t] = 1.0,
            Preset::Uniform => r.iter_mut().for_each(|v| *v = 1.0 / (k + 1) as f64),
            Preset::Chain => r[if p < c.chain_stop { p + 1 } else { t }] = 1.0,
            Preset::Explicit => r.copy_from_slice(&c.transitions.as_ref().expect("validated")[category][p]),
            Preset::Planted => {
                let g = self.group_of(category);
                let pool = &self.pools[g];
                let Some(slot) = pool.iter().position(|&x| x == p) else {
                    r[..k].iter_mut().for_each(|v| *v = (1.0 - c.terminal_stop) / k as f64);
                    r[t] = c.terminal_stop;
                    return r;
                };
                let spread = 1.0 - c.terminal_active;
                r[..k].iter_mut().for_each(|v| *v = c.noise * spread / k as f64);
                for &q in pool {
                    r[q] += (1.0 - c.noise) * spread / pool.len() as f64;
                }
                r[t] = c.terminal_active;
                r.iter_mut().for_each(|v| *v *= 1.0 - c.lambda);
                let out = &self.targets[g];
                let pick = (self.sigma[g][slot] + self.rho[g][gp.unwrap_or(k)]) % out.len();
                r[out[pick]] += c.lambda;
            }
        }
        r
    }

    fn draw_root(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let c = &self.config;
        let pick_cat = |w: &[f64], rng: &mut ChaCha8Rng| WeightedIndex::new(w).map(|d| d.sample(rng)).unwrap_or(0);
        match c.preset {
            Preset::Chain => (0, pick_cat(&self.profiles[0].category_weights, rng)),
            Preset::Planted => {
                let active: Vec<usize> = (0..c.k).filter(|&p| !self.memberships[p].is_empty()).collect();
                let p = *active.choose(rng).expect("pools are non-empty");
                let g = *self.memberships[p].choose(rng).expect("p is a pool member");
                let w: Vec<f64> = (0..NUM_CATEGORIES)
                    .map(|cat| if cat % c.groups == g { self.profiles[p].category_weights[cat] } else { 0.0 })
                    .collect();
                (p, pick_cat(&w, rng))
            }
            _ => {
                let p = rng.gen_range(0..c.k);
                (p, pick_cat(&self.profiles[p].category_weights, rng))
            }
        }
    }

    fn position(&self, p: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let c = &self.config;
        let prof = &self.profiles[p];
        let (lat, lon) = if rng.gen::<f64>() < c.home_prob {
            let n = Normal::new(0.0, c.gps_jitter).expect("jitter validated");
            (prof.home[0] + n.sample(rng), prof.home[1] + n.sample(rng))
        } else {
            (
                GPS_CENTER[0] + rng.gen_range(-GPS_HALF_WIDTH..GPS_HALF_WIDTH),
                GPS_CENTER[1] + rng.gen_range(-GPS_HALF_WIDTH..GPS_HALF_WIDTH),
            )
        };
        (lat.clamp(-90.0, 90.0), lon.clamp(-180.0, 180.0))
    }

    /// Next time after `clock` that falls in an hour drawn from `p`'s habits.
    fn send_time(&self, p: usize, clock: i64, rng: &mut ChaCha8Rng) -> i64 {
        let w = WeightedIndex::new(&self.profiles[p].hour_weights).expect("hour weights are positive");
        let hour = w.sample(rng) as i64;
        let day = clock - clock.rem_euclid(86_400);
        let mut t = day + hour * 3600 + rng.gen_range(0..3600);
        if t <= clock {
            t += 86_400;
        }
        t
    }

    /// Tree number `index` and its transfer records. Content ids equal the
    /// tree index.
    pub fn generate_tree(&self, index: usize) -> (DiffusionTree, Vec<TransferRecord>) {
        let c = &self.config;
        let mut rng = stream(c.seed, tags::GENERATOR_TREE, index as u64);
        let (root_p, category) = self.draw_root(&mut rng);
        let mut clock = BASE_TS + rng.gen_range(0..START_SPREAD);
        let mut used = std::collections::HashSet::new();
        let root_user = *self.users[root_p].choose(&mut rng).expect("user pools are non-empty");
        used.insert(root_user);

        struct Gen {
            proto: usize,
            user: UserId,
            parent: Option<usize>,
            depth: usize,
            children: Vec<usize>,
        }
        let mut nodes = vec![Gen { proto: root_p, user: root_user, parent: None, depth: 0, children: vec![] }];
        let mut records = Vec::new();
        // Depth-first so that each subtree's transfers follow the transfer
        // that reached its root.
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if nodes[i].depth >= c.max_depth {
                continue;
            }
            let gp = nodes[i].parent.map(|q| nodes[q].proto);
            let row = self.row(category, nodes[i].proto, gp);
            let dist = WeightedIndex::new(&row).expect("rows are validated distributions");
            while nodes[i].children.len() < c.b_max {
                let cls = dist.sample(&mut rng);
                if cls == c.k {
                    break;
                }
                let free: Vec<UserId> = self.users[cls].iter().copied().filter(|u| !used.contains(u)).collect();
                let Some(&user) = free.choose(&mut rng) else { break };
                used.insert(user);
                let sender = nodes[i].proto;
                clock = self.send_time(sender, clock, &mut rng);
                let (lat, lon) = self.position(sender, &mut rng);
                records.push(TransferRecord {
                    sender: nodes[i].user,
                    receiver: user,
                    content: index as u64,
                    category,
                    ts: clock,
                    lat,
                    lon,
                });
                let id = nodes.len();
                nodes.push(Gen { proto: cls, user, parent: Some(i), depth: nodes[i].depth + 1, children: vec![] });
                nodes[i].children.push(id);
            }
            stack.extend(nodes[i].children.iter().rev().copied());
        }
        if records.is_empty() {
            clock = self.send_time(root_p, clock, &mut rng);
            let (lat, lon) = self.position(root_p, &mut rng);
            records.push(TransferRecord {
                sender: root_user,
                receiver: root_user,
                content: index as u64,
                category,
                ts: clock,
                lat,
                lon,
            });
        }
        let mut tree = DiffusionTree {
            category,
            root: 0,
            nodes: nodes
                .iter()
                .enumerate()
                .map(|(id, n)| TreeNode { id, user: Some(n.user), proto: Some(n.proto), children: n.children.clone() })
                .collect(),
        };
        tree.canonicalize();
        (tree, records)
    }

    /// `n_trees` trees and all their records, in tree order.
    pub fn generate(&self, n_trees: usize) -> (Vec<DiffusionTree>, Vec<TransferRecord>) {
        let parts: Vec<_> = (0..n_trees).into_par_iter().map(|i| self.generate_tree(i)).collect();
        let mut trees = Vec::with_capacity(n_trees);
        let mut records = Vec::new();
        for (t, r) in parts {
            trees.push(t);
            records.extend(r);
        }
        (trees, records)
    }

    /// Expected number of times each class is a supervised target at a node
    /// with child distribution `row`. With `depth` given, a node at the
    /// depth cap has no children.
    pub fn expected_targets(&self, row: &[f64], depth: Option<usize>, policy: TerminalTargets) -> Vec<f64> {
        let (k, b) = (self.config.k, self.config.b_max as i32);
        let mut out = vec![0.0; k + 1];
        if depth.is_some_and(|d| d >= self.config.max_depth) {
            out[k] = 1.0;
            return out;
        }
        let q = 1.0 - row[k];
        if q > 0.0 {
            let en = if q < 1.0 { q * (1.0 - q.powi(b)) / (1.0 - q) } else { b as f64 };
            for j in 0..k {
                out[j] = en * row[j] / q;
            }
        }
        out[k] = match policy {
            TerminalTargets::Leaves => row[k],
            TerminalTargets::AllNodes => 1.0,
        };
        out
    }

    /// Class with the most expected targets given content, prototype and
    /// parent prototype (and the depth, when given). Ties go to the lowest
    /// index.
    pub fn bayes_prediction(
        &self,
        category: usize,
        p: usize,
        gp: Option<usize>,
        depth: Option<usize>,
        policy: TerminalTargets,
    ) -> usize {
        crate::nn::argmax(&self.expected_targets(&self.row(category, p, gp), depth, policy))
    }

    /// Accuracy on `trees` of the predictor that knows the planted rows and
    /// sees each node's content, prototype and parent prototype. Node
    /// prototypes are recovered from user ids, so trees labeled with any
    /// clustering can be scored.
    pub fn bayes_accuracy(&self, trees: &[DiffusionTree], policy: TerminalTargets) -> Result<f64> {
        self.oracle_accuracy(trees, policy, false)
    }

    /// As [`Self::bayes_accuracy`], but the predictor also knows each node's
    /// depth and hence when the depth cap forces a leaf.
    pub fn depth_aware_bayes_accuracy(&self, trees: &[DiffusionTree], policy: TerminalTargets) -> Result<f64> {
        self.oracle_accuracy(trees, policy, true)
    }

    fn oracle_accuracy(&self, trees: &[DiffusionTree], policy: TerminalTargets, use_depth: bool) -> Result<f64> {
        let (mut hits, mut total) = (0usize, 0usize);
        for (ti, t) in trees.iter().enumerate() {
            let protos: Vec<usize> = t
                .nodes
                .iter()
                .map(|n| {
                    n.user
                        .and_then(|u| self.user_proto.get(&u).copied())
                        .ok_or_else(|| Error::Input(format!("tree {ti}: node {} is not a simulated user", n.id)))
                })
                .collect::<Result<_>>()?;
            let parents = t.parents();
            let depths = t.depths();
            for n in &t.nodes {
                let depth = use_depth.then_some(depths[n.id]);
                let pred = self.bayes_prediction(t.category, protos[n.id], parents[n.id].map(|q| protos[q]), depth, policy);
                let mut targets: Vec<usize> = n.children.iter().map(|&c| protos[c]).collect();
                if targets.is_empty() || policy == TerminalTargets::AllNodes {
                    targets.push(self.config.k);
                }
                total += targets.len();
                hits += targets.iter().filter(|&&x| x == pred).count();
            }
        }
        if total == 0 {
            return Err(Error::Input("no targets to score".into()));
        }
        Ok(hits as f64 / total as f64)
    }
}

pub fn generate(config: &GeneratorConfig, n_trees: usize) -> Result<(Vec<DiffusionTree>, Vec<TransferRecord>)> {
    Ok(CascadeGenerator::new(config.clone())?.generate(n_trees))
}

pub fn bayes_accuracy(config: &GeneratorConfig, trees: &[DiffusionTree], policy: TerminalTargets) -> Result<f64> {
    CascadeGenerator::new(config.clone())?.bayes_accuracy(trees, policy)
}
