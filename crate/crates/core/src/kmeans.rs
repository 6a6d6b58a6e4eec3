//! Lloyd's k-means with k-means++ seeding.
//!
//! Used twice in the pipeline: to discretize transfer GPS positions into
//! regions and to group users into prototypes.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::rng::{stream, tags};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Point count above which the assignment step runs on the rayon pool.
const PAR_THRESHOLD: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances of the training points to their centroid.
    /// Not serialized.
    #[serde(skip)]
    pub inertia: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Independent seedings; the run with the lowest final inertia wins.
    pub restarts: usize,
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, max_iter: DEFAULT_MAX_ITER, tol: DEFAULT_TOL, seed, restarts: 1 }
    }

    pub fn with_restarts(self, restarts: usize) -> Self {
        Self { restarts, ..self }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: ClusterModel,
    /// Inertia after every Lloyd iteration, then once more for the final
    /// assignment. Non-increasing.
    pub trace: Vec<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    if points.len() >= PAR_THRESHOLD {
        points.par_iter().map(|p| nearest(p, centroids)).collect()
    } else {
        points.iter().map(|p| nearest(p, centroids)).collect()
    }
}

fn check_points(points: &[Vec<f64>], k: usize) -> Result<usize> {
    if points.is_empty() {
        return input_err("k-means needs at least one point");
    }
    if k == 0 {
        return input_err("k must be positive");
    }
    if k > points.len() {
        return input_err(format!("k = {k} exceeds the number of points ({})", points.len()));
    }
    let dim = points[0].len();
    if let Some(i) = points.iter().position(|p| p.len() != dim) {
        return input_err(format!("point {i} has dimension {}, expected {dim}", points[i].len()));
    }
    Ok(dim)
}

/// Greedy k-means++: each new centroid is the best (lowest resulting
/// potential) of a few D²-weighted candidates.
fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let candidates: Vec<usize> = match WeightedIndex::new(&d2) {
            Ok(w) => (0..trials).map(|_| w.sample(rng)).collect(),
            // Every point coincides with a chosen centroid.
            Err(_) => vec![rng.gen_range(0..points.len())],
        };
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for &c in &candidates {
            let nd: Vec<f64> = points.iter().zip(&d2).map(|(p, &d)| d.min(sq_dist(p, &points[c]))).collect();
            let pot: f64 = nd.iter().sum();
            if best.as_ref().map_or(true, |b| pot < b.0) {
                best = Some((pot, nd, c));
            }
        }
        let (_, nd, c) = best.expect("at least one candidate");
        d2 = nd;
        centroids.push(points[c].clone());
    }
    centroids
}

/// Fits `opts.k` centroids and returns the full per-iteration trace of the
/// winning run. Run 0 is seeded with `opts.seed` itself, so one restart
/// gives the plain single-run result.
pub fn fit_with_trace(points: &[Vec<f64>], opts: KMeansOptions) -> Result<KMeansFit> {
    check_points(points, opts.k)?;
    if opts.max_iter == 0 {
        return input_err("max_iter must be positive");
    }
    if opts.restarts == 0 {
        return input_err("restarts must be positive");
    }
    let mut best = single_run(points, &opts, ChaCha8Rng::seed_from_u64(opts.seed))?;
    for r in 1..opts.restarts {
        let run = single_run(points, &opts, stream(opts.seed, tags::KMEANS, r as u64))?;
        if run.model.inertia < best.model.inertia {
            best = run;
        }
    }
    Ok(best)
}

fn single_run(points: &[Vec<f64>], opts: &KMeansOptions, mut rng: ChaCha8Rng) -> Result<KMeansFit> {
    let &KMeansOptions { k, max_iter, tol, .. } = opts;
    let dim = points[0].len();
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        let nearest = assign_all(points, &centroids);
        let mut assign: Vec<usize> = nearest.iter().map(|&(j, _)| j).collect();
        let mut counts = vec![0usize; k];
        for &j in &assign {
            counts[j] += 1;
        }

        // Empty clusters take the point farthest from its current centroid.
        let mut repaired: Vec<Option<usize>> = vec![None; k];
        if counts.contains(&0) {
            let mut order: Vec<usize> = (0..points.len()).collect();
            order.sort_by(|&a, &b| nearest[b].1.total_cmp(&nearest[a].1).then(a.cmp(&b)));
            let mut cursor = 0;
            for j in 0..k {
                if counts[j] != 0 {
                    continue;
                }
                while cursor < order.len() && counts[assign[order[cursor]]] <= 1 {
                    cursor += 1;
                }
                let Some(&i) = order.get(cursor) else { break };
                cursor += 1;
                counts[assign[i]] -= 1;
                assign[i] = j;
                counts[j] = 1;
                repaired[j] = Some(i);
            }
        }

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &j) in points.iter().zip(&assign) {
            for (s, x) in sums[j].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let new_c: Vec<f64> = match (counts[j], repaired[j]) {
                (0, _) => centroids[j].clone(),
                (_, Some(i)) => points[i].clone(),
                (n, None) => sums[j].iter().map(|s| s / n as f64).collect(),
            };
            shift = shift.max(sq_dist(&new_c, &centroids[j]).sqrt());
            centroids[j] = new_c;
        }
        let inertia: f64 = points.iter().zip(&assign).map(|(p, &j)| sq_dist(p, &centroids[j])).sum();
        trace.push(inertia);
        if shift <= tol {
            break;
        }
    }

    let final_assign = assign_all(points, &centroids);
    let inertia: f64 = final_assign.iter().map(|&(_, d)| d).sum();
    trace.push(inertia);
    Ok(KMeansFit {
        model: ClusterModel { k, dim, centroids, inertia },
        trace,
        assignments: final_assign.into_iter().map(|(j, _)| j).collect(),
        iterations,
    })
}

pub fn fit(points: &[Vec<f64>], k: usize, max_iter: usize, tol: f64, seed: u64) -> Result<ClusterModel> {
    Ok(fit_with_trace(points, KMeansOptions { k, max_iter, tol, seed, restarts: 1 })?.model)
}

impl ClusterModel {
    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn assign(&self, point: &[f64]) -> Result<usize> {
        if point.len() != self.dim {
            return input_err(format!("point has dimension {}, model expects {}", point.len(), self.dim));
        }
        Ok(nearest(point, &self.centroids).0)
    }

    /// Euclidean distance to the nearest centroid.
    pub fn distance(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.dim {
            return input_err(format!("point has dimension {}, model expects {}", point.len(), self.dim));
        }
        Ok(nearest(point, &self.centroids).1.sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.centroids.len() != self.k {
            return input_err(format!("model declares k = {} but has {} centroids", self.k, self.centroids.len()));
        }
        if self.centroids.iter().any(|c| c.len() != self.dim) {
            return input_err("centroid dimension does not match model dim");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("cluster model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s).map_err(|e| crate::Error::Parse { line: e.line(), msg: e.to_string() })?;
        m.validate()?;
        Ok(m)
    }
}

pub fn assign(point: &[f64], model: &ClusterModel) -> Result<usize> {
    model.assign(point)
}
