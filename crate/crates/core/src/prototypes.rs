//! Prototype users: k-means centroids of normalized social features. Tree
//! nodes are labeled with prototype ids and the model predicts over the k
//! prototypes plus one terminal class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::features::UserId;
use crate::kmeans::{self, ClusterModel, KMeansOptions};
use crate::nn::InputTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeModel {
    #[serde(flatten)]
    pub cluster: ClusterModel,
    pub terminal_class: usize,
}

impl PrototypeModel {
    pub fn from_cluster(cluster: ClusterModel) -> Result<Self> {
        cluster.validate()?;
        let terminal_class = cluster.k;
        Ok(Self { cluster, terminal_class })
    }

    pub fn k(&self) -> usize {
        self.cluster.k
    }

    pub fn dim(&self) -> usize {
        self.cluster.dim
    }

    pub fn num_classes(&self) -> usize {
        self.cluster.k + 1
    }

    /// Nearest prototype. Never returns the terminal class.
    pub fn map_user(&self, feature: &[f64]) -> Result<usize> {
        self.cluster.assign(feature)
    }

    pub fn prototype_feature(&self, id: usize) -> Result<&[f64]> {
        if id >= self.k() {
            return input_err(format!("prototype {id} has no feature (k = {}, terminal = {})", self.k(), self.terminal_class));
        }
        Ok(&self.cluster.centroids[id])
    }

    /// Centroids as model input rows, indexed by prototype id.
    pub fn input_table(&self) -> Result<InputTable> {
        InputTable::new(self.dim(), &self.cluster.centroids)
    }

    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        if self.terminal_class != self.cluster.k {
            return input_err(format!("terminal class {} must equal k = {}", self.terminal_class, self.cluster.k));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("prototype model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s).map_err(|e| crate::Error::Parse { line: e.line(), msg: e.to_string() })?;
        m.validate()?;
        Ok(m)
    }
}

/// Seedings tried per prototype clustering.
pub const PROTOTYPE_RESTARTS: usize = 20;

pub fn build_prototypes(features: &[Vec<f64>], k: usize, seed: u64) -> Result<PrototypeModel> {
    if k == 0 || k > features.len() {
        return input_err(format!("need 0 < k <= {} users, got k = {k}", features.len()));
    }
    PrototypeModel::from_cluster(kmeans::fit_with_trace(features, KMeansOptions::new(k, seed).with_restarts(PROTOTYPE_RESTARTS))?.model)
}

/// Prototype id of every user in `features`.
pub fn map_users(features: &BTreeMap<UserId, Vec<f64>>, model: &PrototypeModel) -> Result<BTreeMap<UserId, usize>> {
    features.iter().map(|(&u, f)| Ok((u, model.map_user(f)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clumps() -> Vec<Vec<f64>> {
        vec![vec![0.0, 0.0], vec![0.0, 0.2], vec![1.0, 1.0], vec![1.0, 0.8]]
    }

    #[test]
    fn build_and_map() {
        let m = build_prototypes(&clumps(), 2, 1).unwrap();
        assert_eq!(m.terminal_class, 2);
        assert_eq!(m.num_classes(), 3);
        let mut c = m.cluster.centroids.clone();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((c[0][1] - 0.1).abs() < 1e-12 && (c[1][1] - 0.9).abs() < 1e-12);
        for j in 0..2 {
            assert_eq!(m.map_user(m.prototype_feature(j).unwrap()).unwrap(), j);
        }
        assert!(m.prototype_feature(2).is_err());
        assert!(m.map_user(&[0.0]).is_err());
    }

    #[test]
    fn bad_k() {
        assert!(build_prototypes(&clumps(), 0, 0).is_err());
        assert!(build_prototypes(&clumps(), 5, 0).is_err());
        let m = build_prototypes(&clumps(), 4, 0).unwrap();
        assert_eq!(m.cluster.inertia, 0.0);
    }

    #[test]
    fn json_includes_terminal() {
        let m = build_prototypes(&clumps(), 2, 1).unwrap();
        let s = m.to_json();
        assert!(s.contains("\"terminal_class\":2") && s.contains("\"centroids\""));
        assert_eq!(PrototypeModel::from_json(&s).unwrap(), PrototypeModel { cluster: ClusterModel { inertia: 0.0, ..m.cluster.clone() }, ..m });
        assert!(PrototypeModel::from_json(&s.replace("\"terminal_class\":2", "\"terminal_class\":1")).is_err());
    }
}
