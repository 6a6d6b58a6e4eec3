//! The data path from raw transfer records to labeled trees, in one call.

use std::collections::BTreeMap;

use crate::cascade::{build_trees, label_trees, DiffusionTree};
use crate::error::Result;
use crate::features::{build_all_features, cluster_gps, fit_norm, normalize, NormStats, TransferRecord, UserId};
use crate::kmeans::ClusterModel;
use crate::prototypes::{build_prototypes, map_users, PrototypeModel};

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub gps: ClusterModel,
    pub norm: NormStats,
    /// Normalized social features per user.
    pub features: BTreeMap<UserId, Vec<f64>>,
    pub prototypes: PrototypeModel,
    pub user_map: BTreeMap<UserId, usize>,
    /// Trees in build order, labeled with prototypes.
    pub trees: Vec<DiffusionTree>,
    pub self_records: usize,
    pub dropped_edges: usize,
}

/// Seeds used by the two clustering stages.
pub fn stage_seeds(seed: u64) -> (u64, u64) {
    (seed.wrapping_add(1), seed.wrapping_add(2))
}

/// Scales every feature by the per-dimension maximum over all users.
pub fn normalize_features(raw: &BTreeMap<UserId, Vec<f64>>) -> Result<(NormStats, BTreeMap<UserId, Vec<f64>>)> {
    let rows: Vec<Vec<f64>> = raw.values().cloned().collect();
    let norm = fit_norm(&rows)?;
    let out = raw.iter().map(|(&u, f)| Ok((u, normalize(f, &norm)?))).collect::<Result<_>>()?;
    Ok((norm, out))
}

/// GPS clustering, features, normalization, prototypes and labeled trees.
pub fn prepare(records: &[TransferRecord], regions: usize, k: usize, seed: u64) -> Result<Prepared> {
    let (gps_seed, proto_seed) = stage_seeds(seed);
    let gps = cluster_gps(records, regions, gps_seed)?;
    let raw = build_all_features(records, &gps)?;
    let (norm, features) = normalize_features(&raw)?;
    let users: Vec<Vec<f64>> = features.values().cloned().collect();
    let prototypes = build_prototypes(&users, k, proto_seed)?;
    let user_map = map_users(&features, &prototypes)?;
    let report = build_trees(records)?;
    let mut trees = report.trees;
    label_trees(&mut trees, &user_map)?;
    Ok(Prepared {
        gps,
        norm,
        features,
        prototypes,
        user_map,
        trees,
        self_records: report.self_records,
        dropped_edges: report.dropped_edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{CascadeGenerator, GeneratorConfig};

    #[test]
    fn recovers_every_tree() {
        let cfg = GeneratorConfig { n_trees: 60, users_per_prototype: 10, k: 6, groups: 3, ..Default::default() };
        let g = CascadeGenerator::new(cfg).unwrap();
        let (trees, records) = g.generate(60);
        let p = prepare(&records, 20, 6, 3).unwrap();
        assert_eq!(p.trees.len(), trees.len());
        assert_eq!(p.trees.iter().map(|t| t.len()).sum::<usize>(), trees.iter().map(|t| t.len()).sum::<usize>());
        assert!(p.trees.iter().all(|t| t.nodes.iter().all(|n| n.proto.is_some())));
    }
}
