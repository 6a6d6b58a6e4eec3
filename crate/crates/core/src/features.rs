//! Per-user social features and per-item content features.
//!
//! A social feature is a flat non-negative vector with a fixed layout:
//!
//! | block        | range            |
//! |--------------|------------------|
//! | app types    | `[0, 48)`        |
//! | share, recv  | `[48, 50)`       |
//! | send hours   | `[50, 74)`       |
//! | regions      | `[74, 74 + G)`   |

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::io;
use crate::kmeans::{self, ClusterModel, KMeansOptions};

pub const NUM_CATEGORIES: usize = 48;
pub const TYPE_OFFSET: usize = 0;
pub const SHARE_OFFSET: usize = 48;
pub const HOUR_OFFSET: usize = 50;
pub const REGION_OFFSET: usize = 74;
pub const HOURS: usize = 24;
pub const DEFAULT_REGIONS: usize = 1000;

pub type UserId = u64;

/// Dimension of a social feature with `regions` GPS clusters.
pub const fn social_dim(regions: usize) -> usize {
    REGION_OFFSET + regions
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub sender: UserId,
    pub receiver: UserId,
    pub content: u64,
    pub category: usize,
    /// Seconds since the Unix epoch, UTC.
    pub ts: i64,
    pub lat: f64,
    pub lon: f64,
}

impl TransferRecord {
    pub fn validate(&self) -> Result<()> {
        if self.category >= NUM_CATEGORIES {
            return input_err(format!("category {} outside [0, {NUM_CATEGORIES})", self.category));
        }
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return input_err(format!("invalid GPS position ({}, {})", self.lat, self.lon));
        }
        Ok(())
    }

    /// A record whose sender is its receiver. These mark users that appear
    /// in a cascade without any transfer and are ignored by feature building.
    pub fn is_self(&self) -> bool {
        self.sender == self.receiver
    }

    pub fn hour(&self) -> usize {
        (self.ts.rem_euclid(86_400) / 3600) as usize
    }

    pub fn position(&self) -> [f64; 2] {
        [self.lat, self.lon]
    }
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<TransferRecord>> {
    let records: Vec<TransferRecord> = io::read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|e| crate::Error::Input(format!("record {}: {e}", i + 1)))?;
    }
    Ok(records)
}

/// Clusters the positions of all transfer records into `regions` areas.
pub fn cluster_gps(records: &[TransferRecord], regions: usize, seed: u64) -> Result<ClusterModel> {
    let points: Vec<Vec<f64>> = records.iter().map(|r| r.position().to_vec()).collect();
    Ok(kmeans::fit_with_trace(&points, KMeansOptions::new(regions, seed))?.model)
}

fn region_count(gps: &ClusterModel) -> Result<usize> {
    if gps.dim != 2 {
        return input_err(format!("GPS model must be 2-dimensional, got {}", gps.dim));
    }
    Ok(gps.k)
}

fn accumulate(f: &mut [f64], r: &TransferRecord, user: UserId, region: usize) {
    if r.sender == user {
        f[TYPE_OFFSET + r.category] += 1.0;
        f[SHARE_OFFSET] += 1.0;
        f[HOUR_OFFSET + r.hour()] += 1.0;
    } else {
        f[SHARE_OFFSET + 1] += 1.0;
    }
    f[REGION_OFFSET + region] += 1.0;
}

/// Social feature of one user from the records that mention them.
pub fn build_social_feature(records: &[TransferRecord], user: UserId, gps: &ClusterModel) -> Result<Vec<f64>> {
    let g = region_count(gps)?;
    let mut f = vec![0.0; social_dim(g)];
    for r in records {
        r.validate()?;
        if r.sender != user && r.receiver != user {
            return input_err(format!("record {} -> {} does not involve user {user}", r.sender, r.receiver));
        }
        if r.is_self() {
            continue;
        }
        accumulate(&mut f, r, user, gps.assign(&r.position())?);
    }
    Ok(f)
}

/// Social features of every user appearing in `records`, keyed by user id.
/// Users that only appear in self-records get an all-zero feature.
pub fn build_all_features(records: &[TransferRecord], gps: &ClusterModel) -> Result<BTreeMap<UserId, Vec<f64>>> {
    let g = region_count(gps)?;
    let dim = social_dim(g);
    let mut out: BTreeMap<UserId, Vec<f64>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        if r.is_self() {
            out.entry(r.sender).or_insert_with(|| vec![0.0; dim]);
            continue;
        }
        let region = gps.assign(&r.position())?;
        for user in [r.sender, r.receiver] {
            accumulate(out.entry(user).or_insert_with(|| vec![0.0; dim]), r, user, region);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub per_dim_max: Vec<f64>,
}

pub fn fit_norm(features: &[Vec<f64>]) -> Result<NormStats> {
    let Some(first) = features.first() else {
        return input_err("cannot fit normalization on an empty feature list");
    };
    let mut max = vec![0.0f64; first.len()];
    for (i, f) in features.iter().enumerate() {
        if f.len() != max.len() {
            return input_err(format!("feature {i} has dimension {}, expected {}", f.len(), max.len()));
        }
        for (m, &v) in max.iter_mut().zip(f) {
            *m = m.max(v);
        }
    }
    for m in &mut max {
        if *m <= 0.0 {
            *m = 1.0;
        }
    }
    Ok(NormStats { per_dim_max: max })
}

/// Divides by the per-dimension maximum and clamps to 1.
pub fn normalize(feature: &[f64], stats: &NormStats) -> Result<Vec<f64>> {
    if feature.len() != stats.per_dim_max.len() {
        return input_err(format!(
            "feature has dimension {}, normalization expects {}",
            feature.len(),
            stats.per_dim_max.len()
        ));
    }
    Ok(feature.iter().zip(&stats.per_dim_max).map(|(v, m)| (v / m).min(1.0)).collect())
}

pub fn content_feature(category: usize) -> Result<Vec<f64>> {
    if category >= NUM_CATEGORIES {
        return input_err(format!("category {category} outside [0, {NUM_CATEGORIES})"));
    }
    let mut v = vec![0.0; NUM_CATEGORIES];
    v[category] = 1.0;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub user: UserId,
    pub vec: Vec<f64>,
}

pub fn write_features(path: impl AsRef<Path>, features: &BTreeMap<UserId, Vec<f64>>) -> Result<()> {
    let rows: Vec<FeatureRow> = features.iter().map(|(&user, v)| FeatureRow { user, vec: v.clone() }).collect();
    io::write_jsonl(path, &rows)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<BTreeMap<UserId, Vec<f64>>> {
    let rows: Vec<FeatureRow> = io::read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for r in rows {
        if out.insert(r.user, r.vec).is_some() {
            return input_err(format!("duplicate feature row for user {}", r.user));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gps_two() -> ClusterModel {
        ClusterModel { k: 2, dim: 2, centroids: vec![vec![0.0, 0.0], vec![10.0, 10.0]], inertia: 0.0 }
    }

    fn rec(s: u64, r: u64, cat: usize, hour: i64, lat: f64) -> TransferRecord {
        TransferRecord { sender: s, receiver: r, content: 0, category: cat, ts: hour * 3600 + 17, lat, lon: lat }
    }

    #[test]
    fn single_send() {
        let gps = ClusterModel {
            k: 8,
            dim: 2,
            centroids: (0..8).map(|i| vec![i as f64, i as f64]).collect(),
            inertia: 0.0,
        };
        let f = build_social_feature(&[rec(1, 2, 3, 14, 7.0)], 1, &gps).unwrap();
        assert_eq!(f.len(), social_dim(8));
        let nonzero: Vec<usize> = (0..f.len()).filter(|&i| f[i] != 0.0).collect();
        assert_eq!(nonzero, vec![3, SHARE_OFFSET, HOUR_OFFSET + 14, REGION_OFFSET + 7]);
    }

    #[test]
    fn empty_and_counts() {
        let gps = gps_two();
        assert_eq!(build_social_feature(&[], 1, &gps).unwrap(), vec![0.0; social_dim(2)]);
        let mut recs: Vec<_> = (0..10).map(|i| rec(1, 100 + i, 0, 3, 0.0)).collect();
        recs.extend((0..5).map(|i| rec(200 + i, 1, 9, 3, 10.0)));
        let f = build_social_feature(&recs, 1, &gps).unwrap();
        assert_eq!(f[0], 10.0);
        assert_eq!(f[9], 0.0);
        assert_eq!(&f[SHARE_OFFSET..HOUR_OFFSET], &[10.0, 5.0]);
        assert_eq!(&f[REGION_OFFSET..], &[10.0, 5.0]);
        assert!(build_social_feature(&[rec(1, 2, 48, 0, 0.0)], 1, &gps).is_err());
        assert!(build_social_feature(&[rec(3, 2, 0, 0, 0.0)], 1, &gps).is_err());
    }

    #[test]
    fn bulk_matches_single_user() {
        let gps = gps_two();
        let recs = vec![rec(1, 2, 5, 1, 0.0), rec(2, 3, 5, 2, 10.0), rec(4, 4, 7, 0, 0.0), rec(3, 1, 6, 23, 10.0)];
        let all = build_all_features(&recs, &gps).unwrap();
        assert_eq!(all.len(), 4);
        assert!(all[&4].iter().all(|&v| v == 0.0));
        for (&u, f) in &all {
            let mine: Vec<_> = recs.iter().copied().filter(|r| r.sender == u || r.receiver == u).collect();
            assert_eq!(&build_social_feature(&mine, u, &gps).unwrap(), f);
        }
    }

    #[test]
    fn norm_examples() {
        let s = fit_norm(&[vec![0.0, 2.0], vec![4.0, 1.0]]).unwrap();
        assert_eq!(s.per_dim_max, vec![4.0, 2.0]);
        assert_eq!(fit_norm(&[vec![0.0, 3.0]]).unwrap().per_dim_max, vec![1.0, 3.0]);
        assert!(fit_norm(&[]).is_err());
        assert_eq!(normalize(&[2.0, 1.0], &s).unwrap(), vec![0.5, 0.5]);
        assert_eq!(normalize(&[4.0, 2.0], &s).unwrap(), vec![1.0, 1.0]);
        assert_eq!(normalize(&[8.0, 0.0], &s).unwrap(), vec![1.0, 0.0]);
        assert!(normalize(&[1.0], &s).is_err());
    }

    #[test]
    fn content_one_hot() {
        assert_eq!(content_feature(0).unwrap()[0], 1.0);
        assert_eq!(content_feature(47).unwrap().iter().sum::<f64>(), 1.0);
        assert!(content_feature(48).is_err());
    }

    #[test]
    fn hours_are_utc() {
        let r = TransferRecord { ts: -1, ..rec(1, 2, 0, 0, 0.0) };
        assert_eq!(r.hour(), 23);
    }
}
