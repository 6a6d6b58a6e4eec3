//! Comparison models and feature masks.
//!
//! * [`ChainLstm`]: the same cell run along root-to-leaf paths, one path at
//!   a time. It shares its parameter layout with [`D2dLstm`] so the two can
//!   be checked against each other on path-shaped trees.
//! * [`FcBaseline`]: three dense layers over `[content one-hot; social]`
//!   with no memory of the path.
//!
//! [`D2dLstm`]: crate::d2dlstm::D2dLstm

mod chain;
mod fc;

pub use chain::{path_targets, root_to_leaf_paths, ChainForward, ChainLstm};
pub use fc::{FcBaseline, FcCache, FcConfig, FcGrads};

use serde::{Deserialize, Serialize};

use crate::features::{HOURS, HOUR_OFFSET, NUM_CATEGORIES, REGION_OFFSET, SHARE_OFFSET, TYPE_OFFSET};

/// Which feature blocks a model may see. Masked blocks are zeroed; no
/// dimension changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureMask {
    pub use_content: bool,
    pub use_type: bool,
    pub use_share: bool,
    pub use_time: bool,
    pub use_region: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        Self::FULL
    }
}

impl FeatureMask {
    pub const FULL: Self = Self { use_content: true, use_type: true, use_share: true, use_time: true, use_region: true };

    pub fn with_time_region(time: bool, region: bool) -> Self {
        Self { use_time: time, use_region: region, ..Self::FULL }
    }

    /// The content category the model may see.
    pub fn content(&self, category: usize) -> Option<usize> {
        self.use_content.then_some(category)
    }

    /// Zeroes the masked blocks of a social feature in place.
    pub fn apply_social(&self, x: &mut [f64]) {
        let mut zero = |lo: usize, hi: usize| {
            let hi = hi.min(x.len());
            if lo < hi {
                x[lo..hi].iter_mut().for_each(|v| *v = 0.0);
            }
        };
        if !self.use_type {
            zero(TYPE_OFFSET, TYPE_OFFSET + NUM_CATEGORIES);
        }
        if !self.use_share {
            zero(SHARE_OFFSET, SHARE_OFFSET + 2);
        }
        if !self.use_time {
            zero(HOUR_OFFSET, HOUR_OFFSET + HOURS);
        }
        if !self.use_region {
            zero(REGION_OFFSET, usize::MAX);
        }
    }

    /// Short label such as `type+share+time` used in reports.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.use_content, "content"),
            (self.use_type, "type"),
            (self.use_share, "share"),
            (self.use_time, "time"),
            (self.use_region, "region"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Masked copy of a social feature vector.
pub fn apply_mask(x: &[f64], mask: &FeatureMask) -> Vec<f64> {
    let mut out = x.to_vec();
    mask.apply_social(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones() -> Vec<f64> {
        vec![1.0; REGION_OFFSET + 10]
    }

    #[test]
    fn full_mask_is_identity() {
        let x: Vec<f64> = (0..84).map(|i| i as f64 * 0.1).collect();
        assert_eq!(apply_mask(&x, &FeatureMask::FULL), x);
    }

    #[test]
    fn region_block_layout() {
        let y = apply_mask(&ones(), &FeatureMask::with_time_region(true, false));
        assert!(y[..REGION_OFFSET].iter().all(|&v| v == 1.0));
        assert!(y[REGION_OFFSET..].iter().all(|&v| v == 0.0));
        let y = apply_mask(&ones(), &FeatureMask::with_time_region(false, true));
        assert!(y[HOUR_OFFSET..REGION_OFFSET].iter().all(|&v| v == 0.0));
        assert!(y[..HOUR_OFFSET].iter().chain(&y[REGION_OFFSET..]).all(|&v| v == 1.0));
    }

    #[test]
    fn all_social_blocks_off() {
        let m = FeatureMask { use_type: false, use_share: false, use_time: false, use_region: false, ..FeatureMask::FULL };
        assert!(apply_mask(&ones(), &m).iter().all(|&v| v == 0.0));
        assert_eq!(m.content(7), Some(7));
        assert_eq!(m.label(), "content");
    }
}
