//! Pipeline configuration: one TOML file with a section per stage.
//!
//! Values are layered: built-in desk defaults, then the config file, then
//! `--set section.key=value` overrides, then dedicated flags. The global
//! `seed` replaces every per-section seed.

use std::path::{Path, PathBuf};

use d2dlstm::baselines::FeatureMask;
use d2dlstm::d2dlstm::TreeCheckConfig;
use d2dlstm::generation::GenConfig;
use d2dlstm::synth::GeneratorConfig;
use d2dlstm::training::{ArchConfig, LossWeighting, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Directory that relative paths resolve against.
    pub out: PathBuf,
    pub paths: Paths,
    pub features: FeatureParams,
    pub split: SplitParams,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub generate: GenConfig,
    pub sweep: SweepParams,
    pub gradcheck: TreeCheckConfig,
}

/// File names of every stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub records: PathBuf,
    pub truth_trees: PathBuf,
    pub gps: PathBuf,
    pub features: PathBuf,
    pub norm: PathBuf,
    pub prototypes: PathBuf,
    pub trees: PathBuf,
    /// Directory holding `train.jsonl`, `val.jsonl` and `test.jsonl`.
    pub split: PathBuf,
    pub models: PathBuf,
    pub reports: PathBuf,
    pub generated: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            records: "records.jsonl".into(),
            truth_trees: "truth_trees.jsonl".into(),
            gps: "gps.json".into(),
            features: "features.jsonl".into(),
            norm: "norm.json".into(),
            prototypes: "prototypes.json".into(),
            trees: "trees.jsonl".into(),
            split: "split".into(),
            models: "models".into(),
            reports: "reports".into(),
            generated: "generated.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    /// GPS clusters.
    pub regions: usize,
    /// Prototypes.
    pub k: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self { regions: 1000, k: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitParams {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self { train: 0.7, val: 0.15, test: 0.15 }
    }
}

impl SplitParams {
    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.train, self.val, self.test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepParams {
    pub ks: Vec<usize>,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self { ks: vec![5, 10, 20, 50, 100] }
    }
}

/// Training settings that fit a single desk machine: a small model, Adam at
/// a low learning rate and per-pair loss weighting.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        arch: ArchConfig { hidden: 64, dropout_hidden: 0.0, dropout_fc: 0.0, ..ArchConfig::default() },
        lr_initial: 0.003,
        lr_reduced: 0.0003,
        epochs: 20,
        loss_weighting: LossWeighting::PerPair,
        mask: FeatureMask::FULL,
        ..TrainConfig::default()
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "run".into(),
            paths: Paths::default(),
            features: FeatureParams::default(),
            split: SplitParams::default(),
            generator: GeneratorConfig::default(),
            train: desk_train_config(),
            generate: GenConfig::default(),
            sweep: SweepParams::default(),
            gradcheck: TreeCheckConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Builds the config from an optional file and `key=value` overrides.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut table = toml::Table::try_from(Self::default()).expect("defaults serialize");
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            let user = text.parse::<toml::Table>().map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            merge(&mut table, user);
        }
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Input(e.to_string()))?;
        Ok(cfg)
    }

    /// Copies the global seed into every stage.
    pub fn propagate_seed(&mut self) {
        self.generator.seed = self.seed;
        self.train.seed = self.seed;
        self.generate.seed = self.seed;
        self.gradcheck.seed = self.seed;
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Overlays `top` on `base`, recursing into tables present in both.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies one `a.b.c=value` override. The value is read as TOML and taken
/// as a bare string when that fails.
fn apply_set(table: &mut toml::Table, set: &str) -> Result<(), CliError> {
    let (key, raw) = set.split_once('=').ok_or_else(|| CliError::Input(format!("--set expects key=value, got {set:?}")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Input(format!("bad key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Input(format!("{key}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let back: PipelineConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sets_override_nested_keys() {
        let sets = ["train.epochs=3".to_string(), "train.arch.hidden=16".into(), "generate.mode=greedy".into()];
        let cfg = PipelineConfig::load(None, &sets).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.arch.hidden, 16);
        assert_eq!(cfg.generate.mode, d2dlstm::generation::GenMode::Greedy);
        // Unset keys keep their defaults.
        assert_eq!(cfg.train.lr_initial, 0.003);
    }

    #[test]
    fn partial_file_sections_keep_desk_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 4\n[train]\nepochs = 2\n[train.arch]\nhidden = 8\n").unwrap();
        let cfg = PipelineConfig::load(Some(&p), &["train.epochs=5".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs, cfg.train.arch.hidden), (4, 5, 8));
        assert_eq!(cfg.train.lr_initial, 0.003);
        assert_eq!(cfg.train.arch.dropout_hidden, 0.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::load(None, &["train.epoch=3".into()]).is_err());
        assert!(PipelineConfig::load(None, &["nokey".into()]).is_err());
    }
}
