use std::path::Path;

use serde::{Deserialize, Serialize};

use super::learner::{AnyModel, ArchConfig, ModelKind};
use crate::baselines::FeatureMask;
use crate::error::{Error, Result};
use crate::nn::Parameters;

pub const CHECKPOINT_FORMAT: &str = "d2dlstm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild an empty model of the right shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub k: usize,
    pub arch: ArchConfig,
    /// Feature mask the model was trained under.
    #[serde(default)]
    pub mask: FeatureMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// A parameter file: a header echoing the model configuration plus every
/// tensor as `name`, `shape` and row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub header: ModelHeader,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn new(model: &AnyModel, epoch: Option<usize>) -> Self {
        let params = model
            .params()
            .iter()
            .map(|p| ParamEntry { name: p.name.clone(), shape: [p.rows, p.cols], values: p.value.clone() })
            .collect();
        let header = ModelHeader {
            kind: model.kind(),
            input_dim: model.input_dim(),
            k: model.num_classes() - 1,
            arch: model.arch(),
            mask: FeatureMask::FULL,
        };
        Self { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, header, epoch, params }
    }

    pub fn with_mask(mut self, mask: FeatureMask) -> Self {
        self.header.mask = mask;
        self
    }

    /// Rebuilds the model, checking every tensor's name and shape.
    pub fn into_model(self) -> Result<AnyModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Input(format!("not a checkpoint: format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!("unsupported checkpoint version {}", self.version)));
        }
        let h = &self.header;
        let mut model = AnyModel::zeros(h.kind, &h.arch, h.input_dim, h.k)?;
        let mut entries: std::collections::BTreeMap<String, ParamEntry> =
            self.params.into_iter().map(|e| (e.name.clone(), e)).collect();
        for p in model.params_mut() {
            let e = entries.remove(&p.name).ok_or_else(|| Error::Input(format!("checkpoint lacks parameter {}", p.name)))?;
            if e.shape != [p.rows, p.cols] || e.values.len() != p.len() {
                return Err(Error::Input(format!(
                    "parameter {} has shape {:?} in the checkpoint, expected [{}, {}]",
                    p.name, e.shape, p.rows, p.cols
                )));
            }
            p.value = e.values;
            p.ensure_buffers();
        }
        if let Some(extra) = entries.keys().next() {
            return Err(Error::Input(format!("checkpoint has unknown parameter {extra}")));
        }
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::read_json(path)
    }
}

pub fn save_model(model: &AnyModel, epoch: Option<usize>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(model, epoch).save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AnyModel> {
    Checkpoint::load(path)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_every_kind() {
        let arch = ArchConfig { hidden: 3, fc_widths: [4, 2], ..ArchConfig::default() };
        for kind in [ModelKind::D2dLstm, ModelKind::Lstm, ModelKind::Fc] {
            let m = AnyModel::init(kind, &arch, 5, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let text = serde_json::to_string(&Checkpoint::new(&m, Some(2))).unwrap();
            let back: Checkpoint = serde_json::from_str(&text).unwrap();
            assert_eq!(back.header.kind, kind);
            assert_eq!(back.into_model().unwrap(), m);
        }
    }

    #[test]
    fn rejects_wrong_shapes_and_versions() {
        let arch = ArchConfig { hidden: 3, ..ArchConfig::default() };
        let m = AnyModel::init(ModelKind::D2dLstm, &arch, 5, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut c = Checkpoint::new(&m, None);
        c.version = 99;
        assert!(c.clone().into_model().is_err());
        c.version = CHECKPOINT_VERSION;
        c.params[0].shape = [1, 1];
        assert!(c.clone().into_model().is_err());
        c.params.remove(0);
        assert!(c.into_model().is_err());
    }
}
