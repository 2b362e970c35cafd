//! Checkpoint archive: one JSON document holding every named parameter
//! group plus stage/epoch metadata, optimizer moments and the sampler RNG
//! state. f64 values survive the JSON round trip bit-exactly (shortest
//! round-trip serialization), so `load(save(m))` reproduces all parameter
//! groups bitwise and a mid-stage resume continues the exact trajectory.

use crate::error::{Error, Result};
use crate::model::{AblationMode, Model, ModelConfig, Stage};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentEntry {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, MomentEntry>,
}

/// Serializable ChaCha8 state: seed, stream, and position in the stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// u128 word position, as a decimal string (JSON numbers cannot hold it).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad rng word position: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub mode: AblationMode,
    pub fusion_direction: crate::fusion::FusionDirection,
    pub model: ModelConfig,
    pub completed_stages: Vec<Stage>,
    /// Set while a stage is underway (for mid-stage resume).
    pub current_stage: Option<Stage>,
    /// Epochs finished inside `current_stage`.
    pub epochs_done: usize,
    pub train_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub groups: BTreeMap<String, Vec<TensorEntry>>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
}

fn tensor_entry(name: &str, tensor: &ArrayD<f64>) -> Result<TensorEntry> {
    if tensor.iter().any(|v| !v.is_finite()) {
        return Err(Error::Checkpoint(format!("tensor {name} contains non-finite values")));
    }
    Ok(TensorEntry {
        name: name.to_string(),
        shape: tensor.shape().to_vec(),
        data: tensor.iter().copied().collect(),
    })
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        meta: CheckpointMeta,
        optimizer: Option<OptimizerState>,
        rng: Option<RngState>,
    ) -> Result<Self> {
        let mut groups = BTreeMap::new();
        for group in model.groups() {
            let mut entries = Vec::new();
            for (name, tensor) in model.group_tensors(group) {
                entries.push(tensor_entry(&name, tensor)?);
            }
            groups.insert(group.name().to_string(), entries);
        }
        Ok(Checkpoint { meta, groups, optimizer, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialize failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("cannot parse {}: {e}", path.display())))?;
        if ckpt.meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                ckpt.meta.format_version
            )));
        }
        Ok(ckpt)
    }

    fn take_tensor(&self, group: &str, name: &str, expect: &[usize]) -> Result<ArrayD<f64>> {
        let entries = self
            .groups
            .get(group)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter group '{group}'")))?;
        let entry = entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{group}/{name}'")))?;
        if entry.shape != expect {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for '{group}/{name}': checkpoint has {:?}, expected {:?}",
                entry.shape, expect
            )));
        }
        ArrayD::from_shape_vec(IxDyn(&entry.shape), entry.data.clone())
            .map_err(|e| Error::Checkpoint(format!("bad tensor '{group}/{name}': {e}")))
    }

    /// Rebuild the model from the archive. Shapes are validated against the
    /// stored `ModelConfig` (so e.g. an identity-count mismatch between the
    /// archive's head and its declared config is an explicit error).
    pub fn restore_model(&self) -> Result<Model> {
        let cfg = self.meta.model;
        cfg.validate()?;
        // start from a same-shape init and overwrite every tensor
        let mut model = Model::init(cfg, self.meta.mode, self.meta.fusion_direction, 0)?;
        self.write_groups_into(&mut model)?;
        Ok(model)
    }

    /// Overwrite every group of `model` with the archive contents,
    /// validating shapes tensor-by-tensor.
    pub fn write_groups_into(&self, model: &mut Model) -> Result<()> {
        let groups = model.groups();
        self.write_selected_groups_into(model, &groups)
    }

    /// Overwrite a subset of groups (e.g. only the visual side when seeding
    /// from a pretrained checkpoint).
    pub fn write_selected_groups_into(
        &self,
        model: &mut Model,
        groups: &[crate::model::ParamGroup],
    ) -> Result<()> {
        for &group in groups {
            let expected: Vec<(String, Vec<usize>)> = model
                .group_tensors(group)
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec()))
                .collect();
            let mut loaded = Vec::new();
            for (name, shape) in &expected {
                loaded.push(self.take_tensor(group.name(), name, shape)?);
            }
            for ((_, slot), value) in model.group_tensors_mut(group).into_iter().zip(loaded) {
                *slot = value;
            }
        }
        Ok(())
    }

    /// Validate that the archive matches an expected model configuration
    /// (identity count, dims). Used before resuming or evaluating.
    pub fn validate_against(&self, expected: &ModelConfig) -> Result<()> {
        let got = &self.meta.model;
        if got.num_identities != expected.num_identities {
            return Err(Error::Checkpoint(format!(
                "shape mismatch: checkpoint was trained with {} identities, current config has {}",
                got.num_identities, expected.num_identities
            )));
        }
        if got != expected {
            return Err(Error::Checkpoint(format!(
                "model configuration mismatch: checkpoint {:?} vs expected {:?}",
                got, expected
            )));
        }
        Ok(())
    }
}
