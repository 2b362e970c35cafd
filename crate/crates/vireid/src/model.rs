//! Full model assembly: which submodules exist per ablation mode, named
//! parameter groups, and content hashing for the freezing audit.
//!
//! Every trainable tensor belongs to exactly one group; the per-stage
//! training procedure freezes groups wholesale, so group hashes before and
//! after a stage are the audit trail for "only these parameters moved".

use crate::encoders::{ClassifierHead, PromptBank, PromptMode, TextEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::fusion::{FusionDirection, FusionParams};
use ndarray::ArrayD;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Training stages of the three-stage procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Stage 1: modality-specific (or shared) prompt learning.
    Mspl,
    /// Stage 2: attention-fusion training over the text banks.
    Sii,
    /// Stage 3: visual encoder + classifier training.
    Hse,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Mspl => "mspl",
            Stage::Sii => "sii",
            Stage::Hse => "hse",
        }
    }
}

/// Which variant of the pipeline to train (mirrors the ablation table).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Visual encoder + classifier only, identity + triplet losses.
    Baseline,
    /// Same as baseline, but the visual weights may be seeded from a
    /// supplied checkpoint (stand-in for a pretrained backbone).
    ClipPretrained,
    /// One shared prompt bank, then visual training against its prototypes.
    ClipVireid,
    /// Modality-specific prompts, no fusion; visual training against the
    /// per-modality banks.
    CsdnMsplOnly,
    /// The full pipeline: bimodal prompts, attention fusion, semantic
    /// embedding.
    CsdnFull,
}

impl AblationMode {
    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::ClipPretrained => "clip_pretrained",
            AblationMode::ClipVireid => "clip_vireid",
            AblationMode::CsdnMsplOnly => "csdn_mspl_only",
            AblationMode::CsdnFull => "csdn_full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(AblationMode::Baseline),
            "clip_pretrained" => Ok(AblationMode::ClipPretrained),
            "clip_vireid" => Ok(AblationMode::ClipVireid),
            "csdn_mspl_only" => Ok(AblationMode::CsdnMsplOnly),
            "csdn_full" => Ok(AblationMode::CsdnFull),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected baseline, clip_pretrained, clip_vireid, csdn_mspl_only or csdn_full)"
            ))),
        }
    }

    pub fn prompt_mode(&self) -> Option<PromptMode> {
        match self {
            AblationMode::Baseline | AblationMode::ClipPretrained => None,
            AblationMode::ClipVireid => Some(PromptMode::Shared),
            AblationMode::CsdnMsplOnly | AblationMode::CsdnFull => Some(PromptMode::ModalitySpecific),
        }
    }

    pub fn has_fusion(&self) -> bool {
        matches!(self, AblationMode::CsdnFull)
    }

    /// Stage sequence this mode trains, in order.
    pub fn stages(&self) -> Vec<Stage> {
        match self {
            AblationMode::Baseline | AblationMode::ClipPretrained => vec![Stage::Hse],
            AblationMode::ClipVireid | AblationMode::CsdnMsplOnly => vec![Stage::Mspl, Stage::Hse],
            AblationMode::CsdnFull => vec![Stage::Mspl, Stage::Sii, Stage::Hse],
        }
    }
}

/// Named parameter groups. The trainable set of each stage is a subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Stems,
    Trunk,
    Head,
    PromptVisible,
    PromptInfrared,
    PromptShared,
    Fusion,
    TextEncoderConfig,
}

impl ParamGroup {
    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::Stems => "stems",
            ParamGroup::Trunk => "trunk",
            ParamGroup::Head => "head",
            ParamGroup::PromptVisible => "prompt_visible",
            ParamGroup::PromptInfrared => "prompt_infrared",
            ParamGroup::PromptShared => "prompt_shared",
            ParamGroup::Fusion => "fusion",
            ParamGroup::TextEncoderConfig => "text_encoder_config",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stems" => Ok(ParamGroup::Stems),
            "trunk" => Ok(ParamGroup::Trunk),
            "head" => Ok(ParamGroup::Head),
            "prompt_visible" => Ok(ParamGroup::PromptVisible),
            "prompt_infrared" => Ok(ParamGroup::PromptInfrared),
            "prompt_shared" => Ok(ParamGroup::PromptShared),
            "fusion" => Ok(ParamGroup::Fusion),
            "text_encoder_config" => Ok(ParamGroup::TextEncoderConfig),
            other => Err(Error::Checkpoint(format!("unknown parameter group '{other}'"))),
        }
    }
}

/// Architecture sizing. Defaults are desk-scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub token_dim: usize,
    pub prompt_tokens: usize,
    pub stem_channels: [usize; 2],
    pub trunk_channels: [usize; 2],
    pub image_channels: usize,
    pub num_identities: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 32,
            token_dim: 16,
            prompt_tokens: 4,
            stem_channels: [8, 16],
            trunk_channels: [32, 32],
            image_channels: 3,
            num_identities: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("token_dim", self.token_dim),
            ("prompt_tokens", self.prompt_tokens),
            ("image_channels", self.image_channels),
            ("num_identities", self.num_identities),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.stem_channels.iter().any(|&c| c == 0) || self.trunk_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("model channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// The full model: visual side always present, text side per mode.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub mode: AblationMode,
    pub fusion_direction: FusionDirection,
    pub encoder: VisualEncoder,
    pub head: ClassifierHead,
    pub prompts: Option<PromptBank>,
    pub fusion: Option<FusionParams>,
    pub text_encoder: Option<TextEncoder>,
}

impl Model {
    /// Deterministic initialization: all draws come from one seeded stream
    /// in a fixed order (encoder, head, prompts, fusion, text encoder).
    pub fn init(
        config: ModelConfig,
        mode: AblationMode,
        fusion_direction: FusionDirection,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = VisualEncoder::init(
            &mut rng,
            config.image_channels,
            config.stem_channels,
            config.trunk_channels,
            config.feature_dim,
        );
        let head = ClassifierHead::init(&mut rng, config.num_identities, config.feature_dim);
        let prompts = mode.prompt_mode().map(|pm| {
            PromptBank::init(&mut rng, pm, config.num_identities, config.prompt_tokens, config.token_dim)
        });
        let fusion = mode
            .has_fusion()
            .then(|| FusionParams::init(&mut rng, config.feature_dim));
        let text_encoder = prompts
            .is_some()
            .then(|| TextEncoder::init(&mut rng, config.token_dim, config.feature_dim));
        Ok(Model { config, mode, fusion_direction, encoder, head, prompts, fusion, text_encoder })
    }

    /// Groups instantiated for this mode, in canonical order.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut out = vec![ParamGroup::Stems, ParamGroup::Trunk, ParamGroup::Head];
        if let Some(prompts) = &self.prompts {
            match prompts.mode {
                PromptMode::Shared => out.push(ParamGroup::PromptShared),
                PromptMode::ModalitySpecific => {
                    out.push(ParamGroup::PromptVisible);
                    out.push(ParamGroup::PromptInfrared);
                }
            }
        }
        if self.fusion.is_some() {
            out.push(ParamGroup::Fusion);
        }
        if self.text_encoder.is_some() {
            out.push(ParamGroup::TextEncoderConfig);
        }
        out
    }

    pub fn group_tensors(&self, group: ParamGroup) -> Vec<(String, &ArrayD<f64>)> {
        match group {
            ParamGroup::Stems => vec![
                ("visible.conv1.weight".into(), &self.encoder.stem_visible.conv1.weight),
                ("visible.conv1.bias".into(), &self.encoder.stem_visible.conv1.bias),
                ("visible.conv2.weight".into(), &self.encoder.stem_visible.conv2.weight),
                ("visible.conv2.bias".into(), &self.encoder.stem_visible.conv2.bias),
                ("infrared.conv1.weight".into(), &self.encoder.stem_infrared.conv1.weight),
                ("infrared.conv1.bias".into(), &self.encoder.stem_infrared.conv1.bias),
                ("infrared.conv2.weight".into(), &self.encoder.stem_infrared.conv2.weight),
                ("infrared.conv2.bias".into(), &self.encoder.stem_infrared.conv2.bias),
            ],
            ParamGroup::Trunk => vec![
                ("conv1.weight".into(), &self.encoder.trunk.conv1.weight),
                ("conv1.bias".into(), &self.encoder.trunk.conv1.bias),
                ("conv2.weight".into(), &self.encoder.trunk.conv2.weight),
                ("conv2.bias".into(), &self.encoder.trunk.conv2.bias),
                ("proj.weight".into(), &self.encoder.trunk.proj_weight),
                ("proj.bias".into(), &self.encoder.trunk.proj_bias),
            ],
            ParamGroup::Head => vec![("weight".into(), &self.head.weight)],
            ParamGroup::PromptVisible | ParamGroup::PromptShared => {
                match &self.prompts {
                    Some(p) => vec![("tokens".into(), &p.visible)],
                    None => vec![],
                }
            }
            ParamGroup::PromptInfrared => match self.prompts.as_ref().and_then(|p| p.infrared.as_ref()) {
                Some(b) => vec![("tokens".into(), b)],
                None => vec![],
            },
            ParamGroup::Fusion => match &self.fusion {
                Some(f) => vec![
                    ("w_query".into(), &f.w_query),
                    ("w_key".into(), &f.w_key),
                    ("w_value".into(), &f.w_value),
                    ("w_combine".into(), &f.w_combine),
                ],
                None => vec![],
            },
            ParamGroup::TextEncoderConfig => {
                let mut out: Vec<(String, &ArrayD<f64>)> = Vec::new();
                if let Some(t) = &self.text_encoder {
                    out.push(("projection".into(), &t.projection));
                }
                if let Some(p) = &self.prompts {
                    out.push(("identity_tokens".into(), &p.identity_tokens));
                    out.push(("prefix".into(), &p.prefix));
                    out.push(("suffix".into(), &p.suffix));
                }
                out
            }
        }
    }

    pub fn group_tensors_mut(&mut self, group: ParamGroup) -> Vec<(String, &mut ArrayD<f64>)> {
        match group {
            ParamGroup::Stems => vec![
                ("visible.conv1.weight".into(), &mut self.encoder.stem_visible.conv1.weight),
                ("visible.conv1.bias".into(), &mut self.encoder.stem_visible.conv1.bias),
                ("visible.conv2.weight".into(), &mut self.encoder.stem_visible.conv2.weight),
                ("visible.conv2.bias".into(), &mut self.encoder.stem_visible.conv2.bias),
                ("infrared.conv1.weight".into(), &mut self.encoder.stem_infrared.conv1.weight),
                ("infrared.conv1.bias".into(), &mut self.encoder.stem_infrared.conv1.bias),
                ("infrared.conv2.weight".into(), &mut self.encoder.stem_infrared.conv2.weight),
                ("infrared.conv2.bias".into(), &mut self.encoder.stem_infrared.conv2.bias),
            ],
            ParamGroup::Trunk => vec![
                ("conv1.weight".into(), &mut self.encoder.trunk.conv1.weight),
                ("conv1.bias".into(), &mut self.encoder.trunk.conv1.bias),
                ("conv2.weight".into(), &mut self.encoder.trunk.conv2.weight),
                ("conv2.bias".into(), &mut self.encoder.trunk.conv2.bias),
                ("proj.weight".into(), &mut self.encoder.trunk.proj_weight),
                ("proj.bias".into(), &mut self.encoder.trunk.proj_bias),
            ],
            ParamGroup::Head => vec![("weight".into(), &mut self.head.weight)],
            ParamGroup::PromptVisible | ParamGroup::PromptShared => match &mut self.prompts {
                Some(p) => vec![("tokens".into(), &mut p.visible)],
                None => vec![],
            },
            ParamGroup::PromptInfrared => {
                match self.prompts.as_mut().and_then(|p| p.infrared.as_mut()) {
                    Some(b) => vec![("tokens".into(), b)],
                    None => vec![],
                }
            }
            ParamGroup::Fusion => match &mut self.fusion {
                Some(f) => vec![
                    ("w_query".into(), &mut f.w_query),
                    ("w_key".into(), &mut f.w_key),
                    ("w_value".into(), &mut f.w_value),
                    ("w_combine".into(), &mut f.w_combine),
                ],
                None => vec![],
            },
            ParamGroup::TextEncoderConfig => {
                let mut out: Vec<(String, &mut ArrayD<f64>)> = Vec::new();
                if let Some(t) = &mut self.text_encoder {
                    out.push(("projection".into(), &mut t.projection));
                }
                if let Some(p) = &mut self.prompts {
                    out.push(("identity_tokens".into(), &mut p.identity_tokens));
                    out.push(("prefix".into(), &mut p.prefix));
                    out.push(("suffix".into(), &mut p.suffix));
                }
                out
            }
        }
    }

    /// SHA-256 over names, shapes and little-endian f64 bytes of a group.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in self.group_tensors(group) {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &dim in tensor.shape() {
                hasher.update((dim as u64).to_le_bytes());
            }
            for &v in tensor.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn all_hashes(&self) -> Vec<(ParamGroup, String)> {
        self.groups().iter().map(|&g| (g, self.group_hash(g))).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.groups()
            .iter()
            .flat_map(|&g| self.group_tensors(g))
            .map(|(_, t)| t.len())
            .sum()
    }
}
