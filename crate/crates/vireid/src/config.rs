//! Run configuration: a single TOML file with `[dataset]`, `[model]`,
//! `[train]`, `[eval]` and `[output]` sections. Unknown keys are rejected
//! with the parser's line/column diagnostics; CLI flags override keys
//! one-to-one.
//!
//! Defaults follow the published recipe where one exists (λ weights, batch
//! composition, stage epochs 60/60/120, cosine 3e-4 for stages 1–2, the
//! stage-3 warmup-step schedule) and desk-scale values elsewhere.
//! [`RunConfig::desk`] is the small fixed-seed preset used by the examples
//! and the acceptance run (5/5/10 epochs, 16 synthetic identities).

use crate::dataset::{BatchSpec, Direction, GalleryMode, ProtocolSpec, SearchMode, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fusion::FusionDirection;
use crate::losses::LossWeights;
use crate::model::{AblationMode, ModelConfig};
use crate::trainer::{ScheduleKind, ScheduleSpec, StageSettings, TrainSettings};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Manifest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    #[serde(default = "d_num_identities")]
    pub num_identities: usize,
    #[serde(default = "d_train_per_id")]
    pub train_images_per_id_per_modality: usize,
    #[serde(default = "d_test_per_id")]
    pub test_images_per_id_per_modality: usize,
    #[serde(default = "d_image_height")]
    pub image_height: usize,
    #[serde(default = "d_image_width")]
    pub image_width: usize,
    #[serde(default = "d_image_channels")]
    pub image_channels: usize,
    #[serde(default = "d_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "d_dataset_seed")]
    pub seed: u64,
    /// `kind = "manifest"`: explicit manifest paths.
    #[serde(default)]
    pub train_manifest: Option<PathBuf>,
    #[serde(default)]
    pub test_manifest: Option<PathBuf>,
}

fn d_num_identities() -> usize { 16 }
fn d_train_per_id() -> usize { 8 }
fn d_test_per_id() -> usize { 4 }
fn d_image_height() -> usize { 32 }
fn d_image_width() -> usize { 16 }
fn d_image_channels() -> usize { 3 }
fn d_noise_sigma() -> f64 { 0.1 }
fn d_dataset_seed() -> u64 { 7 }

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: DatasetKind::Synthetic,
            num_identities: d_num_identities(),
            train_images_per_id_per_modality: d_train_per_id(),
            test_images_per_id_per_modality: d_test_per_id(),
            image_height: d_image_height(),
            image_width: d_image_width(),
            image_channels: d_image_channels(),
            noise_sigma: d_noise_sigma(),
            seed: d_dataset_seed(),
            train_manifest: None,
            test_manifest: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "d_token_dim")]
    pub token_dim: usize,
    #[serde(default = "d_prompt_tokens")]
    pub prompt_tokens: usize,
    #[serde(default = "d_stem_channels")]
    pub stem_channels: [usize; 2],
    #[serde(default = "d_trunk_channels")]
    pub trunk_channels: [usize; 2],
}

fn d_feature_dim() -> usize { 32 }
fn d_token_dim() -> usize { 16 }
fn d_prompt_tokens() -> usize { 4 }
fn d_stem_channels() -> [usize; 2] { [8, 16] }
fn d_trunk_channels() -> [usize; 2] { [32, 32] }

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            feature_dim: d_feature_dim(),
            token_dim: d_token_dim(),
            prompt_tokens: d_prompt_tokens(),
            stem_channels: d_stem_channels(),
            trunk_channels: d_trunk_channels(),
        }
    }
}

/// Per-stage schedule in config form; `total_epochs` comes from the stage's
/// epoch count.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub warmup_start_lr: Option<f64>,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "d_decay_factor")]
    pub decay_factor: f64,
}

fn d_decay_factor() -> f64 { 0.1 }

impl ScheduleSection {
    fn to_spec(&self, total_epochs: usize) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.kind,
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            warmup_start_lr: self.warmup_start_lr,
            decay_epochs: self.decay_epochs.clone(),
            decay_factor: self.decay_factor,
            total_epochs,
        }
    }

    fn cosine(base_lr: f64) -> Self {
        ScheduleSection {
            kind: ScheduleKind::Cosine,
            base_lr,
            warmup_epochs: 0,
            warmup_start_lr: None,
            decay_epochs: vec![],
            decay_factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_mode")]
    pub mode: String,
    #[serde(default = "d_train_seed")]
    pub seed: u64,
    #[serde(default = "d_lambda1")]
    pub lambda1: f64,
    #[serde(default = "d_lambda2")]
    pub lambda2: f64,
    #[serde(default = "d_lambda3")]
    pub lambda3: f64,
    #[serde(default = "d_epochs_mspl")]
    pub epochs_mspl: usize,
    #[serde(default = "d_epochs_sii")]
    pub epochs_sii: usize,
    #[serde(default = "d_epochs_hse")]
    pub epochs_hse: usize,
    #[serde(default = "d_batch_identities")]
    pub batch_identities: usize,
    #[serde(default = "d_batch_visible")]
    pub batch_visible_per_identity: usize,
    #[serde(default = "d_batch_infrared")]
    pub batch_infrared_per_identity: usize,
    /// `v_query` (the written equations) or `r_query` (mirrored variant).
    #[serde(default = "d_fusion_direction")]
    pub fusion_direction: String,
    #[serde(default = "d_similarity_scale")]
    pub similarity_scale: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_augment_flip")]
    pub augment_flip: bool,
    #[serde(default = "d_augment_pad")]
    pub augment_pad: usize,
    /// Batches per epoch; unset = one pass over the training records.
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
    #[serde(default)]
    pub schedule_mspl: Option<ScheduleSection>,
    #[serde(default)]
    pub schedule_sii: Option<ScheduleSection>,
    #[serde(default)]
    pub schedule_hse: Option<ScheduleSection>,
    #[serde(default)]
    pub pretrained_checkpoint: Option<PathBuf>,
}

fn d_mode() -> String { "csdn_full".into() }
fn d_train_seed() -> u64 { 42 }
fn d_lambda1() -> f64 { 0.15 }
fn d_lambda2() -> f64 { 0.05 }
fn d_lambda3() -> f64 { 0.1 }
fn d_epochs_mspl() -> usize { 60 }
fn d_epochs_sii() -> usize { 60 }
fn d_epochs_hse() -> usize { 120 }
fn d_batch_identities() -> usize { 8 }
fn d_batch_visible() -> usize { 4 }
fn d_batch_infrared() -> usize { 4 }
fn d_fusion_direction() -> String { "v_query".into() }
fn d_similarity_scale() -> f64 { 1.0 }
fn d_weight_decay() -> f64 { 5e-4 }
fn d_augment_flip() -> bool { true }
fn d_augment_pad() -> usize { 1 }

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("empty train section has defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_search_mode")]
    pub search_mode: String,
    #[serde(default = "d_gallery_mode")]
    pub gallery_mode: String,
    #[serde(default = "d_direction")]
    pub direction: String,
    #[serde(default = "d_trials")]
    pub trials: usize,
    #[serde(default = "d_trial_seed")]
    pub trial_seed: u64,
}

fn d_search_mode() -> String { "all".into() }
fn d_gallery_mode() -> String { "single-shot".into() }
fn d_direction() -> String { "ir_to_vis".into() }
fn d_trials() -> usize { 10 }
fn d_trial_seed() -> u64 { 2024 }

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("empty eval section has defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "d_output_dir")]
    pub dir: PathBuf,
}

fn d_output_dir() -> PathBuf { PathBuf::from("runs/out") }

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: d_output_dir() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    /// Parse from TOML; errors carry the parser's line/column context and
    /// name the offending key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse failed: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The fixed desk-scale preset: 16 synthetic identities, 5/5/10 epochs,
    /// schedules tuned for the small model.
    pub fn desk() -> Self {
        let mut cfg = RunConfig::default();
        cfg.train.epochs_mspl = 5;
        cfg.train.epochs_sii = 5;
        cfg.train.epochs_hse = 10;
        cfg.train.batches_per_epoch = Some(24);
        cfg.train.schedule_mspl = Some(ScheduleSection::cosine(5e-2));
        cfg.train.schedule_sii = Some(ScheduleSection::cosine(2e-2));
        cfg.train.schedule_hse = Some(ScheduleSection {
            kind: ScheduleKind::WarmupStep,
            base_lr: 1e-2,
            warmup_epochs: 2,
            warmup_start_lr: None,
            decay_epochs: vec![8],
            decay_factor: 0.1,
        });
        cfg
    }

    pub fn mode(&self) -> Result<AblationMode> {
        AblationMode::parse(&self.train.mode)
    }

    pub fn fusion_direction(&self) -> Result<FusionDirection> {
        match self.train.fusion_direction.as_str() {
            "v_query" => Ok(FusionDirection::VisibleQuery),
            "r_query" => Ok(FusionDirection::InfraredQuery),
            other => Err(Error::Config(format!(
                "train.fusion_direction must be 'v_query' or 'r_query', got '{other}'"
            ))),
        }
    }

    pub fn search_mode(&self) -> Result<SearchMode> {
        match self.eval.search_mode.as_str() {
            "all" => Ok(SearchMode::All),
            "indoor" => Ok(SearchMode::Indoor),
            other => Err(Error::Config(format!(
                "eval.search_mode must be 'all' or 'indoor', got '{other}'"
            ))),
        }
    }

    pub fn gallery_mode(&self) -> Result<GalleryMode> {
        parse_gallery_mode(&self.eval.gallery_mode)
    }

    pub fn direction(&self) -> Result<Direction> {
        match self.eval.direction.as_str() {
            "ir_to_vis" => Ok(Direction::InfraredToVisible),
            "vis_to_ir" => Ok(Direction::VisibleToInfrared),
            other => Err(Error::Config(format!(
                "eval.direction must be 'ir_to_vis' or 'vis_to_ir', got '{other}'"
            ))),
        }
    }

    pub fn protocol(&self) -> Result<ProtocolSpec> {
        Ok(ProtocolSpec {
            search_mode: self.search_mode()?,
            gallery_mode: self.gallery_mode()?,
            direction: self.direction()?,
            trial_seed: self.eval.trial_seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.mode()?;
        self.fusion_direction()?;
        self.search_mode()?;
        self.gallery_mode()?;
        self.direction()?;
        if self.eval.trials == 0 {
            return Err(Error::Config("eval.trials must be at least 1".into()));
        }
        if self.dataset.kind == DatasetKind::Manifest
            && (self.dataset.train_manifest.is_none() || self.dataset.test_manifest.is_none())
        {
            return Err(Error::Config(
                "dataset.kind = 'manifest' requires dataset.train_manifest and dataset.test_manifest".into(),
            ));
        }
        Ok(())
    }

    pub fn synthetic_spec(&self, split: Split) -> Result<SyntheticSpec> {
        if self.dataset.kind != DatasetKind::Synthetic {
            return Err(Error::Config(
                "dataset.kind is 'manifest'; synthetic generation not configured".into(),
            ));
        }
        Ok(SyntheticSpec {
            num_identities: self.dataset.num_identities,
            images_per_id_per_modality: match split {
                Split::Train => self.dataset.train_images_per_id_per_modality,
                Split::Test => self.dataset.test_images_per_id_per_modality,
            },
            image_shape: (self.dataset.image_height, self.dataset.image_width, self.dataset.image_channels),
            seed: self.dataset.seed,
            noise_sigma: self.dataset.noise_sigma,
            split,
        })
    }

    /// Manifest paths: explicit for `kind = "manifest"`, under the output
    /// directory for synthetic runs.
    pub fn manifest_paths(&self) -> (PathBuf, PathBuf) {
        match self.dataset.kind {
            DatasetKind::Manifest => (
                self.dataset.train_manifest.clone().expect("validated"),
                self.dataset.test_manifest.clone().expect("validated"),
            ),
            DatasetKind::Synthetic => (
                self.output.dir.join("train_manifest.jsonl"),
                self.output.dir.join("test_manifest.jsonl"),
            ),
        }
    }

    pub fn model_config(&self, num_identities: usize) -> ModelConfig {
        ModelConfig {
            feature_dim: self.model.feature_dim,
            token_dim: self.model.token_dim,
            prompt_tokens: self.model.prompt_tokens,
            stem_channels: self.model.stem_channels,
            trunk_channels: self.model.trunk_channels,
            image_channels: self.dataset.image_channels,
            num_identities,
        }
    }

    pub fn train_settings(&self, num_identities: usize) -> Result<TrainSettings> {
        let mode = self.mode()?;
        let t = &self.train;
        let mspl_schedule = t
            .schedule_mspl
            .as_ref()
            .map(|s| s.to_spec(t.epochs_mspl))
            .unwrap_or_else(|| ScheduleSpec::cosine(3e-4, t.epochs_mspl));
        let sii_schedule = t
            .schedule_sii
            .as_ref()
            .map(|s| s.to_spec(t.epochs_sii))
            .unwrap_or_else(|| ScheduleSpec::cosine(3e-4, t.epochs_sii));
        let hse_schedule = t.schedule_hse.as_ref().map(|s| s.to_spec(t.epochs_hse)).unwrap_or_else(|| {
            ScheduleSpec::warmup_step(3e-4, 10, vec![40, 70], 0.1, t.epochs_hse)
        });
        let settings = TrainSettings {
            mode,
            fusion_direction: self.fusion_direction()?,
            seed: t.seed,
            weights: LossWeights { lambda1: t.lambda1, lambda2: t.lambda2, lambda3: t.lambda3 },
            batch: BatchSpec {
                num_identities_per_batch: t.batch_identities,
                visible_per_identity: t.batch_visible_per_identity,
                infrared_per_identity: t.batch_infrared_per_identity,
            },
            similarity_scale: t.similarity_scale,
            weight_decay: t.weight_decay,
            augment_flip: t.augment_flip,
            augment_pad: t.augment_pad,
            batches_per_epoch: t.batches_per_epoch,
            mspl: StageSettings { epochs: t.epochs_mspl, schedule: mspl_schedule },
            sii: StageSettings { epochs: t.epochs_sii, schedule: sii_schedule },
            hse: StageSettings { epochs: t.epochs_hse, schedule: hse_schedule },
            model: self.model_config(num_identities),
            pretrained_checkpoint: t.pretrained_checkpoint.clone(),
        };
        settings.validate()?;
        Ok(settings)
    }
}

pub fn parse_gallery_mode(s: &str) -> Result<GalleryMode> {
    match s {
        "single-shot" | "single" => Ok(GalleryMode::SingleShot),
        "multi-shot" | "multi" => Ok(GalleryMode::MultiShot),
        other => Err(Error::Config(format!(
            "gallery mode must be 'single-shot' or 'multi-shot', got '{other}'"
        ))),
    }
}
