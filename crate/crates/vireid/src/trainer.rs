//! The three-stage training procedure: per-stage parameter freezing,
//! learning-rate schedules, Adam updates, per-epoch metrics, checkpointing
//! with mid-stage resume, and a parameter-change audit ledger.
//!
//! Stage 1 (prompt learning) minimizes the bimodal image↔text contrastive
//! pair over the prompt banks; stage 2 trains the four fusion maps against
//! the fused bank; stage 3 trains stems, trunk and classifier with the
//! composite loss. Exactly one group set is trainable per stage — everything
//! else is mounted frozen, and the audit records group hashes before/after
//! each stage so the freezing contract is checkable from the outside.

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointMeta, MomentEntry, OptimizerState, RngState, CHECKPOINT_FORMAT_VERSION};
use crate::dataset::{augment_batch, sample_batch, Batch, BatchSpec, LoadedDataset, Modality, Split};
use crate::encoders::{classify, compute_text_bank, encode_images};
use crate::error::{Error, Result};
use crate::fusion::{attention_fuse_eval, fuse_banks, FusionDirection};
use crate::losses::{graph, half_indices, LossWeights};
use crate::model::{AblationMode, Model, ModelConfig, ParamGroup, Stage};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

const SAMPLER_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;
const PRETRAINED_FALLBACK_SEED_OFFSET: u64 = 101;

// ── learning-rate schedules ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    WarmupStep,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Warmup starting LR; defaults to `base_lr / 100`.
    #[serde(default)]
    pub warmup_start_lr: Option<f64>,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    pub total_epochs: usize,
}

fn default_decay_factor() -> f64 {
    0.1
}

impl ScheduleSpec {
    pub fn cosine(base_lr: f64, total_epochs: usize) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Cosine,
            base_lr,
            warmup_epochs: 0,
            warmup_start_lr: None,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
            total_epochs,
        }
    }

    pub fn warmup_step(
        base_lr: f64,
        warmup_epochs: usize,
        decay_epochs: Vec<usize>,
        decay_factor: f64,
        total_epochs: usize,
    ) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::WarmupStep,
            base_lr,
            warmup_epochs,
            warmup_start_lr: None,
            decay_epochs,
            decay_factor,
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(Error::Config("decay_factor must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at `epoch`. Valid for `0 ≤ epoch ≤ total_epochs`; training
/// itself only evaluates `epoch < total_epochs` (the cosine endpoint is 0).
pub fn lr_at(schedule: &ScheduleSpec, epoch: usize) -> Result<f64> {
    schedule.validate()?;
    if epoch > schedule.total_epochs {
        return Err(Error::Input(format!(
            "epoch {epoch} out of range (total {})",
            schedule.total_epochs
        )));
    }
    match schedule.kind {
        ScheduleKind::Cosine => {
            let e = epoch as f64 / schedule.total_epochs as f64;
            Ok(0.5 * schedule.base_lr * (1.0 + (std::f64::consts::PI * e).cos()))
        }
        ScheduleKind::WarmupStep => {
            let start = schedule.warmup_start_lr.unwrap_or(schedule.base_lr / 100.0);
            if epoch < schedule.warmup_epochs {
                let t = epoch as f64 / schedule.warmup_epochs as f64;
                Ok(start + (schedule.base_lr - start) * t)
            } else {
                let decays = schedule.decay_epochs.iter().filter(|&&d| d <= epoch).count();
                Ok(schedule.base_lr * schedule.decay_factor.powi(decays as i32))
            }
        }
    }
}

// ── optimizer ──────────────────────────────────────────────────────────────

/// Adam with the standard moment coefficients and optional decoupled-from-
/// nothing L2 (weight decay added to the gradient, visual groups only).
pub struct AdamState {
    pub step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState { step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, moments: BTreeMap::new() }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn apply(&mut self, key: &str, param: &mut ArrayD<f64>, grad: &ArrayD<f64>, lr: f64, weight_decay: f64) {
        let g = if weight_decay > 0.0 { grad + &param.mapv(|p| p * weight_decay) } else { grad.clone() };
        let (m, v) = self
            .moments
            .entry(key.to_string())
            .or_insert_with(|| (ArrayD::zeros(param.raw_dim()), ArrayD::zeros(param.raw_dim())));
        *m = m.mapv(|x| x * self.beta1) + &g.mapv(|x| x * (1.0 - self.beta1));
        *v = v.mapv(|x| x * self.beta2) + &g.mapv(|x| x * x * (1.0 - self.beta2));
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        ndarray::Zip::from(param).and(&*m).and(&*v).for_each(|p, &mi, &vi| {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        });
    }

    fn capture(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            moments: self
                .moments
                .iter()
                .map(|(k, (m, v))| {
                    (k.clone(), MomentEntry {
                        first: m.iter().copied().collect(),
                        second: v.iter().copied().collect(),
                    })
                })
                .collect(),
        }
    }

    fn restore(state: &OptimizerState, model: &Model) -> Result<Self> {
        let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for group in model.groups() {
            for (name, tensor) in model.group_tensors(group) {
                shapes.insert(format!("{}/{}", group.name(), name), tensor.shape().to_vec());
            }
        }
        let mut moments = BTreeMap::new();
        for (key, entry) in &state.moments {
            let shape = shapes
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer moment for unknown tensor '{key}'")))?;
            let m = ArrayD::from_shape_vec(IxDyn(shape), entry.first.clone())
                .map_err(|e| Error::Checkpoint(format!("bad optimizer moment '{key}': {e}")))?;
            let v = ArrayD::from_shape_vec(IxDyn(shape), entry.second.clone())
                .map_err(|e| Error::Checkpoint(format!("bad optimizer moment '{key}': {e}")))?;
            moments.insert(key.clone(), (m, v));
        }
        Ok(AdamState { step: state.step, moments, ..AdamState::new() })
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

// ── settings ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSettings {
    pub epochs: usize,
    pub schedule: ScheduleSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub mode: AblationMode,
    pub fusion_direction: FusionDirection,
    pub seed: u64,
    pub weights: LossWeights,
    pub batch: BatchSpec,
    pub similarity_scale: f64,
    pub weight_decay: f64,
    pub augment_flip: bool,
    pub augment_pad: usize,
    /// Batches per epoch; `None` = one pass over the record count.
    pub batches_per_epoch: Option<usize>,
    pub mspl: StageSettings,
    pub sii: StageSettings,
    pub hse: StageSettings,
    pub model: ModelConfig,
    /// `clip_pretrained` only: checkpoint supplying stems/trunk/head init.
    pub pretrained_checkpoint: Option<PathBuf>,
}

impl TrainSettings {
    pub fn stage(&self, stage: Stage) -> &StageSettings {
        match stage {
            Stage::Mspl => &self.mspl,
            Stage::Sii => &self.sii,
            Stage::Hse => &self.hse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        for stage in self.mode.stages() {
            let s = self.stage(stage);
            if s.epochs == 0 {
                return Err(Error::Config(format!("{} epochs must be positive", stage.name())));
            }
            s.schedule.validate()?;
            if s.schedule.total_epochs < s.epochs {
                return Err(Error::Config(format!(
                    "{} schedule horizon {} is shorter than its {} epochs",
                    stage.name(),
                    s.schedule.total_epochs,
                    s.epochs
                )));
            }
        }
        if !(self.similarity_scale.is_finite() && self.similarity_scale > 0.0) {
            return Err(Error::Config("similarity_scale must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Trainable parameter groups of a stage (Algorithm-style freezing sets).
pub fn trainable_groups(model: &Model, stage: Stage) -> Vec<ParamGroup> {
    match stage {
        Stage::Mspl => match &model.prompts {
            Some(p) if p.mode == crate::encoders::PromptMode::Shared => vec![ParamGroup::PromptShared],
            Some(_) => vec![ParamGroup::PromptVisible, ParamGroup::PromptInfrared],
            None => vec![],
        },
        Stage::Sii => vec![ParamGroup::Fusion],
        Stage::Hse => vec![ParamGroup::Stems, ParamGroup::Trunk, ParamGroup::Head],
    }
}

// ── records & audit ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    pub loss: f64,
    pub components: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageAudit {
    pub stage: Stage,
    pub trainable: Vec<String>,
    pub changed: Vec<String>,
    pub hashes_before: Vec<(String, String)>,
    pub hashes_after: Vec<(String, String)>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<EpochRecord>,
    pub audits: Vec<StageAudit>,
    /// False when `stop_after_epochs` exhausted the session budget early.
    pub completed: bool,
}

// ── per-stage step functions ───────────────────────────────────────────────

struct StepStats {
    loss: f64,
    components: Vec<(String, f64)>,
}

type Registry<'t> = Vec<(ParamGroup, &'static str, Var<'t>)>;

fn read_updates(tape: &Tape, loss: Var<'_>, registry: &Registry<'_>) -> Vec<(ParamGroup, &'static str, ArrayD<f64>)> {
    let grads = tape.backward(loss);
    registry
        .iter()
        .map(|(group, name, var)| (*group, *name, grads.get_or_zeros(*var)))
        .collect()
}

fn apply_updates(
    model: &mut Model,
    adam: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    updates: Vec<(ParamGroup, &'static str, ArrayD<f64>)>,
) {
    adam.begin_step();
    let mut by_group: BTreeMap<ParamGroup, Vec<(&'static str, ArrayD<f64>)>> = BTreeMap::new();
    for (group, name, grad) in updates {
        by_group.entry(group).or_default().push((name, grad));
    }
    for (group, entries) in by_group {
        let decay = match group {
            ParamGroup::Stems | ParamGroup::Trunk | ParamGroup::Head => weight_decay,
            _ => 0.0,
        };
        let mut tensors = model.group_tensors_mut(group);
        for (name, grad) in entries {
            let slot = tensors
                .iter_mut()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("unknown tensor {}/{name}", group.name()));
            adam.apply(&format!("{}/{}", group.name(), name), slot.1, &grad, lr, decay);
        }
    }
}

/// Contrastive pair (image→text + text→image) of one batch against
/// per-modality banks; used by stages 1 and 2.
fn contrastive_pair<'t>(
    tape: &'t Tape,
    batch: &Batch,
    img_feats: &Array2<f64>,
    bank_visible: Var<'t>,
    bank_infrared: Var<'t>,
    scale: f64,
) -> Result<(Var<'t>, Var<'t>)> {
    let (vis, ir) = half_indices(&batch.modality_mask);
    if vis.is_empty() || ir.is_empty() {
        return Err(Error::Input("batch must contain both modalities".into()));
    }
    let mut i2t: Option<Var<'t>> = None;
    let mut t2i: Option<Var<'t>> = None;
    for (rows, bank) in [(&vis, bank_visible), (&ir, bank_infrared)] {
        let labels: Vec<usize> = rows.iter().map(|&i| batch.labels[i]).collect();
        let feats = Array2::from_shape_fn((rows.len(), img_feats.ncols()), |(r, c)| {
            img_feats[[rows[r], c]]
        });
        let f = tape.constant(feats.into_dyn());
        let text_rows = bank.gather_axis0(&labels);
        let i2t_term = graph::image_to_text_contrastive(f, text_rows, scale)?;
        let t2i_term = graph::text_to_image_contrastive(f, &labels, text_rows, scale)?;
        i2t = Some(match i2t {
            Some(acc) => acc.add(i2t_term),
            None => i2t_term,
        });
        t2i = Some(match t2i {
            Some(acc) => acc.add(t2i_term),
            None => t2i_term,
        });
    }
    Ok((i2t.unwrap(), t2i.unwrap()))
}

fn mspl_step(
    model: &mut Model,
    batch: &Batch,
    settings: &TrainSettings,
    adam: &mut AdamState,
    lr: f64,
) -> Result<StepStats> {
    let img_feats = model.encoder.encode_eval(&batch.images, &batch.modality_mask)?;
    let prompts = model.prompts.as_ref().ok_or_else(|| Error::Sequencing("prompt stage without prompt bank".into()))?;
    let text_encoder = model.text_encoder.as_ref().expect("prompt bank implies text encoder");

    let tape = Tape::new();
    let prompt_vars = prompts.mount(&tape, true);
    let shared = prompts.mode == crate::encoders::PromptMode::Shared;
    let bank_v = compute_text_bank(&tape, &prompt_vars, text_encoder, Modality::Visible)?;
    let bank_r = if shared {
        bank_v
    } else {
        compute_text_bank(&tape, &prompt_vars, text_encoder, Modality::Infrared)?
    };
    let (i2t, t2i) = contrastive_pair(&tape, batch, &img_feats, bank_v, bank_r, settings.similarity_scale)?;
    let total = i2t.add(t2i);

    let mut registry: Registry<'_> = Vec::new();
    if shared {
        registry.push((ParamGroup::PromptShared, "tokens", prompt_vars.visible));
    } else {
        registry.push((ParamGroup::PromptVisible, "tokens", prompt_vars.visible));
        registry.push((ParamGroup::PromptInfrared, "tokens", prompt_vars.infrared.unwrap()));
    }
    let stats = StepStats {
        loss: total.scalar(),
        components: vec![("l_i2t".into(), i2t.scalar()), ("l_t2i".into(), t2i.scalar())],
    };
    let updates = read_updates(&tape, total, &registry);
    apply_updates(model, adam, lr, settings.weight_decay, updates);
    Ok(stats)
}

fn sii_step(
    model: &mut Model,
    batch: &Batch,
    settings: &TrainSettings,
    banks: &(Array2<f64>, Array2<f64>),
    adam: &mut AdamState,
    lr: f64,
) -> Result<StepStats> {
    let img_feats = model.encoder.encode_eval(&batch.images, &batch.modality_mask)?;
    let fusion = model.fusion.as_ref().ok_or_else(|| Error::Sequencing("fusion stage without fusion params".into()))?;

    let tape = Tape::new();
    let fusion_vars = fusion.mount(&tape, true);
    let f_tv = tape.constant(banks.0.clone().into_dyn());
    let f_tr = tape.constant(banks.1.clone().into_dyn());
    let fused = fuse_banks(&fusion_vars, model.fusion_direction, f_tv, f_tr)?;
    let (i2t, t2i) = contrastive_pair(&tape, batch, &img_feats, fused, fused, settings.similarity_scale)?;
    let total = i2t.add(t2i);

    let registry: Registry<'_> = vec![
        (ParamGroup::Fusion, "w_query", fusion_vars.w_query),
        (ParamGroup::Fusion, "w_key", fusion_vars.w_key),
        (ParamGroup::Fusion, "w_value", fusion_vars.w_value),
        (ParamGroup::Fusion, "w_combine", fusion_vars.w_combine),
    ];
    let stats = StepStats {
        loss: total.scalar(),
        components: vec![("l_i2t".into(), i2t.scalar()), ("l_t2i".into(), t2i.scalar())],
    };
    let updates = read_updates(&tape, total, &registry);
    apply_updates(model, adam, lr, settings.weight_decay, updates);
    Ok(stats)
}

fn hse_step(
    model: &mut Model,
    batch: &Batch,
    settings: &TrainSettings,
    banks: &Option<(Array2<f64>, Array2<f64>)>,
    adam: &mut AdamState,
    lr: f64,
) -> Result<StepStats> {
    let tape = Tape::new();
    let enc_vars = model.encoder.mount(&tape, true);
    let head_var = tape.leaf(model.head.weight.clone(), true);
    let feats = encode_images(&tape, &enc_vars, &batch.images, &batch.modality_mask)?;
    let logits = classify(head_var, feats)?;

    let (total, stats) = match banks {
        Some((bank_v, bank_r)) => {
            let bv = tape.constant(bank_v.clone().into_dyn());
            let br = tape.constant(bank_r.clone().into_dyn());
            let out = graph::stage3_total(
                logits,
                feats,
                &batch.labels,
                &batch.modality_mask,
                bv,
                br,
                &settings.weights,
                settings.similarity_scale,
            )?;
            let stats = StepStats {
                loss: out.total.scalar(),
                components: vec![
                    ("l_id".into(), out.identity.scalar()),
                    ("l_wrt".into(), out.wrt.scalar()),
                    ("l_i2tce_vs".into(), out.i2tce_visible.scalar()),
                    ("l_i2tce_rs".into(), out.i2tce_infrared.scalar()),
                ],
            };
            (out.total, stats)
        }
        None => {
            // baseline objective: identity + weighted triplet only
            let id = graph::identity_loss(logits, &batch.labels)?;
            let wrt = graph::weighted_regularized_triplet(feats, &batch.labels)?;
            let total = id.add(wrt.scale(settings.weights.lambda1));
            let stats = StepStats {
                loss: total.scalar(),
                components: vec![("l_id".into(), id.scalar()), ("l_wrt".into(), wrt.scalar())],
            };
            (total, stats)
        }
    };

    let e = &enc_vars;
    let registry: Registry<'_> = vec![
        (ParamGroup::Stems, "visible.conv1.weight", e.stem_visible.conv1.weight),
        (ParamGroup::Stems, "visible.conv1.bias", e.stem_visible.conv1.bias),
        (ParamGroup::Stems, "visible.conv2.weight", e.stem_visible.conv2.weight),
        (ParamGroup::Stems, "visible.conv2.bias", e.stem_visible.conv2.bias),
        (ParamGroup::Stems, "infrared.conv1.weight", e.stem_infrared.conv1.weight),
        (ParamGroup::Stems, "infrared.conv1.bias", e.stem_infrared.conv1.bias),
        (ParamGroup::Stems, "infrared.conv2.weight", e.stem_infrared.conv2.weight),
        (ParamGroup::Stems, "infrared.conv2.bias", e.stem_infrared.conv2.bias),
        (ParamGroup::Trunk, "conv1.weight", e.trunk.conv1.weight),
        (ParamGroup::Trunk, "conv1.bias", e.trunk.conv1.bias),
        (ParamGroup::Trunk, "conv2.weight", e.trunk.conv2.weight),
        (ParamGroup::Trunk, "conv2.bias", e.trunk.conv2.bias),
        (ParamGroup::Trunk, "proj.weight", e.trunk.proj_weight),
        (ParamGroup::Trunk, "proj.bias", e.trunk.proj_bias),
        (ParamGroup::Head, "weight", head_var),
    ];
    let updates = read_updates(&tape, total, &registry);
    apply_updates(model, adam, lr, settings.weight_decay, updates);
    Ok(stats)
}

/// Text banks for the stage-3 semantic terms, per mode. `None` for the
/// baseline modes (no text side).
fn hse_banks(model: &Model) -> Result<Option<(Array2<f64>, Array2<f64>)>> {
    let Some(prompts) = &model.prompts else { return Ok(None) };
    let text_encoder = model.text_encoder.as_ref().expect("prompt bank implies text encoder");
    let f_tv = crate::encoders::compute_text_bank_eval(prompts, text_encoder, Modality::Visible)?;
    match model.mode {
        AblationMode::ClipVireid => Ok(Some((f_tv.clone(), f_tv))),
        AblationMode::CsdnMsplOnly => {
            let f_tr = crate::encoders::compute_text_bank_eval(prompts, text_encoder, Modality::Infrared)?;
            Ok(Some((f_tv, f_tr)))
        }
        AblationMode::CsdnFull => {
            let f_tr = crate::encoders::compute_text_bank_eval(prompts, text_encoder, Modality::Infrared)?;
            let fusion = model.fusion.as_ref().ok_or_else(|| Error::Sequencing("fused prototypes need fusion params".into()))?;
            let fused = attention_fuse_eval(fusion, &f_tv, &f_tr, model.fusion_direction)?;
            Ok(Some((fused.clone(), fused)))
        }
        AblationMode::Baseline | AblationMode::ClipPretrained => Ok(None),
    }
}

// ── orchestration ──────────────────────────────────────────────────────────

fn ensure_prereqs(mode: AblationMode, stage: Stage, completed: &[Stage]) -> Result<()> {
    let plan = mode.stages();
    let position = plan
        .iter()
        .position(|&s| s == stage)
        .ok_or_else(|| Error::Sequencing(format!("stage {} is not part of mode {}", stage.name(), mode.name())))?;
    for required in &plan[..position] {
        if !completed.contains(required) {
            return Err(Error::Sequencing(format!(
                "stage {} requires completed stage {} (missing prerequisite checkpoint)",
                stage.name(),
                required.name()
            )));
        }
    }
    Ok(())
}

struct OutputSink {
    metrics: std::fs::File,
    audit: std::fs::File,
    dir: PathBuf,
}

impl OutputSink {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let metrics = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("metrics.jsonl"))?;
        let audit = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("freeze_audit.jsonl"))?;
        Ok(OutputSink { metrics, audit, dir: dir.to_path_buf() })
    }

    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.metrics, "{}", serde_json::to_string(r).expect("record serializes"))?;
        Ok(())
    }

    fn audit(&mut self, a: &StageAudit) -> Result<()> {
        writeln!(self.audit, "{}", serde_json::to_string(a).expect("audit serializes"))?;
        Ok(())
    }
}

fn save_checkpoint_files(
    model: &Model,
    settings: &TrainSettings,
    completed: &[Stage],
    current_stage: Option<Stage>,
    epochs_done: usize,
    adam: Option<&AdamState>,
    rng: &ChaCha8Rng,
    dir: &Path,
    stage_complete: Option<Stage>,
) -> Result<()> {
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        mode: settings.mode,
        fusion_direction: settings.fusion_direction,
        model: settings.model,
        completed_stages: completed.to_vec(),
        current_stage,
        epochs_done,
        train_seed: settings.seed,
    };
    let ckpt = Checkpoint::from_model(model, meta, adam.map(|a| a.capture()), Some(RngState::capture(rng)))?;
    ckpt.save(&dir.join("checkpoint_latest.json"))?;
    if let Some(stage) = stage_complete {
        ckpt.save(&dir.join(format!("checkpoint_stage_{}.json", stage.name())))?;
    }
    Ok(())
}

/// Run the stages of `settings.mode` over `dataset`.
///
/// * `out_dir`: when given, writes `metrics.jsonl`, `freeze_audit.jsonl`,
///   a rolling `checkpoint_latest.json` (per epoch), per-stage checkpoints
///   and `checkpoint_final.json`.
/// * `stop_after_epochs`: process at most this many epochs this session
///   (the outcome reports `completed: false` when the budget ran out).
/// * `resume`: continue from a checkpoint written by an earlier session.
pub fn train(
    settings: &TrainSettings,
    dataset: &LoadedDataset,
    out_dir: Option<&Path>,
    stop_after_epochs: Option<usize>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    settings.validate()?;
    if dataset.manifest.split != Split::Train {
        return Err(Error::Data("training requires the train-split manifest".into()));
    }
    if dataset.manifest.num_identities != settings.model.num_identities {
        return Err(Error::Config(format!(
            "model expects {} identities but the manifest has {}",
            settings.model.num_identities, dataset.manifest.num_identities
        )));
    }

    let mut completed: Vec<Stage> = Vec::new();
    let mut resume_stage: Option<(Stage, usize)> = None;
    let (mut model, mut rng, mut adam) = match resume {
        Some(ckpt) => {
            if ckpt.meta.mode != settings.mode {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was trained in mode {}, config says {}",
                    ckpt.meta.mode.name(),
                    settings.mode.name()
                )));
            }
            ckpt.validate_against(&settings.model)?;
            let model = ckpt.restore_model()?;
            completed = ckpt.meta.completed_stages.clone();
            let rng = match &ckpt.rng {
                Some(state) => state.restore()?,
                None => ChaCha8Rng::seed_from_u64(settings.seed ^ SAMPLER_SEED_MIX),
            };
            let adam = match (&ckpt.meta.current_stage, &ckpt.optimizer) {
                (Some(stage), Some(opt)) if ckpt.meta.epochs_done < settings.stage(*stage).epochs => {
                    resume_stage = Some((*stage, ckpt.meta.epochs_done));
                    AdamState::restore(opt, &model)?
                }
                (Some(stage), _) if ckpt.meta.epochs_done >= settings.stage(*stage).epochs => {
                    // stage actually finished; treat as complete
                    if !completed.contains(stage) {
                        completed.push(*stage);
                    }
                    AdamState::new()
                }
                _ => AdamState::new(),
            };
            (model, rng, adam)
        }
        None => {
            let mut model = Model::init(
                settings.model,
                settings.mode,
                settings.fusion_direction,
                match settings.mode {
                    // stand-in for a pretrained backbone when no checkpoint
                    // is supplied: a distinct deterministic init
                    AblationMode::ClipPretrained if settings.pretrained_checkpoint.is_none() => {
                        settings.seed.wrapping_add(PRETRAINED_FALLBACK_SEED_OFFSET)
                    }
                    _ => settings.seed,
                },
            )?;
            if settings.mode == AblationMode::ClipPretrained {
                if let Some(path) = &settings.pretrained_checkpoint {
                    let ckpt = Checkpoint::load(path)?;
                    ckpt.write_selected_groups_into(
                        &mut model,
                        &[ParamGroup::Stems, ParamGroup::Trunk, ParamGroup::Head],
                    )?;
                }
            }
            (model, ChaCha8Rng::seed_from_u64(settings.seed ^ SAMPLER_SEED_MIX), AdamState::new())
        }
    };

    let mut sink = match out_dir {
        Some(dir) => Some(OutputSink::open(dir)?),
        None => None,
    };
    let mut records = Vec::new();
    let mut audits = Vec::new();
    let mut budget = stop_after_epochs;

    let batch_size = settings.batch.batch_size();
    let batches_per_epoch = settings
        .batches_per_epoch
        .unwrap_or_else(|| (dataset.len() / batch_size).max(1))
        .max(1);

    for stage in settings.mode.stages() {
        if completed.contains(&stage) {
            continue;
        }
        ensure_prereqs(settings.mode, stage, &completed)?;
        let stage_settings = settings.stage(stage);
        let start_epoch = match resume_stage.take() {
            Some((s, done)) if s == stage => done,
            Some((s, _)) => {
                return Err(Error::Sequencing(format!(
                    "checkpoint is mid-stage {} but the plan expects {}",
                    s.name(),
                    stage.name()
                )))
            }
            None => 0,
        };
        if start_epoch == 0 {
            adam = AdamState::new();
        }
        let hashes_before = model.all_hashes();

        // stage-2 inputs are frozen: compute the text banks once per stage
        let sii_banks = if stage == Stage::Sii {
            let prompts = model.prompts.as_ref().ok_or_else(|| Error::Sequencing("fusion stage without prompts".into()))?;
            let text_encoder = model.text_encoder.as_ref().expect("prompt bank implies text encoder");
            let f_tv = crate::encoders::compute_text_bank_eval(prompts, text_encoder, Modality::Visible)?;
            let f_tr = crate::encoders::compute_text_bank_eval(prompts, text_encoder, Modality::Infrared)?;
            Some((f_tv, f_tr))
        } else {
            None
        };

        for epoch in start_epoch..stage_settings.epochs {
            if let Some(b) = budget {
                if b == 0 {
                    if let Some(s) = &sink {
                        save_checkpoint_files(
                            &model, settings, &completed, Some(stage), epoch, Some(&adam), &rng, &s.dir, None,
                        )?;
                    }
                    return Ok(TrainOutcome { model, records, audits, completed: false });
                }
                budget = Some(b - 1);
            }
            let lr = lr_at(&stage_settings.schedule, epoch)?;
            // frozen text side: the fused prototypes are refreshed once per epoch
            let hse_bank = if stage == Stage::Hse { hse_banks(&model)? } else { None };

            let mut loss_sum = 0.0;
            let mut component_sums: Vec<(String, f64)> = Vec::new();
            for _ in 0..batches_per_epoch {
                let mut batch = sample_batch(dataset, &settings.batch, &mut rng)?;
                augment_batch(&mut batch, settings.augment_flip, settings.augment_pad, &mut rng);
                let stats = match stage {
                    Stage::Mspl => mspl_step(&mut model, &batch, settings, &mut adam, lr)?,
                    Stage::Sii => sii_step(&mut model, &batch, settings, sii_banks.as_ref().unwrap(), &mut adam, lr)?,
                    Stage::Hse => hse_step(&mut model, &batch, settings, &hse_bank, &mut adam, lr)?,
                };
                loss_sum += stats.loss;
                if component_sums.is_empty() {
                    component_sums = stats.components;
                } else {
                    for (acc, (_, v)) in component_sums.iter_mut().zip(&stats.components) {
                        acc.1 += v;
                    }
                }
            }
            let record = EpochRecord {
                stage,
                epoch,
                lr,
                batches: batches_per_epoch,
                loss: loss_sum / batches_per_epoch as f64,
                components: component_sums
                    .into_iter()
                    .map(|(k, v)| (k, v / batches_per_epoch as f64))
                    .collect(),
            };
            if let Some(s) = &mut sink {
                s.record(&record)?;
                save_checkpoint_files(
                    &model, settings, &completed, Some(stage), epoch + 1, Some(&adam), &rng, &s.dir, None,
                )?;
            }
            records.push(record);
        }

        let hashes_after = model.all_hashes();
        let changed: Vec<String> = hashes_before
            .iter()
            .zip(&hashes_after)
            .filter(|((_, before), (_, after))| before != after)
            .map(|((g, _), _)| g.name().to_string())
            .collect();
        let audit = StageAudit {
            stage,
            trainable: trainable_groups(&model, stage).iter().map(|g| g.name().to_string()).collect(),
            changed,
            hashes_before: hashes_before.into_iter().map(|(g, h)| (g.name().to_string(), h)).collect(),
            hashes_after: hashes_after.into_iter().map(|(g, h)| (g.name().to_string(), h)).collect(),
        };
        if let Some(s) = &mut sink {
            s.audit(&audit)?;
        }
        audits.push(audit);
        completed.push(stage);
        if let Some(s) = &sink {
            save_checkpoint_files(
                &model, settings, &completed, None, 0, None, &rng, &s.dir, Some(stage),
            )?;
        }
    }

    if let Some(s) = &sink {
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            mode: settings.mode,
            fusion_direction: settings.fusion_direction,
            model: settings.model,
            completed_stages: completed.clone(),
            current_stage: None,
            epochs_done: 0,
            train_seed: settings.seed,
        };
        let ckpt = Checkpoint::from_model(&model, meta, None, Some(RngState::capture(&rng)))?;
        ckpt.save(&s.dir.join("checkpoint_final.json"))?;
    }
    Ok(TrainOutcome { model, records, audits, completed: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};

    fn tiny_dataset() -> LoadedDataset {
        let m = generate_synthetic(&SyntheticSpec {
            num_identities: 4,
            images_per_id_per_modality: 4,
            image_shape: (12, 8, 3),
            seed: 11,
            noise_sigma: 0.1,
            split: Split::Train,
        })
        .unwrap();
        LoadedDataset::load(m, None).unwrap()
    }

    fn tiny_settings(mode: AblationMode, epochs: usize) -> TrainSettings {
        TrainSettings {
            mode,
            fusion_direction: FusionDirection::VisibleQuery,
            seed: 5,
            weights: LossWeights::default(),
            batch: BatchSpec {
                num_identities_per_batch: 4,
                visible_per_identity: 2,
                infrared_per_identity: 2,
            },
            similarity_scale: 1.0,
            weight_decay: 5e-4,
            augment_flip: true,
            augment_pad: 1,
            batches_per_epoch: None,
            mspl: StageSettings { epochs, schedule: ScheduleSpec::cosine(5e-3, epochs) },
            sii: StageSettings { epochs, schedule: ScheduleSpec::cosine(2e-2, epochs) },
            hse: StageSettings {
                epochs,
                schedule: ScheduleSpec::warmup_step(5e-3, 1, vec![epochs.saturating_sub(1)], 0.1, epochs),
            },
            model: ModelConfig {
                feature_dim: 8,
                token_dim: 8,
                prompt_tokens: 2,
                stem_channels: [4, 6],
                trunk_channels: [8, 8],
                image_channels: 3,
                num_identities: 4,
            },
            pretrained_checkpoint: None,
        }
    }

    #[test]
    fn lr_schedule_reproduces_stage3_paper_values() {
        let s = ScheduleSpec::warmup_step(3e-4, 10, vec![40, 70], 0.1, 120);
        assert!((lr_at(&s, 0).unwrap() - 3e-6).abs() < 1e-18);
        assert!((lr_at(&s, 10).unwrap() - 3e-4).abs() < 1e-18);
        assert!((lr_at(&s, 40).unwrap() - 3e-5).abs() < 1e-18);
        assert!((lr_at(&s, 70).unwrap() - 3e-6).abs() < 1e-18);
    }

    #[test]
    fn lr_schedule_cosine_endpoints() {
        let s = ScheduleSpec::cosine(3e-4, 60);
        assert!((lr_at(&s, 0).unwrap() - 3e-4).abs() < 1e-18);
        assert!(lr_at(&s, 60).unwrap().abs() < 1e-18);
        assert!(matches!(lr_at(&s, 61), Err(Error::Input(_))));
        // interior positivity
        for e in 0..60 {
            assert!(lr_at(&s, e).unwrap() > 0.0);
        }
    }

    #[test]
    fn full_mode_freezing_ledger_is_exact() {
        let ds = tiny_dataset();
        let settings = tiny_settings(AblationMode::CsdnFull, 2);
        let out = train(&settings, &ds, None, None, None).unwrap();
        assert!(out.completed);
        assert_eq!(out.audits.len(), 3);
        let expect: [(&str, Vec<&str>); 3] = [
            ("mspl", vec!["prompt_visible", "prompt_infrared"]),
            ("sii", vec!["fusion"]),
            ("hse", vec!["stems", "trunk", "head"]),
        ];
        for (audit, (stage, trainable)) in out.audits.iter().zip(expect) {
            assert_eq!(audit.stage.name(), stage);
            assert_eq!(audit.trainable, trainable);
            let mut changed = audit.changed.clone();
            changed.sort();
            let mut expected = trainable.iter().map(|s| s.to_string()).collect::<Vec<_>>();
            expected.sort();
            assert_eq!(changed, expected, "stage {stage} changed set");
        }
    }

    #[test]
    fn baseline_trains_visual_groups_only() {
        let ds = tiny_dataset();
        let settings = tiny_settings(AblationMode::Baseline, 2);
        let out = train(&settings, &ds, None, None, None).unwrap();
        assert_eq!(out.audits.len(), 1);
        assert_eq!(out.audits[0].changed, vec!["stems", "trunk", "head"]);
        // no prompt/fusion parameters exist at all
        assert!(out.model.prompts.is_none());
        assert!(out.model.fusion.is_none());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let ds = tiny_dataset();
        let settings = tiny_settings(AblationMode::CsdnFull, 2);

        let full = train(&settings, &ds, None, None, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let partial = train(&settings, &ds, Some(dir.path()), Some(3), None).unwrap();
        assert!(!partial.completed);
        let ckpt = Checkpoint::load(&dir.path().join("checkpoint_latest.json")).unwrap();
        let resumed = train(&settings, &ds, None, None, Some(&ckpt)).unwrap();
        assert!(resumed.completed);

        assert_eq!(full.model.all_hashes(), resumed.model.all_hashes());
        // the resumed session's records continue exactly where the budget cut off
        let full_tail: Vec<f64> = full.records[3..].iter().map(|r| r.loss).collect();
        let resumed_losses: Vec<f64> = resumed.records.iter().map(|r| r.loss).collect();
        assert_eq!(full_tail.len(), resumed_losses.len());
        for (a, b) in full_tail.iter().zip(&resumed_losses) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn identical_seeds_reproduce_loss_trajectories() {
        let ds = tiny_dataset();
        let settings = tiny_settings(AblationMode::CsdnFull, 2);
        let a = train(&settings, &ds, None, None, None).unwrap();
        let b = train(&settings, &ds, None, None, None).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.loss, rb.loss);
        }
        assert_eq!(a.model.all_hashes(), b.model.all_hashes());
    }

    #[test]
    fn out_of_sequence_checkpoint_is_rejected() {
        let ds = tiny_dataset();
        let settings = tiny_settings(AblationMode::CsdnFull, 2);
        let model = Model::init(settings.model, settings.mode, settings.fusion_direction, 5).unwrap();
        // claims to be mid-HSE with no completed prerequisite stages
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            mode: settings.mode,
            fusion_direction: settings.fusion_direction,
            model: settings.model,
            completed_stages: vec![],
            current_stage: Some(Stage::Hse),
            epochs_done: 1,
            train_seed: 5,
        };
        let rng = ChaCha8Rng::seed_from_u64(0);
        let ckpt = Checkpoint::from_model(
            &model,
            meta,
            Some(AdamState::new().capture()),
            Some(RngState::capture(&rng)),
        )
        .unwrap();
        let err = train(&settings, &ds, None, None, Some(&ckpt)).unwrap_err();
        assert!(matches!(err, Error::Sequencing(_)), "{err:?}");
    }

    #[test]
    fn stage_losses_decrease_on_the_tiny_run() {
        let ds = tiny_dataset();
        let settings = tiny_settings(AblationMode::CsdnFull, 4);
        let out = train(&settings, &ds, None, None, None).unwrap();
        // loss decreased within each stage (desk-scale smoke property)
        for stage in [Stage::Mspl, Stage::Sii, Stage::Hse] {
            let stage_records: Vec<&EpochRecord> =
                out.records.iter().filter(|r| r.stage == stage).collect();
            let first = stage_records.first().unwrap().loss;
            let last = stage_records.last().unwrap().loss;
            assert!(
                last < first,
                "stage {} loss did not decrease: {first} -> {last}",
                stage.name()
            );
        }
    }
}
