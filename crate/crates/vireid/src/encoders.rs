//! Dual-stream visual encoder (modality-specific stems + shared trunk),
//! identity classifier, per-identity prompt banks, and the frozen text
//! encoder that turns a prompt sequence into a feature vector.
//!
//! Visual features are NOT L2-normalized here; cosine normalization happens
//! inside the similarity used by the losses, so the classifier and every
//! similarity-based loss consume the same feature tensor.

use crate::autodiff::{concat_axis0, Tape, Var};
use crate::dataset::Modality;
use crate::error::{Error, Result};
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Length of the fixed context prefix ("a photo of a").
pub const PREFIX_TOKENS: usize = 4;
/// Length of the fixed context suffix ("person").
pub const SUFFIX_TOKENS: usize = 1;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    use rand_distr::{Distribution, StandardNormal};
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

#[derive(Debug, Clone)]
pub struct Conv2dParams {
    pub weight: ArrayD<f64>, // (Co, Ci, k, k)
    pub bias: ArrayD<f64>,   // (Co)
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dParams {
    fn init(rng: &mut ChaCha8Rng, co: usize, ci: usize, k: usize, stride: usize) -> Self {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        Conv2dParams {
            weight: randn(rng, &[co, ci, k, k], std),
            bias: ArrayD::zeros(IxDyn(&[co])),
            stride,
            pad: k / 2,
        }
    }
}

/// One modality-specific stem: two conv+ReLU blocks, the second strided.
#[derive(Debug, Clone)]
pub struct StemParams {
    pub conv1: Conv2dParams,
    pub conv2: Conv2dParams,
}

impl StemParams {
    pub fn init(rng: &mut ChaCha8Rng, in_channels: usize, channels: [usize; 2]) -> Self {
        StemParams {
            conv1: Conv2dParams::init(rng, channels[0], in_channels, 3, 1),
            conv2: Conv2dParams::init(rng, channels[1], channels[0], 3, 2),
        }
    }
}

/// Shared trunk: two conv+ReLU blocks, global average pool, linear to `d`.
#[derive(Debug, Clone)]
pub struct TrunkParams {
    pub conv1: Conv2dParams,
    pub conv2: Conv2dParams,
    pub proj_weight: ArrayD<f64>, // (d, C_out)
    pub proj_bias: ArrayD<f64>,   // (d)
}

impl TrunkParams {
    pub fn init(rng: &mut ChaCha8Rng, in_channels: usize, channels: [usize; 2], feature_dim: usize) -> Self {
        TrunkParams {
            conv1: Conv2dParams::init(rng, channels[0], in_channels, 3, 2),
            conv2: Conv2dParams::init(rng, channels[1], channels[0], 3, 1),
            proj_weight: randn(rng, &[feature_dim, channels[1]], (1.0 / channels[1] as f64).sqrt()),
            proj_bias: ArrayD::zeros(IxDyn(&[feature_dim])),
        }
    }
}

/// Identity classifier: a bias-free linear map `d → N_c`.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weight: ArrayD<f64>, // (N_c, d)
}

impl ClassifierHead {
    pub fn init(rng: &mut ChaCha8Rng, num_identities: usize, feature_dim: usize) -> Self {
        ClassifierHead {
            weight: randn(rng, &[num_identities, feature_dim], (1.0 / feature_dim as f64).sqrt()),
        }
    }
}

/// The full dual-stream visual encoder.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub stem_visible: StemParams,
    pub stem_infrared: StemParams,
    pub trunk: TrunkParams,
    pub feature_dim: usize,
}

impl VisualEncoder {
    pub fn init(
        rng: &mut ChaCha8Rng,
        image_channels: usize,
        stem_channels: [usize; 2],
        trunk_channels: [usize; 2],
        feature_dim: usize,
    ) -> Self {
        // stems share architecture but never parameters: two separate draws
        let stem_visible = StemParams::init(rng, image_channels, stem_channels);
        let stem_infrared = StemParams::init(rng, image_channels, stem_channels);
        let trunk = TrunkParams::init(rng, stem_channels[1], trunk_channels, feature_dim);
        VisualEncoder { stem_visible, stem_infrared, trunk, feature_dim }
    }
}

pub struct ConvVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
    stride: usize,
    pad: usize,
}

impl<'t> ConvVars<'t> {
    fn mount(tape: &'t Tape, p: &Conv2dParams, trainable: bool) -> Self {
        ConvVars {
            weight: tape.leaf(p.weight.clone(), trainable),
            bias: tape.leaf(p.bias.clone(), trainable),
            stride: p.stride,
            pad: p.pad,
        }
    }

    fn forward(&self, x: Var<'t>) -> Var<'t> {
        x.conv2d(self.weight, Some(self.bias), self.stride, self.pad).relu()
    }
}

pub struct StemVars<'t> {
    pub conv1: ConvVars<'t>,
    pub conv2: ConvVars<'t>,
}

impl<'t> StemVars<'t> {
    pub fn mount(tape: &'t Tape, p: &StemParams, trainable: bool) -> Self {
        StemVars {
            conv1: ConvVars::mount(tape, &p.conv1, trainable),
            conv2: ConvVars::mount(tape, &p.conv2, trainable),
        }
    }

    pub fn forward(&self, x: Var<'t>) -> Var<'t> {
        self.conv2.forward(self.conv1.forward(x))
    }
}

pub struct TrunkVars<'t> {
    pub conv1: ConvVars<'t>,
    pub conv2: ConvVars<'t>,
    pub proj_weight: Var<'t>,
    pub proj_bias: Var<'t>,
}

impl<'t> TrunkVars<'t> {
    pub fn mount(tape: &'t Tape, p: &TrunkParams, trainable: bool) -> Self {
        TrunkVars {
            conv1: ConvVars::mount(tape, &p.conv1, trainable),
            conv2: ConvVars::mount(tape, &p.conv2, trainable),
            proj_weight: tape.leaf(p.proj_weight.clone(), trainable),
            proj_bias: tape.leaf(p.proj_bias.clone(), trainable),
        }
    }

    pub fn forward(&self, x: Var<'t>) -> Var<'t> {
        let pooled = self.conv2.forward(self.conv1.forward(x)).global_avg_pool();
        let bias_row = self.proj_bias.reshape(&[1, self.proj_bias.value().len()]);
        pooled.matmul(self.proj_weight.t()).add_rowvec(bias_row)
    }
}

pub struct VisualEncoderVars<'t> {
    pub stem_visible: StemVars<'t>,
    pub stem_infrared: StemVars<'t>,
    pub trunk: TrunkVars<'t>,
}

impl VisualEncoder {
    pub fn mount<'t>(&self, tape: &'t Tape, trainable: bool) -> VisualEncoderVars<'t> {
        VisualEncoderVars {
            stem_visible: StemVars::mount(tape, &self.stem_visible, trainable),
            stem_infrared: StemVars::mount(tape, &self.stem_infrared, trainable),
            trunk: TrunkVars::mount(tape, &self.trunk, trainable),
        }
    }

    /// Forward pass without gradients; returns `(n_b, d)` features.
    pub fn encode_eval(&self, images: &Array4<f64>, mask: &[Modality]) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let vars = self.mount(&tape, false);
        let feats = encode_images(&tape, &vars, images, mask)?;
        Ok(feats
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("features are rank-2"))
    }
}

/// Route each image through its modality's stem, then the shared trunk.
/// Row `i` of the output corresponds to row `i` of the batch.
pub fn encode_images<'t>(
    tape: &'t Tape,
    vars: &VisualEncoderVars<'t>,
    images: &Array4<f64>,
    mask: &[Modality],
) -> Result<Var<'t>> {
    let n = images.dim().0;
    if mask.len() != n {
        return Err(Error::Input(format!(
            "modality mask has {} entries for a batch of {n}",
            mask.len()
        )));
    }
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let vis_rows: Vec<usize> = (0..n).filter(|&i| mask[i] == Modality::Visible).collect();
    let ir_rows: Vec<usize> = (0..n).filter(|&i| mask[i] == Modality::Infrared).collect();

    let x = tape.constant(images.clone().into_dyn());
    let mut parts = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    if !vis_rows.is_empty() {
        let xv = x.gather_axis0(&vis_rows);
        parts.push(vars.stem_visible.forward(xv));
        order.extend(&vis_rows);
    }
    if !ir_rows.is_empty() {
        let xr = x.gather_axis0(&ir_rows);
        parts.push(vars.stem_infrared.forward(xr));
        order.extend(&ir_rows);
    }
    let stacked = if parts.len() == 1 { parts[0] } else { concat_axis0(tape, &parts) };
    let feats = vars.trunk.forward(stacked);
    // restore original batch order
    let mut inverse = vec![0usize; n];
    for (pos, &orig) in order.iter().enumerate() {
        inverse[orig] = pos;
    }
    Ok(feats.gather_axis0(&inverse))
}

/// Logits = features · Wᵀ. Dimension mismatch is an input error.
pub fn classify<'t>(head_weight: Var<'t>, features: Var<'t>) -> Result<Var<'t>> {
    let d_head = head_weight.value().shape()[1];
    let d_feat = features.value().shape()[1];
    if d_head != d_feat {
        return Err(Error::Input(format!(
            "classifier expects {d_head}-dim features, got {d_feat}"
        )));
    }
    Ok(features.matmul(head_weight.t()))
}

/// Eval-only classification on plain arrays.
pub fn classify_eval(head: &ClassifierHead, features: &Array2<f64>) -> Result<Array2<f64>> {
    let tape = Tape::new();
    let w = tape.constant(head.weight.clone());
    let f = tape.constant(features.clone().into_dyn());
    let logits = classify(w, f)?;
    Ok(logits.value().into_dimensionality().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// One bank serves both modalities (CLIP-VIReID ablation).
    Shared,
    /// Disjoint visible/infrared banks.
    ModalitySpecific,
}

/// Per-identity learnable prompt tokens plus the fixed template parts.
///
/// A sequence for identity `y` reads, in template order:
/// prefix ("a photo of a") ⊕ learnable tokens[y] ⊕ identity token[y] ⊕
/// suffix ("person"). The identity and context tokens are fixed embeddings —
/// no optimizer ever updates them.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub mode: PromptMode,
    /// `(N_c, M, d_tok)`. In shared mode this is the single bank.
    pub visible: ArrayD<f64>,
    /// `(N_c, M, d_tok)`. Empty in shared mode.
    pub infrared: Option<ArrayD<f64>>,
    pub identity_tokens: ArrayD<f64>, // (N_c, d_tok), fixed
    pub prefix: ArrayD<f64>,          // (PREFIX_TOKENS, d_tok), fixed
    pub suffix: ArrayD<f64>,          // (SUFFIX_TOKENS, d_tok), fixed
    pub tokens_per_identity: usize,
}

impl PromptBank {
    pub fn init(
        rng: &mut ChaCha8Rng,
        mode: PromptMode,
        num_identities: usize,
        tokens_per_identity: usize,
        token_dim: usize,
    ) -> Self {
        let identity_tokens = randn(rng, &[num_identities, token_dim], 1.0);
        let prefix = randn(rng, &[PREFIX_TOKENS, token_dim], 1.0);
        let suffix = randn(rng, &[SUFFIX_TOKENS, token_dim], 1.0);
        let bank = |rng: &mut ChaCha8Rng| randn(rng, &[num_identities, tokens_per_identity, token_dim], 0.02);
        let visible = bank(rng);
        let infrared = match mode {
            PromptMode::Shared => None,
            PromptMode::ModalitySpecific => Some(bank(rng)),
        };
        PromptBank { mode, visible, infrared, identity_tokens, prefix, suffix, tokens_per_identity }
    }

    pub fn num_identities(&self) -> usize {
        self.identity_tokens.shape()[0]
    }

    pub fn sequence_len(&self) -> usize {
        PREFIX_TOKENS + self.tokens_per_identity + 1 + SUFFIX_TOKENS
    }
}

/// Prompt bank mounted on a tape. Only the learnable banks can be trainable.
pub struct PromptVars<'t> {
    pub visible: Var<'t>,
    pub infrared: Option<Var<'t>>,
    identity_tokens: Var<'t>,
    prefix: Var<'t>,
    suffix: Var<'t>,
    tokens_per_identity: usize,
    token_dim: usize,
    mode: PromptMode,
}

impl PromptBank {
    pub fn mount<'t>(&self, tape: &'t Tape, trainable: bool) -> PromptVars<'t> {
        PromptVars {
            visible: tape.leaf(self.visible.clone(), trainable),
            infrared: self.infrared.as_ref().map(|b| tape.leaf(b.clone(), trainable)),
            identity_tokens: tape.constant(self.identity_tokens.clone()),
            prefix: tape.constant(self.prefix.clone()),
            suffix: tape.constant(self.suffix.clone()),
            tokens_per_identity: self.tokens_per_identity,
            token_dim: self.identity_tokens.shape()[1],
            mode: self.mode,
        }
    }
}

/// Token-embedding sequence for one identity in one modality's bank,
/// shape `(L, d_tok)`. In shared mode both modalities return the same
/// sequence.
pub fn build_prompt_sequence<'t>(
    tape: &'t Tape,
    prompts: &PromptVars<'t>,
    identity: usize,
    modality: Modality,
) -> Result<Var<'t>> {
    let n_c = prompts.identity_tokens.value().shape()[0];
    if identity >= n_c {
        return Err(Error::Input(format!("identity {identity} out of range (N_c = {n_c})")));
    }
    let bank = match (prompts.mode, modality) {
        (PromptMode::Shared, _) | (PromptMode::ModalitySpecific, Modality::Visible) => prompts.visible,
        (PromptMode::ModalitySpecific, Modality::Infrared) => prompts
            .infrared
            .ok_or_else(|| Error::Input("modality-specific bank missing infrared tokens".into()))?,
    };
    let learnable = bank
        .gather_axis0(&[identity])
        .reshape(&[prompts.tokens_per_identity, prompts.token_dim]);
    let id_token = prompts.identity_tokens.gather_axis0(&[identity]);
    Ok(concat_axis0(tape, &[prompts.prefix, learnable, id_token, prompts.suffix]))
}

/// Frozen text encoder: mean-pool over the token sequence followed by a
/// fixed random linear projection to the visual feature dimension.
/// Gradients flow through the token embeddings; the projection itself is
/// never trainable.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub projection: ArrayD<f64>, // (d_tok, d)
}

impl TextEncoder {
    pub fn init(rng: &mut ChaCha8Rng, token_dim: usize, feature_dim: usize) -> Self {
        TextEncoder { projection: randn(rng, &[token_dim, feature_dim], (1.0 / token_dim as f64).sqrt()) }
    }

    /// Encode a `(L, d_tok)` sequence into a `(1, d)` feature.
    pub fn encode<'t>(&self, tape: &'t Tape, sequence: Var<'t>) -> Var<'t> {
        let proj = tape.constant(self.projection.clone());
        sequence.mean_axis0().matmul(proj)
    }
}

/// Text features for every identity in one modality's bank, `(N_c, d)`.
pub fn compute_text_bank<'t>(
    tape: &'t Tape,
    prompts: &PromptVars<'t>,
    encoder: &TextEncoder,
    modality: Modality,
) -> Result<Var<'t>> {
    let n_c = prompts.identity_tokens.value().shape()[0];
    let mut rows = Vec::with_capacity(n_c);
    for identity in 0..n_c {
        let seq = build_prompt_sequence(tape, prompts, identity, modality)?;
        rows.push(encoder.encode(tape, seq));
    }
    Ok(concat_axis0(tape, &rows))
}

/// Eval-only text bank on plain arrays.
pub fn compute_text_bank_eval(
    bank: &PromptBank,
    encoder: &TextEncoder,
    modality: Modality,
) -> Result<Array2<f64>> {
    let tape = Tape::new();
    let prompts = bank.mount(&tape, false);
    let out = compute_text_bank(&tape, &prompts, encoder, modality)?;
    Ok(out.value().into_dimensionality().unwrap())
}
