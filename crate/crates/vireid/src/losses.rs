//! Loss functions: identity cross-entropy, weighted regularized triplet,
//! image↔text contrastive pairs, image-to-text cross-entropy against
//! per-identity prototypes, and the stage-3 composite.
//!
//! Every similarity-based loss uses the cosine of unnormalized features
//! (normalization lives inside the similarity, with norms clamped at
//! [`SIM_EPS`]). There is no temperature inside `exp(s(·))` by default; the
//! `scale` argument (configured as `similarity_scale`, default 1.0) exists
//! for experimentation. All softmax / log-sum-exp paths subtract row maxima.
//!
//! The `graph` submodule builds each loss on an autodiff tape; the top-level
//! functions are eval-only wrappers returning [`LossValue`].

use crate::autodiff::{Tape, Var};
use crate::dataset::Modality;
use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

/// Norm clamp used inside cosine similarity.
pub const SIM_EPS: f64 = 1e-12;
/// Squared-distance clamp under the square root in pairwise distances.
pub const DIST_EPS_SQ: f64 = 1e-24;

/// Scalar loss plus named sub-losses for logging.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub components: Vec<(String, f64)>,
}

impl LossValue {
    fn single(name: &str, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NumericalGuard(format!("{name} is not finite: {value}")));
        }
        // losses are non-negative by construction; absorb float noise
        Ok(LossValue { value: value.max(0.0), components: vec![(name.to_string(), value.max(0.0))] })
    }
}

/// Balance weights for the stage-3 composite.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.15, lambda2: 0.05, lambda3: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Cosine similarity with the norms clamped at [`SIM_EPS`]; the flag reports
/// whether a clamp fired.
pub fn similarity_clamped(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> (f64, bool) {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    let flagged = na < SIM_EPS || nb < SIM_EPS;
    let value = a.dot(&b) / (na.max(SIM_EPS) * nb.max(SIM_EPS));
    (value, flagged)
}

/// Cosine similarity in `[-1, 1]`. A zero-norm input is a numerical-guard
/// error (the clamped value is reported in the message).
pub fn similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "similarity of {}-dim and {}-dim vectors",
            a.len(),
            b.len()
        )));
    }
    let (value, flagged) = similarity_clamped(a, b);
    if flagged {
        return Err(Error::NumericalGuard(format!(
            "zero-norm vector in similarity; norm clamped at {SIM_EPS:e}, result {value}"
        )));
    }
    Ok(value)
}

/// Record indices of each modality, batch order preserved.
pub fn half_indices(mask: &[Modality]) -> (Vec<usize>, Vec<usize>) {
    let mut vis = Vec::new();
    let mut ir = Vec::new();
    for (i, m) in mask.iter().enumerate() {
        match m {
            Modality::Visible => vis.push(i),
            Modality::Infrared => ir.push(i),
        }
    }
    (vis, ir)
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Input("empty label set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Input(format!("label {bad} >= class count {num_classes}")));
    }
    Ok(())
}

/// Tape-based loss graphs. All functions return a `[1]`-shaped scalar node.
pub mod graph {
    use super::*;

    /// Scaled cosine-similarity matrix between the rows of `a` and `b`.
    pub fn cosine_matrix<'t>(a: Var<'t>, b: Var<'t>, scale: f64) -> Var<'t> {
        let s = a.normalize_rows(SIM_EPS).matmul(b.normalize_rows(SIM_EPS).t());
        if scale == 1.0 {
            s
        } else {
            s.scale(scale)
        }
    }

    /// Softmax cross-entropy against one-hot labels, mean over the batch.
    pub fn identity_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        let shape = logits.value().shape().to_vec();
        if labels.len() != shape[0] {
            return Err(Error::Input(format!(
                "{} labels for {} logit rows",
                labels.len(),
                shape[0]
            )));
        }
        check_labels(labels, shape[1])?;
        let n = labels.len() as f64;
        let mut pick = Array2::<f64>::zeros((shape[0], shape[1]));
        for (i, &y) in labels.iter().enumerate() {
            pick[[i, y]] = 1.0 / n;
        }
        Ok(logits
            .log_softmax_rows()
            .mul_const(&pick.into_dyn())
            .sum_all()
            .neg())
    }

    /// Pairwise Euclidean distances of feature rows, `(n, n)`.
    fn pairwise_distances<'t>(features: Var<'t>) -> Var<'t> {
        let sq = features.mul(features).sum_rows(); // (n, 1)
        let gram = features.matmul(features.t()).scale(-2.0);
        let sq_row = sq.t();
        gram.add_colvec(sq).add_rowvec(sq_row).sqrt_clamped(DIST_EPS_SQ)
    }

    /// Softly weighted triplet objective: per anchor, softplus of the
    /// softmax-weighted positive-distance sum minus the softmax-weighted
    /// (over negated distances) negative-distance sum; mean over anchors.
    /// The anchor itself is excluded from its positive set.
    pub fn weighted_regularized_triplet<'t>(
        features: Var<'t>,
        labels: &[usize],
    ) -> Result<Var<'t>> {
        let n = labels.len();
        if features.value().shape()[0] != n {
            return Err(Error::Input(format!(
                "{} labels for {} feature rows",
                n,
                features.value().shape()[0]
            )));
        }
        let mut pos = Array2::<f64>::zeros((n, n));
        let mut neg = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                if labels[i] == labels[j] {
                    pos[[i, j]] = 1.0;
                } else {
                    neg[[i, j]] = 1.0;
                }
            }
        }
        for i in 0..n {
            if pos.row(i).sum() == 0.0 {
                return Err(Error::Input(format!("anchor {i} has no positive in the batch")));
            }
            if neg.row(i).sum() == 0.0 {
                return Err(Error::Input(format!("anchor {i} has no negative in the batch")));
            }
        }

        let dist = pairwise_distances(features);
        let dval = dist.value();

        // shift every exponent by the full-row extremum (a constant): the
        // softmax value is shift-invariant and nothing can overflow
        let d2 = dval.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut shift_pos = Array2::<f64>::zeros((n, n));
        let mut shift_neg = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let row_max = d2.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let row_min = d2.row(i).iter().cloned().fold(f64::INFINITY, f64::min);
            for j in 0..n {
                shift_pos[[i, j]] = -row_max;
                shift_neg[[i, j]] = row_min;
            }
        }

        let exp_pos = dist.add_const(&shift_pos.into_dyn()).exp().mul_const(&pos.clone().into_dyn());
        let w_pos = exp_pos.div_colvec(exp_pos.sum_rows());
        let pos_sum = w_pos.mul(dist).sum_rows();

        let exp_neg = dist
            .neg()
            .add_const(&shift_neg.into_dyn())
            .exp()
            .mul_const(&neg.clone().into_dyn());
        let w_neg = exp_neg.div_colvec(exp_neg.sum_rows());
        let neg_sum = w_neg.mul(dist).sum_rows();

        Ok(pos_sum.sub(neg_sum).softplus().mean_all())
    }

    /// One modality term of the image-to-text contrastive loss. Row `i` of
    /// `sample_text_feats` must be the text feature of sample `i`'s identity.
    pub fn image_to_text_contrastive<'t>(
        img_feats: Var<'t>,
        sample_text_feats: Var<'t>,
        scale: f64,
    ) -> Result<Var<'t>> {
        let n = img_feats.value().shape()[0];
        if sample_text_feats.value().shape() != img_feats.value().shape() {
            return Err(Error::Input("image/text feature shapes differ".into()));
        }
        if n == 0 {
            return Err(Error::Input("empty modality half".into()));
        }
        let sims = cosine_matrix(img_feats, sample_text_feats, scale);
        Ok(sims.log_softmax_rows().diag().mean_all().neg())
    }

    /// One modality term of the text-to-image contrastive loss. Row `i` of
    /// `anchor_text_feats` is the bank feature of anchor `i`'s identity; the
    /// positive set P(y_i) is formed within this half from `labels`.
    pub fn text_to_image_contrastive<'t>(
        img_feats: Var<'t>,
        labels: &[usize],
        anchor_text_feats: Var<'t>,
        scale: f64,
    ) -> Result<Var<'t>> {
        let n = labels.len();
        if img_feats.value().shape()[0] != n || anchor_text_feats.value().shape()[0] != n {
            return Err(Error::Input("text-to-image inputs disagree on the half size".into()));
        }
        if n == 0 {
            return Err(Error::Input("empty modality half".into()));
        }
        // anchors[i][j] = s(f_j, t_{y_i})
        let anchors = cosine_matrix(anchor_text_feats, img_feats, scale).log_softmax_rows();
        let mut weight = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let positives: Vec<usize> = (0..n).filter(|&p| labels[p] == labels[i]).collect();
            debug_assert!(!positives.is_empty());
            for &p in &positives {
                weight[[i, p]] = 1.0 / (n as f64 * positives.len() as f64);
            }
        }
        Ok(anchors.mul_const(&weight.into_dyn()).sum_all().neg())
    }

    /// Image-to-text cross-entropy against the per-identity prototype bank.
    pub fn image_to_text_ce<'t>(
        img_feats: Var<'t>,
        labels: &[usize],
        bank: Var<'t>,
        scale: f64,
    ) -> Result<Var<'t>> {
        let n = labels.len();
        let n_c = bank.value().shape()[0];
        if img_feats.value().shape()[0] != n {
            return Err(Error::Input(format!(
                "{} labels for {} feature rows",
                n,
                img_feats.value().shape()[0]
            )));
        }
        check_labels(labels, n_c)?;
        let sims = cosine_matrix(img_feats, bank, scale).log_softmax_rows();
        let mut pick = Array2::<f64>::zeros((n, n_c));
        for (i, &y) in labels.iter().enumerate() {
            pick[[i, y]] = 1.0 / n as f64;
        }
        Ok(sims.mul_const(&pick.into_dyn()).sum_all().neg())
    }

    /// The stage-3 composite with its components.
    pub struct Stage3Loss<'t> {
        pub total: Var<'t>,
        pub identity: Var<'t>,
        pub wrt: Var<'t>,
        pub i2tce_visible: Var<'t>,
        pub i2tce_infrared: Var<'t>,
    }

    /// `L_id + λ1·L_wrt + λ2·L_ce(visible) + λ3·L_ce(infrared)`, with the
    /// semantic CE terms computed per modality half against the given
    /// prototype banks (pass the same bank twice for fused or shared
    /// prototypes).
    #[allow(clippy::too_many_arguments)]
    pub fn stage3_total<'t>(
        logits: Var<'t>,
        features: Var<'t>,
        labels: &[usize],
        modality_mask: &[Modality],
        bank_visible: Var<'t>,
        bank_infrared: Var<'t>,
        weights: &LossWeights,
        scale: f64,
    ) -> Result<Stage3Loss<'t>> {
        weights.validate()?;
        if labels.len() != modality_mask.len() {
            return Err(Error::Input("labels and modality mask lengths differ".into()));
        }
        let (vis, ir) = half_indices(modality_mask);
        if vis.is_empty() || ir.is_empty() {
            return Err(Error::Input("stage-3 batch must contain both modalities".into()));
        }
        let identity = identity_loss(logits, labels)?;
        let wrt = weighted_regularized_triplet(features, labels)?;
        let vis_labels: Vec<usize> = vis.iter().map(|&i| labels[i]).collect();
        let ir_labels: Vec<usize> = ir.iter().map(|&i| labels[i]).collect();
        let i2tce_visible =
            image_to_text_ce(features.gather_axis0(&vis), &vis_labels, bank_visible, scale)?;
        let i2tce_infrared =
            image_to_text_ce(features.gather_axis0(&ir), &ir_labels, bank_infrared, scale)?;
        let total = identity
            .add(wrt.scale(weights.lambda1))
            .add(i2tce_visible.scale(weights.lambda2))
            .add(i2tce_infrared.scale(weights.lambda3));
        Ok(Stage3Loss { total, identity, wrt, i2tce_visible, i2tce_infrared })
    }
}

// ── eval-only wrappers ─────────────────────────────────────────────────────

pub fn identity_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<LossValue> {
    let tape = Tape::new();
    let l = tape.constant(logits.clone().into_dyn());
    LossValue::single("l_id", graph::identity_loss(l, labels)?.scalar())
}

pub fn weighted_regularized_triplet(features: &Array2<f64>, labels: &[usize]) -> Result<LossValue> {
    let tape = Tape::new();
    let f = tape.constant(features.clone().into_dyn());
    LossValue::single("l_wrt", graph::weighted_regularized_triplet(f, labels)?.scalar())
}

pub fn image_to_text_contrastive(
    img_feats: &Array2<f64>,
    sample_text_feats: &Array2<f64>,
    scale: f64,
) -> Result<LossValue> {
    let tape = Tape::new();
    let f = tape.constant(img_feats.clone().into_dyn());
    let t = tape.constant(sample_text_feats.clone().into_dyn());
    LossValue::single("l_i2t", graph::image_to_text_contrastive(f, t, scale)?.scalar())
}

pub fn text_to_image_contrastive(
    img_feats: &Array2<f64>,
    labels: &[usize],
    anchor_text_feats: &Array2<f64>,
    scale: f64,
) -> Result<LossValue> {
    let tape = Tape::new();
    let f = tape.constant(img_feats.clone().into_dyn());
    let t = tape.constant(anchor_text_feats.clone().into_dyn());
    LossValue::single("l_t2i", graph::text_to_image_contrastive(f, labels, t, scale)?.scalar())
}

pub fn image_to_text_ce(
    img_feats: &Array2<f64>,
    labels: &[usize],
    bank: &Array2<f64>,
    scale: f64,
) -> Result<LossValue> {
    let tape = Tape::new();
    let f = tape.constant(img_feats.clone().into_dyn());
    let b = tape.constant(bank.clone().into_dyn());
    LossValue::single("l_i2tce", graph::image_to_text_ce(f, labels, b, scale)?.scalar())
}

#[allow(clippy::too_many_arguments)]
pub fn stage3_total(
    logits: &Array2<f64>,
    features: &Array2<f64>,
    labels: &[usize],
    modality_mask: &[Modality],
    bank_visible: &Array2<f64>,
    bank_infrared: &Array2<f64>,
    weights: &LossWeights,
    scale: f64,
) -> Result<LossValue> {
    let tape = Tape::new();
    let l = tape.constant(logits.clone().into_dyn());
    let f = tape.constant(features.clone().into_dyn());
    let bv = tape.constant(bank_visible.clone().into_dyn());
    let br = tape.constant(bank_infrared.clone().into_dyn());
    let out = graph::stage3_total(l, f, labels, modality_mask, bv, br, weights, scale)?;
    let value = out.total.scalar();
    if !value.is_finite() {
        return Err(Error::NumericalGuard(format!("stage-3 total is not finite: {value}")));
    }
    Ok(LossValue {
        value: value.max(0.0),
        components: vec![
            ("l_id".into(), out.identity.scalar()),
            ("l_wrt".into(), out.wrt.scalar()),
            ("l_i2tce_vs".into(), out.i2tce_visible.scalar()),
            ("l_i2tce_rs".into(), out.i2tce_infrared.scalar()),
        ],
    })
}
