//! Bimodal datasets: synthetic generation, manifest files, identity-balanced
//! PK batch sampling, and protocol-specific query/gallery splits.
//!
//! A manifest is line-delimited: one JSON header line (identity count, image
//! shape, split) followed by one JSON record per line. Image payloads are
//! either inline (`inline:` + base64 of little-endian f32 pixels, HWC order)
//! or a path to an image file decoded at load time, so real data can be
//! swapped in by pointing records at files on disk.
//!
//! The synthetic generator gives every identity a latent appearance vector.
//! Visible images render the latent through per-channel low-frequency color
//! fields; infrared images render a channel-collapsed grayscale version of
//! the same fields plus Gaussian noise. The identity signal is recoverable
//! from both modalities while the raw-pixel statistics differ sharply.

use crate::error::{Error, Result};
use ndarray::{Array1, Array3, Array4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

const LATENT_DIM: usize = 8;
const LATENT_JITTER: f64 = 0.05;
const VISIBLE_CAMERAS: u32 = 4;
const INFRARED_CAMERAS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visible,
    Infrared,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Visible => write!(f, "visible"),
            Modality::Infrared => write!(f, "infrared"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationTag {
    Indoor,
    Outdoor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Reference to the pixel payload of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ImageRef {
    /// Pixels stored inline, HWC row-major, values in `[0, 1]`.
    Inline(Vec<f32>),
    /// Path to an image file, decoded (and resized if needed) at load time.
    Path(PathBuf),
}

impl From<ImageRef> for String {
    fn from(r: ImageRef) -> String {
        match r {
            ImageRef::Inline(pixels) => {
                use base64::Engine;
                let mut bytes = Vec::with_capacity(pixels.len() * 4);
                for p in &pixels {
                    bytes.extend_from_slice(&p.to_le_bytes());
                }
                format!(
                    "inline:{}",
                    base64::engine::general_purpose::STANDARD.encode(bytes)
                )
            }
            ImageRef::Path(p) => format!("path:{}", p.display()),
        }
    }
}

impl TryFrom<String> for ImageRef {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if let Some(b64) = s.strip_prefix("inline:") {
            use base64::Engine;
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| format!("bad inline image payload: {e}"))?;
            if bytes.len() % 4 != 0 {
                return Err("inline image payload not a multiple of 4 bytes".into());
            }
            let pixels = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(ImageRef::Inline(pixels))
        } else if let Some(p) = s.strip_prefix("path:") {
            Ok(ImageRef::Path(PathBuf::from(p)))
        } else {
            Err(format!("image_ref must start with 'inline:' or 'path:': {s}"))
        }
    }
}

/// One image with its identity, modality and capture metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub identity: usize,
    pub modality: Modality,
    pub camera_id: u32,
    pub location_tag: LocationTag,
    pub image_ref: ImageRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    num_identities: usize,
    image_shape: (usize, usize, usize),
    split: Split,
    record_count: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub num_identities: usize,
    pub split: Split,
    /// `(H, W, C)`.
    pub image_shape: (usize, usize, usize),
}

impl DatasetManifest {
    /// Validates manifest invariants: label range, distinct-identity count,
    /// and (train only) per-modality coverage of every identity.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_identities];
        let mut coverage = vec![(false, false); self.num_identities];
        for r in &self.records {
            if r.identity >= self.num_identities {
                return Err(Error::Data(format!(
                    "record {} has identity {} >= num_identities {}",
                    r.sample_id, r.identity, self.num_identities
                )));
            }
            seen[r.identity] = true;
            match r.modality {
                Modality::Visible => coverage[r.identity].0 = true,
                Modality::Infrared => coverage[r.identity].1 = true,
            }
        }
        let distinct = seen.iter().filter(|&&s| s).count();
        if distinct != self.num_identities {
            return Err(Error::Data(format!(
                "manifest declares {} identities but {} are present",
                self.num_identities, distinct
            )));
        }
        if self.split == Split::Train {
            for (id, &(v, r)) in coverage.iter().enumerate() {
                if !(v && r) {
                    return Err(Error::Data(format!(
                        "train identity {id} is missing a modality (visible: {v}, infrared: {r})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = ManifestHeader {
            num_identities: self.num_identities,
            image_shape: self.image_shape,
            split: self.split,
            record_count: self.records.len(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r).expect("record serializes"))?;
        }
        Ok(())
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn read_from(r: impl std::io::Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Data("empty manifest".into()))??;
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Data(format!("bad manifest header: {e}")))?;
        let mut records = Vec::with_capacity(header.record_count);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("bad record at line {}: {e}", lineno + 2)))?;
            records.push(rec);
        }
        if records.len() != header.record_count {
            return Err(Error::Data(format!(
                "manifest header declares {} records, found {}",
                header.record_count,
                records.len()
            )));
        }
        let manifest = DatasetManifest {
            records,
            num_identities: header.num_identities,
            split: header.split,
            image_shape: header.image_shape,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open manifest {}: {e}", path.display())))?;
        Self::read_from(f)
    }

    /// Record indices grouped by identity, split by modality.
    pub fn indices_by_identity(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut groups = vec![(Vec::new(), Vec::new()); self.num_identities];
        for (i, r) in self.records.iter().enumerate() {
            match r.modality {
                Modality::Visible => groups[r.identity].0.push(i),
                Modality::Infrared => groups[r.identity].1.push(i),
            }
        }
        groups
    }
}

/// Synthetic dataset parameters. One call produces one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub images_per_id_per_modality: usize,
    /// `(H, W, C)`; C must be 3.
    pub image_shape: (usize, usize, usize),
    pub seed: u64,
    /// Infrared additive noise, as a fraction of dynamic range.
    pub noise_sigma: f64,
    pub split: Split,
}

// splitmix64; used to derive independent deterministic streams per record.
fn mix(mut h: u64, v: u64) -> u64 {
    h = h.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(v);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

fn derived_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = mix(seed, 0x5eed);
    for &p in parts {
        h = mix(h, p);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

/// Per-identity base appearance vector (shared across splits and modalities).
pub fn identity_latent(seed: u64, identity: usize) -> Array1<f64> {
    let mut rng = derived_rng(seed, &[1, identity as u64]);
    Array1::from_shape_fn(LATENT_DIM, |_| standard_normal(&mut rng))
}

/// Per-sample latent: the identity latent plus a small deterministic jitter.
pub fn sample_latent(
    seed: u64,
    split: Split,
    identity: usize,
    modality: Modality,
    index: usize,
) -> Array1<f64> {
    let base = identity_latent(seed, identity);
    let mut rng = derived_rng(
        seed,
        &[
            2,
            match split {
                Split::Train => 0,
                Split::Test => 1,
            },
            identity as u64,
            match modality {
                Modality::Visible => 0,
                Modality::Infrared => 1,
            },
            index as u64,
        ],
    );
    base.mapv(|v| v + LATENT_JITTER * standard_normal(&mut rng))
}

/// Low-frequency cosine rendering fields: one per (latent dim, channel) for
/// the visible transform, plus one dedicated grayscale field per latent dim
/// for the infrared transform.
struct RenderBasis {
    // amplitude, u-frequency, v-frequency, phase
    fields: Vec<[(f64, f64, f64, f64); 3]>,
    gray_fields: Vec<(f64, f64, f64, f64)>,
}

impl RenderBasis {
    fn new(seed: u64) -> Self {
        let mut rng = derived_rng(seed, &[3]);
        let field = |rng: &mut ChaCha8Rng| {
            let amp: f64 = rng.random_range(-1.0..1.0);
            let u = rng.random_range(0..3) as f64;
            let v = rng.random_range(0..3) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (amp, u, v, phase)
        };
        let fields = (0..LATENT_DIM).map(|_| std::array::from_fn(|_| field(&mut rng))).collect();
        let gray_fields = (0..LATENT_DIM)
            .map(|_| {
                let (amp, u, v, phase) = field(&mut rng);
                // keep every latent dimension recoverable from infrared
                (amp.signum() * amp.abs().max(0.3), u, v, phase)
            })
            .collect();
        RenderBasis { fields, gray_fields }
    }

    fn channel_value(&self, k: usize, c: usize, h: f64, w: f64) -> f64 {
        let (amp, u, v, phase) = self.fields[k][c];
        amp * (std::f64::consts::TAU * (u * h + v * w) + phase).cos()
    }

    fn gray_value(&self, k: usize, h: f64, w: f64) -> f64 {
        let (amp, u, v, phase) = self.gray_fields[k];
        amp * (std::f64::consts::TAU * (u * h + v * w) + phase).cos()
    }
}

fn squash(x: f64) -> f64 {
    0.5 + 0.5 * x.tanh()
}

fn render_visible(basis: &RenderBasis, latent: &Array1<f64>, shape: (usize, usize, usize)) -> Vec<f32> {
    let (hh, ww, cc) = shape;
    let mut pixels = Vec::with_capacity(hh * ww * cc);
    for i in 0..hh {
        for j in 0..ww {
            for c in 0..cc {
                let mut acc = 0.0;
                for k in 0..LATENT_DIM {
                    acc += latent[k]
                        * basis.channel_value(k, c, i as f64 / hh as f64, j as f64 / ww as f64);
                }
                pixels.push(squash(acc) as f32);
            }
        }
    }
    pixels
}

fn render_infrared(
    basis: &RenderBasis,
    latent: &Array1<f64>,
    shape: (usize, usize, usize),
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let (hh, ww, cc) = shape;
    let mut pixels = Vec::with_capacity(hh * ww * cc);
    for i in 0..hh {
        for j in 0..ww {
            let mut acc = 0.0;
            for k in 0..LATENT_DIM {
                acc += latent[k] * basis.gray_value(k, i as f64 / hh as f64, j as f64 / ww as f64);
            }
            // channel-collapsed: one gray value replicated across channels
            let gray = (squash(acc) + sigma * standard_normal(rng)).clamp(0.0, 1.0) as f32;
            for _ in 0..cc {
                pixels.push(gray);
            }
        }
    }
    pixels
}

fn camera_for(modality: Modality, index: usize) -> u32 {
    match modality {
        Modality::Visible => (index as u32) % VISIBLE_CAMERAS,
        Modality::Infrared => VISIBLE_CAMERAS + (index as u32) % INFRARED_CAMERAS,
    }
}

fn location_for(camera: u32) -> LocationTag {
    // cameras 0, 1 (visible) and 4 (infrared) are indoor
    if camera == 0 || camera == 1 || camera == VISIBLE_CAMERAS {
        LocationTag::Indoor
    } else {
        LocationTag::Outdoor
    }
}

/// Deterministic synthetic manifest generation.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetManifest> {
    let (h, w, c) = spec.image_shape;
    if spec.num_identities < 2 {
        return Err(Error::Config(format!(
            "synthetic num_identities must be >= 2, got {}",
            spec.num_identities
        )));
    }
    let min_per_id = match spec.split {
        Split::Train => 2,
        Split::Test => 1,
    };
    if spec.images_per_id_per_modality < min_per_id {
        return Err(Error::Config(format!(
            "images_per_id_per_modality must be >= {min_per_id} for the {:?} split, got {}",
            spec.split, spec.images_per_id_per_modality
        )));
    }
    if h == 0 || w == 0 || c != 3 {
        return Err(Error::Config(format!(
            "synthetic image_shape must be (H>0, W>0, 3), got {:?}",
            spec.image_shape
        )));
    }
    if !(spec.noise_sigma.is_finite() && spec.noise_sigma >= 0.0) {
        return Err(Error::Config(format!(
            "noise_sigma must be a non-negative finite number, got {}",
            spec.noise_sigma
        )));
    }

    let basis = RenderBasis::new(spec.seed);
    let split_tag = match spec.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut records = Vec::new();
    for identity in 0..spec.num_identities {
        for modality in [Modality::Visible, Modality::Infrared] {
            for j in 0..spec.images_per_id_per_modality {
                let latent = sample_latent(spec.seed, spec.split, identity, modality, j);
                let pixels = match modality {
                    Modality::Visible => render_visible(&basis, &latent, spec.image_shape),
                    Modality::Infrared => {
                        let mut noise_rng = derived_rng(
                            spec.seed,
                            &[
                                4,
                                match spec.split {
                                    Split::Train => 0,
                                    Split::Test => 1,
                                },
                                identity as u64,
                                j as u64,
                            ],
                        );
                        render_infrared(&basis, &latent, spec.image_shape, spec.noise_sigma, &mut noise_rng)
                    }
                };
                let camera_id = camera_for(modality, j);
                records.push(SampleRecord {
                    sample_id: format!("{split_tag}_{identity:03}_{modality}_{j:02}"),
                    identity,
                    modality,
                    camera_id,
                    location_tag: location_for(camera_id),
                    image_ref: ImageRef::Inline(pixels),
                });
            }
        }
    }
    let manifest = DatasetManifest {
        records,
        num_identities: spec.num_identities,
        split: spec.split,
        image_shape: spec.image_shape,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// A manifest with all pixel payloads materialized as `(C, H, W)` arrays.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Array3<f64>>,
}

impl LoadedDataset {
    pub fn load(manifest: DatasetManifest, base_dir: Option<&Path>) -> Result<Self> {
        let (h, w, c) = manifest.image_shape;
        let mut images = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let chw = match &r.image_ref {
                ImageRef::Inline(pixels) => {
                    if pixels.len() != h * w * c {
                        return Err(Error::Data(format!(
                            "record {}: inline payload has {} values, expected {}",
                            r.sample_id,
                            pixels.len(),
                            h * w * c
                        )));
                    }
                    hwc_to_chw(pixels, h, w, c)
                }
                ImageRef::Path(p) => {
                    let full = match base_dir {
                        Some(d) if p.is_relative() => d.join(p),
                        _ => p.clone(),
                    };
                    decode_image_file(&full, h, w, c).map_err(|e| {
                        Error::Data(format!("record {}: {e}", r.sample_id))
                    })?
                }
            };
            images.push(chw);
        }
        Ok(LoadedDataset { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn hwc_to_chw(pixels: &[f32], h: usize, w: usize, c: usize) -> Array3<f64> {
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| pixels[(i * w + j) * c + ch] as f64)
}

fn decode_image_file(path: &Path, h: usize, w: usize, c: usize) -> std::result::Result<Array3<f64>, String> {
    if c != 3 {
        return Err(format!("file-backed records require 3 channels, manifest has {c}"));
    }
    let img = image::open(path).map_err(|e| format!("cannot decode {}: {e}", path.display()))?;
    let rgb = if img.width() as usize != w || img.height() as usize != h {
        image::imageops::resize(
            &img.to_rgb8(),
            w as u32,
            h as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        img.to_rgb8()
    };
    Ok(Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
        rgb.get_pixel(j as u32, i as u32)[ch] as f64 / 255.0
    }))
}

/// PK batch composition: P identities, K_v visible + K_r infrared each.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BatchSpec {
    pub num_identities_per_batch: usize,
    pub visible_per_identity: usize,
    pub infrared_per_identity: usize,
}

impl BatchSpec {
    pub fn batch_size(&self) -> usize {
        self.num_identities_per_batch * (self.visible_per_identity + self.infrared_per_identity)
    }
}

/// One training batch in contiguous identity groups: for each selected
/// identity, its K_v visible rows then its K_r infrared rows.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(n_b, C, H, W)`.
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub modality_mask: Vec<Modality>,
}

// Take `k` of `available`: all of them (shuffled) when k <= len, otherwise
// each one once plus replacement draws. Guarantees every available sample
// appears when the identity is image-poor.
fn pick_with_policy(available: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if available.len() >= k {
        rand::seq::index::sample(rng, available.len(), k)
            .iter()
            .map(|i| available[i])
            .collect()
    } else {
        let mut picks: Vec<usize> = available.to_vec();
        while picks.len() < k {
            picks.push(available[rng.random_range(0..available.len())]);
        }
        picks
    }
}

pub fn sample_batch(
    dataset: &LoadedDataset,
    spec: &BatchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let manifest = &dataset.manifest;
    if manifest.split != Split::Train {
        return Err(Error::Input("sample_batch requires a train-split manifest".into()));
    }
    let p = spec.num_identities_per_batch;
    if p == 0 || spec.visible_per_identity == 0 || spec.infrared_per_identity == 0 {
        return Err(Error::Config("batch spec entries must all be positive".into()));
    }
    if manifest.num_identities < p {
        return Err(Error::Config(format!(
            "batch wants {} identities but the manifest has {}",
            p, manifest.num_identities
        )));
    }
    let groups = manifest.indices_by_identity();
    let chosen: Vec<usize> = rand::seq::index::sample(rng, manifest.num_identities, p).into_vec();

    let (_, _, _c) = manifest.image_shape;
    let n_b = spec.batch_size();
    let (c, h, w) = dataset.images[0].dim();
    let mut images = Array4::<f64>::zeros((n_b, c, h, w));
    let mut labels = Vec::with_capacity(n_b);
    let mut mask = Vec::with_capacity(n_b);
    let mut row = 0;
    for &identity in &chosen {
        let (vis, ir) = &groups[identity];
        if vis.is_empty() || ir.is_empty() {
            return Err(Error::Data(format!(
                "identity {identity} lacks a modality required for PK sampling"
            )));
        }
        for &rec_idx in &pick_with_policy(vis, spec.visible_per_identity, rng) {
            images
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&dataset.images[rec_idx]);
            labels.push(identity);
            mask.push(Modality::Visible);
            row += 1;
        }
        for &rec_idx in &pick_with_policy(ir, spec.infrared_per_identity, rng) {
            images
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&dataset.images[rec_idx]);
            labels.push(identity);
            mask.push(Modality::Infrared);
            row += 1;
        }
    }
    Ok(Batch { images, labels, modality_mask: mask })
}

/// Train-time augmentation: per-image horizontal flip (p=0.5) and zero-pad +
/// random-crop by `pad` pixels. A no-op when both switches are off.
pub fn augment_batch(batch: &mut Batch, flip: bool, pad: usize, rng: &mut ChaCha8Rng) {
    let (n, c, h, w) = batch.images.dim();
    for b in 0..n {
        if flip && rng.random_range(0..2) == 1 {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w / 2 {
                        let tmp = batch.images[[b, ch, i, j]];
                        batch.images[[b, ch, i, j]] = batch.images[[b, ch, i, w - 1 - j]];
                        batch.images[[b, ch, i, w - 1 - j]] = tmp;
                    }
                }
            }
        }
        if pad > 0 {
            let di = rng.random_range(0..=2 * pad) as isize - pad as isize;
            let dj = rng.random_range(0..=2 * pad) as isize - pad as isize;
            if di != 0 || dj != 0 {
                let src = batch.images.index_axis(ndarray::Axis(0), b).to_owned();
                let mut dst = batch.images.index_axis_mut(ndarray::Axis(0), b);
                dst.fill(0.0);
                for ch in 0..c {
                    for i in 0..h {
                        let si = i as isize + di;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + dj;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            dst[[ch, i, j]] = src[[ch, si as usize, sj as usize]];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    All,
    Indoor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalleryMode {
    SingleShot,
    MultiShot,
}

impl GalleryMode {
    pub fn shots(&self) -> usize {
        match self {
            GalleryMode::SingleShot => 1,
            GalleryMode::MultiShot => 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    InfraredToVisible,
    VisibleToInfrared,
}

impl Direction {
    pub fn query_modality(&self) -> Modality {
        match self {
            Direction::InfraredToVisible => Modality::Infrared,
            Direction::VisibleToInfrared => Modality::Visible,
        }
    }

    pub fn gallery_modality(&self) -> Modality {
        match self {
            Direction::InfraredToVisible => Modality::Visible,
            Direction::VisibleToInfrared => Modality::Infrared,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub search_mode: SearchMode,
    pub gallery_mode: GalleryMode,
    pub direction: Direction,
    pub trial_seed: u64,
}

/// Query/gallery record indices for one trial, plus exclusion flags.
#[derive(Debug, Clone)]
pub struct ProtocolSplit {
    pub query_indices: Vec<usize>,
    pub gallery_indices: Vec<usize>,
    /// Identities with zero gallery-modality images after filtering.
    pub excluded_identities: Vec<usize>,
}

pub fn protocol_split(manifest: &DatasetManifest, protocol: &ProtocolSpec) -> Result<ProtocolSplit> {
    if manifest.split != Split::Test {
        return Err(Error::Input("protocol_split requires a test-split manifest".into()));
    }
    let query_modality = protocol.direction.query_modality();
    let gallery_modality = protocol.direction.gallery_modality();

    let query_indices: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.modality == query_modality)
        .map(|(i, _)| i)
        .collect();

    let mut candidates: Vec<Vec<usize>> = vec![Vec::new(); manifest.num_identities];
    for (i, r) in manifest.records.iter().enumerate() {
        if r.modality != gallery_modality {
            continue;
        }
        if protocol.search_mode == SearchMode::Indoor && r.location_tag != LocationTag::Indoor {
            continue;
        }
        candidates[r.identity].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(protocol.trial_seed);
    let shots = protocol.gallery_mode.shots();
    let mut gallery_indices = Vec::new();
    let mut excluded = Vec::new();
    for (identity, cand) in candidates.iter().enumerate() {
        if cand.is_empty() {
            excluded.push(identity);
            continue;
        }
        if cand.len() >= shots {
            let picks = rand::seq::index::sample(&mut rng, cand.len(), shots);
            gallery_indices.extend(picks.iter().map(|i| cand[i]));
        } else {
            // short identity: pure draws with replacement
            for _ in 0..shots {
                gallery_indices.push(cand[rng.random_range(0..cand.len())]);
            }
        }
    }
    if gallery_indices.is_empty() {
        return Err(Error::Protocol(format!(
            "empty gallery: no {} images satisfy the {:?} filter",
            gallery_modality, protocol.search_mode
        )));
    }
    Ok(ProtocolSplit { query_indices, gallery_indices, excluded_identities: excluded })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_spec(split: Split) -> SyntheticSpec {
        SyntheticSpec {
            num_identities: 16,
            images_per_id_per_modality: 8,
            image_shape: (32, 16, 3),
            seed: 7,
            noise_sigma: 0.1,
            split,
        }
    }

    #[test]
    fn synthetic_counts_match_request() {
        let m = generate_synthetic(&desk_spec(Split::Train)).unwrap();
        assert_eq!(m.records.len(), 16 * 8 * 2);
        assert_eq!(m.num_identities, 16);
        let visible = m.records.iter().filter(|r| r.modality == Modality::Visible).count();
        assert_eq!(visible, 16 * 8);
    }

    #[test]
    fn synthetic_generation_is_byte_identical() {
        let spec = SyntheticSpec {
            num_identities: 2,
            images_per_id_per_modality: 2,
            image_shape: (8, 6, 3),
            seed: 3,
            noise_sigma: 0.1,
            split: Split::Train,
        };
        let mut a = Vec::new();
        generate_synthetic(&spec).unwrap().write_to(&mut a).unwrap();
        let mut b = Vec::new();
        generate_synthetic(&spec).unwrap().write_to(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_id_one_rejected_for_train_accepted_for_test() {
        let mut spec = desk_spec(Split::Train);
        spec.images_per_id_per_modality = 1;
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
        let mut spec = desk_spec(Split::Test);
        spec.images_per_id_per_modality = 1;
        assert!(generate_synthetic(&spec).is_ok());
    }

    #[test]
    fn manifest_roundtrip_preserves_everything() {
        let m = generate_synthetic(&SyntheticSpec {
            num_identities: 3,
            images_per_id_per_modality: 2,
            image_shape: (6, 4, 3),
            seed: 9,
            noise_sigma: 0.05,
            split: Split::Test,
        })
        .unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = DatasetManifest::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.records.len(), m.records.len());
        for (a, b) in m.records.iter().zip(back.records.iter()) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.image_ref, b.image_ref);
            assert_eq!(a.camera_id, b.camera_id);
        }
    }

    #[test]
    fn latent_nearest_centroid_is_perfect() {
        // guards that end-to-end failures implicate the model, not the data
        let spec = desk_spec(Split::Train);
        let mut latents: Vec<(usize, Array1<f64>)> = Vec::new();
        for id in 0..spec.num_identities {
            for modality in [Modality::Visible, Modality::Infrared] {
                for j in 0..spec.images_per_id_per_modality {
                    latents.push((id, sample_latent(spec.seed, spec.split, id, modality, j)));
                }
            }
        }
        let mut centroids = vec![Array1::<f64>::zeros(LATENT_DIM); spec.num_identities];
        let mut counts = vec![0usize; spec.num_identities];
        for (id, z) in &latents {
            centroids[*id] = &centroids[*id] + z;
            counts[*id] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            *c /= *n as f64;
        }
        for (id, z) in &latents {
            let best = centroids
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da = (*a - z).mapv(|v| v * v).sum();
                    let db = (*b - z).mapv(|v| v * v).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
                .0;
            assert_eq!(best, *id);
        }
    }

    #[test]
    fn modality_gap_is_visible_in_raw_pixels() {
        let m = generate_synthetic(&desk_spec(Split::Train)).unwrap();
        // channel spread of visible images should dwarf infrared's (gray)
        let spread = |r: &SampleRecord| -> f64 {
            let ImageRef::Inline(px) = &r.image_ref else { unreachable!() };
            px.chunks_exact(3)
                .map(|p| {
                    let max = p.iter().cloned().fold(f32::MIN, f32::max);
                    let min = p.iter().cloned().fold(f32::MAX, f32::min);
                    (max - min) as f64
                })
                .sum::<f64>()
                / (px.len() / 3) as f64
        };
        let vis: f64 = m
            .records
            .iter()
            .filter(|r| r.modality == Modality::Visible)
            .map(spread)
            .sum::<f64>()
            / (16.0 * 8.0);
        let ir: f64 = m
            .records
            .iter()
            .filter(|r| r.modality == Modality::Infrared)
            .map(spread)
            .sum::<f64>()
            / (16.0 * 8.0);
        assert_eq!(ir, 0.0);
        assert!(vis > 0.1, "visible channel spread too small: {vis}");
    }

    fn loaded(split: Split) -> LoadedDataset {
        LoadedDataset::load(generate_synthetic(&desk_spec(split)).unwrap(), None).unwrap()
    }

    #[test]
    fn pk_batch_shape_and_composition() {
        let ds = loaded(Split::Train);
        let spec = BatchSpec {
            num_identities_per_batch: 8,
            visible_per_identity: 4,
            infrared_per_identity: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&ds, &spec, &mut rng).unwrap();
        assert_eq!(batch.images.dim(), (64, 3, 32, 16));
        let n_v = batch.modality_mask.iter().filter(|m| **m == Modality::Visible).count();
        assert_eq!(n_v, 32);
        // contiguous identity groups with exactly K_v + K_r members
        for group in batch.labels.chunks(8) {
            assert!(group.iter().all(|&l| l == group[0]));
        }
        for group in batch.modality_mask.chunks(8) {
            assert!(group[..4].iter().all(|m| *m == Modality::Visible));
            assert!(group[4..].iter().all(|m| *m == Modality::Infrared));
        }
    }

    #[test]
    fn two_identity_exhaustive_batch() {
        let m = generate_synthetic(&SyntheticSpec {
            num_identities: 2,
            images_per_id_per_modality: 2,
            image_shape: (8, 4, 3),
            seed: 5,
            noise_sigma: 0.1,
            split: Split::Train,
        })
        .unwrap();
        let ds = LoadedDataset::load(m, None).unwrap();
        let spec = BatchSpec {
            num_identities_per_batch: 2,
            visible_per_identity: 1,
            infrared_per_identity: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_batch(&ds, &spec, &mut rng).unwrap();
        assert_eq!(batch.labels.len(), 4);
        let mut ids: Vec<usize> = batch.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn image_poor_identity_sampled_with_replacement() {
        // identity has 2 visible images, K_v = 4: both must appear, with repeats
        let m = generate_synthetic(&SyntheticSpec {
            num_identities: 2,
            images_per_id_per_modality: 2,
            image_shape: (8, 4, 3),
            seed: 5,
            noise_sigma: 0.1,
            split: Split::Train,
        })
        .unwrap();
        let groups = m.indices_by_identity();
        for trial in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let picks = pick_with_policy(&groups[0].0, 4, &mut rng);
            assert_eq!(picks.len(), 4);
            // enumeration oracle: the multiset must contain every available
            // index at least once and nothing outside the available set
            for &avail in &groups[0].0 {
                assert!(picks.contains(&avail), "missing {avail} in {picks:?}");
            }
            for &p in &picks {
                assert!(groups[0].0.contains(&p));
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_given_rng_state() {
        let ds = loaded(Split::Train);
        let spec = BatchSpec {
            num_identities_per_batch: 4,
            visible_per_identity: 2,
            infrared_per_identity: 2,
        };
        let b1 = sample_batch(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b2 = sample_batch(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(b1.labels, b2.labels);
        assert_eq!(b1.modality_mask, b2.modality_mask);
        assert_eq!(b1.images, b2.images);
    }

    #[test]
    fn too_few_identities_is_a_config_error() {
        let ds = loaded(Split::Train);
        let spec = BatchSpec {
            num_identities_per_batch: 17,
            visible_per_identity: 1,
            infrared_per_identity: 1,
        };
        let err = sample_batch(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_shot_gallery_has_one_image_per_identity() {
        let m = generate_synthetic(&desk_spec(Split::Test)).unwrap();
        let split = protocol_split(
            &m,
            &ProtocolSpec {
                search_mode: SearchMode::All,
                gallery_mode: GalleryMode::SingleShot,
                direction: Direction::InfraredToVisible,
                trial_seed: 11,
            },
        )
        .unwrap();
        assert_eq!(split.gallery_indices.len(), 16);
        let mut ids: Vec<usize> = split
            .gallery_indices
            .iter()
            .map(|&i| m.records[i].identity)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 16);
        // queries: every infrared image
        assert_eq!(split.query_indices.len(), 16 * 8);
        assert!(split.excluded_identities.is_empty());
    }

    #[test]
    fn multi_shot_short_identity_draws_with_replacement() {
        let m = generate_synthetic(&SyntheticSpec {
            num_identities: 2,
            images_per_id_per_modality: 6,
            image_shape: (8, 4, 3),
            seed: 13,
            noise_sigma: 0.1,
            split: Split::Test,
        })
        .unwrap();
        let split = protocol_split(
            &m,
            &ProtocolSpec {
                search_mode: SearchMode::All,
                gallery_mode: GalleryMode::MultiShot,
                direction: Direction::InfraredToVisible,
                trial_seed: 1,
            },
        )
        .unwrap();
        // count oracle: 10 draws per identity even with only 6 available
        assert_eq!(split.gallery_indices.len(), 20);
        for id in 0..2 {
            let picks: Vec<usize> = split
                .gallery_indices
                .iter()
                .filter(|&&i| m.records[i].identity == id)
                .cloned()
                .collect();
            assert_eq!(picks.len(), 10);
        }
    }

    #[test]
    fn indoor_mode_with_no_indoor_gallery_errors() {
        let mut m = generate_synthetic(&desk_spec(Split::Test)).unwrap();
        for r in &mut m.records {
            r.location_tag = LocationTag::Outdoor;
        }
        let err = protocol_split(
            &m,
            &ProtocolSpec {
                search_mode: SearchMode::Indoor,
                gallery_mode: GalleryMode::SingleShot,
                direction: Direction::InfraredToVisible,
                trial_seed: 0,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn both_retrieval_directions_are_supported() {
        let m = generate_synthetic(&desk_spec(Split::Test)).unwrap();
        for direction in [Direction::InfraredToVisible, Direction::VisibleToInfrared] {
            let split = protocol_split(
                &m,
                &ProtocolSpec {
                    search_mode: SearchMode::All,
                    gallery_mode: GalleryMode::SingleShot,
                    direction,
                    trial_seed: 3,
                },
            )
            .unwrap();
            let qm = direction.query_modality();
            assert!(split.query_indices.iter().all(|&i| m.records[i].modality == qm));
            let gm = direction.gallery_modality();
            assert!(split.gallery_indices.iter().all(|&i| m.records[i].modality == gm));
        }
    }
}
