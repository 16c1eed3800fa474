//! Synthetic "videos" with spatially and temporally confusable class pairs,
//! plus the weak/strong augmentations applied to clips drawn from them.
//!
//! A frame is `signature · motif(t) + noise`. Classes come in pairs
//! `(2p, 2p+1)`. Even pairs share one spatial signature and differ only in
//! motif frequency (spatially confusable); odd pairs share the motif and have
//! orthogonal signatures (temporally confusable). Motifs are slow compared to
//! a stride-8 clip, so the longer strides see noticeably more of the cycle.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::Clip;
use crate::error::{Error, Result};
use crate::tensor::{dot, l2_normalized, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub labeled_fraction: f64,
    /// Held-out videos per class used for evaluation.
    pub eval_per_class: usize,
    pub video_len: usize,
    pub frame_dim: usize,
    pub noise_std: f64,
    /// Modulation depth of the motif around its unit mean.
    pub motif_depth: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            per_class: 50,
            labeled_fraction: 0.05,
            eval_per_class: 50,
            video_len: 300,
            frame_dim: 16,
            noise_std: 0.05,
            motif_depth: 0.8,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.num_classes < 2 || !self.num_classes.is_multiple_of(2) {
            return bad("num_classes must be even and at least 2");
        }
        if self.per_class == 0 {
            return bad("per_class must be positive");
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad("labeled_fraction must lie in (0, 1]");
        }
        if self.frame_dim < 2 {
            return bad("frame_dim must be at least 2");
        }
        if self.video_len == 0 {
            return bad("video_len must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be a non-negative number");
        }
        if !(self.motif_depth > 0.0 && self.motif_depth <= 1.0) {
            return bad("motif_depth must lie in (0, 1]");
        }
        Ok(())
    }

    /// Labeled videos per class: `floor(per_class · fraction)`, at least 1.
    pub fn labeled_per_class(&self) -> usize {
        ((self.per_class as f64 * self.labeled_fraction + 1e-9).floor() as usize).clamp(1, self.per_class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotifKind {
    Sin,
    Square,
    /// Sine whose frequency rises linearly to twice its base over the video.
    Chirp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub kind: MotifKind,
    /// Base period in frames.
    pub period: f64,
}

impl Motif {
    pub fn frequency(&self) -> f64 {
        1.0 / self.period
    }

    /// Amplitude envelope `1 + depth · wave(t)`.
    pub fn amplitude(&self, t: f64, phase: f64, video_len: usize, depth: f64) -> f64 {
        let tau = std::f64::consts::TAU;
        let wave = match self.kind {
            MotifKind::Sin => (tau * t / self.period + phase).sin(),
            MotifKind::Square => {
                if (tau * t / self.period + phase).sin() >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            MotifKind::Chirp => {
                let len = video_len.max(1) as f64;
                (tau * (t / self.period + t * t / (2.0 * self.period * len)) + phase).sin()
            }
        };
        1.0 + depth * wave
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confusion {
    /// Same signature, different motif.
    Spatial,
    /// Same motif, different signature.
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub class_id: usize,
    pub spatial_signature: Vec<f64>,
    pub motif: Motif,
    pub confusion_partner: Option<usize>,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub source_id: usize,
    pub class_id: usize,
    /// `L × D_in` frames.
    pub frames: Tensor,
    pub seed: u64,
}

/// Deterministic 64-bit mixing of a seed with a stream of integers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = l2_normalized(&v) {
            return u;
        }
    }
}

/// Motif pair for pair index `p`: the two motifs of a spatially-confusable
/// pair, or the shared motif of a temporal pair.
///
/// Spatial pairs use periods of 24 and 8 frames. At strides 8, 16 and 32 the
/// first always advances a third of a cycle per sampled frame and the second
/// is constant within a clip, so a clip looks the same at every stride and
/// fusing predictions across scales does not mix up the pair.
fn pair_motifs(p: usize) -> (Motif, Motif) {
    let m = |kind, period: f64| Motif { kind, period };
    match p % 4 {
        0 => (m(MotifKind::Sin, 24.0), m(MotifKind::Sin, 8.0)),
        1 => (m(MotifKind::Chirp, 150.0), m(MotifKind::Chirp, 150.0)),
        2 => (m(MotifKind::Square, 24.0), m(MotifKind::Square, 8.0)),
        _ => (m(MotifKind::Sin, 100.0), m(MotifKind::Sin, 100.0)),
    }
}

pub fn make_classes(config: &DataConfig, seed: u64) -> Result<Vec<SynthClass>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC1A55]));
    let mut classes = Vec::with_capacity(config.num_classes);
    for p in 0..config.num_classes / 2 {
        let (a, b) = (2 * p, 2 * p + 1);
        let (motif_a, motif_b) = pair_motifs(p);
        let first = random_unit(&mut rng, config.frame_dim);
        let (sig_b, confusion) = if p % 2 == 0 {
            (first.clone(), Confusion::Spatial)
        } else {
            // Gram-Schmidt against the first signature: cosine exactly 0.
            let mut other = random_unit(&mut rng, config.frame_dim);
            let proj = dot(&other, &first);
            other.iter_mut().zip(&first).for_each(|(o, f)| *o -= proj * f);
            (l2_normalized(&other)?, Confusion::Temporal)
        };
        classes.push(SynthClass {
            class_id: a,
            spatial_signature: first,
            motif: motif_a,
            confusion_partner: Some(b),
            confusion,
        });
        classes.push(SynthClass {
            class_id: b,
            spatial_signature: sig_b,
            motif: motif_b,
            confusion_partner: Some(a),
            confusion,
        });
    }
    Ok(classes)
}

/// Regenerates one video bit-exactly from its class, id and dataset seed.
pub fn generate_video(class: &SynthClass, source_id: usize, config: &DataConfig, dataset_seed: u64) -> SynthVideo {
    let seed = derive_seed(dataset_seed, &[0x51DE0, source_id as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (len, dim) = (config.video_len, config.frame_dim);
    let mut data = Vec::with_capacity(len * dim);
    for t in 0..len {
        let a = class.motif.amplitude(t as f64, phase, len, config.motif_depth);
        for &s in &class.spatial_signature {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(s * a + config.noise_std * noise);
        }
    }
    SynthVideo {
        source_id,
        class_id: class.class_id,
        frames: Tensor::matrix(len, dim, data).expect("video shape"),
        seed,
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DataConfig,
    pub seed: u64,
    pub classes: Vec<SynthClass>,
    pub labeled: Vec<SynthVideo>,
    pub unlabeled: Vec<SynthVideo>,
    pub eval: Vec<SynthVideo>,
}

/// Generates the training split (stratified labeled/unlabeled) and the
/// held-out evaluation videos.
pub fn make_dataset(config: &DataConfig, seed: u64) -> Result<Dataset> {
    let classes = make_classes(config, seed)?;
    let n_labeled = config.labeled_per_class();
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5E117]));
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for class in &classes {
        let base = class.class_id * config.per_class;
        let mut ids: Vec<usize> = (base..base + config.per_class).collect();
        ids.shuffle(&mut split_rng);
        let (lab, unlab) = ids.split_at(n_labeled);
        let mut lab = lab.to_vec();
        let mut unlab = unlab.to_vec();
        lab.sort_unstable();
        unlab.sort_unstable();
        labeled.extend(lab.into_iter().map(|id| generate_video(class, id, config, seed)));
        unlabeled.extend(unlab.into_iter().map(|id| generate_video(class, id, config, seed)));
    }
    let eval_base = config.num_classes * config.per_class;
    let mut eval = Vec::new();
    for class in &classes {
        for i in 0..config.eval_per_class {
            let id = eval_base + class.class_id * config.eval_per_class + i;
            eval.push(generate_video(class, id, config, seed));
        }
    }
    Ok(Dataset { config: config.clone(), seed, classes, labeled, unlabeled, eval })
}

/// Number of frames spanned by a clip of `clip_len` frames at `stride`.
pub fn clip_span(clip_len: usize, stride: usize) -> usize {
    (clip_len - 1) * stride + 1
}

pub fn extract_clip(
    video: &SynthVideo,
    start: usize,
    stride: usize,
    clip_len: usize,
    with_label: bool,
) -> Result<Clip> {
    let len = video.frames.rows();
    let needed = start + clip_span(clip_len, stride);
    if needed > len {
        return Err(Error::VideoTooShort { len, needed, stride });
    }
    let rows: Vec<&[f64]> = (0..clip_len).map(|i| video.frames.row(start + i * stride)).collect();
    Ok(Clip {
        frames: Tensor::from_rows(&rows)?,
        stride,
        start,
        source_id: video.source_id,
        label: with_label.then_some(video.class_id),
    })
}

/// Clip centered in the video, used for evaluation.
pub fn center_clip(video: &SynthVideo, stride: usize, clip_len: usize) -> Result<Clip> {
    let len = video.frames.rows();
    let span = clip_span(clip_len, stride);
    if span > len {
        return Err(Error::VideoTooShort { len, needed: span, stride });
    }
    extract_clip(video, (len - span) / 2, stride, clip_len, true)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakDraw {
    pub scale: f64,
    pub jitter: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrongDraw {
    pub weak: WeakDraw,
    pub channel_scales: Vec<f64>,
    pub keep: Vec<bool>,
}

pub const CHANNEL_DROPOUT: f64 = 0.1;

impl WeakDraw {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self { scale: rng.random_range(0.9..=1.1), jitter: rng.random_range(-1..=1) }
    }

    pub fn identity() -> Self {
        Self { scale: 1.0, jitter: 0 }
    }
}

impl StrongDraw {
    pub fn sample<R: Rng>(rng: &mut R, dim: usize) -> Self {
        let weak = WeakDraw::sample(rng);
        let channel_scales = (0..dim).map(|_| rng.random_range(0.7..=1.3)).collect();
        let keep = (0..dim).map(|_| !rng.random_bool(CHANNEL_DROPOUT)).collect();
        Self { weak, channel_scales, keep }
    }
}

/// Random scaling plus a ±1-frame shift of the clip start when the shifted
/// clip still fits in the video.
pub fn apply_weak(video: &SynthVideo, clip: &Clip, draw: WeakDraw) -> Result<Clip> {
    let clip_len = clip.frames.rows();
    let max_start = video.frames.rows() as i64 - clip_span(clip_len, clip.stride) as i64;
    let shifted = clip.start as i64 + draw.jitter;
    let start = if (0..=max_start).contains(&shifted) { shifted as usize } else { clip.start };
    let mut out = extract_clip(video, start, clip.stride, clip_len, clip.label.is_some())?;
    out.frames.data_mut().iter_mut().for_each(|v| *v *= draw.scale);
    Ok(out)
}

/// Weak augmentation followed by per-channel scaling and channel dropout.
pub fn apply_strong(video: &SynthVideo, clip: &Clip, draw: &StrongDraw) -> Result<Clip> {
    let mut out = apply_weak(video, clip, draw.weak)?;
    let dim = out.frames.cols();
    if draw.channel_scales.len() != dim || draw.keep.len() != dim {
        return Err(Error::ShapeMismatch(format!(
            "strong augmentation drawn for {} channels, clip has {dim}",
            draw.channel_scales.len()
        )));
    }
    for (i, v) in out.frames.data_mut().iter_mut().enumerate() {
        let j = i % dim;
        *v *= if draw.keep[j] { draw.channel_scales[j] } else { 0.0 };
    }
    Ok(out)
}

pub fn weak_augment<R: Rng>(video: &SynthVideo, clip: &Clip, rng: &mut R) -> Result<Clip> {
    apply_weak(video, clip, WeakDraw::sample(rng))
}

pub fn strong_augment<R: Rng>(video: &SynthVideo, clip: &Clip, rng: &mut R) -> Result<Clip> {
    let draw = StrongDraw::sample(rng, clip.frames.cols());
    apply_strong(video, clip, &draw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_id: usize,
    pub class_id: usize,
    pub labeled: bool,
    pub split: String,
}

/// Everything needed to regenerate a dataset; frames are never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DataConfig,
    pub seed: u64,
    pub classes: Vec<SynthClass>,
    pub videos: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn manifest(&self) -> Manifest {
        let entry = |v: &SynthVideo, labeled: bool, split: &str| ManifestEntry {
            source_id: v.source_id,
            class_id: v.class_id,
            labeled,
            split: split.to_string(),
        };
        let mut videos: Vec<ManifestEntry> = self
            .labeled
            .iter()
            .map(|v| entry(v, true, "train"))
            .chain(self.unlabeled.iter().map(|v| entry(v, false, "train")))
            .chain(self.eval.iter().map(|v| entry(v, false, "eval")))
            .collect();
        videos.sort_by_key(|e| e.source_id);
        Manifest { config: self.config.clone(), seed: self.seed, classes: self.classes.clone(), videos }
    }

    /// Spatially-confusable class pairs `(a, b)` with `a < b`.
    pub fn spatial_pairs(&self) -> Vec<(usize, usize)> {
        self.classes
            .iter()
            .filter(|c| c.confusion == Confusion::Spatial)
            .filter_map(|c| c.confusion_partner.filter(|&p| p > c.class_id).map(|p| (c.class_id, p)))
            .collect()
    }
}

impl Manifest {
    /// Rebuilds the dataset described by this manifest.
    pub fn regenerate(&self) -> Result<Dataset> {
        make_dataset(&self.config, self.seed)
    }
}

fn time_average(video: &SynthVideo) -> Vec<f64> {
    let (rows, cols) = (video.frames.rows(), video.frames.cols());
    let mut out = vec![0.0; cols];
    for t in 0..rows {
        out.iter_mut().zip(video.frames.row(t)).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
    out
}

/// Held-out accuracy of a logistic-regression classifier on time-averaged
/// frames for two classes. Videos alternate between the fit and test halves.
pub fn time_average_separability(videos: &[&SynthVideo], class_a: usize, class_b: usize) -> f64 {
    let samples: Vec<(Vec<f64>, f64)> = videos
        .iter()
        .filter(|v| v.class_id == class_a || v.class_id == class_b)
        .map(|v| (time_average(v), if v.class_id == class_b { 1.0 } else { 0.0 }))
        .collect();
    let (fit, test): (Vec<_>, Vec<_>) = samples.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let dim = samples.first().map_or(0, |s| s.0.len());

    // Standardize features on the fit half.
    let n = fit.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for (_, (x, _)) in &fit {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
    }
    for (_, (x, _)) in &fit {
        std.iter_mut().zip(x.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-12));
    let norm_x = |x: &[f64]| -> Vec<f64> { x.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect() };

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let lr = 0.1;
    for _ in 0..500 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (_, (x, y)) in &fit {
            let x = norm_x(x);
            let p = 1.0 / (1.0 + (-(dot(&w, &x) + b)).exp());
            gw.iter_mut().zip(&x).for_each(|(g, v)| *g += (p - y) * v / n);
            gb += (p - y) / n;
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= lr * (g + 1e-3 * *wi));
        b -= lr * gb;
    }
    let correct = test
        .iter()
        .filter(|(_, (x, y))| {
            let s = dot(&w, &norm_x(x)) + b;
            (s > 0.0) == (*y > 0.5)
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
