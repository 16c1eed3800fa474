//! Multi-scale temporal learning.
//!
//! A short clip and `N` long clips are drawn from one video. Teacher tokens
//! of each weak long clip are calibrated against the student's weak short-clip
//! tokens with per-frame cosine weights, pushed through the teacher's temporal
//! head for that scale and sharpened at `tau_t`. The student's strong
//! short-clip tokens go through its own head for the same scale at `tau_s`,
//! and the two distributions are aligned with a cross-entropy.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{Clip, ParamSet, ParamVars};
use crate::error::{Error, Result};
use crate::synth::{clip_span, extract_clip, SynthVideo};
use crate::tensor::{softmax, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleSample {
    pub short_clip: Clip,
    pub long_clips: Vec<Clip>,
}

impl MultiScaleSample {
    pub fn clips(&self) -> impl Iterator<Item = &Clip> {
        std::iter::once(&self.short_clip).chain(&self.long_clips)
    }
}

/// Draws one clip per stride, each from an independent random start.
/// `strides[0]` is the short clip; the rest are long clips.
pub fn sample_multiscale<R: Rng>(
    video: &SynthVideo,
    clip_len: usize,
    strides: &[usize],
    with_label: bool,
    rng: &mut R,
) -> Result<MultiScaleSample> {
    if strides.len() < 2 || strides.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(format!(
            "strides must be strictly increasing with at least two entries, got {strides:?}"
        )));
    }
    let len = video.frames.rows();
    let max_stride = *strides.last().expect("non-empty");
    let needed = clip_span(clip_len, max_stride);
    if len < needed {
        return Err(Error::VideoTooShort { len, needed, stride: max_stride });
    }
    let mut clips = Vec::with_capacity(strides.len());
    for &stride in strides {
        let max_start = len - clip_span(clip_len, stride);
        let start = rng.random_range(0..=max_start);
        clips.push(extract_clip(video, start, stride, clip_len, with_label)?);
    }
    let short_clip = clips.remove(0);
    Ok(MultiScaleSample { short_clip, long_clips: clips })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// Per-frame weights `A[t] = cos(query[t], key[t])`.
    pub attention: Vec<f64>,
    /// `A[t] · key[t]` for every frame.
    pub calibrated_tokens: Tensor,
}

/// Per-frame calibration on a tape.
pub fn calibrate_vars<'t>(query: Var<'t>, key: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let attention = query.row_cosine(key)?;
    let calibrated = key.scale_rows(attention)?;
    Ok((attention, calibrated))
}

pub fn calibrate(query_tokens: &Tensor, key_tokens: &Tensor) -> Result<CalibrationResult> {
    let tape = Tape::new();
    let (a, c) = calibrate_vars(tape.constant(query_tokens.clone()), tape.constant(key_tokens.clone()))?;
    Ok(CalibrationResult { attention: a.value().into_data(), calibrated_tokens: c.value() })
}

/// `H(P^k, P^q) = -Σ P^k log P^q` with `P^q = softmax(student / tau_s)` and
/// the teacher distribution `P^k = softmax(teacher / tau_t)` held constant.
pub fn alignment_loss<'t>(student_logits: Var<'t>, teacher_logits: &[f64], tau_s: f64, tau_t: f64) -> Result<Var<'t>> {
    if student_logits.shape() != [teacher_logits.len()] {
        return Err(Error::ShapeMismatch(format!(
            "student logits {:?} vs teacher logits [{}]",
            student_logits.shape(),
            teacher_logits.len()
        )));
    }
    let target = student_logits.tape().constant(Tensor::vector(softmax(teacher_logits, tau_t)));
    Ok(student_logits.log_softmax(tau_s)?.dot(target)?.neg())
}

/// Teacher-side output for one long-clip scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTarget {
    pub logits: Vec<f64>,
    pub attention: Vec<f64>,
}

impl ScaleTarget {
    pub fn mean_attention(&self) -> f64 {
        self.attention.iter().sum::<f64>() / self.attention.len() as f64
    }
}

/// Calibrates each teacher-encoded long clip against `query_tokens` and
/// applies the teacher temporal head of the matching scale.
pub fn scale_targets(teacher: &ParamSet, query_tokens: &Tensor, weak_long: &[Clip]) -> Result<Vec<ScaleTarget>> {
    weak_long
        .iter()
        .enumerate()
        .map(|(n, clip)| {
            let key = teacher.encode(clip)?;
            let cal = calibrate(query_tokens, &key.tokens)?;
            Ok(ScaleTarget { logits: teacher.temporal_embed(n, &cal.calibrated_tokens)?, attention: cal.attention })
        })
        .collect()
}

/// MTL loss and its per-scale terms for fixed teacher targets.
pub fn mtl_loss_on_tape<'t>(
    student: &ParamVars<'t>,
    strong_short_tokens: Var<'t>,
    targets: &[ScaleTarget],
    tau_s: f64,
    tau_t: f64,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    if targets.is_empty() {
        return Err(Error::InvalidConfig("MTL needs at least one long-term scale".into()));
    }
    let per_scale = targets
        .iter()
        .enumerate()
        .map(|(n, t)| {
            let z_q = student.temporal_embed(n, strong_short_tokens)?;
            alignment_loss(z_q, &t.logits, tau_s, tau_t)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = crate::autodiff::sum_scalars(&per_scale)?.expect("non-empty").scale(1.0 / per_scale.len() as f64);
    Ok((total, per_scale))
}

/// Augmented views of a multi-scale sample used by the MTL loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MtlViews {
    pub weak_short: Clip,
    pub strong_short: Clip,
    pub weak_long: Vec<Clip>,
}

/// Value of the MTL loss for one sample.
pub fn mtl_loss(student: &ParamSet, teacher: &ParamSet, views: &MtlViews, tau_s: f64, tau_t: f64) -> Result<f64> {
    let query = student.encode(&views.weak_short)?;
    let targets = scale_targets(teacher, &query.tokens, &views.weak_long)?;
    let tape = Tape::new();
    let vars = student.bind(&tape, true);
    let tokens = vars.encode(tape.constant(views.strong_short.frames.clone()))?.tokens;
    Ok(mtl_loss_on_tape(&vars, tokens, &targets, tau_s, tau_t)?.0.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_dataset, DataConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn video(len: usize) -> SynthVideo {
        let cfg = DataConfig { per_class: 1, eval_per_class: 0, video_len: len, ..DataConfig::default() };
        make_dataset(&cfg, 1).unwrap().labeled.remove(0)
    }

    #[test]
    fn minimal_video_forces_zero_offset() {
        let v = video(7 * 32 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let s = sample_multiscale(&v, 8, &[8, 16, 32], false, &mut rng).unwrap();
            assert_eq!(s.long_clips[1].start, 0);
        }
        let short = video(7 * 32);
        assert!(matches!(
            sample_multiscale(&short, 8, &[8, 16, 32], false, &mut rng),
            Err(Error::VideoTooShort { .. })
        ));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let v = video(300);
        let a = sample_multiscale(&v, 8, &[8, 16, 32], false, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_multiscale(&v, 8, &[8, 16, 32], false, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.clips().all(|c| c.source_id == v.source_id));
        assert_eq!(a.long_clips.iter().map(|c| c.stride).collect::<Vec<_>>(), vec![16, 32]);
    }

    #[test]
    fn rejects_unordered_strides() {
        let v = video(300);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_multiscale(&v, 8, &[16, 8], false, &mut rng).is_err());
    }

    #[test]
    fn calibrate_identity() {
        let q = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let r = calibrate(&q, &q).unwrap();
        assert!(r.attention.iter().all(|a| (a - 1.0).abs() < 1e-12));
        assert!(r.calibrated_tokens.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn calibrate_orthogonal_rows() {
        let q = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let k = Tensor::matrix(2, 2, vec![0.0, 3.0, -1.0, 0.0]).unwrap();
        let r = calibrate(&q, &k).unwrap();
        assert!(r.calibrated_tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn calibrate_half_angle() {
        let s = 0.5f64.sqrt();
        let q = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let k = Tensor::matrix(1, 2, vec![s, s]).unwrap();
        let r = calibrate(&q, &k).unwrap();
        assert!((r.attention[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((r.calibrated_tokens.data()[0] - r.attention[0] * s).abs() < 1e-15);
    }

    #[test]
    fn alignment_of_uniform_teacher() {
        let tape = Tape::new();
        let z = tape.param(Tensor::vector(vec![0.3; 4]));
        let l = alignment_loss(z, &[1.0; 4], 0.1, 0.04).unwrap().item();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn alignment_matched_equals_entropy() {
        let tape = Tape::new();
        let logits = vec![0.2, -0.4, 0.9, 0.1];
        let z = tape.param(Tensor::vector(logits.clone()));
        let l = alignment_loss(z, &logits, 0.5, 0.5).unwrap();
        let h = crate::tensor::entropy(&softmax(&logits, 0.5));
        assert!((l.item() - h).abs() < 1e-12);
        // Matched logits are a stationary point.
        let g = l.backward().unwrap();
        assert!(g.wrt(z).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }
}
