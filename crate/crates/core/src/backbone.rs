//! Tiny temporal encoder with classifier, spatial and per-scale temporal heads.
//!
//! Encoder: per-frame affine map + tanh, then a circular temporal convolution
//! (a `T×T` circulant mixing matrix built from a length-`T` kernel) + tanh.
//! The mixing keeps the temporal token axis, so the same tokens feed both
//! mean-pooled heads and the cross-scale calibration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frame sequence sampled from a video at a fixed stride.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    /// `T × D_in` frames.
    pub frames: Tensor,
    pub stride: usize,
    /// Index of the first frame in the source video.
    pub start: usize,
    pub source_id: usize,
    pub label: Option<usize>,
}

/// Sizes that fully determine a [`ParamSet`] layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_embed: usize,
    pub d_temporal: usize,
    pub clip_len: usize,
    pub num_classes: usize,
    pub num_scales: usize,
}

/// All learnable parameters of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub frame_weight: Tensor,
    pub frame_bias: Tensor,
    pub mix_kernel: Tensor,
    pub mix_bias: Tensor,
    pub class_weight: Tensor,
    pub class_bias: Tensor,
    pub spatial_weight: Tensor,
    pub temporal_weight: Vec<Tensor>,
    pub temporal_bias: Vec<Tensor>,
}

/// Encoder output for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedClip {
    /// `T × D_h` pre-pool features.
    pub tokens: Tensor,
    /// Temporal mean of `tokens`.
    pub pooled: Tensor,
}

impl ParamSet {
    /// Weights uniform in `[-0.1, 0.1]`, biases zero.
    pub fn init<R: Rng>(dims: &Dims, rng: &mut R) -> Self {
        let mut uniform = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-0.1..=0.1)).collect()).expect("init shape")
        };
        let frame_weight = uniform(&[dims.d_in, dims.d_hidden]);
        let mix_kernel = uniform(&[dims.clip_len]);
        let class_weight = uniform(&[dims.d_hidden, dims.num_classes]);
        let spatial_weight = uniform(&[dims.d_hidden, dims.d_embed]);
        let temporal_weight = (0..dims.num_scales).map(|_| uniform(&[dims.d_hidden, dims.d_temporal])).collect();
        Self {
            frame_weight,
            frame_bias: Tensor::zeros(&[dims.d_hidden]),
            mix_kernel,
            mix_bias: Tensor::zeros(&[dims.d_hidden]),
            class_weight,
            class_bias: Tensor::zeros(&[dims.num_classes]),
            spatial_weight,
            temporal_weight,
            temporal_bias: (0..dims.num_scales).map(|_| Tensor::zeros(&[dims.d_temporal])).collect(),
        }
    }

    pub fn zeros(dims: &Dims) -> Self {
        let mut p = Self::init(dims, &mut ChaCha8Rng::seed_from_u64(0));
        p.map_in_place(|_, t| t.data_mut().fill(0.0));
        p
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d_in: self.frame_weight.shape()[0],
            d_hidden: self.frame_weight.shape()[1],
            d_embed: self.spatial_weight.shape()[1],
            d_temporal: self.temporal_weight.first().map_or(0, |t| t.shape()[1]),
            clip_len: self.mix_kernel.numel(),
            num_classes: self.class_weight.shape()[1],
            num_scales: self.temporal_weight.len(),
        }
    }

    /// Named tensors in a fixed order shared by [`ParamVars::all`].
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("frame_weight".to_string(), &self.frame_weight),
            ("frame_bias".to_string(), &self.frame_bias),
            ("mix_kernel".to_string(), &self.mix_kernel),
            ("mix_bias".to_string(), &self.mix_bias),
            ("class_weight".to_string(), &self.class_weight),
            ("class_bias".to_string(), &self.class_bias),
            ("spatial_weight".to_string(), &self.spatial_weight),
        ];
        for (n, (w, b)) in self.temporal_weight.iter().zip(&self.temporal_bias).enumerate() {
            out.push((format!("temporal_weight.{n}"), w));
            out.push((format!("temporal_bias.{n}"), b));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.frame_weight,
            &mut self.frame_bias,
            &mut self.mix_kernel,
            &mut self.mix_bias,
            &mut self.class_weight,
            &mut self.class_bias,
            &mut self.spatial_weight,
        ];
        for (w, b) in self.temporal_weight.iter_mut().zip(self.temporal_bias.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Rebuilds a set with the same layout from tensors in [`ParamSet::named`] order.
    pub fn from_tensors(layout: &ParamSet, tensors: Vec<Tensor>) -> Result<Self> {
        let mut out = layout.clone();
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::ShapeMismatch(format!("{} tensors for {} parameter slots", tensors.len(), slots.len())));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!("parameter {:?} vs {:?}", slot.shape(), t.shape())));
            }
            *slot = t;
        }
        Ok(out)
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn map_in_place(&mut self, mut f: impl FnMut(usize, &mut Tensor)) {
        for (i, t) in self.tensors_mut().into_iter().enumerate() {
            f(i, t);
        }
    }

    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        let a = self.named();
        let b = other.named();
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch(format!("{} vs {} parameter tensors", a.len(), b.len())));
        }
        for ((name, x), (_, y)) in a.iter().zip(&b) {
            if x.shape() != y.shape() {
                return Err(Error::ShapeMismatch(format!("{name}: {:?} vs {:?}", x.shape(), y.shape())));
            }
        }
        Ok(())
    }

    /// Largest absolute elementwise difference to `other`.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.tensors().iter().zip(other.tensors()).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max)
    }

    /// Records every tensor on `tape`, as parameters or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> ParamVars<'t> {
        let leaf = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        ParamVars {
            frame_weight: leaf(&self.frame_weight),
            frame_bias: leaf(&self.frame_bias),
            mix_kernel: leaf(&self.mix_kernel),
            mix_bias: leaf(&self.mix_bias),
            class_weight: leaf(&self.class_weight),
            class_bias: leaf(&self.class_bias),
            spatial_weight: leaf(&self.spatial_weight),
            temporal_weight: self.temporal_weight.iter().map(leaf).collect(),
            temporal_bias: self.temporal_bias.iter().map(leaf).collect(),
        }
    }

    pub fn encode(&self, clip: &Clip) -> Result<EncodedClip> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let enc = vars.encode(tape.constant(clip.frames.clone()))?;
        Ok(EncodedClip { tokens: enc.tokens.value(), pooled: enc.pooled.value() })
    }

    /// Class probabilities for an encoded clip.
    pub fn classify(&self, enc: &EncodedClip) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let logits = vars.logits(tape.constant(enc.pooled.clone()))?;
        Ok(logits.softmax(1.0)?.value().into_data())
    }

    pub fn spatial_embed(&self, enc: &EncodedClip) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        Ok(vars.spatial_embed(tape.constant(enc.pooled.clone()))?.value().into_data())
    }

    /// Temporal head `scale` (0-based) applied to the mean-pooled `tokens`.
    pub fn temporal_embed(&self, scale: usize, tokens: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        Ok(vars.temporal_embed(scale, tape.constant(tokens.clone()))?.value().into_data())
    }

    /// Teacher update `self ← m·self + (1−m)·student`.
    pub fn ema_update(&mut self, student: &ParamSet, m: f64) -> Result<()> {
        self.check_same_layout(student)?;
        let src = student.tensors();
        self.map_in_place(|i, t| {
            for (p, s) in t.data_mut().iter_mut().zip(src[i].data()) {
                *p = m * *p + (1.0 - m) * s;
            }
        });
        Ok(())
    }

    /// Collects gradients for `vars` into a set with this layout; parameters
    /// that received no gradient get zeros.
    pub fn gradients_of(&self, vars: &ParamVars<'_>, grads: &Gradients) -> ParamSet {
        let tensors = vars.all().into_iter().map(|v| grads.wrt_or_zero(v)).collect();
        ParamSet::from_tensors(self, tensors).expect("gradient layout")
    }
}

/// A [`ParamSet`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars<'t> {
    pub frame_weight: Var<'t>,
    pub frame_bias: Var<'t>,
    pub mix_kernel: Var<'t>,
    pub mix_bias: Var<'t>,
    pub class_weight: Var<'t>,
    pub class_bias: Var<'t>,
    pub spatial_weight: Var<'t>,
    pub temporal_weight: Vec<Var<'t>>,
    pub temporal_bias: Vec<Var<'t>>,
}

/// Encoder output on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars<'t> {
    pub tokens: Var<'t>,
    pub pooled: Var<'t>,
}

/// `(T·T) × T` 0/1 matrix mapping a kernel `k` to the circulant
/// `M[t][s] = k[(s - t) mod T]`.
fn circulant_selector(t_len: usize) -> Tensor {
    let mut data = vec![0.0; t_len * t_len * t_len];
    for t in 0..t_len {
        for s in 0..t_len {
            let row = t * t_len + s;
            data[row * t_len + (s + t_len - t) % t_len] = 1.0;
        }
    }
    Tensor::matrix(t_len * t_len, t_len, data).expect("selector shape")
}

impl<'t> ParamVars<'t> {
    /// Inverse of [`ParamVars::all`].
    pub fn from_vars(vars: &[Var<'t>]) -> Result<Self> {
        if vars.len() < 7 || !(vars.len() - 7).is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!("{} variables do not form a parameter set", vars.len())));
        }
        let (fixed, heads) = vars.split_at(7);
        Ok(Self {
            frame_weight: fixed[0],
            frame_bias: fixed[1],
            mix_kernel: fixed[2],
            mix_bias: fixed[3],
            class_weight: fixed[4],
            class_bias: fixed[5],
            spatial_weight: fixed[6],
            temporal_weight: heads.iter().step_by(2).copied().collect(),
            temporal_bias: heads.iter().skip(1).step_by(2).copied().collect(),
        })
    }

    pub fn all(&self) -> Vec<Var<'t>> {
        let mut out = vec![
            self.frame_weight,
            self.frame_bias,
            self.mix_kernel,
            self.mix_bias,
            self.class_weight,
            self.class_bias,
            self.spatial_weight,
        ];
        for (w, b) in self.temporal_weight.iter().zip(&self.temporal_bias) {
            out.push(*w);
            out.push(*b);
        }
        out
    }

    pub fn encode(&self, frames: Var<'t>) -> Result<EncodedVars<'t>> {
        let shape = frames.shape();
        let t_len = self.mix_kernel.shape()[0];
        let d_in = self.frame_weight.shape()[0];
        if shape != [t_len, d_in] {
            return Err(Error::ShapeMismatch(format!("clip of shape {shape:?}, encoder expects [{t_len}, {d_in}]")));
        }
        let tape = frames.tape();
        let hidden = frames.matmul(self.frame_weight)?.add_row(self.frame_bias)?.tanh();
        let mixing = tape.constant(circulant_selector(t_len)).matmul(self.mix_kernel)?.reshape(vec![t_len, t_len])?;
        let tokens = mixing.matmul(hidden)?.add_row(self.mix_bias)?.relu();
        let pooled = tokens.mean_rows()?;
        Ok(EncodedVars { tokens, pooled })
    }

    pub fn logits(&self, pooled: Var<'t>) -> Result<Var<'t>> {
        pooled.matmul(self.class_weight)?.add(self.class_bias)
    }

    /// No bias: a shared offset before normalization lets every embedding
    /// drift to one direction, which empties the contrastive signal.
    pub fn spatial_embed(&self, pooled: Var<'t>) -> Result<Var<'t>> {
        pooled.matmul(self.spatial_weight)?.l2_normalize()
    }

    /// Temporal head `scale` (0-based) on the mean-pooled tokens.
    pub fn temporal_embed(&self, scale: usize, tokens: Var<'t>) -> Result<Var<'t>> {
        let count = self.temporal_weight.len();
        if scale >= count {
            return Err(Error::ScaleOutOfRange { index: scale + 1, count });
        }
        tokens.mean_rows()?.matmul(self.temporal_weight[scale])?.add(self.temporal_bias[scale])
    }
}
