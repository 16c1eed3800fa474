//! Semi-supervised training loop.
//!
//! Each step first draws every random view and computes all teacher-side
//! quantities (pseudo-labels, contrastive selections, temporal targets) into a
//! [`PreparedBatch`]. The student objective is then a pure function of the
//! student parameters over that batch, which is what gets differentiated.

pub mod config;
pub mod metrics;
pub mod optim;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acl::{acl_loss, select_for_anchor, AclSelection};
use crate::autodiff::{sum_scalars, Tape, Var};
use crate::backbone::{Clip, Dims, ParamSet, ParamVars};
use crate::bank::{MemoryBank, PrototypeTable};
use crate::error::{Error, Result};
use crate::mtl::{mtl_loss_on_tape, sample_multiscale, scale_targets, ScaleTarget};
use crate::synth::{
    center_clip, clip_span, derive_seed, extract_clip, strong_augment, weak_augment, DataConfig, Dataset, SynthVideo,
};
use crate::tensor::argmax;

pub use config::{Ablation, ModelConfig, TrainConfig};
pub use metrics::{AnchorRecord, EpochReport, Observer, ScaleRecord, StepReport};
pub use optim::{lr_schedule, sgd_step};

const TAG_INIT: u64 = 0x1417;
const TAG_UNLABELED_ORDER: u64 = 0x0DE5;
const TAG_LABELED_ORDER: u64 = 0x0DE1;
const TAG_LABELED_VIEW: u64 = 0x1AB;
const TAG_UNLABELED_VIEW: u64 = 0x2AB;

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub velocity: ParamSet,
    pub prototypes: PrototypeTable,
    pub bank: MemoryBank,
    /// Global step counter.
    pub step: usize,
    /// Next epoch to run.
    pub epoch: usize,
    labeled_cycle: usize,
    labeled_cursor: usize,
}

impl TrainState {
    /// Student drawn from the run seed; the teacher starts as an exact copy.
    pub fn init(dims: &Dims, config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_INIT]));
        let student = ParamSet::init(dims, &mut rng);
        Self {
            teacher: student.clone(),
            velocity: ParamSet::zeros(dims),
            student,
            prototypes: PrototypeTable::new(dims.num_classes, dims.d_embed),
            bank: MemoryBank::new(config.bank_capacity),
            step: 0,
            epoch: 0,
            labeled_cycle: 0,
            labeled_cursor: 0,
        }
    }
}

/// Network sizes for a model config on data of the given shape.
pub fn dims_for(model: &ModelConfig, data: &DataConfig, train: &TrainConfig) -> Dims {
    Dims {
        d_in: data.frame_dim,
        d_hidden: model.d_hidden,
        d_embed: model.d_embed,
        d_temporal: model.d_temporal,
        clip_len: train.clip_len,
        num_classes: data.num_classes,
        num_scales: train.num_scales,
    }
}

/// Loss weights after applying the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mu1: f64,
    pub mu2: f64,
    /// Whether `L_u` is weighted by anchor reliability.
    pub gamma_weighting: bool,
}

impl LossWeights {
    pub fn new(config: &TrainConfig, ablation: Ablation) -> Self {
        Self {
            mu1: if ablation.use_mtl { config.mu1 } else { 0.0 },
            mu2: if ablation.use_acl { config.mu2 } else { 0.0 },
            gamma_weighting: ablation.use_acl,
        }
    }
}

/// Pseudo-label from teacher probabilities summed over several views.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedLabel {
    pub class: usize,
    /// Largest entry of the averaged distribution.
    pub max_prob: f64,
    pub probs: Vec<f64>,
}

/// Sums teacher class probabilities over `clips`; ties in the argmax go to
/// the lowest class index.
pub fn fused_pseudo_label(teacher: &ParamSet, clips: &[Clip]) -> Result<FusedLabel> {
    if clips.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sum = vec![0.0; teacher.dims().num_classes];
    for clip in clips {
        let probs = teacher.classify(&teacher.encode(clip)?)?;
        for (s, p) in sum.iter_mut().zip(&probs) {
            *s += p;
        }
    }
    let n = clips.len() as f64;
    let probs: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let class = argmax(&probs);
    Ok(FusedLabel { class, max_prob: probs[class], probs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledView {
    pub clip: Clip,
    pub label: usize,
}

/// One unlabeled sample with all teacher-side quantities fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledView {
    pub source_id: usize,
    /// Ground truth, used only for diagnostics.
    pub true_label: usize,
    pub strong_short: Clip,
    pub pseudo: FusedLabel,
    pub gate_open: bool,
    /// Anchor reliability from the contrastive selection.
    pub gamma: f64,
    /// Weight of this sample in `L_u`.
    pub weight: f64,
    pub selection: AclSelection,
    pub targets: Vec<ScaleTarget>,
    /// Teacher spatial embedding of the weak short clip.
    pub teacher_embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreparedBatch {
    pub labeled: Vec<LabeledView>,
    pub unlabeled: Vec<UnlabeledView>,
}

/// Mean cross-entropy of `logits` against hard `labels`.
pub fn supervised_loss<'t>(logits: &[Var<'t>], labels: &[usize]) -> Result<Var<'t>> {
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} logits vs {} labels", logits.len(), labels.len())));
    }
    let terms = logits.iter().zip(labels).map(|(z, &y)| z.cross_entropy_with_logits(y)).collect::<Result<Vec<_>>>()?;
    let total = sum_scalars(&terms)?.ok_or(Error::EmptyBatch)?;
    Ok(total.scale(1.0 / terms.len() as f64))
}

/// `(1/B) Σ_i w_i · CE(logits_i, ŷ_i)`; samples with zero weight contribute
/// nothing.
pub fn unsupervised_loss<'t>(logits: &[Var<'t>], pseudo_labels: &[usize], weights: &[f64]) -> Result<Var<'t>> {
    if logits.len() != pseudo_labels.len() || logits.len() != weights.len() {
        return Err(Error::ShapeMismatch("unsupervised loss inputs differ in length".into()));
    }
    let first = logits.first().ok_or(Error::EmptyBatch)?;
    let terms = logits
        .iter()
        .zip(pseudo_labels)
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|((z, &y), &w)| Ok(z.cross_entropy_with_logits(y)?.scale(w)))
        .collect::<Result<Vec<_>>>()?;
    let b = logits.len() as f64;
    Ok(match sum_scalars(&terms)? {
        Some(s) => s.scale(1.0 / b),
        None => first.tape().scalar(0.0),
    })
}

/// Loss terms of the student objective, recorded on a tape.
pub struct Objective<'t> {
    pub l_l: Var<'t>,
    pub l_u: Var<'t>,
    pub l_acl: Var<'t>,
    pub l_mtl: Var<'t>,
    pub total: Var<'t>,
    /// Contrastive loss of each unlabeled sample.
    pub per_anchor: Vec<Var<'t>>,
    /// Alignment loss of each scale, averaged over the unlabeled samples.
    pub per_scale: Vec<Var<'t>>,
}

/// `L = L_l + L_u + μ1·L_MTL + μ2·L_ACL` over a prepared batch.
pub fn objective<'t>(
    vars: &ParamVars<'t>,
    batch: &PreparedBatch,
    config: &TrainConfig,
    weights: LossWeights,
) -> Result<Objective<'t>> {
    let tape = vars.frame_weight.tape();
    let zero = || tape.scalar(0.0);

    let l_l = if batch.labeled.is_empty() {
        zero()
    } else {
        let logits = batch
            .labeled
            .iter()
            .map(|v| {
                let enc = vars.encode(tape.constant(v.clip.frames.clone()))?;
                vars.logits(enc.pooled)
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = batch.labeled.iter().map(|v| v.label).collect();
        supervised_loss(&logits, &labels)?
    };

    if batch.unlabeled.is_empty() {
        let total = l_l.add(zero())?;
        return Ok(Objective {
            l_l,
            l_u: zero(),
            l_acl: zero(),
            l_mtl: zero(),
            total,
            per_anchor: Vec::new(),
            per_scale: Vec::new(),
        });
    }

    let b = batch.unlabeled.len() as f64;
    let mut logits = Vec::new();
    let mut per_anchor = Vec::new();
    let mut per_sample_scales: Vec<Vec<Var<'t>>> = Vec::new();
    let mut mtl_terms = Vec::new();
    for u in &batch.unlabeled {
        let enc = vars.encode(tape.constant(u.strong_short.frames.clone()))?;
        logits.push(vars.logits(enc.pooled)?);
        let anchor = vars.spatial_embed(enc.pooled)?;
        per_anchor.push(acl_loss(anchor, &u.selection, config.tau)?);
        let (m, scales) = mtl_loss_on_tape(vars, enc.tokens, &u.targets, config.tau_s, config.tau_t)?;
        mtl_terms.push(m);
        per_sample_scales.push(scales);
    }
    let labels: Vec<usize> = batch.unlabeled.iter().map(|u| u.pseudo.class).collect();
    let w: Vec<f64> = batch.unlabeled.iter().map(|u| u.weight).collect();
    let l_u = unsupervised_loss(&logits, &labels, &w)?;
    let l_acl = sum_scalars(&per_anchor)?.expect("non-empty").scale(1.0 / b);
    let l_mtl = sum_scalars(&mtl_terms)?.expect("non-empty").scale(1.0 / b);
    let num_scales = per_sample_scales[0].len();
    let per_scale = (0..num_scales)
        .map(|n| {
            let col: Vec<Var<'t>> = per_sample_scales.iter().map(|s| s[n]).collect();
            Ok(sum_scalars(&col)?.expect("non-empty").scale(1.0 / b))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = l_l.add(l_u)?;
    if weights.mu1 != 0.0 {
        total = total.add(l_mtl.scale(weights.mu1))?;
    }
    if weights.mu2 != 0.0 {
        total = total.add(l_acl.scale(weights.mu2))?;
    }
    Ok(Objective { l_l, l_u, l_acl, l_mtl, total, per_anchor, per_scale })
}

/// Top-1 and top-5 accuracy of a model on center clips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
}

/// Rank of `label` in `probs`, counting ties in favor of lower indices.
fn rank_of(probs: &[f64], label: usize) -> usize {
    let p = probs[label];
    probs.iter().enumerate().filter(|&(j, &q)| q > p || (q == p && j < label)).count()
}

pub fn evaluate(params: &ParamSet, videos: &[SynthVideo], stride: usize, clip_len: usize) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for v in videos {
        let clip = center_clip(v, stride, clip_len)?;
        let probs = params.classify(&params.encode(&clip)?)?;
        let r = rank_of(&probs, v.class_id);
        top1 += (r < 1) as usize;
        top5 += (r < 5) as usize;
    }
    let n = videos.len() as f64;
    Ok(EvalReport { top1: top1 as f64 / n, top5: top5 as f64 / n })
}

fn view_rng(seed: u64, tag: u64, epoch: usize, step: usize, slot: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag, epoch as u64, step as u64, slot as u64]))
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub ablation: Ablation,
    pub dims: Dims,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &ModelConfig, ablation: Ablation, data: &DataConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        data.validate()?;
        let dims = dims_for(model, data, &config);
        let state = TrainState::init(&dims, &config);
        Ok(Self { config, ablation, dims, state })
    }

    /// Replaces the state, e.g. from a checkpoint.
    pub fn restore(&mut self, state: TrainState) -> Result<()> {
        let expected = ParamSet::zeros(&self.dims);
        for p in [&state.student, &state.teacher, &state.velocity] {
            expected.check_same_layout(p)?;
        }
        self.state = state;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights::new(&self.config, self.ablation)
    }

    /// Weak-augmented short clips of the labeled videos.
    pub fn labeled_views(&self, videos: &[&SynthVideo], epoch: usize, step: usize) -> Result<Vec<LabeledView>> {
        let stride = self.config.strides[0];
        videos
            .iter()
            .enumerate()
            .map(|(slot, v)| {
                let mut rng = view_rng(self.config.seed, TAG_LABELED_VIEW, epoch, step, slot);
                let len = v.frames.rows();
                let span = clip_span(self.config.clip_len, stride);
                if span > len {
                    return Err(Error::VideoTooShort { len, needed: span, stride });
                }
                let start = rng.random_range(0..=len - span);
                let clip = extract_clip(v, start, stride, self.config.clip_len, true)?;
                let clip = weak_augment(v, &clip, &mut rng)?;
                Ok(LabeledView { clip, label: v.class_id })
            })
            .collect()
    }

    /// Blends the student's spatial embedding of each labeled view into its
    /// class prototype.
    pub fn update_prototypes(&mut self, views: &[LabeledView]) -> Result<()> {
        for v in views {
            let emb = self.state.student.spatial_embed(&self.state.student.encode(&v.clip)?)?;
            self.state.prototypes.update(v.label, &emb, self.config.beta)?;
        }
        Ok(())
    }

    /// Teacher-side preparation of the unlabeled views.
    pub fn unlabeled_views(&self, videos: &[&SynthVideo], epoch: usize, step: usize) -> Result<Vec<UnlabeledView>> {
        let weights = self.weights();
        let student = &self.state.student;
        let teacher = &self.state.teacher;
        videos
            .iter()
            .enumerate()
            .map(|(slot, v)| {
                let mut rng = view_rng(self.config.seed, TAG_UNLABELED_VIEW, epoch, step, slot);
                let sample = sample_multiscale(v, self.config.clip_len, &self.config.strides, false, &mut rng)?;
                let weak_short = weak_augment(v, &sample.short_clip, &mut rng)?;
                let weak_long =
                    sample.long_clips.iter().map(|c| weak_augment(v, c, &mut rng)).collect::<Result<Vec<_>>>()?;
                let strong_short = strong_augment(v, &sample.short_clip, &mut rng)?;

                let mut fused_views = vec![weak_short.clone()];
                fused_views.extend(weak_long.iter().cloned());
                let pseudo = fused_pseudo_label(teacher, &fused_views)?;
                let gate_open = pseudo.max_prob > self.config.delta;

                let teacher_embedding = teacher.spatial_embed(&teacher.encode(&weak_short)?)?;
                let selection = select_for_anchor(
                    &self.state.bank,
                    &self.state.prototypes,
                    pseudo.class,
                    &teacher_embedding,
                    self.config.epsilon,
                )?;
                let gamma = selection.anchor_reliability;
                let weight = if !gate_open {
                    0.0
                } else if weights.gamma_weighting {
                    gamma
                } else {
                    1.0
                };

                let query = student.encode(&weak_short)?;
                let targets = scale_targets(teacher, &query.tokens, &weak_long)?;
                Ok(UnlabeledView {
                    source_id: v.source_id,
                    true_label: v.class_id,
                    strong_short,
                    pseudo,
                    gate_open,
                    gamma,
                    weight,
                    selection,
                    targets,
                    teacher_embedding,
                })
            })
            .collect()
    }

    /// Prototype update followed by all random draws and teacher-side values
    /// for one step.
    pub fn prepare_batch(
        &mut self,
        labeled: &[&SynthVideo],
        unlabeled: &[&SynthVideo],
        epoch: usize,
        step_in_epoch: usize,
    ) -> Result<PreparedBatch> {
        let labeled_views = self.labeled_views(labeled, epoch, step_in_epoch)?;
        self.update_prototypes(&labeled_views)?;
        let unlabeled_views = self.unlabeled_views(unlabeled, epoch, step_in_epoch)?;
        Ok(PreparedBatch { labeled: labeled_views, unlabeled: unlabeled_views })
    }

    /// One optimization step on the given batches.
    pub fn train_step(
        &mut self,
        labeled: &[&SynthVideo],
        unlabeled: &[&SynthVideo],
        epoch: usize,
        step_in_epoch: usize,
    ) -> Result<StepReport> {
        let lr = lr_schedule(epoch, &self.config);
        let batch = self.prepare_batch(labeled, unlabeled, epoch, step_in_epoch)?;
        let tape = Tape::new();
        let vars = self.state.student.bind(&tape, true);
        let obj = objective(&vars, &batch, &self.config, self.weights())?;
        let grads = obj.total.backward()?;
        let grads = self.state.student.gradients_of(&vars, &grads);
        sgd_step(
            &mut self.state.student,
            &grads,
            &mut self.state.velocity,
            lr,
            self.config.momentum,
            self.config.weight_decay,
        )?;
        self.state.teacher.ema_update(&self.state.student, self.config.ema_momentum)?;
        for u in &batch.unlabeled {
            self.state.bank.push(u.teacher_embedding.clone(), u.pseudo.class)?;
        }

        let step = self.state.step;
        self.state.step += 1;
        Ok(StepReport::new(step, epoch, lr, &obj, &batch))
    }

    fn next_labeled(&mut self, n_labeled: usize, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        if n_labeled == 0 {
            return out;
        }
        while out.len() < count {
            let mut order: Vec<usize> = (0..n_labeled).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.config.seed,
                &[TAG_LABELED_ORDER, self.state.labeled_cycle as u64],
            ));
            order.shuffle(&mut rng);
            out.push(order[self.state.labeled_cursor]);
            self.state.labeled_cursor += 1;
            if self.state.labeled_cursor == n_labeled {
                self.state.labeled_cursor = 0;
                self.state.labeled_cycle += 1;
            }
        }
        out
    }

    /// Steps per epoch: one pass over the unlabeled set, or over the labeled
    /// set when there is no unlabeled data.
    pub fn steps_per_epoch(&self, dataset: &Dataset) -> usize {
        let n_u = dataset.unlabeled.len();
        if n_u > 0 {
            n_u.div_ceil(self.config.batch_unlabeled)
        } else {
            dataset.labeled.len().div_ceil(self.config.batch_labeled)
        }
    }

    /// Runs one epoch and evaluates the teacher and student afterwards.
    pub fn run_epoch(&mut self, dataset: &Dataset, observer: &mut dyn Observer) -> Result<EpochReport> {
        if dataset.labeled.is_empty() && dataset.unlabeled.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let epoch = self.state.epoch;
        let mut order: Vec<usize> = (0..dataset.unlabeled.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[TAG_UNLABELED_ORDER, epoch as u64]));
        order.shuffle(&mut rng);

        let mut acc = metrics::EpochAccumulator::default();
        for step in 0..self.steps_per_epoch(dataset) {
            let lab_idx = self.next_labeled(dataset.labeled.len(), self.config.batch_labeled);
            let labeled: Vec<&SynthVideo> = lab_idx.iter().map(|&i| &dataset.labeled[i]).collect();
            let lo = (step * self.config.batch_unlabeled).min(order.len());
            let hi = ((step + 1) * self.config.batch_unlabeled).min(order.len());
            let unlabeled: Vec<&SynthVideo> = order[lo..hi].iter().map(|&i| &dataset.unlabeled[i]).collect();
            let report = self.train_step(&labeled, &unlabeled, epoch, step)?;
            acc.add(&report);
            observer.on_step(&report)?;
        }

        let stride = self.config.strides[0];
        let teacher = evaluate(&self.state.teacher, &dataset.eval, stride, self.config.clip_len)?;
        let student = evaluate(&self.state.student, &dataset.eval, stride, self.config.clip_len)?;
        let report = acc.finish(epoch, lr_schedule(epoch, &self.config), teacher, student);
        self.state.epoch += 1;
        observer.on_epoch(&report, &self.state)?;
        Ok(report)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, dataset: &Dataset, observer: &mut dyn Observer) -> Result<Vec<EpochReport>> {
        let mut out = Vec::new();
        while self.state.epoch < self.config.epochs {
            out.push(self.run_epoch(dataset, observer)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_dataset;

    fn small_data() -> DataConfig {
        DataConfig { num_classes: 4, per_class: 6, labeled_fraction: 0.34, eval_per_class: 2, ..DataConfig::default() }
    }

    fn small_train() -> TrainConfig {
        TrainConfig { epochs: 2, batch_unlabeled: 2, ..TrainConfig::default() }
    }

    #[test]
    fn teacher_starts_as_student() {
        let t = Trainer::new(small_train(), &ModelConfig::default(), Ablation::default(), &small_data()).unwrap();
        assert_eq!(t.state.student, t.state.teacher);
        assert!(t.state.bank.is_empty());
    }

    #[test]
    fn fused_label_averages_views() {
        let data = make_dataset(&small_data(), 3).unwrap();
        let t = Trainer::new(small_train(), &ModelConfig::default(), Ablation::default(), &small_data()).unwrap();
        let v = &data.unlabeled[0];
        let a = center_clip(v, 8, 8).unwrap();
        let b = center_clip(v, 16, 8).unwrap();
        let f = fused_pseudo_label(&t.state.teacher, &[a.clone(), b.clone()]).unwrap();
        let pa = t.state.teacher.classify(&t.state.teacher.encode(&a).unwrap()).unwrap();
        let pb = t.state.teacher.classify(&t.state.teacher.encode(&b).unwrap()).unwrap();
        for j in 0..pa.len() {
            assert!((f.probs[j] - (pa[j] + pb[j]) / 2.0).abs() < 1e-15);
        }
        assert!((f.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(fused_pseudo_label(&t.state.teacher, &[]).is_err());
    }

    #[test]
    fn rank_ties_prefer_low_index() {
        assert_eq!(rank_of(&[0.25; 4], 0), 0);
        assert_eq!(rank_of(&[0.25; 4], 3), 3);
        assert_eq!(rank_of(&[0.1, 0.6, 0.3], 2), 1);
    }

    #[test]
    fn evaluate_empty_errors() {
        let p = ParamSet::zeros(&dims_for(&ModelConfig::default(), &small_data(), &small_train()));
        assert!(matches!(evaluate(&p, &[], 8, 8), Err(Error::EmptyDataset)));
    }

    #[test]
    fn unsupervised_loss_with_closed_gate_is_zero() {
        let tape = Tape::new();
        let z = tape.param(crate::tensor::Tensor::vector(vec![0.1, 0.5, -0.2]));
        let l = unsupervised_loss(&[z, z], &[0, 1], &[0.0, 0.0]).unwrap();
        assert_eq!(l.item(), 0.0);
        let l = unsupervised_loss(&[z, z], &[1, 1], &[1.0, 0.0]).unwrap();
        assert!((l.item() - z.cross_entropy_with_logits(1).unwrap().item() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn step_updates_bank_and_teacher() {
        let data = make_dataset(&small_data(), 1).unwrap();
        let mut t = Trainer::new(small_train(), &ModelConfig::default(), Ablation::default(), &small_data()).unwrap();
        let before = t.state.clone();
        let lab = [&data.labeled[0]];
        let unl = [&data.unlabeled[0], &data.unlabeled[1]];
        let r = t.train_step(&lab, &unl, 0, 0).unwrap();
        assert_eq!(t.state.bank.len(), 2);
        assert_eq!(t.state.step, 1);
        assert!(t.state.student.max_abs_diff(&before.student) > 0.0);
        let mut expect = before.teacher.clone();
        expect.ema_update(&t.state.student, 0.99).unwrap();
        assert!(expect.max_abs_diff(&t.state.teacher) < 1e-12);
        assert!(r.total.is_finite());
        assert!(t.state.prototypes.is_initialized(data.labeled[0].class_id));
    }

    #[test]
    fn supervised_only_reduces_to_labeled_loss() {
        let data = make_dataset(&small_data(), 2).unwrap();
        let cfg = TrainConfig { mu1: 0.0, mu2: 0.0, delta: 1.0, ..small_train() };
        let mut t = Trainer::new(cfg, &ModelConfig::default(), Ablation::default(), &small_data()).unwrap();
        let r = t.train_step(&[&data.labeled[0]], &[&data.unlabeled[0]], 0, 0).unwrap();
        assert_eq!(r.total, r.l_l);
        assert_eq!(r.acceptance_rate, 0.0);
    }

    #[test]
    fn labeled_cycle_covers_all() {
        let mut t = Trainer::new(small_train(), &ModelConfig::default(), Ablation::default(), &small_data()).unwrap();
        let mut seen = t.next_labeled(5, 5);
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert!(t.next_labeled(0, 3).is_empty());
    }
}
