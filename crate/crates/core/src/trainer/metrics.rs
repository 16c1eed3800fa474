use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::{EvalReport, Objective, PreparedBatch, TrainState};

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorRecord {
    pub source_id: usize,
    pub pseudo_label: usize,
    pub true_label: usize,
    pub gate_open: bool,
    pub gamma: f64,
    pub used_fallback: bool,
    pub num_positives: usize,
    pub num_negatives: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRecord {
    pub scale: usize,
    pub loss: f64,
    pub mean_attention: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_l: f64,
    pub l_u: f64,
    pub l_acl: f64,
    pub l_mtl: f64,
    pub total: f64,
    /// Fraction of unlabeled samples whose fused confidence clears the gate.
    pub acceptance_rate: f64,
    pub mean_gamma: f64,
    pub accepted: usize,
    pub accepted_correct: usize,
    /// Unlabeled samples whose fused pseudo-label is right, gate or not.
    pub fused_correct: usize,
    pub anchors: Vec<AnchorRecord>,
    pub scales: Vec<ScaleRecord>,
}

impl StepReport {
    pub(super) fn new(step: usize, epoch: usize, lr: f64, obj: &Objective<'_>, batch: &PreparedBatch) -> Self {
        let u = &batch.unlabeled;
        let anchors: Vec<AnchorRecord> = u
            .iter()
            .zip(&obj.per_anchor)
            .map(|(v, l)| AnchorRecord {
                source_id: v.source_id,
                pseudo_label: v.pseudo.class,
                true_label: v.true_label,
                gate_open: v.gate_open,
                gamma: v.gamma,
                used_fallback: v.selection.used_fallback,
                num_positives: v.selection.positives.len(),
                num_negatives: v.selection.negatives.len(),
                loss: l.item(),
            })
            .collect();
        let scales = obj
            .per_scale
            .iter()
            .enumerate()
            .map(|(n, l)| ScaleRecord {
                scale: n + 1,
                loss: l.item(),
                mean_attention: u.iter().map(|v| v.targets[n].mean_attention()).sum::<f64>() / u.len() as f64,
            })
            .collect();
        let accepted = u.iter().filter(|v| v.gate_open).count();
        let accepted_correct = u.iter().filter(|v| v.gate_open && v.pseudo.class == v.true_label).count();
        let fused_correct = u.iter().filter(|v| v.pseudo.class == v.true_label).count();
        let frac = |n: usize| if u.is_empty() { 0.0 } else { n as f64 / u.len() as f64 };
        Self {
            step,
            epoch,
            lr,
            l_l: obj.l_l.item(),
            l_u: obj.l_u.item(),
            l_acl: obj.l_acl.item(),
            l_mtl: obj.l_mtl.item(),
            total: obj.total.item(),
            acceptance_rate: frac(accepted),
            mean_gamma: if u.is_empty() { 0.0 } else { u.iter().map(|v| v.gamma).sum::<f64>() / u.len() as f64 },
            accepted,
            accepted_correct,
            fused_correct,
            anchors,
            scales,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    /// Teacher accuracy on the held-out set.
    pub top1: f64,
    pub top5: f64,
    pub student_top1: f64,
    pub acceptance_rate: f64,
    /// Pseudo-label accuracy over accepted unlabeled samples; NaN when the
    /// gate admitted nothing.
    pub pseudo_label_accuracy: f64,
    /// Accuracy of the fused pseudo-labels over every unlabeled sample.
    pub fused_label_accuracy: f64,
    pub mean_gamma: f64,
    pub fallback_rate: f64,
    pub mean_total: f64,
}

#[derive(Debug, Default)]
pub(super) struct EpochAccumulator {
    samples: usize,
    accepted: usize,
    correct: usize,
    fused_correct: usize,
    gamma_sum: f64,
    fallbacks: usize,
    total_sum: f64,
    steps: usize,
}

impl EpochAccumulator {
    pub(super) fn add(&mut self, r: &StepReport) {
        self.samples += r.anchors.len();
        self.accepted += r.accepted;
        self.correct += r.accepted_correct;
        self.fused_correct += r.fused_correct;
        self.gamma_sum += r.anchors.iter().map(|a| a.gamma).sum::<f64>();
        self.fallbacks += r.anchors.iter().filter(|a| a.used_fallback).count();
        self.total_sum += r.total;
        self.steps += 1;
    }

    pub(super) fn finish(self, epoch: usize, lr: f64, teacher: EvalReport, student: EvalReport) -> EpochReport {
        let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
        EpochReport {
            epoch,
            lr,
            top1: teacher.top1,
            top5: teacher.top5,
            student_top1: student.top1,
            acceptance_rate: ratio(self.accepted as f64, self.samples),
            pseudo_label_accuracy: if self.accepted == 0 {
                f64::NAN
            } else {
                self.correct as f64 / self.accepted as f64
            },
            fused_label_accuracy: ratio(self.fused_correct as f64, self.samples),
            mean_gamma: ratio(self.gamma_sum, self.samples),
            fallback_rate: ratio(self.fallbacks as f64, self.samples),
            mean_total: ratio(self.total_sum, self.steps),
        }
    }
}

/// Receives progress from the training loop.
pub trait Observer {
    fn on_step(&mut self, _report: &StepReport) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _report: &EpochReport, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullObserver;

impl Observer for NullObserver {}

/// Keeps every report in memory.
#[derive(Debug, Default)]
pub struct Recorder {
    pub steps: Vec<StepReport>,
    pub epochs: Vec<EpochReport>,
}

impl Observer for Recorder {
    fn on_step(&mut self, report: &StepReport) -> Result<()> {
        self.steps.push(report.clone());
        Ok(())
    }

    fn on_epoch(&mut self, report: &EpochReport, _state: &TrainState) -> Result<()> {
        self.epochs.push(report.clone());
        Ok(())
    }
}

pub const METRICS_HEADER: &str = "step,epoch,l_l,l_u,l_acl,l_mtl,total,acceptance_rate,mean_gamma";
pub const EPOCHS_HEADER: &str =
    "epoch,lr,top1,top5,student_top1,acceptance_rate,pseudo_label_accuracy,fused_label_accuracy,mean_gamma,fallback_rate,mean_total";
pub const ACL_HEADER: &str =
    "step,slot,source_id,pseudo_label,true_label,gate_open,gamma,fallback,num_positives,num_negatives,loss";
pub const MTL_HEADER: &str = "step,scale,loss,mean_attention";

pub fn metrics_row(r: &StepReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.step, r.epoch, r.l_l, r.l_u, r.l_acl, r.l_mtl, r.total, r.acceptance_rate, r.mean_gamma
    )
}

pub fn epoch_row(r: &EpochReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.epoch,
        r.lr,
        r.top1,
        r.top5,
        r.student_top1,
        r.acceptance_rate,
        r.pseudo_label_accuracy,
        r.fused_label_accuracy,
        r.mean_gamma,
        r.fallback_rate,
        r.mean_total
    )
}

/// Streams reports into `metrics.csv`, `epochs.csv`, `acl.csv` and `mtl.csv`.
pub struct CsvObserver {
    dir: PathBuf,
    metrics: BufWriter<File>,
    epochs: BufWriter<File>,
    acl: BufWriter<File>,
    mtl: BufWriter<File>,
}

fn create(dir: &Path, name: &str, header: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
    Ok(w)
}

impl CsvObserver {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: create(dir, "metrics.csv", METRICS_HEADER)?,
            epochs: create(dir, "epochs.csv", EPOCHS_HEADER)?,
            acl: create(dir, "acl.csv", ACL_HEADER)?,
            mtl: create(dir, "mtl.csv", MTL_HEADER)?,
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        for w in [&mut self.metrics, &mut self.epochs, &mut self.acl, &mut self.mtl] {
            w.flush().map_err(|e| Error::io(&self.dir, e))?;
        }
        Ok(())
    }
}

impl Observer for CsvObserver {
    fn on_step(&mut self, r: &StepReport) -> Result<()> {
        let io = |e| Error::io(&self.dir, e);
        writeln!(self.metrics, "{}", metrics_row(r)).map_err(io)?;
        for (slot, a) in r.anchors.iter().enumerate() {
            writeln!(
                self.acl,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                slot,
                a.source_id,
                a.pseudo_label,
                a.true_label,
                a.gate_open as u8,
                a.gamma,
                a.used_fallback as u8,
                a.num_positives,
                a.num_negatives,
                a.loss
            )
            .map_err(io)?;
        }
        for s in &r.scales {
            writeln!(self.mtl, "{},{},{},{}", r.step, s.scale, s.loss, s.mean_attention).map_err(io)?;
        }
        Ok(())
    }

    fn on_epoch(&mut self, r: &EpochReport, _state: &TrainState) -> Result<()> {
        writeln!(self.epochs, "{}", epoch_row(r)).map_err(|e| Error::io(&self.dir, e))?;
        self.flush()
    }
}
