//! Experiment files and the train / ablate / gen-data drivers behind the CLI.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, config_hash, Checkpoint};
use crate::error::{Error, Result};
use crate::synth::{make_dataset, time_average_separability, DataConfig, Dataset};
use crate::trainer::metrics::{CsvObserver, EpochReport, Observer, StepReport};
use crate::trainer::{Ablation, ModelConfig, TrainConfig, TrainState, Trainer};

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub ablation: Ablation,
    /// Run seeds. Each seed draws its own dataset and initialization.
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            ablation: Ablation::default(),
            seeds: vec![0, 1, 2],
            out_dir: None,
        }
    }
}

impl ExperimentSpec {
    /// Reads an experiment file; any read or parse problem is reported as a config error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let spec: Self =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        self.model.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must not be empty".into()));
        }
        let needed = crate::synth::clip_span(self.train.clip_len, *self.train.strides.last().expect("validated"));
        if self.data.video_len < needed {
            return Err(Error::InvalidConfig(format!(
                "video_len {} is shorter than the longest clip span {needed}",
                self.data.video_len
            )));
        }
        Ok(())
    }

    /// Single-seed run config.
    pub fn run_config(&self, seed: u64, ablation: Ablation) -> RunConfig {
        RunConfig {
            train: TrainConfig { seed, ..self.train.clone() },
            data: self.data.clone(),
            model: self.model.clone(),
            ablation,
        }
    }
}

/// Fully resolved configuration of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub ablation: Ablation,
}

impl RunConfig {
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        make_dataset(&self.data, self.train.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub config_hash: String,
    pub final_top1: f64,
    pub final_top5: f64,
    pub final_student_top1: f64,
    /// Fused pseudo-label accuracy over all unlabeled samples, first epoch.
    pub first_fused_label_accuracy: f64,
    /// Accepted-sample pseudo-label accuracy in the last epoch, if any were
    /// accepted.
    pub final_pseudo_label_accuracy: Option<f64>,
    pub final_acceptance_rate: f64,
}

struct RunObserver {
    csv: CsvObserver,
    dir: PathBuf,
    hash: String,
    every: usize,
    epochs: usize,
}

impl Observer for RunObserver {
    fn on_step(&mut self, report: &StepReport) -> Result<()> {
        self.csv.on_step(report)
    }

    fn on_epoch(&mut self, report: &EpochReport, state: &TrainState) -> Result<()> {
        self.csv.on_epoch(report, state)?;
        let done = report.epoch + 1;
        let periodic = self.every > 0 && done.is_multiple_of(self.every);
        if periodic || done == self.epochs {
            let ck = Checkpoint { config_hash: self.hash.clone(), state: state.clone() };
            checkpoint::save(&self.dir.join("checkpoint.json"), &ck)?;
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains one seed into `dir`, writing metric CSVs, the resolved config, the
/// dataset manifest, checkpoints and a summary.
pub fn run_one(config: &RunConfig, dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("config.json"), config)?;
    let dataset = config.dataset()?;
    write_json(&dir.join("manifest.json"), &dataset.manifest())?;
    let mut trainer = Trainer::new(config.train.clone(), &config.model, config.ablation, &config.data)?;
    let hash = config.hash();
    let mut observer = RunObserver {
        csv: CsvObserver::create(dir)?,
        dir: dir.to_path_buf(),
        hash: hash.clone(),
        every: config.train.checkpoint_every,
        epochs: config.train.epochs,
    };
    let epochs = trainer.run(&dataset, &mut observer)?;
    observer.csv.flush()?;
    let first = epochs.first().ok_or(Error::EmptyDataset)?;
    let last = epochs.last().expect("non-empty");
    let summary = RunSummary {
        seed: config.train.seed,
        config_hash: hash,
        final_top1: last.top1,
        final_top5: last.top5,
        final_student_top1: last.student_top1,
        first_fused_label_accuracy: first.fused_label_accuracy,
        final_pseudo_label_accuracy: (!last.pseudo_label_accuracy.is_nan()).then_some(last.pseudo_label_accuracy),
        final_acceptance_rate: last.acceptance_rate,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// One run per seed into `out/seed-<s>/`.
pub fn run_train(spec: &ExperimentSpec, out: &Path) -> Result<Vec<RunSummary>> {
    spec.seeds.iter().map(|&s| run_one(&spec.run_config(s, spec.ablation), &out.join(format!("seed-{s}")))).collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    /// Median final top-1 of each configuration, in ablation order.
    pub medians: Vec<(String, f64)>,
    /// `both ≥ max(single) ≥ min(single) ≥ baseline`.
    pub ordering_holds: bool,
    /// `both − baseline` in percentage points.
    pub margin_points: f64,
}

impl AblationSummary {
    pub fn from_rows(rows: Vec<AblationRow>) -> Self {
        let med = |name: &str| median(&rows.iter().filter(|r| r.name == name).map(|r| r.top1).collect::<Vec<_>>());
        let medians: Vec<(String, f64)> = Ablation::ALL.iter().map(|(n, _)| (n.to_string(), med(n))).collect();
        let (base, acl, mtl, both) = (medians[0].1, medians[1].1, medians[2].1, medians[3].1);
        let ordering_holds = both >= acl.max(mtl) && acl.min(mtl) >= base;
        Self { rows, medians, ordering_holds, margin_points: 100.0 * (both - base) }
    }
}

/// All four ablation configurations for every seed, in parallel. Results go
/// to `out/<config>/seed-<s>/` plus `ablation.json` and `ablation.csv`.
pub fn run_ablate(spec: &ExperimentSpec, out: &Path) -> Result<AblationSummary> {
    let jobs: Vec<(&str, Ablation, u64)> =
        Ablation::ALL.iter().flat_map(|&(name, ab)| spec.seeds.iter().map(move |&s| (name, ab, s))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(name, ab, seed)| {
            let dir = out.join(name.replace('+', "-")).join(format!("seed-{seed}"));
            let summary = run_one(&spec.run_config(seed, ab), &dir)?;
            Ok(AblationRow { name: name.to_string(), seed, top1: summary.final_top1 })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = AblationSummary::from_rows(rows);
    write_json(&out.join("ablation.json"), &summary)?;
    let mut csv = String::from("config,seed,top1\n");
    for r in &summary.rows {
        csv += &format!("{},{},{}\n", r.name, r.seed, r.top1);
    }
    let path = out.join("ablation.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub class_a: usize,
    pub class_b: usize,
    /// Held-out accuracy of a linear classifier on time-averaged frames.
    pub time_average_accuracy: f64,
}

/// Writes the dataset manifest and, for every pair of classes sharing a
/// spatial signature, how well time-averaged frames separate them.
pub fn gen_data(spec: &ExperimentSpec, seed: u64, out: &Path) -> Result<Vec<PairCheck>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dataset = make_dataset(&spec.data, seed)?;
    write_json(&out.join("manifest.json"), &dataset.manifest())?;
    let pool: Vec<_> = dataset.labeled.iter().chain(&dataset.unlabeled).chain(&dataset.eval).collect();
    let checks: Vec<PairCheck> = dataset
        .spatial_pairs()
        .into_iter()
        .map(|(a, b)| PairCheck {
            class_a: a,
            class_b: b,
            time_average_accuracy: time_average_separability(&pool, a, b),
        })
        .collect();
    write_json(&out.join("pairs.json"), &checks)?;
    Ok(checks)
}
