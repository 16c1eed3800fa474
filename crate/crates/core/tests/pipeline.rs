//! End-to-end behavior of the training loop on small datasets.

use std::path::PathBuf;

use semisup_core::checkpoint::{self, Checkpoint};
use semisup_core::experiment::{run_one, ExperimentSpec};
use semisup_core::synth::{make_dataset, DataConfig, Dataset};
use semisup_core::trainer::metrics::{NullObserver, Recorder};
use semisup_core::trainer::{Ablation, ModelConfig, TrainConfig, Trainer};

fn data() -> DataConfig {
    DataConfig { num_classes: 4, per_class: 8, labeled_fraction: 0.25, eval_per_class: 3, ..DataConfig::default() }
}

fn train(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, lr_drop_epochs: vec![1, 2], bank_capacity: 16, seed: 11, ..TrainConfig::default() }
}

fn dataset() -> Dataset {
    make_dataset(&data(), 11).unwrap()
}

fn trainer(cfg: TrainConfig, ablation: Ablation) -> Trainer {
    Trainer::new(cfg, &ModelConfig::default(), ablation, &data()).unwrap()
}

#[test]
fn loss_assembles_from_parts() {
    let ds = dataset();
    for (name, ab) in Ablation::ALL {
        let mut t = trainer(train(2), ab);
        let mut rec = Recorder::default();
        t.run(&ds, &mut rec).unwrap();
        let (mu1, mu2) = (if ab.use_mtl { 1.0 } else { 0.0 }, if ab.use_acl { 1.0 } else { 0.0 });
        for s in &rec.steps {
            let want = s.l_l + s.l_u + mu1 * s.l_mtl + mu2 * s.l_acl;
            assert!((s.total - want).abs() <= 1e-9 * want.abs().max(1.0), "{name} step {}", s.step);
            assert!(s.l_l >= 0.0 && s.l_u >= 0.0 && s.l_acl >= 0.0, "{name}");
        }
    }
}

#[test]
fn gate_closed_and_weights_off_reduce_to_supervised() {
    let ds = dataset();
    let cfg = TrainConfig { delta: 1.0, mu1: 0.0, mu2: 0.0, ..train(1) };
    let mut t = trainer(cfg, Ablation::default());
    let mut rec = Recorder::default();
    t.run(&ds, &mut rec).unwrap();
    for s in &rec.steps {
        assert_eq!(s.total, s.l_l);
        assert_eq!(s.l_u, 0.0);
        assert_eq!(s.accepted, 0);
    }
    assert!(rec.epochs[0].pseudo_label_accuracy.is_nan());
}

#[test]
fn cold_start_first_step_falls_back() {
    let ds = dataset();
    let mut t = trainer(train(1), Ablation::default());
    let unl: Vec<_> = ds.unlabeled.iter().take(5).collect();
    let r = t.train_step(&[&ds.labeled[0]], &unl, 0, 0).unwrap();
    assert!(r.total.is_finite());
    // Empty bank, so no negatives yet.
    assert!(r.anchors.iter().all(|a| a.num_negatives == 0));
    assert_eq!(t.state.bank.len(), 5);
    let r = t.train_step(&[&ds.labeled[1]], &unl, 0, 1).unwrap();
    assert!(r.total.is_finite());
    assert_eq!(t.state.bank.len(), 10);
}

#[test]
fn bank_fills_to_capacity() {
    let ds = dataset();
    let mut t = trainer(train(1), Ablation::default());
    t.run(&ds, &mut NullObserver).unwrap();
    assert_eq!(t.state.bank.len(), 16.min(ds.unlabeled.len()));
    assert_eq!(t.state.step, ds.unlabeled.len().div_ceil(5));
}

#[test]
fn runs_are_deterministic() {
    let ds = dataset();
    let mut a = trainer(train(2), Ablation::default());
    let mut b = trainer(train(2), Ablation::default());
    let (mut ra, mut rb) = (Recorder::default(), Recorder::default());
    a.run(&ds, &mut ra).unwrap();
    b.run(&ds, &mut rb).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(ra.steps, rb.steps);
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted() {
    let ds = dataset();
    let mut straight = trainer(train(3), Ablation::default());
    straight.run(&ds, &mut NullObserver).unwrap();

    let mut first = trainer(train(3), Ablation::default());
    first.run_epoch(&ds, &mut NullObserver).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    checkpoint::save(&path, &Checkpoint { config_hash: "h".into(), state: first.state.clone() }).unwrap();

    let mut resumed = trainer(train(3), Ablation::default());
    resumed.restore(checkpoint::load(&path, "h").unwrap().state).unwrap();
    resumed.run(&ds, &mut NullObserver).unwrap();
    assert_eq!(resumed.state, straight.state);
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_totals.txt")
}

/// Total loss of the first ten steps of a fixed run. Set `UPDATE_GOLDEN=1`
/// to rewrite the file after an intentional change.
#[test]
fn golden_total_loss() {
    let ds = dataset();
    let mut t = trainer(train(1), Ablation::default());
    let mut rec = Recorder::default();
    t.run(&ds, &mut rec).unwrap();
    let got: Vec<f64> = rec.steps.iter().take(10).map(|s| s.total).collect();
    let path = golden_path();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let text: String = got.iter().map(|v| format!("{v:e}\n")).collect();
        std::fs::write(&path, text).unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path).expect("golden file; run with UPDATE_GOLDEN=1 to create it");
    let want: Vec<f64> = text.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0), "step {i}: {g} vs {w}");
    }
}

#[test]
fn run_dir_is_complete() {
    let spec = ExperimentSpec { train: train(2), data: data(), ..ExperimentSpec::default() };
    let dir = tempfile::tempdir().unwrap();
    let cfg = spec.run_config(11, Ablation::default());
    let summary = run_one(&cfg, dir.path()).unwrap();
    for f in [
        "config.json",
        "manifest.json",
        "metrics.csv",
        "epochs.csv",
        "acl.csv",
        "mtl.csv",
        "checkpoint.json",
        "summary.json",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let epochs = std::fs::read_to_string(dir.path().join("epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 3);
    let ck = checkpoint::load(&dir.path().join("checkpoint.json"), &cfg.hash()).unwrap();
    assert_eq!(ck.state.epoch, 2);
    assert!(checkpoint::load(&dir.path().join("checkpoint.json"), "other").is_err());
    assert!((0.0..=1.0).contains(&summary.final_top1));
}
