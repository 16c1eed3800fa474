//! Self-checks run by `semisup verify`.
//!
//! Every check compares the library against a reference written here from
//! scratch (direct sums, restarted EM, a naive selector) or against a
//! numerical gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::acl::{acl_loss, select_for_anchor, AclSelection};
use crate::autodiff::gradcheck_many;
use crate::autodiff::Tape;
use crate::backbone::ParamVars;
use crate::bank::{MemoryBank, PrototypeTable};
use crate::error::Result;
use crate::gmm::{fit_gmm, reliability, GmmFit};
use crate::mtl::calibrate;
use crate::synth::{make_dataset, DataConfig, Dataset, SynthVideo};
use crate::tensor::{cosine, l2_normalized, Tensor};
use crate::trainer::{objective, Ablation, LossWeights, ModelConfig, PreparedBatch, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

fn line(name: &str, passed: bool, detail: String) -> CheckLine {
    CheckLine { name: name.to_string(), passed, detail }
}

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-6;
pub const LOSS_NAMES: [&str; 5] = ["l_l", "l_u", "l_acl", "l_mtl", "total"];

/// Small problem used for gradient checks: a few warm-up steps populate the
/// bank and prototypes, then one batch is prepared and frozen.
pub struct GradcheckCase {
    pub trainer: Trainer,
    pub batch: PreparedBatch,
}

pub fn gradcheck_case(index: usize) -> Result<GradcheckCase> {
    let seed = 100 + index as u64;
    let data = DataConfig {
        num_classes: 4,
        per_class: 8,
        labeled_fraction: 0.25,
        eval_per_class: 1,
        video_len: 240,
        frame_dim: 6,
        ..DataConfig::default()
    };
    let model = ModelConfig { d_hidden: 6, d_embed: 4, d_temporal: 5 };
    let train = TrainConfig {
        seed,
        delta: 0.1,
        epsilon: [0.3, 0.5, 0.7, 0.9, 0.6][index % 5],
        batch_labeled: 2,
        batch_unlabeled: 3,
        lr: 0.05,
        ..TrainConfig::default()
    };
    let dataset = make_dataset(&data, seed)?;
    let mut trainer = Trainer::new(train, &model, Ablation::default(), &data)?;
    let n_u = dataset.unlabeled.len();
    let n_l = dataset.labeled.len();
    for step in 0..6 {
        let lab: Vec<&SynthVideo> = (0..2).map(|i| &dataset.labeled[(2 * step + i) % n_l]).collect();
        let unl: Vec<&SynthVideo> = (0..3).map(|i| &dataset.unlabeled[(3 * step + i) % n_u]).collect();
        trainer.train_step(&lab, &unl, 0, step)?;
    }
    let lab: Vec<&SynthVideo> = (0..2).map(|i| &dataset.labeled[(i + index) % n_l]).collect();
    let unl: Vec<&SynthVideo> = (0..3).map(|i| &dataset.unlabeled[(7 * i + index) % n_u]).collect();
    let batch = trainer.prepare_batch(&lab, &unl, 1, 0)?;
    Ok(GradcheckCase { trainer, batch })
}

/// Max relative gradient error of loss `which` (an index into
/// [`LOSS_NAMES`]) over all student parameters. `corrupt` adds a term whose
/// tape gradient is cut, which must be detected.
pub fn gradcheck_loss(case: &GradcheckCase, which: usize, corrupt: bool) -> Result<f64> {
    let config = &case.trainer.config;
    let weights = LossWeights::new(config, Ablation::default());
    let points: Vec<Tensor> = case.trainer.state.student.tensors().into_iter().cloned().collect();
    let report = gradcheck_many(
        |_tape: &Tape, vars| {
            let pv = ParamVars::from_vars(vars)?;
            let obj = objective(&pv, &case.batch, config, weights)?;
            let loss = [obj.l_l, obj.l_u, obj.l_acl, obj.l_mtl, obj.total][which];
            if corrupt {
                let w = pv.class_weight;
                return loss.add(w.detach().mul(w.detach())?.sum());
            }
            Ok(loss)
        },
        &points,
        GRADCHECK_EPS,
    )?;
    Ok(report.max_rel_error)
}

pub fn gradcheck_suite(cases: usize, corrupt: bool) -> Result<CheckLine> {
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for i in 0..cases {
        let case = gradcheck_case(i)?;
        for (which, name) in LOSS_NAMES.iter().enumerate() {
            let err = gradcheck_loss(&case, which, corrupt)?;
            if err >= worst {
                worst = err;
                worst_at = format!("{name} in case {i}");
            }
        }
    }
    Ok(line(
        "gradcheck",
        worst < GRADCHECK_TOL,
        format!("max relative error {worst:.3e} ({worst_at}) over {cases} cases, tolerance {GRADCHECK_TOL:e}"),
    ))
}

/// Best log-likelihood over EM runs from random initializations. Runs where a
/// component drops below two points are discarded as single-point collapse.
pub fn gmm_restart_oracle(points: &[f64], restarts: usize, rng: &mut impl Rng) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().sum::<f64>() / n;
    let var = points.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let mut best = f64::NEG_INFINITY;
    for _ in 0..restarts {
        let a = points[rng.random_range(0..points.len())];
        let b = points[rng.random_range(0..points.len())];
        let mut mu = [a, b];
        let mut s2 = [var.max(1e-6); 2];
        let mut pi = [0.5, 0.5];
        let mut prev = f64::NEG_INFINITY;
        let mut collapsed = false;
        for _ in 0..1000 {
            let mut ll = 0.0;
            let mut r0 = Vec::with_capacity(points.len());
            for &x in points {
                let d0 =
                    pi[0] * (-(x - mu[0]).powi(2) / (2.0 * s2[0])).exp() / (2.0 * std::f64::consts::PI * s2[0]).sqrt();
                let d1 =
                    pi[1] * (-(x - mu[1]).powi(2) / (2.0 * s2[1])).exp() / (2.0 * std::f64::consts::PI * s2[1]).sqrt();
                let tot = d0 + d1;
                ll += tot.ln();
                r0.push(if tot > 0.0 { d0 / tot } else { 0.5 });
            }
            if (ll - prev).abs() < 1e-10 {
                prev = ll;
                break;
            }
            prev = ll;
            let n0: f64 = r0.iter().sum();
            let n1 = n - n0;
            if n0 < 2.0 || n1 < 2.0 {
                collapsed = true;
                break;
            }
            mu[0] = r0.iter().zip(points).map(|(r, x)| r * x).sum::<f64>() / n0;
            mu[1] = r0.iter().zip(points).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / n1;
            s2[0] = (r0.iter().zip(points).map(|(r, x)| r * (x - mu[0]).powi(2)).sum::<f64>() / n0).max(1e-6);
            s2[1] = (r0.iter().zip(points).map(|(r, x)| (1.0 - r) * (x - mu[1]).powi(2)).sum::<f64>() / n1).max(1e-6);
            pi = [n0 / n, n1 / n];
        }
        if !collapsed && prev.is_finite() {
            best = best.max(prev);
        }
    }
    best
}

/// Draws a two-component mixture with the given mean separation; returns the
/// points and, for each point, whether it came from the upper component.
pub fn draw_mixture(separation: f64, sigma: f64, n: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let center = rng.random_range(-0.3..0.3);
    let w_upper = rng.random_range(0.3..0.7);
    let mut xs = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for _ in 0..n {
        let up = rng.random_bool(w_upper);
        let m = if up { center + separation / 2.0 } else { center - separation / 2.0 };
        let z: f64 = StandardNormal.sample(rng);
        xs.push(m + sigma * z);
        upper.push(up);
    }
    (xs, upper)
}

pub fn gmm_suite(seed: u64) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_confident = 1.0f64;
    for i in 0..20 {
        let sep = 0.1 + 0.6 * i as f64 / 19.0;
        let (xs, upper) = draw_mixture(sep, 0.05, 100, &mut rng);
        let fit: GmmFit = fit_gmm(&xs)?;
        let oracle = gmm_restart_oracle(&xs, 50, &mut rng);
        worst_gap = worst_gap.max(oracle - fit.log_likelihood(&xs));
        if sep >= 0.5 {
            let confident = xs
                .iter()
                .zip(&upper)
                .filter(|(&x, &up)| {
                    let r = reliability(&fit, x);
                    if up {
                        r > 0.9
                    } else {
                        1.0 - r > 0.9
                    }
                })
                .count() as f64
                / xs.len() as f64;
            worst_confident = worst_confident.min(confident);
        }
    }
    Ok(line(
        "gmm",
        worst_gap <= 1e-3 && worst_confident >= 0.95,
        format!(
            "worst log-likelihood shortfall vs 50-restart EM {worst_gap:.3e}; worst confident fraction {worst_confident:.3}"
        ),
    ))
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok(u) = l2_normalized(&v) {
            return u;
        }
    }
}

fn near(center: &[f64], spread: f64, rng: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = center
        .iter()
        .map(|c| c + spread * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    l2_normalized(&v).expect("non-degenerate perturbation")
}

/// Direct `-ln(Σ_pos e^{s/τ} / Σ_all e^{s/τ})`.
pub fn direct_contrastive(anchor: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64) -> f64 {
    let e = |v: &Vec<f64>| (anchor.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / tau).exp();
    let p: f64 = pos.iter().map(e).sum();
    let q: f64 = neg.iter().map(e).sum();
    -(p / (p + q)).ln()
}

pub fn acl_suite(seed: u64) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let dim = rng.random_range(2..10);
        let anchor = random_unit(dim, &mut rng);
        let pos: Vec<Vec<f64>> = (0..rng.random_range(1..6)).map(|_| random_unit(dim, &mut rng)).collect();
        let neg: Vec<Vec<f64>> = (0..rng.random_range(0..30)).map(|_| random_unit(dim, &mut rng)).collect();
        let sel = AclSelection {
            naive_positive: pos[0].clone(),
            positive_indices: Vec::new(),
            negative_indices: Vec::new(),
            positives: pos.clone(),
            negatives: neg.clone(),
            anchor_reliability: 1.0,
            used_fallback: false,
        };
        let tape = Tape::new();
        let a = tape.param(Tensor::vector(anchor.clone()));
        let got = acl_loss(a, &sel, 0.07)?.item();
        worst = worst.max((got - direct_contrastive(&anchor, &pos, &neg, 0.07)).abs());
    }
    Ok(line("acl-loss", worst < 1e-9, format!("max |loss − direct sum| {worst:.3e} over 50 sets")))
}

/// Naive selector: positive bank indices, negative bank indices, fallback.
pub fn reference_selection(
    bank: &MemoryBank,
    prototype: &[f64],
    label: usize,
    naive: &[f64],
    epsilon: f64,
) -> (Vec<usize>, Vec<usize>, bool) {
    let mut members = Vec::new();
    let mut sims = vec![cosine(naive, prototype).unwrap()];
    for i in 0..bank.len() {
        let e = bank.get(i).unwrap();
        if e.pseudo_label == label {
            members.push(i);
            sims.push(cosine(&e.embedding, prototype).unwrap());
        }
    }
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let sd =
        if sims.len() > 1 { (sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    let scores: Vec<f64> = if sims.len() < 4 || sd < 1e-6 {
        vec![1.0; sims.len()]
    } else {
        let fit = fit_gmm(&sims).unwrap();
        sims.iter().map(|&s| reliability(&fit, s)).collect()
    };
    if scores[0] <= epsilon {
        return (Vec::new(), (0..bank.len()).collect(), true);
    }
    let pos: Vec<usize> = members.iter().zip(&scores[1..]).filter(|(_, &s)| s > epsilon).map(|(&i, _)| i).collect();
    let neg: Vec<usize> = (0..bank.len()).filter(|i| !pos.contains(i)).collect();
    (pos, neg, false)
}

pub fn selection_suite(seed: u64) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut fallbacks = 0;
    let trials = 200;
    for _ in 0..trials {
        let dim = 4;
        let classes = 3;
        let proto = random_unit(dim, &mut rng);
        let far = random_unit(dim, &mut rng);
        let size = rng.random_range(0..=64);
        let mut bank = MemoryBank::new(64);
        for _ in 0..size {
            let label = rng.random_range(0..classes);
            let c = if rng.random_bool(0.6) { &proto } else { &far };
            bank.push(near(c, 0.15, &mut rng), label)?;
        }
        let label = rng.random_range(0..classes);
        let naive = near(if rng.random_bool(0.7) { &proto } else { &far }, 0.15, &mut rng);
        let epsilon = rng.random_range(0.1..0.95);
        let mut table = PrototypeTable::new(classes, dim);
        table.update(label, &proto, 0.9)?;
        let got = select_for_anchor(&bank, &table, label, &naive, epsilon)?;
        let (pos, neg, fb) = reference_selection(&bank, &proto, label, &naive, epsilon);
        fallbacks += fb as usize;
        if got.positive_indices != pos || got.negative_indices != neg || got.used_fallback != fb {
            mismatches += 1;
        }
    }
    Ok(line(
        "selection",
        mismatches == 0,
        format!("{mismatches} mismatches vs naive selector over {trials} banks ({fallbacks} fallbacks)"),
    ))
}

pub fn calibration_suite(seed: u64) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (t, d) = (8, 6);
        let q: Vec<f64> = (0..t * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let q = Tensor::matrix(t, d, q)?;
        let id = calibrate(&q, &q)?;
        worst = worst.max(id.calibrated_tokens.max_abs_diff(&q));
        worst = worst.max(id.attention.iter().map(|a| (a - 1.0).abs()).fold(0.0, f64::max));
        // Keys orthogonal to queries: swap two coordinates with a sign flip
        // inside a 2-dim block.
        let mut k = vec![0.0; t * d];
        for r in 0..t {
            let row = q.row(r);
            k[r * d] = -row[1];
            k[r * d + 1] = row[0];
        }
        let qb: Vec<f64> = (0..t)
            .flat_map(|r| {
                let row = q.row(r);
                let mut out = vec![0.0; d];
                out[0] = row[0];
                out[1] = row[1];
                out
            })
            .collect();
        let orth = calibrate(&Tensor::matrix(t, d, qb)?, &Tensor::matrix(t, d, k)?)?;
        worst = worst.max(orth.calibrated_tokens.data().iter().map(|v| v.abs()).fold(0.0, f64::max));
    }
    Ok(line("calibration", worst < 1e-12, format!("max deviation {worst:.3e}")))
}

fn small_run(seed: u64) -> Result<(Trainer, Dataset)> {
    let data =
        DataConfig { num_classes: 4, per_class: 6, labeled_fraction: 0.34, eval_per_class: 1, ..DataConfig::default() };
    let train = TrainConfig { seed, batch_unlabeled: 3, ..TrainConfig::default() };
    let dataset = make_dataset(&data, seed)?;
    Ok((Trainer::new(train, &ModelConfig::default(), Ablation::default(), &data)?, dataset))
}

pub fn ema_suite(seed: u64) -> Result<CheckLine> {
    let (mut trainer, data) = small_run(seed)?;
    let m = trainer.config.ema_momentum;
    let mut worst = 0.0f64;
    let mut leaked = 0;
    for step in 0..8 {
        let prev = trainer.state.teacher.clone();
        let lab = [&data.labeled[step % data.labeled.len()]];
        let unl: Vec<&SynthVideo> = (0..3).map(|i| &data.unlabeled[(3 * step + i) % data.unlabeled.len()]).collect();

        let batch = trainer.clone().prepare_batch(&lab, &unl, 0, step)?;
        let tape = Tape::new();
        let vars = trainer.state.student.bind(&tape, true);
        let obj = objective(&vars, &batch, &trainer.config, trainer.weights())?;
        let grads = obj.total.backward()?;
        if grads.len() > vars.all().len() {
            leaked += 1;
        }

        trainer.train_step(&lab, &unl, 0, step)?;
        let s = &trainer.state.student;
        for (t, (p, sv)) in trainer.state.teacher.tensors().iter().zip(prev.tensors().iter().zip(s.tensors())) {
            for (x, (a, b)) in t.data().iter().zip(p.data().iter().zip(sv.data())) {
                worst = worst.max((x - (m * a + (1.0 - m) * b)).abs());
            }
        }
    }
    Ok(line(
        "ema",
        worst <= 1e-12 && leaked == 0,
        format!("max teacher deviation from EMA {worst:.3e}; steps with non-student gradients {leaked}"),
    ))
}

pub struct VerifyOptions {
    pub seed: u64,
    pub corrupt_gradient: bool,
}

pub fn run_all(opts: &VerifyOptions) -> Result<Vec<CheckLine>> {
    Ok(vec![
        gradcheck_suite(5, opts.corrupt_gradient)?,
        gmm_suite(opts.seed)?,
        acl_suite(opts.seed)?,
        selection_suite(opts.seed)?,
        calibration_suite(opts.seed)?,
        ema_suite(opts.seed)?,
    ])
}
