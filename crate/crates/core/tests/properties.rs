//! Property tests. Gradients are compared against central differences computed
//! here; forward values against plain loops.

use proptest::prelude::*;

use semisup_core::acl::{acl_loss, AclSelection};
use semisup_core::autodiff::{Tape, Var};
use semisup_core::backbone::{Dims, ParamSet};
use semisup_core::bank::{MemoryBank, PrototypeTable};
use semisup_core::gmm::{fit_gmm, reliability, GmmFit, VARIANCE_FLOOR};
use semisup_core::mtl::calibrate;
use semisup_core::synth::{apply_strong, apply_weak, center_clip, make_dataset, DataConfig, StrongDraw, WeakDraw};
use semisup_core::tensor::{softmax, Tensor};
use semisup_core::trainer::{lr_schedule, sgd_step, TrainConfig};
use semisup_core::Result;

/// Max of `|analytic - numeric| / max(1, |analytic|)` over every coordinate.
fn fd_error<F>(f: F, point: &Tensor) -> f64
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.param(point.clone());
    let grads = f(x).unwrap().backward().unwrap();
    let analytic = grads.wrt_or_zero(x);
    let eval = |p: &Tensor| {
        let tape = Tape::new();
        f(tape.constant(p.clone())).unwrap().item()
    };
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut up = point.clone();
        up.data_mut()[i] += eps;
        let mut down = point.clone();
        down.data_mut()[i] -= eps;
        let numeric = (eval(&up) - eval(&down)) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    worst
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn vector(len: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, len).prop_map(Tensor::vector)
}

/// Entries bounded away from zero so ReLU kinks never sit inside the
/// finite-difference stencil.
fn off_kink(len: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop_oneof![-2.0f64..-0.01, 0.01f64..2.0], len).prop_map(Tensor::vector)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grad_matmul_tanh_log_softmax(a in matrix(3, 4), w in matrix(4, 5), target in 0usize..5) {
        let err = fd_error(|x| {
            let w = x.tape().constant(w.clone());
            x.matmul(w)?.tanh().mean_rows()?.log_softmax(0.3)?.pick(target)
        }, &a);
        prop_assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn grad_normalized_dot(v in vector(6), u in vector(6)) {
        prop_assume!(v.data().iter().map(|x| x * x).sum::<f64>() > 0.1);
        let err = fd_error(|x| {
            let u = x.tape().constant(u.clone());
            x.l2_normalize()?.dot(u)
        }, &v);
        prop_assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn grad_row_cosine_calibration(q in matrix(4, 3), k in matrix(4, 3)) {
        prop_assume!((0..4).all(|r| q.row(r).iter().map(|x| x * x).sum::<f64>() > 0.1));
        prop_assume!((0..4).all(|r| k.row(r).iter().map(|x| x * x).sum::<f64>() > 0.1));
        let err = fd_error(|x| {
            let k = x.tape().constant(k.clone());
            let a = x.row_cosine(k)?;
            Ok(k.scale_rows(a)?.tanh().sum())
        }, &q);
        prop_assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn grad_relu_and_log_sum_exp(v in off_kink(7)) {
        let err = fd_error(|x| x.relu().scale(1.7).log_sum_exp(), &v);
        prop_assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn softmax_matches_loop(v in prop::collection::vec(-30.0f64..30.0, 1..12), tau in 0.05f64..2.0) {
        let p = softmax(&v, tau);
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| ((x - m) / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(&e) {
            prop_assert!((a - b / z).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_loss_is_log_ratio(
        seed in any::<u64>(), n_pos in 1usize..5, n_neg in 0usize..12, tau in 0.05f64..1.0
    ) {
        use rand::{SeedableRng, Rng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut unit = || {
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let anchor = unit();
        let pos: Vec<Vec<f64>> = (0..n_pos).map(|_| unit()).collect();
        let neg: Vec<Vec<f64>> = (0..n_neg).map(|_| unit()).collect();
        let sel = AclSelection {
            naive_positive: pos[0].clone(),
            positive_indices: vec![],
            negative_indices: vec![],
            positives: pos.clone(),
            negatives: neg.clone(),
            anchor_reliability: 1.0,
            used_fallback: false,
        };
        let tape = Tape::new();
        let l = acl_loss(tape.param(Tensor::vector(anchor.clone())), &sel, tau).unwrap().item();
        let s = |v: &Vec<f64>| (anchor.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / tau).exp();
        let p: f64 = pos.iter().map(s).sum();
        let q: f64 = neg.iter().map(s).sum();
        prop_assert!((l - (-(p / (p + q)).ln())).abs() < 1e-9);
        prop_assert!(l >= -1e-12);
    }
}

fn mixture() -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-1.0f64..1.0, 4..60), prop::collection::vec(-1.0f64..1.0, 0..60))
        .prop_map(|(a, b)| a.into_iter().chain(b.into_iter().map(|x| 0.5 * x + 0.3)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gmm_fit_invariants(xs in mixture()) {
        let fit = match fit_gmm(&xs) {
            Ok(f) => f,
            Err(_) => return Ok(()),
        };
        prop_assert!((fit.weights[0] + fit.weights[1] - 1.0).abs() < 1e-9);
        prop_assert!(fit.variances.iter().all(|&v| v >= VARIANCE_FLOOR));
        for w in fit.log_likelihood_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9, "trace decreased {} -> {}", w[0], w[1]);
        }
        prop_assert!(fit.means[fit.reliable_component] >= fit.means[1 - fit.reliable_component]);
        for &x in &xs {
            let r = reliability(&fit, x);
            let other = fit.posteriors(x)[1 - fit.reliable_component];
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!((r + other - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gmm_permutation_invariant(xs in mixture(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let Ok(a) = fit_gmm(&xs) else { return Ok(()) };
        let mut shuffled = xs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let b = fit_gmm(&shuffled).unwrap();
        for &x in &xs {
            prop_assert!((reliability(&a, x) - reliability(&b, x)).abs() < 1e-9);
        }
    }

    #[test]
    fn reliability_monotone_for_equal_variances(
        m0 in -1.0f64..1.0, m1 in -1.0f64..1.0, v in 0.001f64..0.5, w in 0.05f64..0.95,
        mut xs in prop::collection::vec(-1.5f64..1.5, 2..20)
    ) {
        let fit = GmmFit::from_params([m0, m1], [v, v], [w, 1.0 - w]);
        xs.sort_by(f64::total_cmp);
        for pair in xs.windows(2) {
            prop_assert!(reliability(&fit, pair[1]) >= reliability(&fit, pair[0]) - 1e-12);
        }
    }

    #[test]
    fn bank_is_bounded_fifo(cap in 1usize..20, labels in prop::collection::vec(0usize..4, 0..60)) {
        let mut bank = MemoryBank::new(cap);
        for (i, &l) in labels.iter().enumerate() {
            let a = i as f64;
            bank.push(vec![a.cos(), a.sin()], l).unwrap();
        }
        prop_assert_eq!(bank.len(), labels.len().min(cap));
        let first = labels.len().saturating_sub(cap);
        for (k, e) in bank.iter().enumerate() {
            let a = (first + k) as f64;
            prop_assert_eq!(&e.embedding, &vec![a.cos(), a.sin()]);
            prop_assert_eq!(e.pseudo_label, labels[first + k]);
        }
    }

    #[test]
    fn prototype_is_ema(samples in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..10), beta in 0.0f64..1.0) {
        let mut table = PrototypeTable::new(2, 2);
        let mut want = vec![samples[0].0, samples[0].1];
        for (i, &(a, b)) in samples.iter().enumerate() {
            table.update(1, &[a, b], beta).unwrap();
            if i > 0 {
                want = vec![(1.0 - beta) * a + beta * want[0], (1.0 - beta) * b + beta * want[1]];
            }
        }
        let got = table.get(1).unwrap();
        prop_assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        prop_assert!(table.get(0).is_none());
    }

    #[test]
    fn calibration_weights_are_cosines(q in matrix(5, 3), k in matrix(5, 3)) {
        let r = calibrate(&q, &k).unwrap();
        for t in 0..5 {
            let (a, b) = (q.row(t), k.row(t));
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(na > 1e-3 && nb > 1e-3);
            let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
            prop_assert!((r.attention[t] - c).abs() < 1e-12);
            for (got, kb) in r.calibrated_tokens.row(t).iter().zip(b) {
                prop_assert!((got - c * kb).abs() < 1e-12);
            }
        }
    }
}

fn tiny_dims() -> Dims {
    Dims { d_in: 3, d_hidden: 4, d_embed: 2, d_temporal: 3, clip_len: 4, num_classes: 3, num_scales: 2 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sgd_first_step_formula(seed in any::<u64>(), lr in 0.0f64..0.1, wd in 0.0f64..0.01) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let p0 = ParamSet::init(&tiny_dims(), &mut rng);
        let g = ParamSet::init(&tiny_dims(), &mut rng);
        let mut p = p0.clone();
        let mut v = ParamSet::zeros(&tiny_dims());
        sgd_step(&mut p, &g, &mut v, lr, 0.9, wd).unwrap();
        for ((after, before), grad) in p.tensors().iter().zip(p0.tensors()).zip(g.tensors()) {
            for ((a, b), gr) in after.data().iter().zip(before.data()).zip(grad.data()) {
                prop_assert!((a - (b - lr * (gr + wd * b))).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn sgd_zero_gradient_decays_velocity_only() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let p0 = ParamSet::init(&tiny_dims(), &mut rng);
    let v0 = ParamSet::init(&tiny_dims(), &mut rng);
    let mut p = p0.clone();
    let mut v = v0.clone();
    sgd_step(&mut p, &ParamSet::zeros(&tiny_dims()), &mut v, 0.0, 0.9, 0.0).unwrap();
    assert_eq!(p, p0);
    for (a, b) in v.tensors().iter().zip(v0.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - 0.9 * y).abs() < 1e-15);
        }
    }
}

#[test]
fn lr_schedule_drops() {
    let c = TrainConfig::default();
    assert_eq!(lr_schedule(0, &c), 0.005);
    assert_eq!(lr_schedule(24, &c), 0.005);
    assert!((lr_schedule(25, &c) - 0.0005).abs() < 1e-18);
    assert!((lr_schedule(29, &c) - 0.00005).abs() < 1e-18);
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn confusable_pairs_hold(seed in any::<u64>(), pairs in 1usize..6, dim in 4usize..20) {
        let cfg = DataConfig { num_classes: 2 * pairs, per_class: 2, eval_per_class: 0, frame_dim: dim, ..DataConfig::default() };
        let ds = make_dataset(&cfg, seed).unwrap();
        for c in &ds.classes {
            let Some(p) = c.confusion_partner else { continue };
            let other = &ds.classes[p];
            let sim = cos(&c.spatial_signature, &other.spatial_signature);
            if ds.spatial_pairs().iter().any(|&(a, b)| a == c.class_id.min(p) && b == c.class_id.max(p)) {
                prop_assert!(c.spatial_signature == other.spatial_signature);
                let ratio = c.motif.frequency().max(other.motif.frequency()) / c.motif.frequency().min(other.motif.frequency());
                prop_assert!(ratio >= 2.0, "frequency ratio {ratio}");
            } else {
                prop_assert!(c.motif == other.motif);
                prop_assert!(sim <= 0.2, "signature cosine {sim}");
            }
        }
    }

    #[test]
    fn augmentations_keep_shape(seed in any::<u64>(), scale in 0.9f64..1.1, jitter in -1i64..=1) {
        use rand::SeedableRng;
        let cfg = DataConfig { num_classes: 2, per_class: 1, eval_per_class: 0, ..DataConfig::default() };
        let ds = make_dataset(&cfg, seed).unwrap();
        let v = &ds.labeled[0];
        let clip = center_clip(v, 8, 8).unwrap();
        let weak = apply_weak(v, &clip, WeakDraw { scale, jitter }).unwrap();
        prop_assert_eq!(weak.frames.shape(), clip.frames.shape());
        prop_assert!(weak.frames.is_finite());
        let draw = StrongDraw::sample(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed), cfg.frame_dim);
        let strong = apply_strong(v, &clip, &draw).unwrap();
        prop_assert_eq!(strong.frames.shape(), clip.frames.shape());
        for (j, keep) in draw.keep.iter().enumerate() {
            if !keep {
                prop_assert!((0..8).all(|t| strong.frames.row(t)[j] == 0.0));
            }
        }
    }
}

#[test]
fn identity_draws_reduce() {
    let cfg = DataConfig { num_classes: 2, per_class: 1, eval_per_class: 0, ..DataConfig::default() };
    let ds = make_dataset(&cfg, 3).unwrap();
    let v = &ds.labeled[0];
    let clip = center_clip(v, 16, 8).unwrap();
    assert_eq!(apply_weak(v, &clip, WeakDraw::identity()).unwrap(), clip);
    let draw = StrongDraw { weak: WeakDraw::identity(), channel_scales: vec![1.0; 16], keep: vec![true; 16] };
    assert_eq!(apply_strong(v, &clip, &draw).unwrap(), clip);
}
