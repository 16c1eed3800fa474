use crate::error::Result;
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Flat coordinate where the maximum occurred, counted across all inputs.
    pub worst_coordinate: usize,
    pub coordinates: usize,
}

/// Checks the gradient of a scalar function of one tensor.
pub fn gradcheck<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let report = gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps)?;
    Ok(report.max_rel_error)
}

/// Checks the gradient of a scalar function of several tensors at once.
///
/// Each coordinate of each input is perturbed by `±eps` and the function is
/// re-evaluated on a fresh tape.
pub fn gradcheck_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = points.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.wrt_or_zero(*v)).collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|p| tape.param(p.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut work: Vec<Tensor> = points.to_vec();
    let mut report = GradcheckReport { max_rel_error: 0.0, worst_coordinate: 0, coordinates: 0 };
    let mut flat = 0;
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[which].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[which].data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst_coordinate = flat;
            }
            flat += 1;
        }
    }
    report.coordinates = flat;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn dot_self_matches_twice_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_vec(&mut rng, 6);
        let err = gradcheck(|_, w| w.dot(w), &w, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_of_dot_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_vec(&mut rng, 4);
        let c = random_vec(&mut rng, 4);
        let err = gradcheck(
            |tape, w| {
                let c = tape.constant(c.clone());
                let s = w.dot(c)?;
                let logits = Var::concat(&[s, w.pick(0)?, w.pick(3)?])?;
                logits.softmax(0.5)?.pick(1)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let w = Tensor::vector(vec![1.0, 2.0]);
        let err = gradcheck(|tape, _| Ok(tape.scalar(3.0)), &w, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Detaching one factor halves the analytic gradient of w·w.
        let w = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let err = gradcheck(|_, w| w.dot(w.detach()), &w, 1e-5).unwrap();
        assert!(err > 0.1);
    }
}
