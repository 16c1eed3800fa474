//! Two-component one-dimensional Gaussian mixture fitted by EM.
//!
//! The posterior of the component with the larger mean is used as the
//! reliability score of a candidate's prototype similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 200;
pub const CONVERGENCE_TOL: f64 = 1e-8;
/// Minimum sample standard deviation accepted by [`fit_gmm`].
pub const MIN_SPREAD: f64 = 1e-6;
pub const MIN_POINTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    /// Log-likelihood after initialization and after every EM iteration.
    pub log_likelihood_trace: Vec<f64>,
    pub reliable_component: usize,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

impl GmmFit {
    /// Builds a fit from explicit parameters, choosing the reliable component.
    pub fn from_params(means: [f64; 2], variances: [f64; 2], weights: [f64; 2]) -> Self {
        let reliable_component = pick_reliable(&means, &weights);
        Self { means, variances, weights, log_likelihood_trace: Vec::new(), reliable_component }
    }

    fn log_joint(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k].ln() + log_normal(x, self.means[k], self.variances[k]))
    }

    /// Posterior probability of each component for `x`.
    pub fn posteriors(&self, x: f64) -> [f64; 2] {
        let [l0, l1] = self.log_joint(x);
        // Logistic form keeps the pair summing to one.
        let p0 = 1.0 / (1.0 + (l1 - l0).exp());
        [p0, 1.0 - p0]
    }

    pub fn log_likelihood(&self, points: &[f64]) -> f64 {
        points
            .iter()
            .map(|&x| {
                let [l0, l1] = self.log_joint(x);
                let m = l0.max(l1);
                m + ((l0 - m).exp() + (l1 - m).exp()).ln()
            })
            .sum()
    }

    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

/// Larger mean wins; ties go to the heavier component, then to index 0.
fn pick_reliable(means: &[f64; 2], weights: &[f64; 2]) -> usize {
    if means[1] > means[0] || (means[1] == means[0] && weights[1] > weights[0]) {
        1
    } else {
        0
    }
}

/// Posterior probability that `x` belongs to the reliable component.
pub fn reliability(fit: &GmmFit, x: f64) -> f64 {
    fit.posteriors(x)[fit.reliable_component]
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.max(VARIANCE_FLOOR))
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std(points: &[f64]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let mean = points.iter().sum::<f64>() / n;
    (points.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Fits the mixture by EM from a median-split initialization.
///
/// Points are sorted internally so the result does not depend on input order.
pub fn fit_gmm(points: &[f64]) -> Result<GmmFit> {
    if points.len() < MIN_POINTS {
        return Err(Error::TooFewPoints(points.len()));
    }
    let spread = sample_std(points);
    if !(spread >= MIN_SPREAD) {
        return Err(Error::DegenerateSpread(spread));
    }
    let mut xs = points.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let half = n / 2;
    let (lo, hi) = xs.split_at(half);
    let (m0, v0) = mean_var(lo);
    let (m1, v1) = mean_var(hi);
    let mut fit = GmmFit {
        means: [m0, m1],
        variances: [v0, v1],
        weights: [lo.len() as f64 / n as f64, hi.len() as f64 / n as f64],
        log_likelihood_trace: Vec::new(),
        reliable_component: 0,
    };
    let mut ll = fit.log_likelihood(&xs);
    fit.log_likelihood_trace.push(ll);

    let mut resp = vec![[0.0; 2]; n];
    for _ in 0..MAX_ITERATIONS {
        for (r, &x) in resp.iter_mut().zip(&xs) {
            *r = fit.posteriors(x);
        }
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            // A component that lost all its mass keeps its previous parameters.
            if nk <= f64::MIN_POSITIVE {
                continue;
            }
            let mean = resp.iter().zip(&xs).map(|(r, x)| r[k] * x).sum::<f64>() / nk;
            let var = resp.iter().zip(&xs).map(|(r, x)| r[k] * (x - mean).powi(2)).sum::<f64>() / nk;
            fit.means[k] = mean;
            fit.variances[k] = var.max(VARIANCE_FLOOR);
            fit.weights[k] = nk / n as f64;
        }
        let total = fit.weights[0] + fit.weights[1];
        fit.weights = fit.weights.map(|w| w / total);

        let next = fit.log_likelihood(&xs);
        fit.log_likelihood_trace.push(next);
        let done = (next - ll).abs() < CONVERGENCE_TOL;
        ll = next;
        if done {
            break;
        }
    }
    fit.reliable_component = pick_reliable(&fit.means, &fit.weights);
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_pairs() {
        let fit = fit_gmm(&[0.0, 0.0, 1.0, 1.0]).unwrap();
        let mut means = fit.means;
        means.sort_by(f64::total_cmp);
        assert!(means[0].abs() < 1e-6 && (means[1] - 1.0).abs() < 1e-6);
        assert!(reliability(&fit, 1.0) > 0.99);
        assert!(reliability(&fit, 0.0) < 0.01);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(fit_gmm(&[0.1, 0.2, 0.3]), Err(Error::TooFewPoints(3))));
    }

    #[test]
    fn degenerate_spread() {
        assert!(matches!(fit_gmm(&[0.4; 6]), Err(Error::DegenerateSpread(_))));
    }

    #[test]
    fn equal_components_give_one_half() {
        let fit = GmmFit::from_params([0.3, 0.3], [0.01, 0.01], [0.5, 0.5]);
        for x in [-1.0, 0.0, 0.3, 0.9] {
            assert_eq!(reliability(&fit, x), 0.5);
        }
    }

    #[test]
    fn reliable_component_is_larger_mean() {
        let fit = GmmFit::from_params([0.8, 0.1], [0.01, 0.02], [0.3, 0.7]);
        assert_eq!(fit.reliable_component, 0);
        let tied = GmmFit::from_params([0.5, 0.5], [0.01, 0.01], [0.3, 0.7]);
        assert_eq!(tied.reliable_component, 1);
    }

    #[test]
    fn posteriors_sum_to_one() {
        let fit = GmmFit::from_params([0.2, 0.9], [0.0025, 0.004], [0.4, 0.6]);
        for i in 0..=200 {
            let x = -1.0 + i as f64 * 0.01;
            let [a, b] = fit.posteriors(x);
            assert!((a + b - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn monotone_with_equal_variances() {
        let fit = GmmFit::from_params([0.1, 0.7], [0.02, 0.02], [0.6, 0.4]);
        let mut prev = 0.0;
        for i in 0..=200 {
            let r = reliability(&fit, -1.0 + i as f64 * 0.01);
            assert!(r >= prev);
            prev = r;
        }
    }
}
