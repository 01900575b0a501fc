//! Predictive probabilities and their scoring.

use std::sync::OnceLock;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sites::{softmax_with_reference, Site};

/// Smallest probability scored, and smallest predictive variance sampled.
pub const PROB_FLOOR: f64 = 1e-12;
pub const VAR_FLOOR: f64 = 1e-12;

/// Mean of `−log₂ p` over points, with `p` clamped below at `1e-12`.
pub fn prediction_error(probs: &[f64]) -> f64 {
    if probs.is_empty() {
        return f64::NAN;
    }
    probs.iter().map(|&p| -p.max(PROB_FLOOR).log2()).sum::<f64>() / probs.len() as f64
}

/// [`prediction_error`] of the probabilities assigned to the true labels.
pub fn class_prediction_error(predictive: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if predictive.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} predictive rows for {} labels",
            predictive.len(),
            labels.len()
        )));
    }
    let picked = predictive
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            p.get(y)
                .copied()
                .ok_or_else(|| Error::dim(format!("label {y} outside {} classes", p.len())))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(prediction_error(&picked))
}

fn clamp_variance(v: f64) -> f64 {
    if v < VAR_FLOOR {
        warn!("predictive variance {v:e} clamped to {VAR_FLOOR:e}");
        VAR_FLOOR
    } else {
        v
    }
}

/// Monte-Carlo class probabilities from independent Gaussian marginals of
/// the `K − 1` non-reference latents at each test point. Returns `K`
/// probabilities per point, the reference class last.
pub fn mc_class_probabilities(
    means: &[Vec<f64>],
    vars: &[Vec<f64>],
    num_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if num_samples == 0 {
        return Err(Error::domain("at least one Monte-Carlo sample is required"));
    }
    if means.len() != vars.len() {
        return Err(Error::dim("means and variances differ in length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(means.len());
    for (m, v) in means.iter().zip(vars) {
        if m.len() != v.len() {
            return Err(Error::dim("mean and variance vectors differ in length"));
        }
        let sd: Vec<f64> = v.iter().map(|&x| clamp_variance(x).sqrt()).collect();
        let mut acc = vec![0.0; m.len() + 1];
        let mut eta = vec![0.0; m.len()];
        for _ in 0..num_samples {
            for ((e, mu), s) in eta.iter_mut().zip(m).zip(&sd) {
                *e = mu + s * rng.sample::<f64, _>(StandardNormal);
            }
            let p = softmax_with_reference(&eta);
            let rest = 1.0 - p.iter().sum::<f64>();
            for (a, q) in acc.iter_mut().zip(p.iter().chain(std::iter::once(&rest))) {
                *a += q;
            }
        }
        let total: f64 = acc.iter().sum();
        out.push(acc.into_iter().map(|a| a / total).collect());
    }
    Ok(out)
}

/// Gauss–Hermite rule for weight `e^{−x²}`, by the Golub–Welsch method.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn default_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(40))
}

/// `∂/∂η log p(y | η)`; at zero variance the site bound is the exact
/// negative log-likelihood up to a constant.
fn score(site: &Site, eta: f64) -> Result<f64> {
    Ok(-site.grad(&[eta], &[0.0])?.0[0])
}

/// `log ∫ p(y | η) N(η | mean, var) dη` for a one-dimensional site, by
/// Gauss–Hermite quadrature centred at the mode of the integrand and scaled
/// by its curvature, so sharply peaked likelihoods are resolved.
pub fn log_predictive_density(site: &Site, mean: f64, var: f64) -> Result<f64> {
    if site.dim() != 1 {
        return Err(Error::dim("predictive density is defined for scalar sites"));
    }
    let var = clamp_variance(var);
    // The integrand is log-concave, so its log-derivative is decreasing.
    let slope = |e: f64| -> Result<f64> { Ok(score(site, e)? - (e - mean) / var) };
    let mut width = var.sqrt();
    let (mut lo, mut hi) = (mean - width, mean + width);
    while slope(lo)? < 0.0 {
        width *= 2.0;
        lo = mean - width;
    }
    while slope(hi)? > 0.0 {
        width *= 2.0;
        hi = mean + width;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mode = 0.5 * (lo + hi);
    let h = 1e-5 * mode.abs().max(1.0);
    let curvature = ((slope(mode - h)? - slope(mode + h)?) / (2.0 * h)).max(1.0 / var);
    let scale = (2.0 / curvature).sqrt();
    let (nodes, weights) = default_rule();
    let terms = nodes
        .iter()
        .zip(weights)
        .map(|(x, w)| {
            let eta = mode + scale * x;
            Ok(w.ln() + x * x + site.log_likelihood(&[eta])? - 0.5 * (eta - mean).powi(2) / var)
        })
        .collect::<Result<Vec<f64>>>()?;
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = terms.iter().map(|t| (t - top).exp()).sum();
    Ok(top + s.ln() + scale.ln() - 0.5 * (2.0 * std::f64::consts::PI * var).ln())
}
