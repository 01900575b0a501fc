//! Independent oracles and random instances shared by the integration tests.
#![allow(dead_code)]

use dvi_core::model::{GaussianPrior, PriorCovariance};
use dvi_core::{Design, LgmModel, Site};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Poisson,
    Bernoulli,
    MultiLogit,
    StochVol,
}

pub const ALL_KINDS: [Kind; 4] = [Kind::Poisson, Kind::Bernoulli, Kind::MultiLogit, Kind::StochVol];
pub const LOG_CONCAVE: [Kind; 3] = [Kind::Poisson, Kind::Bernoulli, Kind::MultiLogit];

pub fn random_site(rng: &mut ChaCha8Rng, kind: Kind) -> Site {
    match kind {
        Kind::Poisson => Site::poisson(rng.random_range(0..6)),
        Kind::Bernoulli => Site::bernoulli(rng.random_bool(0.5)),
        Kind::MultiLogit => Site::multi_logit(3, rng.random_range(0..3)).unwrap(),
        Kind::StochVol => {
            let y: f64 = rng.random_range(0.3..2.0);
            Site::stochastic_volatility(if rng.random_bool(0.5) { y } else { -y }).unwrap()
        }
    }
}

/// Dense model with prior `Σ = BBᵀ/L + I/2`, `μ ~ N(0, 1/4)` and a Gaussian
/// design scaled by `1/√L`.
pub fn random_dense_model(rng: &mut ChaCha8Rng, latent: usize, sites: Vec<Site>) -> LgmModel {
    let rows: usize = sites.iter().map(Site::dim).sum();
    let l = latent as f64;
    let b = DMatrix::from_fn(latent, latent, |_, _| rng.sample::<f64, _>(StandardNormal));
    let cov = &b * b.transpose() / l + DMatrix::identity(latent, latent) * 0.5;
    let mean = DVector::from_fn(latent, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
    let w = DMatrix::from_fn(rows, latent, |_, _| rng.sample::<f64, _>(StandardNormal) / l.sqrt());
    let prior = GaussianPrior {
        mean,
        covariance: PriorCovariance::Dense(cov),
    };
    LgmModel::new(prior, Design::from_dense(&w), sites).unwrap()
}

pub fn random_sites(rng: &mut ChaCha8Rng, count: usize, kinds: &[Kind]) -> Vec<Site> {
    (0..count)
        .map(|_| {
            let k = kinds[rng.random_range(0..kinds.len())];
            random_site(rng, k)
        })
        .collect()
}

/// Interior point of every site's domain, away from the boundary.
pub fn random_interior_lambda(rng: &mut ChaCha8Rng, model: &LgmModel) -> DVector<f64> {
    let mut out = Vec::with_capacity(model.num_rows());
    for site in model.sites() {
        match site {
            Site::Poisson { .. } | Site::StochasticVolatility { .. } => out.push(rng.random_range(0.2..3.0)),
            Site::BernoulliLogit { .. } => out.push(rng.random_range(0.1..0.9)),
            Site::MultiLogit { classes, .. } => {
                let raw: Vec<f64> = (0..*classes).map(|_| rng.random_range(0.2..1.0)).collect();
                let total: f64 = raw.iter().sum();
                out.extend(raw[..classes - 1].iter().map(|r| r / total));
            }
        }
    }
    DVector::from_vec(out)
}

/// `sup_{h,ρ} αᵀh + λᵀρ/2 − f(h, ρ)` by compass search from the origin.
pub fn numeric_conjugate(site: &Site, lambda: &[f64]) -> f64 {
    let d = site.dim();
    let alpha = site.alpha(lambda);
    let g = |x: &[f64]| -> f64 {
        let (h, rho) = x.split_at(d);
        match site.value(h, rho) {
            Ok(f) if f.is_finite() => {
                alpha.iter().zip(h).map(|(a, h)| a * h).sum::<f64>()
                    + lambda.iter().zip(rho).map(|(l, r)| 0.5 * l * r).sum::<f64>()
                    - f
            }
            _ => f64::NEG_INFINITY,
        }
    };
    let mut x = vec![0.0; 2 * d];
    let mut best = g(&x);
    let mut step = 1.0;
    while step > 1e-10 {
        let mut improved = false;
        for i in 0..2 * d {
            for sign in [1.0, -1.0] {
                let mut y = x.clone();
                y[i] += sign * step;
                let v = g(&y);
                if v > best {
                    best = v;
                    x = y;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best
}

/// Root of a continuous `f` with a sign change on `[lo, hi]`.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let f_lo = f(lo);
    assert!(f_lo * f(hi) <= 0.0, "no sign change on [{lo}, {hi}]");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (f_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * mid.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn simpson_rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(&f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Exact `log p(y)` of a one-latent model by adaptive quadrature.
pub fn log_evidence_1d(model: &LgmModel) -> f64 {
    assert_eq!(model.latent_dim(), 1);
    let mu = model.prior_mean()[0];
    let var = model.dense_prior_cov()[(0, 0)];
    let w: Vec<f64> = (0..model.num_rows()).map(|r| model.design().row(r).iter().map(|e| e.1).sum()).collect();
    let log_joint = |z: f64| -> f64 {
        let prior = -0.5 * (z - mu).powi(2) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        let lik: f64 = model
            .sites()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let eta: Vec<f64> = model.site_rows(i).map(|r| w[r] * z).collect();
                s.log_likelihood(&eta).unwrap_or(f64::NEG_INFINITY)
            })
            .sum();
        prior + lik
    };
    let sd = var.sqrt();
    let (lo, hi) = (mu - 60.0 * sd, mu + 60.0 * sd);
    let peak = (0..=24_000)
        .map(|k| log_joint(lo + (hi - lo) * k as f64 / 24_000.0))
        .fold(f64::NEG_INFINITY, f64::max);
    let integral = adaptive_simpson(|z| (log_joint(z) - peak).exp(), lo, hi, 1e-13);
    peak + integral.ln()
}

/// Central differences of `f` at `x`, step `h · max(1, |xᵢ|)`.
pub fn central_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let step = h * x[i].abs().max(1.0);
        let (mut a, mut b) = (x.clone(), x.clone());
        a[i] += step;
        b[i] -= step;
        (f(&a) - f(&b)) / (2.0 * step)
    })
}

/// `Σ⁻¹ + Wᵀ diag(λ) W`, from dense parts.
pub fn dense_precision(model: &LgmModel, lambda: &DVector<f64>) -> DMatrix<f64> {
    let w = model.design().to_dense();
    let sigma_inv = model.dense_prior_cov().try_inverse().unwrap();
    sigma_inv + w.transpose() * DMatrix::from_diagonal(lambda) * w
}

/// `−KL(N(m, V) ‖ prior) − Σ f(Wm, diag(WVWᵀ))`, from dense parts.
pub fn dense_lower_bound(model: &LgmModel, m: &DVector<f64>, v: &DMatrix<f64>) -> f64 {
    let sigma = model.dense_prior_cov();
    let sigma_inv = sigma.clone().try_inverse().unwrap();
    let l = m.len() as f64;
    let diff = m - model.prior_mean();
    let kl = 0.5
        * ((&sigma_inv * v).trace() - l + sigma.determinant().ln() - v.determinant().ln()
            + (diff.transpose() * &sigma_inv * &diff)[(0, 0)]);
    let w = model.design().to_dense();
    let h = &w * m;
    let rho = (&w * v * w.transpose()).diagonal();
    let f: f64 = model
        .sites()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let r = model.site_rows(i);
            s.value(&h.as_slice()[r.clone()], &rho.as_slice()[r]).unwrap()
        })
        .sum();
    -kl - f
}
