//! Likelihood sites: the convex bound `f(h, ρ)` on the expected negative
//! log-likelihood, its Fenchel conjugate `f*(λ)` with `α` eliminated through
//! the site's affine coupling, and the geometry of the conjugate's domain.
//!
//! | kind | `f(h, ρ)` | `f*(λ)` | `α(λ)` | domain |
//! |---|---|---|---|---|
//! | Poisson | `−yh + e^{h+ρ/2}` | `λ(log λ − 1)` | `λ − y` | `λ > 0` |
//! | Bernoulli-logit | `−yh + log(1 + e^{h+ρ/2})` | `λ log λ + (1−λ) log(1−λ)` | `λ − y` | `0 < λ < 1` |
//! | Multi-logit | `−yᵀh + lse(h + ρ/2)` | `Σ λₖ log λₖ + (1−t) log(1−t)` | `λ − y` | `λₖ > 0, t < 1` |
//! | Stochastic volatility | `h/2 + y² e^{−h+ρ/2}/2` | `λ log(2λ/y²) − λ` | `1/2 − λ` | `λ > 0` |
//!
//! Here `lse(v) = log(1 + Σₖ e^{vₖ})` over the `K − 1` non-reference classes
//! and `t = Σₖ λₖ`. The bounds drop the likelihood normalizers (`log y!` for
//! Poisson, `log(2π)/2` for stochastic volatility); [`Site::log_normalizer`]
//! returns them.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Largest exponent accepted before reporting overflow.
pub const EXP_CAP: f64 = 700.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Site {
    Poisson { count: u64 },
    BernoulliLogit { label: bool },
    /// `label` in `0..classes`; class `classes − 1` is the reference class
    /// whose one-hot encoding is all zeros.
    MultiLogit { classes: usize, label: usize },
    StochasticVolatility { y: f64 },
}

/// Open feasible set of a site's conjugate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteDomain {
    /// `λ > 0`
    Positive,
    /// `0 < λ < 1`
    UnitInterval,
    /// `λₖ > 0` and `Σ λₖ < 1`
    Simplex,
}

impl SiteDomain {
    pub fn contains(self, lambda: &[f64]) -> bool {
        match self {
            SiteDomain::Positive => lambda.iter().all(|&l| l > 0.0 && l.is_finite()),
            SiteDomain::UnitInterval => lambda.iter().all(|&l| l > 0.0 && l < 1.0),
            SiteDomain::Simplex => {
                lambda.iter().all(|&l| l > 0.0) && lambda.iter().sum::<f64>() < 1.0
            }
        }
    }

    /// `sup{δ > 0 : λ + δ d ∈ closure(S)}`; `+∞` when no constraint binds.
    pub fn max_step(self, lambda: &[f64], direction: &[f64]) -> f64 {
        let mut step = f64::INFINITY;
        for (&l, &d) in lambda.iter().zip(direction) {
            if d < 0.0 {
                step = step.min(l / -d);
            }
            if self == SiteDomain::UnitInterval && d > 0.0 {
                step = step.min((1.0 - l) / d);
            }
        }
        if self == SiteDomain::Simplex {
            let slope: f64 = direction.iter().sum();
            if slope > 0.0 {
                let t: f64 = lambda.iter().sum();
                step = step.min((1.0 - t) / slope);
            }
        }
        step
    }
}

fn check_exp(x: f64) -> Result<f64> {
    if x > EXP_CAP {
        Err(Error::Overflow(x))
    } else {
        Ok(x.exp())
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + Σ e^{vₖ})`, max-shifted.
pub fn lse_with_reference(v: &[f64]) -> f64 {
    let top = v.iter().copied().fold(0.0_f64, f64::max);
    let s: f64 = (-top).exp() + v.iter().map(|&x| (x - top).exp()).sum::<f64>();
    top + s.ln()
}

/// Softmax probabilities of the non-reference classes.
pub fn softmax_with_reference(v: &[f64]) -> Vec<f64> {
    let top = v.iter().copied().fold(0.0_f64, f64::max);
    let e: Vec<f64> = v.iter().map(|&x| (x - top).exp()).collect();
    let z = (-top).exp() + e.iter().sum::<f64>();
    e.into_iter().map(|x| x / z).collect()
}

fn xlogx(x: f64) -> f64 {
    x * x.ln()
}

impl Site {
    pub fn poisson(count: u64) -> Self {
        Site::Poisson { count }
    }

    pub fn bernoulli(label: bool) -> Self {
        Site::BernoulliLogit { label }
    }

    pub fn multi_logit(classes: usize, label: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::domain(format!("multi-logit needs at least 2 classes, got {classes}")));
        }
        if label >= classes {
            return Err(Error::domain(format!("class label {label} out of range 0..{classes}")));
        }
        Ok(Site::MultiLogit { classes, label })
    }

    pub fn stochastic_volatility(y: f64) -> Result<Self> {
        let site = Site::StochasticVolatility { y };
        site.validate()?;
        Ok(site)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Site::MultiLogit { classes, label } if classes < 2 || label >= classes => Err(
                Error::domain(format!("multi-logit label {label} with {classes} classes")),
            ),
            Site::StochasticVolatility { y } if y == 0.0 || !y.is_finite() => Err(Error::domain(
                "stochastic-volatility observation must be finite and non-zero",
            )),
            _ => Ok(()),
        }
    }

    /// Number of linear-predictor rows the site claims.
    pub fn dim(&self) -> usize {
        match self {
            Site::MultiLogit { classes, .. } => classes - 1,
            _ => 1,
        }
    }

    pub fn domain(&self) -> SiteDomain {
        match self {
            Site::Poisson { .. } | Site::StochasticVolatility { .. } => SiteDomain::Positive,
            Site::BernoulliLogit { .. } => SiteDomain::UnitInterval,
            Site::MultiLogit { .. } => SiteDomain::Simplex,
        }
    }

    /// Observation vector `y` as used in the coupling `α = λ − y`.
    pub fn observation(&self) -> Vec<f64> {
        match *self {
            Site::Poisson { count } => vec![count as f64],
            Site::BernoulliLogit { label } => vec![if label { 1.0 } else { 0.0 }],
            Site::MultiLogit { classes, label } => {
                let mut y = vec![0.0; classes - 1];
                if label < classes - 1 {
                    y[label] = 1.0;
                }
                y
            }
            Site::StochasticVolatility { y } => vec![y],
        }
    }

    fn check_dims(&self, parts: &[&[f64]]) -> Result<()> {
        let d = self.dim();
        match parts.iter().find(|p| p.len() != d) {
            Some(p) => Err(Error::dim(format!("site of dimension {d} given a vector of length {}", p.len()))),
            None => Ok(()),
        }
    }

    /// `f(h, ρ)`.
    pub fn value(&self, h: &[f64], rho: &[f64]) -> Result<f64> {
        self.check_dims(&[h, rho])?;
        Ok(match *self {
            Site::Poisson { count } => -(count as f64) * h[0] + check_exp(h[0] + 0.5 * rho[0])?,
            Site::BernoulliLogit { label } => {
                let y = if label { 1.0 } else { 0.0 };
                -y * h[0] + softplus(h[0] + 0.5 * rho[0])
            }
            Site::MultiLogit { .. } => {
                let y = self.observation();
                let shifted: Vec<f64> = h.iter().zip(rho).map(|(a, b)| a + 0.5 * b).collect();
                -y.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() + lse_with_reference(&shifted)
            }
            Site::StochasticVolatility { y } => {
                0.5 * h[0] + 0.5 * y * y * check_exp(-h[0] + 0.5 * rho[0])?
            }
        })
    }

    /// `(∂f/∂h, ∂f/∂ρ)`.
    pub fn grad(&self, h: &[f64], rho: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dims(&[h, rho])?;
        Ok(match *self {
            Site::Poisson { count } => {
                let e = check_exp(h[0] + 0.5 * rho[0])?;
                (vec![e - count as f64], vec![0.5 * e])
            }
            Site::BernoulliLogit { label } => {
                let s = sigmoid(h[0] + 0.5 * rho[0]);
                let y = if label { 1.0 } else { 0.0 };
                (vec![s - y], vec![0.5 * s])
            }
            Site::MultiLogit { .. } => {
                let shifted: Vec<f64> = h.iter().zip(rho).map(|(a, b)| a + 0.5 * b).collect();
                let p = softmax_with_reference(&shifted);
                let y = self.observation();
                (
                    p.iter().zip(&y).map(|(p, y)| p - y).collect(),
                    p.iter().map(|p| 0.5 * p).collect(),
                )
            }
            Site::StochasticVolatility { y } => {
                let e = 0.5 * y * y * check_exp(-h[0] + 0.5 * rho[0])?;
                (vec![0.5 - e], vec![0.5 * e])
            }
        })
    }

    fn check_feasible(&self, lambda: &[f64], index: usize) -> Result<()> {
        self.check_dims(&[lambda])?;
        if self.domain().contains(lambda) {
            Ok(())
        } else {
            Err(Error::Infeasible { site: index })
        }
    }

    /// `f*(λ)` with `α = α(λ)` substituted.
    pub fn conjugate(&self, lambda: &[f64]) -> Result<f64> {
        self.conjugate_at(lambda, 0)
    }

    pub(crate) fn conjugate_at(&self, lambda: &[f64], index: usize) -> Result<f64> {
        self.check_feasible(lambda, index)?;
        let l = lambda[0];
        Ok(match *self {
            Site::Poisson { .. } => l * (l.ln() - 1.0),
            Site::BernoulliLogit { .. } => xlogx(l) + xlogx(1.0 - l),
            Site::MultiLogit { .. } => {
                let t: f64 = lambda.iter().sum();
                lambda.iter().map(|&x| xlogx(x)).sum::<f64>() + xlogx(1.0 - t)
            }
            Site::StochasticVolatility { y } => l * (2.0 * l / (y * y)).ln() - l,
        })
    }

    /// `∂f*/∂λ`.
    pub fn conjugate_grad(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        self.conjugate_grad_at(lambda, 0)
    }

    pub(crate) fn conjugate_grad_at(&self, lambda: &[f64], index: usize) -> Result<Vec<f64>> {
        self.check_feasible(lambda, index)?;
        let l = lambda[0];
        Ok(match *self {
            Site::Poisson { .. } => vec![l.ln()],
            Site::BernoulliLogit { .. } => vec![l.ln() - (1.0 - l).ln()],
            Site::MultiLogit { .. } => {
                let log_rest = (1.0 - lambda.iter().sum::<f64>()).ln();
                lambda.iter().map(|&x| x.ln() - log_rest).collect()
            }
            Site::StochasticVolatility { y } => vec![(2.0 * l / (y * y)).ln()],
        })
    }

    /// Diagonal of the Hessian of `f*` at `λ` (feasibility assumed).
    pub fn conjugate_curvature(&self, lambda: &[f64]) -> Vec<f64> {
        match self {
            Site::BernoulliLogit { .. } => lambda.iter().map(|l| 1.0 / l + 1.0 / (1.0 - l)).collect(),
            Site::MultiLogit { .. } => {
                let rest = 1.0 - lambda.iter().sum::<f64>();
                lambda.iter().map(|l| 1.0 / l + 1.0 / rest).collect()
            }
            _ => lambda.iter().map(|l| 1.0 / l).collect(),
        }
    }

    /// The affine coupling `α(λ)`.
    pub fn alpha(&self, lambda: &[f64]) -> Vec<f64> {
        match self {
            Site::StochasticVolatility { .. } => lambda.iter().map(|l| 0.5 - l).collect(),
            _ => lambda
                .iter()
                .zip(self.observation())
                .map(|(l, y)| l - y)
                .collect(),
        }
    }

    /// `dα/dλ` is `±I`; this is the sign.
    pub fn alpha_slope(&self) -> f64 {
        match self {
            Site::StochasticVolatility { .. } => -1.0,
            _ => 1.0,
        }
    }

    pub fn max_feasible_step(&self, lambda: &[f64], direction: &[f64]) -> f64 {
        self.domain().max_step(lambda, direction)
    }

    /// Interior starting point for the dual variables.
    pub fn initial_lambda(&self) -> Vec<f64> {
        match *self {
            Site::Poisson { .. } | Site::StochasticVolatility { .. } => vec![1.0],
            Site::BernoulliLogit { .. } => vec![0.5],
            Site::MultiLogit { classes, .. } => {
                let k = (classes - 1) as f64;
                vec![1.0 / (2.0 * k); classes - 1]
            }
        }
    }

    /// Exact `log p(y | η)`, normalizers included.
    pub fn log_likelihood(&self, eta: &[f64]) -> Result<f64> {
        self.check_dims(&[eta])?;
        Ok(match *self {
            Site::Poisson { count } => {
                count as f64 * eta[0] - check_exp(eta[0])? - log_factorial(count)
            }
            Site::BernoulliLogit { label } => {
                if label {
                    -softplus(-eta[0])
                } else {
                    -softplus(eta[0])
                }
            }
            Site::MultiLogit { .. } => {
                let y = self.observation();
                y.iter().zip(eta).map(|(a, b)| a * b).sum::<f64>() - lse_with_reference(eta)
            }
            Site::StochasticVolatility { y } => {
                -0.5 * (2.0 * PI).ln() - 0.5 * eta[0] - 0.5 * y * y * check_exp(-eta[0])?
            }
        })
    }

    /// Constant `c` with `E[−log p(y|η)] = (exact expectation of the bound's
    /// functional form) + c`; the bound omits it.
    pub fn log_normalizer(&self) -> f64 {
        match *self {
            Site::Poisson { count } => log_factorial(count),
            Site::StochasticVolatility { .. } => 0.5 * (2.0 * PI).ln(),
            _ => 0.0,
        }
    }
}

pub fn log_factorial(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}
