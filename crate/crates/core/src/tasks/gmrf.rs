//! Spatial Poisson counts: fitting on a subset of regions and scoring the
//! held-out ones.

use crate::dual::{fit_dual, FitResult};
use crate::error::{Error, Result};
use crate::model::{build_gmrf_model_observed, GmrfParams, Hyperparameters, LgmModel};
use crate::optim::SolverOptions;
use crate::sites::Site;
use crate::tasks::data::split_indices;
use crate::tasks::grid::{CellOutcome, GridTask};
use crate::tasks::predict::log_predictive_density;
use crate::tasks::synth::LatticeDataset;

#[derive(Debug, Clone)]
pub struct GmrfTask {
    pub dataset: LatticeDataset,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub base: GmrfParams,
}

/// Fit on the training regions plus held-out predictive log-densities.
#[derive(Debug, Clone)]
pub struct GmrfFit {
    pub model: LgmModel,
    pub fit: FitResult,
    /// Lower bound on `log p(y_train)`, likelihood normalizers included.
    pub log_evidence_bound: f64,
    pub heldout_log_density: Vec<f64>,
}

impl GmrfTask {
    pub fn new(dataset: LatticeDataset, train_fraction: f64, seed: u64, base: GmrfParams) -> Result<Self> {
        let (train, test) = split_indices(dataset.n_regions(), train_fraction, seed)?;
        Ok(GmrfTask {
            dataset,
            train,
            test,
            base,
        })
    }

    /// `base` with `k_u`, `k_v`, `jitter` and `offset` overridden from `hp`.
    pub fn params(&self, hp: &Hyperparameters) -> GmrfParams {
        GmrfParams {
            k_u: hp.get_or("k_u", self.base.k_u),
            k_v: hp.get_or("k_v", self.base.k_v),
            jitter: hp.get("jitter").or(self.base.jitter),
            offset: hp.get_or("offset", self.base.offset),
        }
    }

    pub fn fit(&self, params: &GmrfParams, options: &SolverOptions) -> Result<GmrfFit> {
        let d = &self.dataset;
        let n = d.n_regions();
        let model = build_gmrf_model_observed(n, &d.edges, params, &d.counts, &self.train)?;
        let fit = fit_dual(&model, None, options)?;
        let normalizers: f64 = model.sites().iter().map(Site::log_normalizer).sum();
        let mean = &fit.posterior.mean;
        let heldout_log_density = self
            .test
            .iter()
            .map(|&i| {
                let w = [(i, 1.0), (n + i, 1.0)];
                let var = fit.posterior.factor.inverse_quad(&w);
                log_predictive_density(&Site::poisson(d.counts[i]), mean[i] + mean[n + i], var)
            })
            .collect::<Result<Vec<f64>>>()?;
        if !fit.lower_bound.is_finite() {
            return Err(Error::domain("lower bound is not finite"));
        }
        Ok(GmrfFit {
            log_evidence_bound: fit.lower_bound - normalizers,
            model,
            fit,
            heldout_log_density,
        })
    }
}

impl GridTask for GmrfTask {
    fn base(&self) -> Hyperparameters {
        let mut hp = Hyperparameters::new()
            .with("k_u", self.base.k_u)
            .with("k_v", self.base.k_v)
            .with("offset", self.base.offset);
        if let Some(j) = self.base.jitter {
            hp = hp.with("jitter", j);
        }
        hp
    }

    fn evaluate(&self, hp: &Hyperparameters, options: &SolverOptions) -> Result<CellOutcome> {
        let r = self.fit(&self.params(hp), options)?;
        let n = r.heldout_log_density.len() as f64;
        let bits = -r.heldout_log_density.iter().sum::<f64>() / (n * std::f64::consts::LN_2);
        Ok(CellOutcome {
            neg_lower_bound: -r.log_evidence_bound,
            pred_error: bits,
            iterations: r.fit.iterations,
            termination: r.fit.termination,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::synth::synth_gmrf_dataset;

    #[test]
    fn heldout_scores_are_finite() {
        let p = GmrfParams::new(1.0, 5.0);
        let d = synth_gmrf_dataset(5, &p, 2).unwrap();
        let task = GmrfTask::new(d, 0.8, 1, p).unwrap();
        assert_eq!((task.train.len(), task.test.len()), (20, 5));
        let out = task.evaluate(&task.base(), &SolverOptions::default()).unwrap();
        assert!(out.neg_lower_bound.is_finite() && out.pred_error.is_finite());
        assert!(out.pred_error > 0.0);
    }
}
