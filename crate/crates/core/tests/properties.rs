mod common;

use common::*;
use dvi_core::dual::{
    dual_bound_value, dual_gradient, dual_objective, max_feasible_step, primal_lower_bound, recover_primal,
};
use dvi_core::io::{parse_trace, trace_csv};
use dvi_core::model::{assemble_a, build_gmrf_model, GmrfParams};
use dvi_core::optim::{Trace, TraceRow};
use dvi_core::tasks::synth::lattice_edges;
use dvi_core::{fit_dual, LgmModel, SolverOptions};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn instance(seed: u64, kinds: &[Kind]) -> (ChaCha8Rng, LgmModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = rng.random_range(1..=6);
    let count = rng.random_range(1..=5);
    let sites = random_sites(&mut rng, count, kinds);
    let model = random_dense_model(&mut rng, latent, sites);
    (rng, model)
}

fn small_gmrf(seed: u64) -> (ChaCha8Rng, LgmModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = rng.random_range(2..=4);
    let n = side * side;
    let counts: Vec<u64> = (0..n).map(|_| rng.random_range(0..8)).collect();
    let params = GmrfParams {
        jitter: Some(rng.random_range(0.01..1.0)),
        ..GmrfParams::new(rng.random_range(0.2..5.0), rng.random_range(0.2..5.0))
    };
    let model = build_gmrf_model(n, &lattice_edges(side), &params, &counts).unwrap();
    (rng, model)
}

fn rel_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol * b.amax().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn precision_factor_matches_dense_assembly(seed in any::<u64>()) {
        let (mut rng, model) = instance(seed, &ALL_KINDS);
        let lambda = random_interior_lambda(&mut rng, &model);
        let factor = assemble_a(&model, &lambda).unwrap();
        let dense = dense_precision(&model, &lambda);
        prop_assert!(rel_close(&factor.to_dense(), &dense, 1e-9));
        let inv = dense.clone().try_inverse().unwrap();
        let marg = factor.marginal_variances();
        for i in 0..model.latent_dim() {
            prop_assert!((marg[i] - inv[(i, i)]).abs() <= 1e-9 * inv[(i, i)].abs().max(1.0));
        }
        prop_assert!((factor.logdet() - dense.determinant().ln()).abs() <= 1e-8 * factor.logdet().abs().max(1.0));
    }

    #[test]
    fn sparse_factor_matches_dense_assembly(seed in any::<u64>()) {
        let (mut rng, model) = small_gmrf(seed);
        let lambda = random_interior_lambda(&mut rng, &model);
        let factor = assemble_a(&model, &lambda).unwrap();
        let dense = dense_precision(&model, &lambda);
        prop_assert!(rel_close(&factor.to_dense(), &dense, 1e-9));
        let inv = dense.try_inverse().unwrap();
        let marg = factor.marginal_variances();
        for i in 0..model.latent_dim() {
            prop_assert!((marg[i] - inv[(i, i)]).abs() <= 1e-8 * inv[(i, i)].abs().max(1.0));
        }
    }

    #[test]
    fn dual_is_convex_along_segments(seed in any::<u64>(), t in 0.05f64..0.95) {
        let (mut rng, model) = instance(seed, &ALL_KINDS);
        let a = random_interior_lambda(&mut rng, &model);
        let b = random_interior_lambda(&mut rng, &model);
        let mid = &a * (1.0 - t) + &b * t;
        let (fa, fb, fm) = (
            dual_objective(&model, &a).unwrap(),
            dual_objective(&model, &b).unwrap(),
            dual_objective(&model, &mid).unwrap(),
        );
        let chord = (1.0 - t) * fa + t * fb;
        prop_assert!(fm <= chord + 1e-10 * chord.abs().max(1.0), "{fm} > {chord}");
    }

    #[test]
    fn sparse_dual_gradient_matches_differences(seed in any::<u64>()) {
        let (mut rng, model) = small_gmrf(seed);
        let lambda = random_interior_lambda(&mut rng, &model);
        let g = dual_gradient(&model, &lambda).unwrap();
        let fd = central_gradient(|l| dual_objective(&model, l).unwrap(), &lambda, 1e-6);
        prop_assert!((&g - &fd).norm() <= 1e-6 * fd.norm().max(1.0));
    }

    #[test]
    fn weak_duality(seed in any::<u64>()) {
        let (mut rng, model) = instance(seed, &ALL_KINDS);
        let l1 = random_interior_lambda(&mut rng, &model);
        let l2 = random_interior_lambda(&mut rng, &model);
        let lb = primal_lower_bound(&model, &recover_primal(&model, &l2).unwrap()).unwrap();
        let upper = dual_bound_value(&model, dual_objective(&model, &l1).unwrap());
        prop_assert!(lb <= upper + 1e-9 * upper.abs().max(1.0));
    }

    #[test]
    fn recovered_bound_matches_dense_formula(seed in any::<u64>()) {
        let (mut rng, model) = instance(seed, &ALL_KINDS);
        let lambda = random_interior_lambda(&mut rng, &model);
        let post = recover_primal(&model, &lambda).unwrap();
        let v = dense_precision(&model, &lambda).try_inverse().unwrap();
        let want = dense_lower_bound(&model, &post.mean, &v);
        let got = primal_lower_bound(&model, &post).unwrap();
        prop_assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn fit_trace_monotone_and_stationary(seed in any::<u64>()) {
        let (_, model) = instance(seed, &ALL_KINDS);
        let fit = fit_dual(&model, None, &SolverOptions::default()).unwrap();
        prop_assert!(fit.termination.converged(), "{:?}", fit.termination);
        for w in fit.trace.rows.windows(2) {
            prop_assert!(w[1].objective <= w[0].objective);
        }
        let mut offset = 0;
        for site in model.sites() {
            let d = site.dim();
            prop_assert!(site.domain().contains(&fit.lambda.as_slice()[offset..offset + d]));
            offset += d;
        }
        prop_assert!(fit.gradient_inf_norm <= 1e-6 || fit.termination.as_str() == "stalled");
        prop_assert!(fit.duality_gap <= 1e-6 * fit.lower_bound.abs().max(1.0));
    }

    #[test]
    fn capped_steps_stay_feasible(seed in any::<u64>(), frac in 0.0f64..0.999) {
        let (mut rng, model) = instance(seed, &ALL_KINDS);
        let lambda = random_interior_lambda(&mut rng, &model);
        let dir = DVector::from_fn(lambda.len(), |_, _| rng.random_range(-5.0..5.0));
        let cap = max_feasible_step(&model, &lambda, &dir);
        prop_assert!(cap > 0.0);
        if cap.is_finite() {
            let inside = &lambda + &dir * (frac * cap);
            prop_assert!(dual_objective(&model, &inside).is_ok());
            let beyond = &lambda + &dir * (cap * 1.01);
            prop_assert!(dual_objective(&model, &beyond).is_err());
        }
    }

    #[test]
    fn trace_csv_round_trips(rows in proptest::collection::vec((any::<f64>(), any::<f64>(), 0.0f64..1e6), 0..20)) {
        let trace = Trace {
            rows: rows
                .iter()
                .enumerate()
                .map(|(i, &(objective, grad_inf_norm, elapsed_sec))| TraceRow { iter: i, elapsed_sec, objective, grad_inf_norm })
                .collect(),
        };
        let back = parse_trace(Path::new("mem"), &trace_csv(&trace)).unwrap();
        prop_assert_eq!(back.rows.len(), trace.rows.len());
        for (a, b) in back.rows.iter().zip(&trace.rows) {
            prop_assert_eq!(a.iter, b.iter);
            for (x, y) in [(a.objective, b.objective), (a.grad_inf_norm, b.grad_inf_norm), (a.elapsed_sec, b.elapsed_sec)] {
                prop_assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
            }
        }
    }
}
