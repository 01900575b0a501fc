use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dvi_core::baselines::{fit_opper_arch, fit_primal_cholesky};
use dvi_core::dual::dual_bound_value;
use dvi_core::io::{self, fmt_f64};
use dvi_core::model::{build_gmrf_model, GaussianPrior, GmrfParams, Hyperparameters, PriorCovariance};
use dvi_core::tasks::data::{select, split_indices, Standardizer};
use dvi_core::tasks::gmrf::GmrfTask;
use dvi_core::tasks::gpc::{GpClassificationTask, GpClassifier};
use dvi_core::tasks::grid::{grid_search, GridResult};
use dvi_core::tasks::synth::{synth_gmrf_dataset, ClassificationData, LatticeDataset};
use dvi_core::{fit_dual, Design, Error, LgmModel, Result, Site, SolverOptions, Termination, Trace};
use log::{error, info};
use nalgebra::{DMatrix, DVector};

use crate::config::{Config, ModelKind, SolverKind};

/// Exit status of a finished run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    NotConverged,
}

pub struct Run {
    pub config: Config,
    pub out: PathBuf,
    pub seed: u64,
    pub parallel: bool,
}

impl Run {
    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn prepare_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|source| Error::Io {
            path: self.out.clone(),
            source,
        })
    }
}

fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

fn gmrf_params(hp: &Hyperparameters) -> GmrfParams {
    GmrfParams {
        k_u: hp.get_or("k_u", 1.0),
        k_v: hp.get_or("k_v", 1.0),
        jitter: hp.get("jitter"),
        offset: hp.get_or("offset", 0.0),
    }
}

fn lattice_data(cfg: &Config, seed: u64) -> Result<LatticeDataset> {
    match (cfg.path("data.edges")?, cfg.path("data.counts")?) {
        (Some(edges), Some(counts)) => {
            let edges = io::read_edges(&edges)?;
            let counts = io::read_counts(&counts)?;
            Ok(LatticeDataset {
                side: 0,
                edges,
                u: vec![f64::NAN; counts.len()],
                v: vec![f64::NAN; counts.len()],
                counts,
            })
        }
        (None, None) => {
            let side: usize = cfg.require("synth.side")?;
            synth_gmrf_dataset(side, &gmrf_params(&cfg.hyperparameters()?), seed)
        }
        _ => Err(domain("give both `data.edges` and `data.counts`, or `synth.side`")),
    }
}

fn classification_data(cfg: &Config) -> Result<ClassificationData> {
    let mut data = if let Some(glass) = cfg.path("data.glass")? {
        io::load_glass(&glass)?
    } else {
        let features = io::read_matrix(&cfg.require_path("data.features")?)?;
        let labels = io::read_labels(&cfg.require_path("data.labels")?)?;
        let observed = labels.iter().max().map_or(0, |m| m + 1);
        let classes = cfg.get_or("data.classes", observed)?;
        if classes < observed {
            return Err(domain(format!("labels reach {} but data.classes = {classes}", observed - 1)));
        }
        ClassificationData {
            features,
            labels,
            classes,
        }
    };
    if cfg.get_or("data.standardize", true)? {
        data.features = Standardizer::fit(&data.features)?.apply(&data.features);
    }
    Ok(data)
}

fn generic_model(cfg: &Config) -> Result<LgmModel> {
    let cov = io::read_matrix(&cfg.require_path("data.prior_cov")?)?;
    let l = cov.len();
    let cov = DMatrix::from_fn(l, l, |i, j| cov[i].get(j).copied().unwrap_or(f64::NAN));
    let mean = match cfg.path("data.prior_mean")? {
        Some(p) => DVector::from_vec(io::read_vector(&p)?),
        None => DVector::zeros(l),
    };
    let design = match cfg.path("data.design")? {
        Some(p) => {
            let rows = io::read_matrix(&p)?;
            let ncols = rows.first().map_or(0, Vec::len);
            Design::from_dense(&DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
        }
        None => Design::identity(l),
    };
    let obs = io::read_vector(&cfg.require_path("data.observations")?)?;
    let kind: String = cfg.require("data.site")?;
    let sites = obs
        .iter()
        .map(|&y| match kind.as_str() {
            "poisson" if y >= 0.0 && y.fract() == 0.0 => Ok(Site::poisson(y as u64)),
            "bernoulli" if y == 0.0 || y == 1.0 => Ok(Site::bernoulli(y == 1.0)),
            "stochastic-volatility" => Site::stochastic_volatility(y),
            "poisson" | "bernoulli" => Err(domain(format!("observation {y} is invalid for {kind} sites"))),
            other => Err(domain(format!("unknown site `{other}` (poisson, bernoulli, stochastic-volatility)"))),
        })
        .collect::<Result<Vec<Site>>>()?;
    let prior = GaussianPrior {
        mean,
        covariance: PriorCovariance::Dense(cov),
    };
    LgmModel::new(prior, design, sites)
}

/// Model on all supplied data.
fn full_model(cfg: &Config, seed: u64) -> Result<LgmModel> {
    match cfg.model()? {
        ModelKind::GmrfPoisson => {
            let d = lattice_data(cfg, seed)?;
            build_gmrf_model(d.n_regions(), &d.edges, &gmrf_params(&cfg.hyperparameters()?), &d.counts)
        }
        ModelKind::GpMulticlass => {
            let d = classification_data(cfg)?;
            Ok(GpClassifier::new(&d.features, &d.labels, d.classes, &cfg.hyperparameters()?)?
                .model()
                .clone())
        }
        ModelKind::Generic => generic_model(cfg),
    }
}

/// Result of one solver in a form shared by the dual and the baselines.
struct SolverRun {
    solver: SolverKind,
    mean: DVector<f64>,
    variances: DVector<f64>,
    objective: f64,
    lower_bound: f64,
    duality_gap: f64,
    iterations: usize,
    termination: Termination,
    trace: Trace,
    wall_sec: f64,
}

impl SolverRun {
    /// Trace objective on the lower-bound scale.
    fn bound_at(&self, model: &LgmModel, objective: f64) -> f64 {
        match self.solver {
            SolverKind::Dual => dual_bound_value(model, objective),
            _ => objective,
        }
    }
}

fn run_solver(model: &LgmModel, solver: SolverKind, opts: &SolverOptions) -> Result<SolverRun> {
    let start = Instant::now();
    let run = match solver {
        SolverKind::Dual => {
            let fit = fit_dual(model, None, opts)?;
            SolverRun {
                solver,
                variances: fit.posterior.marginal_variances(),
                mean: fit.posterior.mean,
                objective: fit.objective,
                lower_bound: fit.lower_bound,
                duality_gap: fit.duality_gap,
                iterations: fit.iterations,
                termination: fit.termination,
                trace: fit.trace,
                wall_sec: 0.0,
            }
        }
        SolverKind::OpperArch | SolverKind::PrimalCholesky => {
            let r = if solver == SolverKind::OpperArch {
                fit_opper_arch(model, opts)?
            } else {
                fit_primal_cholesky(model, opts)?
            };
            SolverRun {
                solver,
                mean: r.mean,
                variances: r.variances,
                objective: r.objective,
                lower_bound: r.objective,
                duality_gap: f64::NAN,
                iterations: r.iterations,
                termination: r.termination,
                trace: r.trace,
                wall_sec: 0.0,
            }
        }
    };
    Ok(SolverRun {
        wall_sec: start.elapsed().as_secs_f64(),
        ..run
    })
}

fn status(termination: Termination) -> Status {
    if termination.converged() || termination == Termination::TargetReached {
        Status::Success
    } else {
        Status::NotConverged
    }
}

pub fn fit(run: &Run) -> Result<Status> {
    let cfg = &run.config;
    let solver: SolverKind = cfg.get_or("solver", SolverKind::Dual)?;
    let opts = cfg.solver_options()?;
    let model = full_model(cfg, run.seed)?;
    run.prepare_out()?;
    let r = run_solver(&model, solver, &opts)?;
    io::write_trace(&run.file("trace.csv"), &r.trace)?;
    io::atomic_write(
        &run.file("posterior.csv"),
        &io::posterior_csv(r.mean.as_slice(), r.variances.as_slice()),
    )?;
    let summary = format!(
        "solver = {}\ntermination = {}\nobjective = {}\nlower_bound = {}\nduality_gap = {}\niterations = {}\nwall_sec = {}\n",
        solver.name(),
        r.termination.as_str(),
        fmt_f64(r.objective),
        fmt_f64(r.lower_bound),
        fmt_f64(r.duality_gap),
        r.iterations,
        fmt_f64(r.wall_sec)
    );
    io::atomic_write(&run.file("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(status(r.termination))
}

fn report_grid(grid: &GridResult) {
    let spec = &grid.spec;
    if let Some(i) = grid.best_bound() {
        let r = &grid.records[i];
        println!(
            "minimum negative lower bound: {} = {}, {} = {} ({})",
            spec.first.name, r.hp1, spec.second.name, r.hp2, r.neg_lower_bound
        );
    }
    if let Some(i) = grid.best_prediction() {
        let r = &grid.records[i];
        println!(
            "minimum prediction error: {} = {}, {} = {} ({} bits)",
            spec.first.name, r.hp1, spec.second.name, r.hp2, r.pred_error
        );
    }
    println!("{:.1}% of cells succeeded", 100.0 * grid.success_fraction());
}

pub fn grid(run: &Run) -> Result<Status> {
    let cfg = &run.config;
    if cfg.get_or("solver", SolverKind::Dual)? != SolverKind::Dual {
        return Err(domain("grid search runs the dual solver only"));
    }
    let spec = cfg.grid()?;
    let opts = cfg.solver_options()?;
    let base = cfg.hyperparameters()?;
    let frac: f64 = cfg.get_or("data.train_fraction", 0.8)?;
    let result = match cfg.model()? {
        ModelKind::GmrfPoisson => {
            let data = lattice_data(cfg, run.seed)?;
            let task = GmrfTask::new(data, frac, run.seed, gmrf_params(&base))?;
            run.prepare_out()?;
            grid_search(&task, &spec, &opts, run.parallel)
        }
        ModelKind::GpMulticlass => {
            let data = classification_data(cfg)?;
            let (train, test) = split_indices(data.labels.len(), frac, run.seed)?;
            let task = GpClassificationTask {
                train_x: select(&data.features, &train),
                train_y: select(&data.labels, &train),
                test_x: select(&data.features, &test),
                test_y: select(&data.labels, &test),
                classes: data.classes,
                num_samples: cfg.get_or("predict.samples", 1000)?,
                seed: run.seed,
                base,
            };
            run.prepare_out()?;
            grid_search(&task, &spec, &opts, run.parallel)
        }
        ModelKind::Generic => return Err(domain("grid search needs a gmrf-poisson or gp-multiclass model")),
    };
    io::atomic_write(&run.file("grid.csv"), &io::grid_csv(&result))?;
    report_grid(&result);
    Ok(if result.success_fraction() >= 0.9 {
        Status::Success
    } else {
        error!("fewer than 90% of grid cells succeeded");
        Status::NotConverged
    })
}

/// First trace row within `1e-4` relative distance of `best`.
fn to_tolerance(run: &SolverRun, model: &LgmModel, best: f64) -> Option<(usize, f64)> {
    run.trace
        .rows
        .iter()
        .find(|r| (run.bound_at(model, r.objective) - best).abs() <= 1e-4 * best.abs())
        .map(|r| (r.iter, r.elapsed_sec))
}

pub fn bench(run: &Run) -> Result<Status> {
    let cfg = &run.config;
    let solvers: Vec<SolverKind> = cfg.list("solvers")?.unwrap_or_default();
    if solvers.len() < 2 {
        return Err(domain("bench needs at least two entries in `solvers`"));
    }
    let opts = cfg.solver_options()?;
    let model = full_model(cfg, run.seed)?;
    run.prepare_out()?;
    let runs: Vec<Result<SolverRun>> = if run.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = solvers
                .iter()
                .map(|&k| {
                    let model = &model;
                    s.spawn(move || run_solver(model, k, &opts))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Internal("solver thread panicked".into()))))
                .collect()
        })
    } else {
        solvers.iter().map(|&k| run_solver(&model, k, &opts)).collect()
    };
    let reference = match runs.iter().flatten().find(|r| r.solver == SolverKind::Dual) {
        Some(r) => r.lower_bound,
        None => {
            info!("running the dual solver for the reference optimum");
            fit_dual(&model, None, &opts)?.lower_bound
        }
    };
    let mut summary = String::from("solver,iters_to_tol,sec_to_tol\n");
    for (i, (kind, r)) in solvers.iter().zip(&runs).enumerate() {
        let hit = match r {
            Ok(r) => {
                io::write_trace(&run.file(&format!("trace_{i}_{}.csv", kind.name())), &r.trace)?;
                to_tolerance(r, &model, reference)
            }
            Err(e) => {
                error!("solver {} failed: {e}", kind.name());
                None
            }
        };
        let (iters, secs) = hit.map_or(("NaN".to_string(), f64::NAN), |(it, s)| (it.to_string(), s));
        summary.push_str(&format!("{},{iters},{}\n", kind.name(), fmt_f64(secs)));
    }
    io::atomic_write(&run.file("bench_summary.csv"), &summary)?;
    print!("{summary}");
    Ok(if runs.iter().any(Result::is_ok) {
        Status::Success
    } else {
        Status::NotConverged
    })
}

pub fn synth(run: &Run) -> Result<Status> {
    let cfg = &run.config;
    let side: usize = cfg.get_or("synth.side", 20)?;
    let data = synth_gmrf_dataset(side, &gmrf_params(&cfg.hyperparameters()?), run.seed)?;
    run.prepare_out()?;
    io::write_lattice(&run.out, &data)?;
    println!(
        "wrote {} regions, {} edges to {}",
        data.n_regions(),
        data.edges.len(),
        run.out.display()
    );
    Ok(Status::Success)
}

/// Configuration at `path`, or an empty one.
pub fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}
