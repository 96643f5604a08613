//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags or invalid
//! argument values), 2 for runtime failures (I/O, malformed files, numerical
//! breakdown). Logs go to standard error; results go to files, except
//! `statdim`, which prints its JSON report to standard output.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{run_experiment, write_results, ExperimentConfig, Tuning, DEFAULT_TEST_SIZE};
use crate::funcdata::{format_f64, load_dataset, make_grid, save_dataset, write_atomic, write_json};
use crate::kernel::{build_kc, build_kc_with, KernelFunction, KernelGram};
use crate::simgen::{generate, Example, SimSpec};
use crate::sketch::{statistical_dimension, SketchDimPolicy, SketchKind, SketchMatrix};
use crate::solver::{fit, FitConfig, FitResult, LipschitzPolicy, SlopePredictor};
use crate::tuning::{cross_validate_with_kc, write_cv_table, CvPlan, SketchSpec, DEFAULT_FOLDS};

#[derive(Debug, Parser)]
#[command(name = "pflm", version, about = "Sketched kernel estimation for partially functional linear models")]
struct Cli {
    /// Worker threads for folds and replicates (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Fit the estimator at fixed (mu2, lambda).
    Fit(FitArgs),
    /// Select (mu2, lambda) by cross-validation and refit.
    Cv(CvArgs),
    /// Critical radius and statistical dimension of a dataset's kernel matrix.
    Statdim(StatdimArgs),
    /// Replicated simulation benchmark.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    example: u8,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    p: usize,
    #[arg(long)]
    v: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of midpoint grid points.
    #[arg(long, default_value_t = 1000)]
    grid: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LipschitzArg {
    Exact,
    Backtracking,
}

#[derive(Debug, Args)]
struct SolverArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "grs")]
    sketch: SketchKind,
    /// auto (= cuberoot), an integer, statdim[:c] or statdim-ros[:c].
    #[arg(long, default_value = "auto")]
    m: SketchDimPolicy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise level for the statistical-dimension sketch policies.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = LipschitzArg::Exact)]
    lipschitz: LipschitzArg,
    #[arg(long, default_value_t = 500)]
    max_outer: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    mu2: f64,
    #[arg(long)]
    lambda: f64,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[command(flatten)]
    solver: SolverArgs,
    /// Comma-separated ascending list.
    #[arg(long, value_delimiter = ',')]
    mu2_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
}

#[derive(Debug, Args)]
struct StatdimArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    example: u8,
    #[arg(long, value_delimiter = ',', required = true)]
    v_list: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    n_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "grs,ros,sub")]
    sketches: Vec<SketchKind>,
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    #[arg(long, default_value = "auto")]
    m_policy: SketchDimPolicy,
    #[arg(long, default_value_t = 50)]
    p: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    grid: usize,
    #[arg(long, default_value_t = DEFAULT_TEST_SIZE)]
    test_size: usize,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
    /// Fixed mu2 (with --lambda) instead of cross-validation.
    #[arg(long, requires = "lambda")]
    mu2: Option<f64>,
    #[arg(long, requires = "mu2")]
    lambda: Option<f64>,
    #[arg(long, value_delimiter = ',', conflicts_with = "mu2")]
    mu2_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', conflicts_with = "lambda")]
    lambda_grid: Option<Vec<f64>>,
    /// Allow n above 2048 and more than 20 replicates.
    #[arg(long)]
    full_scale: bool,
    /// Fill the timing columns of results.csv (makes the file run-dependent).
    #[arg(long)]
    timings: bool,
    #[arg(long)]
    out: PathBuf,
}

fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    let _ = env_logger::Builder::from_env(env)
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    init_logging();
    let outcome = match cli.threads {
        Some(t) if t == 0 => Err(Error::invalid("--threads must be positive")),
        _ => rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads.unwrap_or(0))
            .build()
            .map_err(|e| Error::numerical(format!("cannot start worker pool: {e}")))
            .and_then(|pool| pool.install(|| run(cli.command))),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            match e {
                Error::InvalidArgument(_) => 1,
                _ => 2,
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Cv(a) => cv_cmd(a),
        Command::Statdim(a) => statdim_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let spec = SimSpec::new(Example::from_id(a.example)?, a.n, a.p, a.v, a.seed)?.with_sigma(a.sigma)?;
    let grid = make_grid(a.grid)?;
    let (ds, truth) = generate(&spec, &grid)?;
    save_dataset(&ds, &a.out)?;
    write_json(&a.out.join("truth.json"), &truth)?;
    log::info!("wrote n={} p={} G={} to {}", ds.n(), ds.p(), grid.len(), a.out.display());
    Ok(())
}

fn solver_config(a: &SolverArgs, mu2: f64, lambda: f64) -> Result<FitConfig> {
    let mut cfg = FitConfig::new(mu2, lambda)?;
    cfg.max_outer = a.max_outer;
    cfg.tol = a.tol;
    cfg.lipschitz = match a.lipschitz {
        LipschitzArg::Exact => LipschitzPolicy::ExactPowerIteration,
        LipschitzArg::Backtracking => LipschitzPolicy::Backtracking { eta: 2.0, d0: 1.0 },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn sketch_spec(a: &SolverArgs) -> SketchSpec {
    let mut s = SketchSpec::new(a.sketch, a.m, a.seed);
    s.sigma = a.sigma;
    s
}

/// Fits on the full dataset and writes `fit.json` and `slope.csv`.
fn fit_and_write(
    a: &SolverArgs,
    ds: &crate::funcdata::FunctionalDataset,
    kc: &crate::kernel::CrossKernelMatrix,
    gram: &KernelGram,
    config: &FitConfig,
) -> Result<FitResult> {
    let spec = sketch_spec(a);
    let m = spec.dimension(kc)?;
    let sketch = SketchMatrix::new(a.sketch, m, ds.n(), a.seed)?;
    let result = fit(kc, ds.z(), ds.y(), &sketch, config, None)?;
    if !result.converged {
        log::warn!("fit stopped after {} iterations without converging", result.n_iter);
    }
    let predictor = SlopePredictor::new(gram, ds.x(), &sketch, &result.alpha)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("fit.json"), &result)?;
    write_slope(&a.out.join("slope.csv"), ds.grid().points(), predictor.slope_on_grid())?;
    log::info!(
        "{} m={} objective={:.6e} iterations={} converged={}",
        a.sketch,
        m,
        result.objective(),
        result.n_iter,
        result.converged
    );
    Ok(result)
}

fn write_slope(path: &Path, t: &[f64], f: &DVector<f64>) -> Result<()> {
    let mut s = String::from("t,slope\n");
    for (ti, fi) in t.iter().zip(f.iter()) {
        s.push_str(&format!("{},{}\n", format_f64(*ti), format_f64(*fi)));
    }
    write_atomic(path, s.as_bytes())
}

fn fit_cmd(a: FitArgs) -> Result<()> {
    let config = solver_config(&a.solver, a.mu2, a.lambda)?;
    let ds = load_dataset(&a.solver.data)?;
    let gram = KernelGram::new(&KernelFunction::Bernoulli, ds.grid());
    let kc = build_kc_with(&gram, &ds)?;
    fit_and_write(&a.solver, &ds, &kc, &gram, &config)?;
    Ok(())
}

#[derive(Serialize)]
struct CvSummary {
    best_mu2: f64,
    best_lambda: f64,
    best_error: f64,
    folds: usize,
}

fn cv_cmd(a: CvArgs) -> Result<()> {
    let ds = load_dataset(&a.solver.data)?;
    let (n, p) = (ds.n(), ds.p());
    let plan = CvPlan::new(
        n,
        a.folds,
        a.mu2_grid.clone().unwrap_or_else(|| crate::tuning::default_mu2_grid(n, p)),
        a.lambda_grid.clone().unwrap_or_else(|| crate::tuning::default_lambda_grid(n, p)),
        a.solver.seed,
    )?;
    let base = solver_config(&a.solver, plan.mu2_grid()[0], plan.lambda_grid()[0])?;
    let gram = KernelGram::new(&KernelFunction::Bernoulli, ds.grid());
    let kc = build_kc_with(&gram, &ds)?;
    let out = cross_validate_with_kc(&ds, &kc, &sketch_spec(&a.solver), &plan, &base)?;
    create_dir(&a.solver.out)?;
    write_cv_table(&a.solver.out.join("cv_table.csv"), &out.table)?;
    write_json(
        &a.solver.out.join("cv.json"),
        &CvSummary {
            best_mu2: out.best_mu2,
            best_lambda: out.best_lambda,
            best_error: out.best_error,
            folds: a.folds,
        },
    )?;
    log::info!(
        "selected mu2={:e} lambda={:e} (cv error {:.6e})",
        out.best_mu2,
        out.best_lambda,
        out.best_error
    );
    let config = FitConfig {
        mu2: out.best_mu2,
        lambda: out.best_lambda,
        ..base
    };
    fit_and_write(&a.solver, &ds, &kc, &gram, &config)?;
    Ok(())
}

#[derive(Serialize)]
struct StatdimOutput {
    critical_radius: f64,
    stat_dim: usize,
    sigma: f64,
    n: usize,
}

fn statdim_cmd(a: StatdimArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let kc = build_kc(&KernelFunction::Bernoulli, &ds)?;
    let report = statistical_dimension(&kc.empirical_eigenvalues()?, a.sigma)?;
    let out = StatdimOutput {
        critical_radius: report.critical_radius,
        stat_dim: report.stat_dim,
        sigma: a.sigma,
        n: ds.n(),
    };
    let json = serde_json::to_string(&out).map_err(|e| Error::numerical(e.to_string()))?;
    println!("{json}");
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::new(Example::from_id(a.example)?, a.v_list, a.n_list, a.sketches);
    cfg.replicates = a.replicates;
    cfg.m_policy = a.m_policy;
    cfg.p = a.p;
    cfg.seed = a.seed;
    cfg.grid_size = a.grid;
    cfg.test_size = a.test_size;
    cfg.full_scale = a.full_scale;
    cfg.tuning = match (a.mu2, a.lambda) {
        (Some(mu2), Some(lambda)) => Tuning::Fixed { mu2, lambda },
        _ => Tuning::CrossValidation {
            folds: a.folds,
            mu2_grid: a.mu2_grid,
            lambda_grid: a.lambda_grid,
        },
    };
    let records = run_experiment(&cfg)?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    write_results(&a.out, &records, a.timings)?;
    log::info!("{} records ({failed} failed) written to {}", records.len(), a.out.display());
    Ok(())
}
