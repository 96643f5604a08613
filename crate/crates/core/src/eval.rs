//! Error metrics and the replicated simulation benchmark.
//!
//! Every metric is computed in the coordinates of the curve basis
//! `e_1 = 1, e_k = sqrt2 cos(k pi t)`: with `d_k = <f_hat - f*, e_k>` and a
//! fresh curve `X' = sum_k xi_k U'_k e_k`, the slope term of a prediction is
//! `sum_k xi_k U'_k d_k`, so the expected squared error is `sum_k xi_k^2 d_k^2`.

use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcdata::{format_f64, make_grid, write_atomic, write_json, Grid};
use crate::kernel::{build_kc_with, KernelFunction, KernelGram};
use crate::rng::{derive_seed, entity};
use crate::simgen::{curve_basis_on_grid, draw, generate, true_slope_on_grid, Example, SimSpec, SpectralTruth};
use crate::sketch::{SketchDimPolicy, SketchKind, SketchMatrix};
use crate::solver::{fit, FitConfig, SlopePredictor};
use crate::tuning::{cross_validate_with_kc, CvPlan, SketchSpec, DEFAULT_FOLDS};

pub const DEFAULT_TEST_SIZE: usize = 10_000;
pub const DESK_MAX_N: usize = 2048;
pub const DESK_MAX_REPLICATES: usize = 20;

/// `||gamma_hat - gamma0||^2`.
pub fn gamma_error(gamma_hat: &[f64], gamma0: &[f64]) -> Result<f64> {
    if gamma_hat.len() != gamma0.len() {
        return Err(Error::invalid(format!(
            "gamma lengths differ: {} vs {}",
            gamma_hat.len(),
            gamma0.len()
        )));
    }
    Ok(gamma_hat.iter().zip(gamma0).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Quadrature inner products of a grid function with each curve basis function.
pub fn basis_coordinates(values: &[f64], grid: &Grid) -> Result<DVector<f64>> {
    if values.len() != grid.len() {
        return Err(Error::invalid(format!(
            "function has {} samples, grid has {}",
            values.len(),
            grid.len()
        )));
    }
    let basis = curve_basis_on_grid(grid);
    Ok(basis * DVector::from_column_slice(values) * grid.weight())
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    fn from_samples(samples: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = samples.collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            std_error: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeError {
    pub monte_carlo: Estimate,
    /// `sum_k xi_k^2 d_k^2`.
    pub exact: f64,
}

fn check_test_size(test_size: usize) -> Result<()> {
    if test_size == 0 {
        return Err(Error::invalid("test size must be positive"));
    }
    Ok(())
}

/// `E (int (f_hat - f*) X')^2` over fresh curves drawn from `spec`.
pub fn slope_prediction_error(
    slope: &[f64],
    grid: &Grid,
    truth: &SpectralTruth,
    spec: &SimSpec,
    test_size: usize,
    seed: u64,
) -> Result<SlopeError> {
    check_test_size(test_size)?;
    let truth_slope = true_slope_on_grid(grid);
    let diff: Vec<f64> = slope.iter().zip(truth_slope.iter()).map(|(a, b)| a - b).collect();
    let d = basis_coordinates(&diff, grid)?;
    let weights = DVector::from_iterator(d.len(), truth.xi.iter().zip(d.iter()).map(|(x, dk)| x * dk));
    let exact = weights.norm_squared();
    let u = draw(spec, test_size, seed).u;
    let proj = &u * &weights;
    Ok(SlopeError {
        monte_carlo: Estimate::from_samples(proj.iter().map(|v| v * v)),
        exact,
    })
}

/// `E (Y_hat' - Y')^2` over fresh `(X', Z', Y')` drawn from `spec`.
pub fn response_prediction_error(
    slope: &[f64],
    gamma_hat: &[f64],
    grid: &Grid,
    truth: &SpectralTruth,
    spec: &SimSpec,
    test_size: usize,
    seed: u64,
) -> Result<Estimate> {
    check_test_size(test_size)?;
    if gamma_hat.len() != spec.p {
        return Err(Error::invalid("gamma_hat has the wrong length"));
    }
    let coords = basis_coordinates(slope, grid)?;
    let fitted_w = DVector::from_iterator(coords.len(), truth.xi.iter().zip(coords.iter()).map(|(x, c)| x * c));
    let true_w = truth.signal_weights();
    let draws = draw(spec, test_size, seed);
    let gh = DVector::from_column_slice(gamma_hat);
    let g0 = DVector::from_column_slice(&truth.gamma0);
    let y_hat = &draws.u * fitted_w + &draws.z * gh;
    let y = &draws.u * true_w + &draws.z * g0 + &draws.eps;
    Ok(Estimate::from_samples(y_hat.iter().zip(y.iter()).map(|(a, b)| (a - b).powi(2))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub gamma_sq_error: f64,
    pub slope_pred_error: f64,
    pub slope_pred_std_error: f64,
    pub slope_pred_error_exact: f64,
    pub response_pred_error: f64,
    pub response_pred_std_error: f64,
    pub test_size: usize,
}

/// All three metrics on one shared set of test draws.
pub fn evaluate(
    slope: &[f64],
    gamma_hat: &[f64],
    grid: &Grid,
    truth: &SpectralTruth,
    spec: &SimSpec,
    test_size: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let slope_err = slope_prediction_error(slope, grid, truth, spec, test_size, seed)?;
    let resp = response_prediction_error(slope, gamma_hat, grid, truth, spec, test_size, seed)?;
    Ok(MetricsReport {
        gamma_sq_error: gamma_error(gamma_hat, &truth.gamma0)?,
        slope_pred_error: slope_err.monte_carlo.mean,
        slope_pred_std_error: slope_err.monte_carlo.std_error,
        slope_pred_error_exact: slope_err.exact,
        response_pred_error: resp.mean,
        response_pred_std_error: resp.std_error,
        test_size,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Tuning {
    /// K-fold CV; grids default to the pilot-scaled grids.
    CrossValidation {
        folds: usize,
        mu2_grid: Option<Vec<f64>>,
        lambda_grid: Option<Vec<f64>>,
    },
    Fixed { mu2: f64, lambda: f64 },
}

impl Default for Tuning {
    fn default() -> Self {
        Tuning::CrossValidation {
            folds: DEFAULT_FOLDS,
            mu2_grid: None,
            lambda_grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub example: Example,
    pub v_list: Vec<f64>,
    pub n_list: Vec<usize>,
    pub sketch_kinds: Vec<SketchKind>,
    pub replicates: usize,
    pub m_policy: SketchDimPolicy,
    pub p: usize,
    pub sigma: f64,
    pub seed: u64,
    pub grid_size: usize,
    pub test_size: usize,
    pub tuning: Tuning,
    /// Lifts the desk-scale caps on `n` and the replicate count.
    pub full_scale: bool,
}

impl ExperimentConfig {
    pub fn new(example: Example, v_list: Vec<f64>, n_list: Vec<usize>, sketch_kinds: Vec<SketchKind>) -> Self {
        ExperimentConfig {
            example,
            v_list,
            n_list,
            sketch_kinds,
            replicates: DESK_MAX_REPLICATES,
            m_policy: SketchDimPolicy::CubeRoot,
            p: 50,
            sigma: 1.0,
            seed: 0,
            grid_size: 1000,
            test_size: DEFAULT_TEST_SIZE,
            tuning: Tuning::default(),
            full_scale: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.v_list.is_empty() || self.n_list.is_empty() || self.sketch_kinds.is_empty() {
            return Err(Error::invalid("v, n and sketch lists must be non-empty"));
        }
        if self.replicates == 0 {
            return Err(Error::invalid("need at least one replicate"));
        }
        check_test_size(self.test_size)?;
        if !self.full_scale {
            let max_n = self.n_list.iter().copied().max().unwrap_or(0);
            if max_n > DESK_MAX_N || self.replicates > DESK_MAX_REPLICATES {
                return Err(Error::invalid(format!(
                    "n up to {max_n} with {} replicates exceeds the desk-scale limits \
                     (n <= {DESK_MAX_N}, replicates <= {DESK_MAX_REPLICATES}); enable full scale to run it",
                    self.replicates
                )));
            }
        }
        for &n in &self.n_list {
            let spec = SimSpec::new(self.example, n, self.p, self.v_list[0], 0)?.with_sigma(self.sigma)?;
            spec.validate()?;
        }
        for &v in &self.v_list {
            SimSpec::new(self.example, 8, self.p, v, 0)?.validate()?;
        }
        match &self.tuning {
            Tuning::Fixed { mu2, lambda } => {
                FitConfig::new(*mu2, *lambda)?;
            }
            Tuning::CrossValidation { folds, .. } => {
                if *folds < 2 || self.n_list.iter().any(|&n| n < *folds) {
                    return Err(Error::invalid("every n must be at least the fold count (>= 2)"));
                }
            }
        }
        make_grid(self.grid_size)?;
        Ok(())
    }

    /// Dataset seed of one replicate.
    pub fn replicate_seed(&self, v: f64, n: usize, replicate: usize) -> u64 {
        derive_seed(
            self.seed,
            &[entity::REPLICATE, self.example.id() as u64, v.to_bits(), n as u64, replicate as u64],
        )
    }

    /// Test-draw seed; shared across `n` and sketch kinds.
    pub fn test_seed(&self, v: f64, replicate: usize) -> u64 {
        derive_seed(self.seed, &[entity::TEST, self.example.id() as u64, v.to_bits(), replicate as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub example_id: u8,
    pub v: f64,
    pub n: usize,
    pub m: usize,
    pub sketch_kind: SketchKind,
    pub replicate: usize,
    pub seed: u64,
    /// Seconds from data generation through metrics.
    pub wall_time_total: f64,
    /// Seconds spent building `K^c` (shared by the sketch kinds of a replicate).
    pub wall_time_kc: f64,
    /// Seconds spent tuning and fitting.
    pub wall_time_fit: f64,
    pub mu2: Option<f64>,
    pub lambda: Option<f64>,
    pub converged: Option<bool>,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

struct Unit {
    v: f64,
    n: usize,
    replicate: usize,
}

fn kind_code(kind: SketchKind) -> u64 {
    match kind {
        SketchKind::Gaussian => 1,
        SketchKind::Ros => 2,
        SketchKind::Sub => 3,
        SketchKind::Identity => 4,
    }
}

struct SketchRun {
    m: usize,
    mu2: f64,
    lambda: f64,
    converged: bool,
    metrics: MetricsReport,
}

#[allow(clippy::too_many_arguments)]
fn run_sketch(
    cfg: &ExperimentConfig,
    kind: SketchKind,
    ds: &crate::funcdata::FunctionalDataset,
    kc: &crate::kernel::CrossKernelMatrix,
    gram: &KernelGram,
    truth: &SpectralTruth,
    spec: &SimSpec,
    test_seed: u64,
) -> Result<(SketchRun, f64)> {
    let start = Instant::now();
    let mut sketch_spec = SketchSpec::new(kind, cfg.m_policy, derive_seed(spec.seed, &[entity::SKETCH, kind_code(kind), 1]));
    sketch_spec.sigma = cfg.sigma;
    let base = FitConfig::new(1.0, 0.0)?;
    let (mu2, lambda) = match &cfg.tuning {
        Tuning::Fixed { mu2, lambda } => (*mu2, *lambda),
        Tuning::CrossValidation {
            folds,
            mu2_grid,
            lambda_grid,
        } => {
            let n = ds.n();
            let plan = CvPlan::new(
                n,
                *folds,
                mu2_grid.clone().unwrap_or_else(|| crate::tuning::default_mu2_grid(n, ds.p())),
                lambda_grid.clone().unwrap_or_else(|| crate::tuning::default_lambda_grid(n, ds.p())),
                derive_seed(spec.seed, &[entity::FOLDS]),
            )?;
            let out = cross_validate_with_kc(ds, kc, &sketch_spec, &plan, &base)?;
            (out.best_mu2, out.best_lambda)
        }
    };
    let m = sketch_spec.dimension(kc)?;
    let sketch = SketchMatrix::new(kind, m, ds.n(), derive_seed(spec.seed, &[entity::SKETCH, kind_code(kind), 0]))?;
    let config = FitConfig { mu2, lambda, ..base };
    let result = fit(kc, ds.z(), ds.y(), &sketch, &config, None)?;
    let fit_time = start.elapsed().as_secs_f64();
    if !result.converged {
        log::debug!("final fit did not converge (n={}, {kind}, mu2={mu2:e}, lambda={lambda:e})", ds.n());
    }
    let predictor = SlopePredictor::new(gram, ds.x(), &sketch, &result.alpha)?;
    let metrics = evaluate(
        predictor.slope_on_grid().as_slice(),
        result.gamma.as_slice(),
        ds.grid(),
        truth,
        spec,
        cfg.test_size,
        test_seed,
    )?;
    Ok((
        SketchRun {
            m,
            mu2,
            lambda,
            converged: result.converged,
            metrics,
        },
        fit_time,
    ))
}

fn run_unit(cfg: &ExperimentConfig, gram: &KernelGram, unit: &Unit) -> Vec<BenchRecord> {
    let start = Instant::now();
    let seed = cfg.replicate_seed(unit.v, unit.n, unit.replicate);
    let blank = |kind: SketchKind, m: usize, err: String| BenchRecord {
        example_id: cfg.example.id(),
        v: unit.v,
        n: unit.n,
        m,
        sketch_kind: kind,
        replicate: unit.replicate,
        seed,
        wall_time_total: start.elapsed().as_secs_f64(),
        wall_time_kc: 0.0,
        wall_time_fit: 0.0,
        mu2: None,
        lambda: None,
        converged: None,
        metrics: None,
        error: Some(err),
    };
    let prepared = (|| -> Result<_> {
        let spec = SimSpec::new(cfg.example, unit.n, cfg.p, unit.v, seed)?.with_sigma(cfg.sigma)?;
        let (ds, truth) = generate(&spec, gram.grid())?;
        let kc_start = Instant::now();
        let kc = build_kc_with(gram, &ds)?;
        Ok((spec, ds, truth, kc, kc_start.elapsed().as_secs_f64()))
    })();
    let (spec, ds, truth, kc, t_kc) = match prepared {
        Ok(p) => p,
        Err(e) => {
            log::warn!("replicate {} (n={}, v={}) failed: {e}", unit.replicate, unit.n, unit.v);
            return cfg.sketch_kinds.iter().map(|&k| blank(k, 0, e.to_string())).collect();
        }
    };
    let shared = start.elapsed().as_secs_f64();
    let test_seed = cfg.test_seed(unit.v, unit.replicate);

    cfg.sketch_kinds
        .iter()
        .map(|&kind| {
            let t0 = Instant::now();
            let outcome = run_sketch(cfg, kind, &ds, &kc, gram, &truth, &spec, test_seed);
            let total = shared + t0.elapsed().as_secs_f64();
            match outcome {
                Ok((run, t_fit)) => {
                    log::info!(
                        "n={} v={} {kind} rep={} m={} gamma_err={:.4e} slope_err={:.4e} resp_err={:.4e}",
                        unit.n,
                        unit.v,
                        unit.replicate,
                        run.m,
                        run.metrics.gamma_sq_error,
                        run.metrics.slope_pred_error,
                        run.metrics.response_pred_error
                    );
                    BenchRecord {
                        example_id: cfg.example.id(),
                        v: unit.v,
                        n: unit.n,
                        m: run.m,
                        sketch_kind: kind,
                        replicate: unit.replicate,
                        seed,
                        wall_time_total: total,
                        wall_time_kc: t_kc,
                        wall_time_fit: t_fit,
                        mu2: Some(run.mu2),
                        lambda: Some(run.lambda),
                        converged: Some(run.converged),
                        metrics: Some(run.metrics),
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("n={} v={} {kind} rep={} failed: {e}", unit.n, unit.v, unit.replicate);
                    let mut r = blank(kind, 0, e.to_string());
                    r.wall_time_total = total;
                    r.wall_time_kc = t_kc;
                    r
                }
            }
        })
        .collect()
}

fn sort_key(cfg: &ExperimentConfig, r: &BenchRecord) -> (usize, usize, usize, usize) {
    let vi = cfg.v_list.iter().position(|v| *v == r.v).unwrap_or(usize::MAX);
    let ni = cfg.n_list.iter().position(|n| *n == r.n).unwrap_or(usize::MAX);
    let ki = cfg.sketch_kinds.iter().position(|k| *k == r.sketch_kind).unwrap_or(usize::MAX);
    (vi, ni, ki, r.replicate)
}

/// Runs the full factorial sweep. Replicates run in parallel on the current
/// rayon pool; the returned records are sorted by `(v, n, sketch, replicate)`
/// in configuration order. A failed replicate yields records with `error` set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let grid = make_grid(cfg.grid_size)?;
    let gram = KernelGram::new(&KernelFunction::Bernoulli, &grid);
    let units: Vec<Unit> = cfg
        .v_list
        .iter()
        .flat_map(|&v| {
            cfg.n_list.iter().flat_map(move |&n| {
                (0..cfg.replicates).map(move |replicate| Unit { v, n, replicate })
            })
        })
        .collect();
    let mut records: Vec<BenchRecord> = units
        .par_iter()
        .flat_map_iter(|u| run_unit(cfg, &gram, u))
        .collect();
    records.sort_by_key(|r| sort_key(cfg, r));
    Ok(records)
}

pub const RESULTS_HEADER: &str = "example,v,n,m,sketch,replicate,gamma_err,slope_err,resp_err,t_total,t_kc,t_fit";

/// `results.csv` contents. Timing columns stay empty unless `with_timings`,
/// which keeps repeated runs byte-identical.
pub fn results_csv(records: &[BenchRecord], with_timings: bool) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in records {
        let (g, s, y) = match &r.metrics {
            Some(m) => (
                format_f64(m.gamma_sq_error),
                format_f64(m.slope_pred_error),
                format_f64(m.response_pred_error),
            ),
            None => Default::default(),
        };
        let t = |x: f64| if with_timings { format!("{x:.6}") } else { String::new() };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.example_id,
            r.v,
            r.n,
            r.m,
            r.sketch_kind,
            r.replicate,
            g,
            s,
            y,
            t(r.wall_time_total),
            t(r.wall_time_kc),
            t(r.wall_time_fit)
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    Some(Quartiles {
        median,
        q1,
        q3,
        iqr: q3 - q1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub example: u8,
    pub v: f64,
    pub n: usize,
    pub sketch: SketchKind,
    /// Distinct sketch dimensions used in the cell.
    pub m: Vec<usize>,
    pub replicates: usize,
    pub failed: usize,
    pub gamma_err: Option<Quartiles>,
    pub slope_err: Option<Quartiles>,
    pub slope_err_exact: Option<Quartiles>,
    pub resp_err: Option<Quartiles>,
}

/// Per-cell medians and interquartile ranges, in record order.
pub fn summarize(records: &[BenchRecord]) -> Vec<CellSummary> {
    let mut cells: Vec<CellSummary> = Vec::new();
    let mut members: Vec<Vec<&BenchRecord>> = Vec::new();
    for r in records {
        let pos = cells
            .iter()
            .position(|c| c.example == r.example_id && c.v == r.v && c.n == r.n && c.sketch == r.sketch_kind);
        let i = match pos {
            Some(i) => i,
            None => {
                cells.push(CellSummary {
                    example: r.example_id,
                    v: r.v,
                    n: r.n,
                    sketch: r.sketch_kind,
                    m: Vec::new(),
                    replicates: 0,
                    failed: 0,
                    gamma_err: None,
                    slope_err: None,
                    slope_err_exact: None,
                    resp_err: None,
                });
                members.push(Vec::new());
                cells.len() - 1
            }
        };
        members[i].push(r);
    }
    for (cell, rs) in cells.iter_mut().zip(&members) {
        let ok: Vec<&MetricsReport> = rs.iter().filter_map(|r| r.metrics.as_ref()).collect();
        cell.replicates = rs.len();
        cell.failed = rs.len() - ok.len();
        let mut m: Vec<usize> = rs.iter().filter(|r| r.metrics.is_some()).map(|r| r.m).collect();
        m.sort_unstable();
        m.dedup();
        cell.m = m;
        let col = |f: fn(&MetricsReport) -> f64| quartiles(&ok.iter().map(|x| f(x)).collect::<Vec<_>>());
        cell.gamma_err = col(|x| x.gamma_sq_error);
        cell.slope_err = col(|x| x.slope_pred_error);
        cell.slope_err_exact = col(|x| x.slope_pred_error_exact);
        cell.resp_err = col(|x| x.response_pred_error);
    }
    cells
}

/// Writes `results.csv` and `summary.json` into `dir`.
pub fn write_results(dir: &Path, records: &[BenchRecord], with_timings: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("results.csv"), results_csv(records, with_timings).as_bytes())?;
    #[derive(Serialize)]
    struct Summary<'a> {
        cells: &'a [CellSummary],
    }
    write_json(&dir.join("summary.json"), &Summary { cells: &summarize(records) })
}

/// Median of a metric over the successful records of one cell.
pub fn cell_median(
    records: &[BenchRecord],
    v: f64,
    n: usize,
    kind: SketchKind,
    metric: fn(&MetricsReport) -> f64,
) -> Option<f64> {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.v == v && r.n == n && r.sketch_kind == kind)
        .filter_map(|r| r.metrics.as_ref().map(metric))
        .collect();
    quartiles(&vals).map(|q| q.median)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{slope_coefficients, TRUNCATION};

    fn setup(v: f64) -> (Grid, SimSpec, SpectralTruth) {
        let grid = make_grid(1000).unwrap();
        let spec = SimSpec::new(Example::One, 10, 3, v, 1).unwrap();
        let (_, truth) = generate(&spec, &grid).unwrap();
        (grid, spec, truth)
    }

    #[test]
    fn gamma_error_examples() {
        assert_eq!(gamma_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(gamma_error(&[2.0, -2.0, 0.0], &[0.0; 3]).unwrap(), 8.0);
        assert_eq!(
            gamma_error(&[1.0, 3.0, 0.5], &[0.0, 1.0, 2.0]).unwrap(),
            gamma_error(&[0.5, 1.0, 3.0], &[2.0, 0.0, 1.0]).unwrap()
        );
        assert!(gamma_error(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn perfect_slope_has_zero_error() {
        let (grid, spec, truth) = setup(2.0);
        let f = true_slope_on_grid(&grid);
        let e = slope_prediction_error(f.as_slice(), &grid, &truth, &spec, 1000, 3).unwrap();
        assert_eq!(e.exact, 0.0);
        assert_eq!(e.monte_carlo.mean, 0.0);
    }

    #[test]
    fn slope_error_matches_spectral_oracle() {
        let (grid, spec, truth) = setup(2.0);
        let f = true_slope_on_grid(&grid);
        let perturbations: [&dyn Fn(f64) -> f64; 3] = [
            &|t| 0.3 * t,
            &|t| (3.0 * t).sin(),
            &|t| 0.5 - t * t + (2.0f64).sqrt() * (std::f64::consts::PI * t).cos(),
        ];
        for (i, p) in perturbations.iter().enumerate() {
            let slope: Vec<f64> = grid.points().iter().zip(f.iter()).map(|(t, v)| v + p(*t)).collect();
            let e = slope_prediction_error(&slope, &grid, &truth, &spec, DEFAULT_TEST_SIZE, 40 + i as u64).unwrap();
            // independent oracle: projections by direct quadrature of each basis function
            let mut exact = 0.0;
            for k in 1..=TRUNCATION {
                let dk: f64 = grid
                    .points()
                    .iter()
                    .map(|&t| p(t) * crate::simgen::curve_basis(k, t))
                    .sum::<f64>()
                    * grid.weight();
                exact += truth.xi[k - 1].powi(2) * dk * dk;
            }
            assert!((e.exact - exact).abs() < 1e-9 * exact, "{} vs {exact}", e.exact);
            let z = (e.monte_carlo.mean - e.exact).abs() / e.monte_carlo.std_error;
            assert!(z < 3.0, "perturbation {i}: z = {z}");
        }
    }

    #[test]
    fn slope_error_is_quadratic() {
        let (grid, spec, truth) = setup(2.0);
        let f = true_slope_on_grid(&grid);
        let make = |c: f64| -> Vec<f64> {
            grid.points().iter().zip(f.iter()).map(|(t, v)| v + c * (t - 0.3)).collect()
        };
        let a = slope_prediction_error(&make(1.0), &grid, &truth, &spec, 500, 1).unwrap();
        let b = slope_prediction_error(&make(2.0), &grid, &truth, &spec, 500, 1).unwrap();
        assert!((b.exact - 4.0 * a.exact).abs() < 1e-12 * b.exact);
        assert!((b.monte_carlo.mean - 4.0 * a.monte_carlo.mean).abs() < 1e-12 * b.monte_carlo.mean);
    }

    #[test]
    fn perfect_fit_response_error_is_noise_variance() {
        let (grid, spec, truth) = setup(2.0);
        let f = true_slope_on_grid(&grid);
        let e = response_prediction_error(f.as_slice(), &truth.gamma0, &grid, &truth, &spec, DEFAULT_TEST_SIZE, 5).unwrap();
        assert!((e.mean - 1.0).abs() < 3.0 * e.std_error, "{e:?}");
        let again = response_prediction_error(f.as_slice(), &truth.gamma0, &grid, &truth, &spec, DEFAULT_TEST_SIZE, 5).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn zero_predictor_sees_the_response_variance() {
        for ex in [Example::One, Example::Two] {
            let grid = make_grid(1000).unwrap();
            let spec = SimSpec::new(ex, 10, 3, 2.0, 1).unwrap();
            let (_, truth) = generate(&spec, &grid).unwrap();
            let zero = vec![0.0; grid.len()];
            let e = response_prediction_error(&zero, &[0.0; 3], &grid, &truth, &spec, DEFAULT_TEST_SIZE, 6).unwrap();
            // E Y'^2 = sum w_k^2 + E(Z'g0)^2 + 1, with E(Z'g0)^2 = (2-2)^2/4 + (4+4)/12
            let w = truth.signal_weights().norm_squared();
            let expect = w + 8.0 / 12.0 + 1.0;
            assert!(e.mean > 1.0);
            assert!((e.mean - expect).abs() < 3.0 * e.std_error, "{} vs {expect}", e.mean);
        }
        assert_eq!(slope_coefficients().len(), TRUNCATION);
    }

    #[test]
    fn quartile_rules() {
        let q = quartiles(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(q.median, 2.5);
        assert_eq!(q.q1, 1.75);
        assert_eq!(q.q3, 3.25);
        assert!(quartiles(&[]).is_none());
    }

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(Example::One, vec![2.0], vec![32], vec![SketchKind::Gaussian]);
        cfg.replicates = 1;
        cfg.p = 3;
        cfg.grid_size = 64;
        cfg.test_size = 200;
        cfg.tuning = Tuning::Fixed { mu2: 1e-3, lambda: 0.05 };
        cfg
    }

    #[test]
    fn one_cell_one_record() {
        let cfg = tiny_config();
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].metrics.is_some());
        assert_eq!(r[0].m, 3);
        assert!(r[0].wall_time_kc + r[0].wall_time_fit <= r[0].wall_time_total);
        assert!(r[0].wall_time_total > 0.0);
    }

    #[test]
    fn records_are_sorted_and_seeded_per_replicate() {
        let mut cfg = tiny_config();
        cfg.replicates = 3;
        cfg.n_list = vec![40, 32];
        cfg.sketch_kinds = vec![SketchKind::Sub, SketchKind::Gaussian];
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.len(), 12);
        assert_eq!((r[0].n, r[0].sketch_kind, r[0].replicate), (40, SketchKind::Sub, 0));
        assert_eq!((r[11].n, r[11].sketch_kind, r[11].replicate), (32, SketchKind::Gaussian, 2));
        let mut seeds: Vec<u64> = r.iter().filter(|x| x.sketch_kind == SketchKind::Sub).map(|x| x.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 6);
        let csv = results_csv(&r, false);
        assert_eq!(csv.lines().next().unwrap(), RESULTS_HEADER);
        assert!(csv.lines().nth(1).unwrap().ends_with(",,,"));
        assert_eq!(csv, results_csv(&run_experiment(&cfg).unwrap(), false));
    }

    #[test]
    fn desk_scale_caps() {
        let mut cfg = tiny_config();
        cfg.n_list = vec![4096];
        assert!(cfg.validate().is_err());
        cfg.full_scale = true;
        assert!(cfg.validate().is_ok());
        cfg.full_scale = false;
        cfg.n_list = vec![32];
        cfg.replicates = 50;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn summary_groups_cells() {
        let mut cfg = tiny_config();
        cfg.replicates = 2;
        let r = run_experiment(&cfg).unwrap();
        let s = summarize(&r);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].replicates, 2);
        assert_eq!(s[0].m, vec![3]);
        let med = cell_median(&r, 2.0, 32, SketchKind::Gaussian, |m| m.gamma_sq_error).unwrap();
        assert_eq!(med, s[0].gamma_err.unwrap().median);
    }
}
