//! K-fold cross-validation over a `(mu2, lambda)` grid.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcdata::{format_f64, write_atomic, FunctionalDataset};
use crate::kernel::{build_kc, CrossKernelMatrix, KernelFunction};
use crate::rng::{self, entity};
use crate::sketch::{choose_sketch_dim, statistical_dimension, SketchDimPolicy, SketchKind, SketchMatrix};
use crate::solver::{fit, predict_from_cross, FitConfig};

pub const DEFAULT_FOLDS: usize = 5;

/// How each fold's sketch is drawn. `m` is chosen from the training-fold size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SketchSpec {
    pub kind: SketchKind,
    pub policy: SketchDimPolicy,
    pub seed: u64,
    /// Noise level used only by the statistical-dimension policies.
    pub sigma: f64,
}

impl SketchSpec {
    pub fn new(kind: SketchKind, policy: SketchDimPolicy, seed: u64) -> Self {
        SketchSpec {
            kind,
            policy,
            seed,
            sigma: 1.0,
        }
    }

    /// Sketch dimension for a problem with cross-kernel `kc`.
    pub fn dimension(&self, kc: &CrossKernelMatrix) -> Result<usize> {
        let n = kc.n();
        if self.kind == SketchKind::Identity {
            return Ok(n);
        }
        let stat_dim = if self.policy.needs_stat_dim() {
            let eig = kc.empirical_eigenvalues()?;
            Some(statistical_dimension(&eig, self.sigma)?.stat_dim)
        } else {
            None
        };
        choose_sketch_dim(n, &self.policy, stat_dim)
    }

    pub fn draw(&self, m: usize, n: usize, seed: u64) -> Result<SketchMatrix> {
        SketchMatrix::new(self.kind, m, n, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    folds: Vec<Vec<usize>>,
    mu2_grid: Vec<f64>,
    lambda_grid: Vec<f64>,
    seed: u64,
}

/// Seeded shuffle of `0..n` split into `k` contiguous folds whose sizes
/// differ by at most one.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::invalid(format!("cannot split {n} observations into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::substream(seed, &[entity::FOLDS]));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = idx[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

fn pilot_lambda(n: usize, p: usize) -> f64 {
    if p == 0 {
        0.0
    } else {
        ((2.0 * p as f64).ln() / n as f64).sqrt()
    }
}

/// `pilot^2 * 10^j`, `j = -8..=0`, with `pilot = n^(-2/5) + sqrt(log(2p)/n)`.
pub fn default_mu2_grid(n: usize, p: usize) -> Vec<f64> {
    let pilot = (n as f64).powf(-0.4) + pilot_lambda(n, p);
    (-8..=0).map(|j| pilot * pilot * 10f64.powi(j)).collect()
}

/// `sqrt(log(2p)/n) * 10^(j/2)`, `j = -4..=4`; just `{0}` without scalar covariates.
pub fn default_lambda_grid(n: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return vec![0.0];
    }
    let base = pilot_lambda(n, p);
    (-4..=4).map(|j| base * 10f64.powf(j as f64 / 2.0)).collect()
}

fn check_grid(name: &str, grid: &[f64], positive: bool) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid(format!("{name} grid is empty")));
    }
    for &g in grid {
        let ok = g.is_finite() && if positive { g > 0.0 } else { g >= 0.0 };
        if !ok {
            return Err(Error::invalid(format!("bad {name} grid value {g}")));
        }
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid(format!("{name} grid must be ascending")));
    }
    Ok(())
}

impl CvPlan {
    pub fn new(n: usize, k: usize, mu2_grid: Vec<f64>, lambda_grid: Vec<f64>, seed: u64) -> Result<Self> {
        check_grid("mu2", &mu2_grid, true)?;
        check_grid("lambda", &lambda_grid, false)?;
        Ok(CvPlan {
            folds: make_folds(n, k, seed)?,
            mu2_grid,
            lambda_grid,
            seed,
        })
    }

    pub fn with_default_grids(n: usize, p: usize, k: usize, seed: u64) -> Result<Self> {
        Self::new(n, k, default_mu2_grid(n, p), default_lambda_grid(n, p), seed)
    }

    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    pub fn mu2_grid(&self) -> &[f64] {
        &self.mu2_grid
    }

    pub fn lambda_grid(&self) -> &[f64] {
        &self.lambda_grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn n(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub mu2: f64,
    pub lambda: f64,
    /// Held-out mean squared error per fold; `None` where the fit failed.
    pub fold_errors: Vec<Option<f64>>,
    /// Mean over folds; `None` when any fold failed.
    pub mean_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub best_mu2: f64,
    pub best_lambda: f64,
    pub best_error: f64,
    pub table: Vec<CvCell>,
}

/// Seed of the sketch used for one fold at one grid point.
pub fn fold_sketch_seed(base: u64, fold: usize, mu2: f64, lambda: f64) -> u64 {
    rng::derive_seed(base, &[entity::SKETCH, fold as u64, mu2.to_bits(), lambda.to_bits()])
}

struct FoldData {
    train: Vec<usize>,
    held: Vec<usize>,
    kc: CrossKernelMatrix,
    z: DMatrix<f64>,
    y: DVector<f64>,
    cross: DMatrix<f64>,
    z_held: DMatrix<f64>,
    y_held: DVector<f64>,
    m: usize,
}

fn rows_of(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    m.select_rows(rows.iter())
}

fn prepare_folds(
    ds: &FunctionalDataset,
    kc: &CrossKernelMatrix,
    sketch: &SketchSpec,
    plan: &CvPlan,
) -> Result<Vec<FoldData>> {
    plan.folds
        .iter()
        .map(|held| {
            let mut in_fold = vec![false; ds.n()];
            for &i in held {
                in_fold[i] = true;
            }
            let train: Vec<usize> = (0..ds.n()).filter(|&i| !in_fold[i]).collect();
            // Training-row K^c entries do not involve held-out curves.
            let kc_train = kc.principal(&train);
            let m = sketch.dimension(&kc_train)?;
            Ok(FoldData {
                z: rows_of(ds.z(), &train),
                y: ds.y().select_rows(train.iter()),
                cross: kc.block(held, &train),
                z_held: rows_of(ds.z(), held),
                y_held: ds.y().select_rows(held.iter()),
                kc: kc_train,
                train,
                held: held.clone(),
                m,
            })
        })
        .collect()
}

fn fold_error(fd: &FoldData, sketch: &SketchSpec, seed: u64, config: &FitConfig) -> Result<f64> {
    let s = sketch.draw(fd.m, fd.train.len(), seed)?;
    let result = fit(&fd.kc, &fd.z, &fd.y, &s, config, None)?;
    let pred = predict_from_cross(&result, &s, &fd.cross, &fd.z_held)?;
    let err = (pred - &fd.y_held).norm_squared() / fd.held.len() as f64;
    if err.is_finite() {
        Ok(err)
    } else {
        Err(Error::numerical("non-finite held-out error"))
    }
}

/// Cross-validates with a precomputed full-data cross-kernel matrix. Each
/// fold's training matrix is the principal submatrix on its training rows.
pub fn cross_validate_with_kc(
    ds: &FunctionalDataset,
    kc: &CrossKernelMatrix,
    sketch: &SketchSpec,
    plan: &CvPlan,
    base: &FitConfig,
) -> Result<CvOutcome> {
    if kc.n() != ds.n() || plan.n() != ds.n() {
        return Err(Error::invalid("plan, dataset and K^c disagree on n"));
    }
    let folds = prepare_folds(ds, kc, sketch, plan)?;
    let cells: Vec<(f64, f64)> = plan
        .mu2_grid
        .iter()
        .flat_map(|&mu2| plan.lambda_grid.iter().map(move |&lambda| (mu2, lambda)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..folds.len()).map(move |f| (c, f)))
        .collect();

    let errors: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let (mu2, lambda) = cells[c];
            let config = FitConfig {
                mu2,
                lambda,
                ..base.clone()
            };
            let seed = fold_sketch_seed(sketch.seed, f, mu2, lambda);
            match fold_error(&folds[f], sketch, seed, &config) {
                Ok(e) => Some(e),
                Err(e) => {
                    log::warn!("cv fit failed (mu2={mu2:e}, lambda={lambda:e}, fold {f}): {e}");
                    None
                }
            }
        })
        .collect();

    let k = folds.len();
    let table: Vec<CvCell> = cells
        .iter()
        .enumerate()
        .map(|(c, &(mu2, lambda))| {
            let fold_errors = errors[c * k..(c + 1) * k].to_vec();
            let mean_error = fold_errors
                .iter()
                .copied()
                .sum::<Option<f64>>()
                .map(|s| s / k as f64);
            CvCell {
                mu2,
                lambda,
                fold_errors,
                mean_error,
            }
        })
        .collect();

    let best = select_best(&table)?;
    Ok(CvOutcome {
        best_mu2: best.mu2,
        best_lambda: best.lambda,
        best_error: best.mean_error.expect("selected cell is valid"),
        table,
    })
}

/// Lowest mean error; ties go to the larger `mu2`, then the larger `lambda`.
fn select_best(table: &[CvCell]) -> Result<&CvCell> {
    table
        .iter()
        .filter(|c| c.mean_error.is_some())
        .min_by(|a, b| {
            let (ea, eb) = (a.mean_error.unwrap(), b.mean_error.unwrap());
            ea.total_cmp(&eb)
                .then(b.mu2.total_cmp(&a.mu2))
                .then(b.lambda.total_cmp(&a.lambda))
        })
        .ok_or_else(|| Error::numerical("every cross-validation cell failed"))
}

pub fn cross_validate(
    ds: &FunctionalDataset,
    kernel: &KernelFunction,
    sketch: &SketchSpec,
    plan: &CvPlan,
    base: &FitConfig,
) -> Result<CvOutcome> {
    let kc = build_kc(kernel, ds)?;
    cross_validate_with_kc(ds, &kc, sketch, plan, base)
}

/// CSV with columns `mu2,lambda,fold_1..fold_k,mean_error`; failed entries are empty.
pub fn cv_table_csv(table: &[CvCell]) -> String {
    let k = table.first().map_or(0, |c| c.fold_errors.len());
    let mut out = String::from("mu2,lambda");
    for f in 1..=k {
        out.push_str(&format!(",fold_{f}"));
    }
    out.push_str(",mean_error\n");
    let cell = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
    for c in table {
        out.push_str(&format_f64(c.mu2));
        out.push(',');
        out.push_str(&format_f64(c.lambda));
        for e in &c.fold_errors {
            out.push(',');
            out.push_str(&cell(*e));
        }
        out.push(',');
        out.push_str(&cell(c.mean_error));
        out.push('\n');
    }
    out
}

pub fn write_cv_table(path: &Path, table: &[CvCell]) -> Result<()> {
    write_atomic(path, cv_table_csv(table).as_bytes())
}
