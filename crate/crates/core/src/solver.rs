//! Alternating solver for the sketched estimator
//!
//! ```text
//! min_{alpha in R^m, gamma in R^p}
//!     (1/n) || y - Z gamma - (S K)' alpha ||^2
//!   + mu2 alpha' (S K S') alpha + lambda ||gamma||_1
//! ```
//!
//! where `K = K^c` and `S` is an `m x n` sketch (`S = I` gives the exact
//! problem). Each outer iteration solves for `alpha` in closed form with `gamma`
//! fixed, then runs proximal-gradient steps on `gamma` with `alpha` fixed.
//! Everything that does not depend on `(alpha, gamma)` is assembled once in
//! [`SketchedProblem`], so an outer iteration costs `O(m^2 + p^2 + n (m + p))`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{symmetrize, CrossKernelMatrix, KernelFunction, KernelGram};
use crate::funcdata::FunctionalDataset;
use crate::sketch::{identity_sketch, SketchId, SketchMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LipschitzPolicy {
    /// `D = (2/n) lambda_max(Z'Z)` by power iteration.
    ExactPowerIteration,
    /// Start at `d0` and multiply by `eta` until the quadratic upper bound holds.
    Backtracking { eta: f64, d0: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub mu2: f64,
    pub lambda: f64,
    pub max_outer: usize,
    /// Relative objective change below which the outer loop may stop.
    pub tol: f64,
    /// Initial diagonal regularizer of the alpha system, relative to its mean diagonal.
    pub jitter: f64,
    pub max_jitter: f64,
    pub lipschitz: LipschitzPolicy,
    /// Fixed-point residual that ends the inner gamma loop.
    pub inner_tol: f64,
    pub max_inner: usize,
    /// Both optimality residuals must be below this before the fit counts as converged.
    pub kkt_tol: f64,
}

impl FitConfig {
    pub fn new(mu2: f64, lambda: f64) -> Result<Self> {
        let cfg = FitConfig {
            mu2,
            lambda,
            max_outer: 500,
            tol: 1e-8,
            jitter: 1e-10,
            max_jitter: 1e-4,
            lipschitz: LipschitzPolicy::ExactPowerIteration,
            inner_tol: 1e-9,
            max_inner: 200,
            kkt_tol: 1e-6,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu2 > 0.0) || !self.mu2.is_finite() {
            return Err(Error::invalid(format!("mu2 must be positive, got {}", self.mu2)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tol > 0.0) || !(self.inner_tol > 0.0) || !(self.kkt_tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if !(self.jitter > 0.0) || !(self.max_jitter >= self.jitter) {
            return Err(Error::invalid("need 0 < jitter <= max_jitter"));
        }
        if let LipschitzPolicy::Backtracking { eta, d0 } = self.lipschitz {
            if !(eta > 1.0) || !(d0 > 0.0) {
                return Err(Error::invalid("backtracking needs eta > 1 and d0 > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// Normwise backward error of the alpha normal equations,
    /// `||A alpha - b|| / (||A||_F ||alpha|| + ||b||)`.
    pub alpha_res: f64,
    /// `|| gamma - prox(gamma - grad / D) ||_inf`.
    pub gamma_res: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub alpha: DVector<f64>,
    pub gamma: DVector<f64>,
    /// Objective at the initial point followed by one value per outer iteration.
    pub objective_trace: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
    pub sketch: SketchId,
    pub mu2: f64,
    pub lambda: f64,
    pub kkt: KktResiduals,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

#[derive(Serialize, Deserialize)]
struct FitResultWire {
    alpha: Vec<f64>,
    gamma: Vec<f64>,
    sketch: SketchId,
    mu2: f64,
    lambda: f64,
    n_iter: usize,
    converged: bool,
    objective_trace: Vec<f64>,
    kkt: KktResiduals,
}

impl Serialize for FitResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FitResultWire {
            alpha: self.alpha.as_slice().to_vec(),
            gamma: self.gamma.as_slice().to_vec(),
            sketch: self.sketch,
            mu2: self.mu2,
            lambda: self.lambda,
            n_iter: self.n_iter,
            converged: self.converged,
            objective_trace: self.objective_trace.clone(),
            kkt: self.kkt,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FitResult {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = FitResultWire::deserialize(d)?;
        if w.objective_trace.is_empty() {
            return Err(serde::de::Error::custom("objective_trace must not be empty"));
        }
        Ok(FitResult {
            alpha: DVector::from_vec(w.alpha),
            gamma: DVector::from_vec(w.gamma),
            objective_trace: w.objective_trace,
            n_iter: w.n_iter,
            converged: w.converged,
            sketch: w.sketch,
            mu2: w.mu2,
            lambda: w.lambda,
            kkt: w.kkt,
        })
    }
}

/// Componentwise `sign(u) (|u| - t)_+`.
pub fn soft_threshold(u: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("threshold must be >= 0, got {t}")));
    }
    Ok(soft(u, t))
}

fn soft(u: &DVector<f64>, t: f64) -> DVector<f64> {
    u.map(|v| v.signum() * (v.abs() - t).max(0.0))
}

fn l1(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
fn power_iteration(a: &DMatrix<f64>, rel_tol: f64, max_steps: usize) -> Result<f64> {
    let p = a.nrows();
    if p == 0 {
        return Ok(0.0);
    }
    // Fixed, non-degenerate start so that the result is reproducible.
    let mut v = DVector::from_fn(p, |i, _| 1.0 + 0.5 * ((i + 1) as f64).sin());
    v.normalize_mut();
    let mut rho = 0.0;
    for _ in 0..max_steps {
        let w = a * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = w / norm;
        if (next - rho).abs() <= rel_tol * next.abs() {
            return Ok(next.max(norm));
        }
        rho = next;
    }
    Err(Error::numerical(format!(
        "power iteration did not converge in {max_steps} steps"
    )))
}

/// Everything about one `(K^c, Z, y, S, mu2)` instance that does not change
/// while iterating.
#[derive(Debug, Clone)]
pub struct SketchedProblem {
    n: usize,
    mu2: f64,
    lambda: f64,
    /// `S K`, `m x n`.
    sk: DMatrix<f64>,
    /// `sym(S K S')`.
    penalty: DMatrix<f64>,
    /// `(S K)(S K)' + n mu2 sym(S K S')`.
    system: DMatrix<f64>,
    factor: Option<Cholesky<f64, Dyn>>,
    jitter_used: f64,
    sky: DVector<f64>,
    skz: DMatrix<f64>,
    ztz: DMatrix<f64>,
    zty: DVector<f64>,
    z: DMatrix<f64>,
    y: DVector<f64>,
    sketch: SketchId,
}

impl SketchedProblem {
    pub fn new(
        kc: &CrossKernelMatrix,
        z: &DMatrix<f64>,
        y: &DVector<f64>,
        sketch: &SketchMatrix,
        config: &FitConfig,
    ) -> Result<Self> {
        let sk = sketch.apply(kc.values())?;
        Self::assemble(sk, sketch, z, y, config)
    }

    /// The unsketched problem, `S = I_n`, without forming `S`.
    pub fn exact(
        kc: &CrossKernelMatrix,
        z: &DMatrix<f64>,
        y: &DVector<f64>,
        config: &FitConfig,
    ) -> Result<Self> {
        let n = kc.n();
        let id = SketchId {
            kind: crate::sketch::SketchKind::Identity,
            m: n,
            seed: 0,
        };
        Self::assemble_with(kc.values().clone(), kc.values().clone(), id, z, y, config)
    }

    fn assemble(
        sk: DMatrix<f64>,
        sketch: &SketchMatrix,
        z: &DMatrix<f64>,
        y: &DVector<f64>,
        config: &FitConfig,
    ) -> Result<Self> {
        // S K S' = S (S K)' because K is symmetric.
        let sks = sketch.apply(&sk.transpose())?;
        Self::assemble_with(sk, sks, sketch.id(), z, y, config)
    }

    fn assemble_with(
        sk: DMatrix<f64>,
        mut penalty: DMatrix<f64>,
        sketch: SketchId,
        z: &DMatrix<f64>,
        y: &DVector<f64>,
        config: &FitConfig,
    ) -> Result<Self> {
        config.validate()?;
        let n = sk.ncols();
        if n == 0 {
            return Err(Error::invalid("empty problem"));
        }
        if z.nrows() != n || y.len() != n {
            return Err(Error::invalid(format!(
                "shape mismatch: K^c is {n} x {n}, Z has {} rows, y has {}",
                z.nrows(),
                y.len()
            )));
        }
        symmetrize(&mut penalty);
        let mut system = &sk * sk.transpose();
        system += &penalty * (n as f64 * config.mu2);
        symmetrize(&mut system);
        let (factor, jitter_used) = factorize(&system, config)?;
        let ztz = z.tr_mul(z);
        Ok(SketchedProblem {
            n,
            mu2: config.mu2,
            lambda: config.lambda,
            sky: &sk * y,
            skz: &sk * z,
            zty: z.tr_mul(y),
            ztz,
            z: z.clone(),
            y: y.clone(),
            sk,
            penalty,
            system,
            factor,
            jitter_used,
            sketch,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.sk.nrows()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    /// `S K^c`.
    pub fn sketched_kernel(&self) -> &DMatrix<f64> {
        &self.sk
    }

    /// Diagonal regularizer actually added to the alpha system.
    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    fn check_shapes(&self, alpha: &DVector<f64>, gamma: &DVector<f64>) -> Result<()> {
        if alpha.len() != self.m() || gamma.len() != self.p() {
            return Err(Error::invalid(format!(
                "expected alpha of length {} and gamma of length {}, got {} and {}",
                self.m(),
                self.p(),
                alpha.len(),
                gamma.len()
            )));
        }
        Ok(())
    }

    /// The full objective, evaluated through the residual vector.
    pub fn objective(&self, alpha: &DVector<f64>, gamma: &DVector<f64>) -> Result<f64> {
        self.check_shapes(alpha, gamma)?;
        Ok(self.objective_unchecked(alpha, gamma))
    }

    fn objective_unchecked(&self, alpha: &DVector<f64>, gamma: &DVector<f64>) -> f64 {
        let mut r = &self.y - &self.z * gamma;
        r.gemv_tr(-1.0, &self.sk, alpha, 1.0);
        let pen = alpha.dot(&(&self.penalty * alpha));
        r.norm_squared() / self.n as f64 + self.mu2 * pen + self.lambda * l1(gamma)
    }

    fn rhs(&self, gamma: &DVector<f64>) -> DVector<f64> {
        &self.sky - &self.skz * gamma
    }

    /// Minimizer over `alpha` with `gamma` fixed.
    pub fn alpha_update(&self, gamma: &DVector<f64>) -> Result<DVector<f64>> {
        if gamma.len() != self.p() {
            return Err(Error::invalid("gamma has the wrong length"));
        }
        let b = self.rhs(gamma);
        Ok(match &self.factor {
            Some(f) => f.solve(&b),
            None => DVector::zeros(self.m()),
        })
    }

    pub fn alpha_residual(&self, alpha: &DVector<f64>, gamma: &DVector<f64>) -> f64 {
        let b = self.rhs(gamma);
        let r = &self.system * alpha - &b;
        let denom = self.system.norm() * alpha.norm() + b.norm();
        if denom == 0.0 {
            0.0
        } else {
            r.norm() / denom
        }
    }

    /// `grad_gamma = (2/n) (Z'(SK)' alpha + Z'Z gamma - Z'y)`.
    pub fn gamma_gradient(&self, alpha: &DVector<f64>, gamma: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_shapes(alpha, gamma)?;
        Ok(self.gradient_unchecked(alpha, gamma))
    }

    fn gradient_unchecked(&self, alpha: &DVector<f64>, gamma: &DVector<f64>) -> DVector<f64> {
        let mut g = &self.ztz * gamma - &self.zty;
        g.gemv_tr(1.0, &self.skz, alpha, 1.0);
        g * (2.0 / self.n as f64)
    }

    /// Smooth part of the objective in `gamma`, up to terms free of `gamma`.
    fn smooth_gamma(&self, alpha: &DVector<f64>, gamma: &DVector<f64>) -> f64 {
        let n = self.n as f64;
        let cross = alpha.dot(&(&self.skz * gamma));
        let quad = gamma.dot(&(&self.ztz * gamma));
        (2.0 * cross - 2.0 * self.zty.dot(gamma) + quad) / n
    }

    /// `(2/n) lambda_max(Z'Z)`, the exact Lipschitz constant of the gamma gradient.
    pub fn lipschitz(&self) -> Result<f64> {
        let top = power_iteration(&self.ztz, 1e-8, 10_000)?;
        Ok(2.0 / self.n as f64 * top)
    }

    fn prox_step(&self, alpha: &DVector<f64>, gamma: &DVector<f64>, d: f64) -> DVector<f64> {
        let g = self.gradient_unchecked(alpha, gamma);
        soft(&(gamma - g / d), self.lambda / d)
    }

    /// One proximal step from `gamma`; with backtracking, `d` is increased in
    /// place until the quadratic upper bound holds.
    fn gamma_step(
        &self,
        alpha: &DVector<f64>,
        gamma: &DVector<f64>,
        d: &mut f64,
        policy: LipschitzPolicy,
    ) -> DVector<f64> {
        match policy {
            LipschitzPolicy::ExactPowerIteration => self.prox_step(alpha, gamma, *d),
            LipschitzPolicy::Backtracking { eta, .. } => {
                let g = self.gradient_unchecked(alpha, gamma);
                let f0 = self.smooth_gamma(alpha, gamma);
                loop {
                    let next = soft(&(gamma - &g / *d), self.lambda / *d);
                    let delta = &next - gamma;
                    let bound = f0 + g.dot(&delta) + 0.5 * *d * delta.norm_squared();
                    let f1 = self.smooth_gamma(alpha, &next);
                    if f1 <= bound + 1e-15 * f0.abs().max(1.0) {
                        return next;
                    }
                    *d *= eta;
                }
            }
        }
    }

    /// `|| gamma - prox(gamma - grad / D) ||_inf`.
    pub fn gamma_residual(&self, alpha: &DVector<f64>, gamma: &DVector<f64>, d: f64) -> f64 {
        let next = self.prox_step(alpha, gamma, d);
        (next - gamma).amax()
    }

    fn initial_d(&self, policy: LipschitzPolicy) -> Result<f64> {
        let d = match policy {
            LipschitzPolicy::ExactPowerIteration => self.lipschitz()?,
            LipschitzPolicy::Backtracking { d0, .. } => d0,
        };
        // A zero design leaves the smooth part constant in gamma; any step works.
        Ok(if d > 0.0 { d } else { 1.0 })
    }

    /// Runs the alternating solver from `init` (zeros by default).
    pub fn solve(
        &self,
        config: &FitConfig,
        init: Option<(DVector<f64>, DVector<f64>)>,
    ) -> Result<FitResult> {
        let (mut alpha, mut gamma) =
            init.unwrap_or_else(|| (DVector::zeros(self.m()), DVector::zeros(self.p())));
        self.check_shapes(&alpha, &gamma)?;
        let mut d = self.initial_d(config.lipschitz)?;
        let mut current = self.objective_unchecked(&alpha, &gamma);
        if !current.is_finite() {
            return Err(Error::numerical("objective is not finite at the initial point"));
        }
        let mut trace = vec![current];
        let mut converged = false;
        let mut n_iter = 0;
        let mut kkt = KktResiduals {
            alpha_res: f64::INFINITY,
            gamma_res: f64::INFINITY,
        };

        for it in 1..=config.max_outer {
            n_iter = it;
            let candidate = self.alpha_update(&gamma)?;
            // The jittered solve is not an exact minimizer; never accept an increase.
            if self.objective_unchecked(&candidate, &gamma) <= current {
                alpha = candidate;
            }

            for _ in 0..config.max_inner {
                let next = self.gamma_step(&alpha, &gamma, &mut d, config.lipschitz);
                let step = (&next - &gamma).amax();
                gamma = next;
                if step < config.inner_tol {
                    break;
                }
            }

            let value = self.objective_unchecked(&alpha, &gamma);
            if !value.is_finite() {
                return Err(Error::numerical(format!("objective diverged at iteration {it}")));
            }
            let change = (current - value).abs() / current.abs().max(f64::MIN_POSITIVE);
            current = value;
            trace.push(value);

            kkt = KktResiduals {
                alpha_res: self.alpha_residual(&alpha, &gamma),
                gamma_res: self.gamma_residual(&alpha, &gamma, d),
            };
            if change < config.tol && kkt.alpha_res <= config.kkt_tol && kkt.gamma_res <= config.kkt_tol
            {
                converged = true;
                break;
            }
        }

        Ok(FitResult {
            alpha,
            gamma,
            objective_trace: trace,
            n_iter,
            converged,
            sketch: self.sketch,
            mu2: self.mu2,
            lambda: self.lambda,
            kkt,
        })
    }
}

/// Cholesky factor of `system + jitter * mean_diag * I`, escalating the
/// jitter tenfold until the factorization succeeds. `None` for a zero system.
fn factorize(system: &DMatrix<f64>, config: &FitConfig) -> Result<(Option<Cholesky<f64, Dyn>>, f64)> {
    let m = system.nrows();
    let scale = system.trace() / m as f64;
    if scale == 0.0 && system.amax() == 0.0 {
        return Ok((None, 0.0));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::numerical("alpha system has a non-positive or non-finite diagonal"));
    }
    let mut rel = config.jitter;
    while rel <= config.max_jitter * (1.0 + 1e-12) {
        let shift = rel * scale;
        let mut shifted = system.clone();
        for i in 0..m {
            shifted[(i, i)] += shift;
        }
        if let Some(f) = Cholesky::new(shifted) {
            return Ok((Some(f), shift));
        }
        rel *= 10.0;
    }
    Err(Error::numerical(format!(
        "alpha system is not positive definite even with relative jitter {:e}",
        config.max_jitter
    )))
}

/// Sketched objective at `(alpha, gamma)`, computed directly from its definition.
pub fn objective(
    kc: &CrossKernelMatrix,
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    sketch: &SketchMatrix,
    alpha: &DVector<f64>,
    gamma: &DVector<f64>,
    config: &FitConfig,
) -> Result<f64> {
    let n = kc.n();
    if z.nrows() != n || y.len() != n || alpha.len() != sketch.m() || gamma.len() != z.ncols() {
        return Err(Error::invalid("shape mismatch in objective arguments"));
    }
    let sk = sketch.apply(kc.values())?;
    let mut pen = sketch.apply(&sk.transpose())?;
    symmetrize(&mut pen);
    let r = y - z * gamma - sk.tr_mul(alpha);
    Ok(r.norm_squared() / n as f64
        + config.mu2 * alpha.dot(&(&pen * alpha))
        + config.lambda * l1(gamma))
}

pub fn alpha_update(
    kc: &CrossKernelMatrix,
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    sketch: &SketchMatrix,
    gamma: &DVector<f64>,
    config: &FitConfig,
) -> Result<DVector<f64>> {
    SketchedProblem::new(kc, z, y, sketch, config)?.alpha_update(gamma)
}

pub fn gamma_gradient(
    kc: &CrossKernelMatrix,
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    sketch: &SketchMatrix,
    alpha: &DVector<f64>,
    gamma: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = kc.n();
    if z.nrows() != n || y.len() != n || alpha.len() != sketch.m() || gamma.len() != z.ncols() {
        return Err(Error::invalid("shape mismatch in gradient arguments"));
    }
    let sk = sketch.apply(kc.values())?;
    let fitted = z * gamma + sk.tr_mul(alpha) - y;
    Ok(z.tr_mul(&fitted) * (2.0 / n as f64))
}

/// One proximal-gradient step on `gamma`.
pub fn gamma_update(
    kc: &CrossKernelMatrix,
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    sketch: &SketchMatrix,
    alpha: &DVector<f64>,
    gamma: &DVector<f64>,
    config: &FitConfig,
) -> Result<DVector<f64>> {
    let problem = SketchedProblem::new(kc, z, y, sketch, config)?;
    problem.check_shapes(alpha, gamma)?;
    let mut d = problem.initial_d(config.lipschitz)?;
    Ok(problem.gamma_step(alpha, gamma, &mut d, config.lipschitz))
}

/// Fits the sketched estimator.
pub fn fit(
    kc: &CrossKernelMatrix,
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    sketch: &SketchMatrix,
    config: &FitConfig,
    init: Option<(DVector<f64>, DVector<f64>)>,
) -> Result<FitResult> {
    SketchedProblem::new(kc, z, y, sketch, config)?.solve(config, init)
}

/// Fits the unsketched estimator (`alpha` in `R^n`).
pub fn fit_exact(
    kc: &CrossKernelMatrix,
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    config: &FitConfig,
) -> Result<FitResult> {
    SketchedProblem::exact(kc, z, y, config)?.solve(config, None)
}

/// The fitted slope `f(t) = sum_k (S' alpha)_k B_k(t)`.
#[derive(Debug, Clone)]
pub struct SlopePredictor {
    coeffs: DVector<f64>,
    slope: DVector<f64>,
    weight: f64,
}

impl SlopePredictor {
    pub fn new(
        gram: &KernelGram,
        x_train: &DMatrix<f64>,
        sketch: &SketchMatrix,
        alpha: &DVector<f64>,
    ) -> Result<Self> {
        if sketch.n() != x_train.nrows() {
            return Err(Error::invalid("sketch and training curves disagree on n"));
        }
        let coeffs = sketch.transpose_apply(alpha)?;
        let slope = gram.expand(x_train, &coeffs)?;
        Ok(SlopePredictor {
            coeffs,
            slope,
            weight: gram.grid().weight(),
        })
    }

    /// Combined representer coefficients `S' alpha`.
    pub fn coefficients(&self) -> &DVector<f64> {
        &self.coeffs
    }

    pub fn slope_on_grid(&self) -> &DVector<f64> {
        &self.slope
    }

    /// Quadrature of `int x_new(t) f(t) dt`.
    pub fn functional_part(&self, x_new: &[f64]) -> Result<f64> {
        if x_new.len() != self.slope.len() {
            return Err(Error::invalid("curve length does not match the grid"));
        }
        Ok(self.weight * self.slope.iter().zip(x_new).map(|(a, b)| a * b).sum::<f64>())
    }
}

/// Predicts one response: `<x_new, f> + z_new' gamma`, with
/// `<x_new, f> = c' k` and `k_j = int int x_new(t) X_j(u) K(t, u)`.
pub fn predict(
    fit: &FitResult,
    sketch: &SketchMatrix,
    ds_train: &FunctionalDataset,
    kernel: &KernelFunction,
    x_new: &[f64],
    z_new: &[f64],
) -> Result<f64> {
    if x_new.len() != ds_train.grid().len() {
        return Err(Error::invalid(format!(
            "new curve has {} samples, the training grid has {}",
            x_new.len(),
            ds_train.grid().len()
        )));
    }
    if z_new.len() != fit.gamma.len() {
        return Err(Error::invalid("scalar covariates have the wrong length"));
    }
    let gram = KernelGram::new(kernel, ds_train.grid());
    let k = gram.cross_vector(ds_train.x(), x_new)?;
    let c = sketch.transpose_apply(&fit.alpha)?;
    let zpart: f64 = z_new.iter().zip(fit.gamma.iter()).map(|(a, b)| a * b).sum();
    Ok(c.dot(&k) + zpart)
}

/// Batch predictions from precomputed cross-kernel rows: row `i` of `cross`
/// holds `int int x_i(t) X_j(u) K(t, u)` against every training curve `j`.
pub fn predict_from_cross(
    fit: &FitResult,
    sketch: &SketchMatrix,
    cross: &DMatrix<f64>,
    z_new: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if cross.ncols() != sketch.n() || z_new.nrows() != cross.nrows() || z_new.ncols() != fit.gamma.len() {
        return Err(Error::invalid("shape mismatch in batch prediction"));
    }
    let c = sketch.transpose_apply(&fit.alpha)?;
    Ok(cross * c + z_new * &fit.gamma)
}

/// Identity sketch for `n` observations.
pub fn no_sketch(n: usize) -> Result<SketchMatrix> {
    identity_sketch(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::{gaussian_sketch, SketchKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, rank: usize, rng: &mut ChaCha8Rng) -> CrossKernelMatrix {
        let f = DMatrix::from_fn(n, rank, |_, _| rng.random::<f64>() - 0.5);
        let mut k = &f * f.transpose();
        symmetrize(&mut k);
        CrossKernelMatrix::from_values(k).unwrap()
    }

    fn instance(n: usize, p: usize, seed: u64) -> (CrossKernelMatrix, DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kc = random_psd(n, n, &mut rng);
        let z = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        (kc, z, y)
    }

    #[test]
    fn soft_threshold_examples() {
        let u = DVector::from_vec(vec![3.0, -0.5, 0.0]);
        assert_eq!(soft_threshold(&u, 1.0).unwrap().as_slice(), &[2.0, 0.0, 0.0]);
        assert_eq!(soft_threshold(&u, 0.0).unwrap(), u);
        assert!(soft_threshold(&u, -1.0).is_err());
        let neg = DVector::from_vec(vec![-3.0]);
        assert_eq!(soft_threshold(&neg, 1.0).unwrap()[0], -2.0);
    }

    #[test]
    fn soft_threshold_is_the_l1_prox() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let u: f64 = rng.random::<f64>() * 6.0 - 3.0;
            let t: f64 = rng.random::<f64>() * 2.0;
            // grid search of 0.5 (u - v)^2 + t |v|
            let mut best = (f64::INFINITY, 0.0);
            for i in 0..=80_000 {
                let v = -4.0 + i as f64 * 1e-4;
                let f = 0.5 * (u - v).powi(2) + t * v.abs();
                if f < best.0 {
                    best = (f, v);
                }
            }
            let prox = soft_threshold(&DVector::from_vec(vec![u]), t).unwrap()[0];
            assert!((prox - best.1).abs() <= 1e-4, "u={u} t={t}: {prox} vs {}", best.1);
        }
    }

    #[test]
    fn objective_at_origin() {
        let (kc, z, y) = instance(6, 2, 3);
        let s = gaussian_sketch(3, 6, 1).unwrap();
        let cfg = FitConfig::new(0.1, 0.2).unwrap();
        let f = objective(&kc, &z, &y, &s, &DVector::zeros(3), &DVector::zeros(2), &cfg).unwrap();
        assert!((f - y.norm_squared() / 6.0).abs() < 1e-15);
        assert!(objective(&kc, &z, &y, &s, &DVector::zeros(2), &DVector::zeros(2), &cfg).is_err());
    }

    #[test]
    fn objective_agrees_with_problem_form() {
        let (kc, z, y) = instance(7, 3, 4);
        let s = gaussian_sketch(4, 7, 2).unwrap();
        let cfg = FitConfig::new(0.05, 0.3).unwrap();
        let prob = SketchedProblem::new(&kc, &z, &y, &s, &cfg).unwrap();
        let a = DVector::from_vec(vec![0.3, -1.0, 0.2, 0.7]);
        let g = DVector::from_vec(vec![1.0, 0.0, -0.4]);
        let direct = objective(&kc, &z, &y, &s, &a, &g, &cfg).unwrap();
        assert!((prob.objective(&a, &g).unwrap() - direct).abs() < 1e-13);

        let bumped = DVector::from_vec(vec![1.5, 0.0, -0.4]);
        let cfg0 = FitConfig { lambda: 0.0, ..cfg.clone() };
        let d_l = objective(&kc, &z, &y, &s, &a, &bumped, &cfg).unwrap()
            - objective(&kc, &z, &y, &s, &a, &g, &cfg).unwrap();
        let d_0 = objective(&kc, &z, &y, &s, &a, &bumped, &cfg0).unwrap()
            - objective(&kc, &z, &y, &s, &a, &g, &cfg0).unwrap();
        assert!((d_l - d_0 - 0.3 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn scalar_alpha_update() {
        let kc = CrossKernelMatrix::from_values(DMatrix::from_element(1, 1, 2.0)).unwrap();
        let z = DMatrix::zeros(1, 0);
        let y = DVector::from_element(1, 4.0);
        let s = no_sketch(1).unwrap();
        let cfg = FitConfig::new(1.0, 0.0).unwrap();
        let a = alpha_update(&kc, &z, &y, &s, &DVector::zeros(0), &cfg).unwrap();
        assert!((a[0] - 4.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn interpolation_zeroes_the_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let kc = random_psd(4, 4, &mut rng);
        let z = DMatrix::from_fn(4, 2, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(4, |_, _| rng.random::<f64>());
        let gamma = DVector::from_vec(vec![0.4, -0.1]);
        let r = &y - &z * &gamma;
        let alpha = kc.values().clone().lu().solve(&r).unwrap();
        let n = 4.0;
        let resid = (&r - kc.values() * &alpha).norm_squared() / n;
        assert!(resid < 1e-20);
        let cfg = FitConfig::new(1e-300, 0.0).unwrap();
        let s = no_sketch(4).unwrap();
        let f = objective(&kc, &z, &y, &s, &alpha, &gamma, &cfg).unwrap();
        assert!(f < 1e-12);
    }

    #[test]
    fn alpha_update_vanishes_on_exact_scalar_fit() {
        let (kc, z, _) = instance(5, 2, 9);
        let gamma = DVector::from_vec(vec![1.5, -0.5]);
        let y = &z * &gamma;
        let s = gaussian_sketch(3, 5, 4).unwrap();
        let cfg = FitConfig::new(0.01, 0.0).unwrap();
        let a = alpha_update(&kc, &z, &y, &s, &gamma, &cfg).unwrap();
        assert!(a.amax() < 1e-12);
    }

    #[test]
    fn alpha_update_is_stationary() {
        let (kc, z, y) = instance(8, 3, 10);
        let s = gaussian_sketch(4, 8, 5).unwrap();
        let cfg = FitConfig::new(0.02, 0.1).unwrap();
        let gamma = DVector::from_vec(vec![0.3, 0.0, -0.2]);
        let a = alpha_update(&kc, &z, &y, &s, &gamma, &cfg).unwrap();
        let h = 1e-6;
        let mut grad = DVector::zeros(4);
        for i in 0..4 {
            let mut ap = a.clone();
            ap[i] += h;
            let mut am = a.clone();
            am[i] -= h;
            grad[i] = (objective(&kc, &z, &y, &s, &ap, &gamma, &cfg).unwrap()
                - objective(&kc, &z, &y, &s, &am, &gamma, &cfg).unwrap())
                / (2.0 * h);
        }
        assert!(grad.norm() <= 1e-6, "{grad}");
    }

    #[test]
    fn gradient_special_cases() {
        let (kc, _, y) = instance(6, 3, 12);
        let s = gaussian_sketch(2, 6, 1).unwrap();
        let zero_z = DMatrix::zeros(6, 3);
        let a = DVector::from_vec(vec![1.0, -2.0]);
        let g = DVector::from_vec(vec![0.5, 0.5, 0.5]);
        assert_eq!(gamma_gradient(&kc, &zero_z, &y, &s, &a, &g).unwrap().amax(), 0.0);
        let (_, z, _) = instance(6, 3, 13);
        let at_zero = gamma_gradient(&kc, &z, &y, &s, &DVector::zeros(2), &DVector::zeros(3)).unwrap();
        let expect = z.tr_mul(&y) * (-2.0 / 6.0);
        assert!((at_zero - expect).amax() < 1e-15);
    }

    #[test]
    fn gamma_update_fixed_point_and_shrinkage() {
        let (kc, z, y) = instance(10, 3, 14);
        let s = gaussian_sketch(3, 10, 2).unwrap();
        let cfg0 = FitConfig::new(0.1, 0.0).unwrap();
        let prob = SketchedProblem::new(&kc, &z, &y, &s, &cfg0).unwrap();
        let a = prob.alpha_update(&DVector::zeros(3)).unwrap();
        // Least-squares gamma given alpha makes the gradient vanish.
        let target = &y - prob.sketched_kernel().tr_mul(&a);
        let ls = z.clone().svd(true, true).solve(&target, 1e-14).unwrap();
        let next = gamma_update(&kc, &z, &y, &s, &a, &ls, &cfg0).unwrap();
        assert!((next - &ls).amax() < 1e-12);

        let g0 = prob.gamma_gradient(&a, &DVector::zeros(3)).unwrap();
        let big = FitConfig::new(0.1, 10.0 * g0.amax()).unwrap();
        let mut gamma = DVector::from_vec(vec![2.0, -1.0, 0.5]);
        for _ in 0..500 {
            gamma = gamma_update(&kc, &z, &y, &s, &a, &gamma, &big).unwrap();
        }
        assert_eq!(gamma.amax(), 0.0);
    }

    #[test]
    fn single_coordinate_gamma_matches_grid_search() {
        let (kc, z, y) = instance(9, 1, 15);
        let s = gaussian_sketch(3, 9, 3).unwrap();
        let cfg = FitConfig::new(0.05, 0.05).unwrap();
        let prob = SketchedProblem::new(&kc, &z, &y, &s, &cfg).unwrap();
        let a = prob.alpha_update(&DVector::zeros(1)).unwrap();
        let mut g = DVector::zeros(1);
        for _ in 0..2000 {
            g = gamma_update(&kc, &z, &y, &s, &a, &g, &cfg).unwrap();
        }
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=100_000 {
            let v = -5.0 + i as f64 * 1e-4;
            let f = prob.objective(&a, &DVector::from_element(1, v)).unwrap();
            if f < best.0 {
                best = (f, v);
            }
        }
        assert!((g[0] - best.1).abs() <= 1e-4, "{} vs {}", g[0], best.1);
    }

    #[test]
    fn zero_response_fits_zero() {
        let (kc, z, _) = instance(8, 3, 16);
        let y = DVector::zeros(8);
        let s = gaussian_sketch(2, 8, 3).unwrap();
        let r = fit(&kc, &z, &y, &s, &FitConfig::new(0.1, 0.1).unwrap(), None).unwrap();
        assert_eq!(r.alpha.amax(), 0.0);
        assert_eq!(r.gamma.amax(), 0.0);
        assert_eq!(r.objective(), 0.0);
        assert!(r.converged);
    }

    #[test]
    fn traces_are_monotone_and_kkt_holds() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 6 + (seed as usize % 10);
            let p = 1 + (seed as usize % 4);
            let (kc, z, y) = instance(n, p, 200 + seed);
            let m = 1 + rng.random_range(0..n);
            let kind = [SketchKind::Gaussian, SketchKind::Ros, SketchKind::Sub][seed as usize % 3];
            let s = SketchMatrix::new(kind, m, n, seed).unwrap();
            let mut cfg = FitConfig::new(10f64.powf(-rng.random_range(1.0..4.0)), rng.random::<f64>() * 0.2).unwrap();
            if seed % 2 == 1 {
                cfg.lipschitz = LipschitzPolicy::Backtracking { eta: 2.0, d0: 1.0 };
            }
            let r = fit(&kc, &z, &y, &s, &cfg, None).unwrap();
            for w in r.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "seed {seed}: {} -> {}", w[0], w[1]);
            }
            if r.converged {
                assert!(r.kkt.alpha_res <= 1e-6 && r.kkt.gamma_res <= 1e-6);
            }
        }
    }

    #[test]
    fn identity_sketch_equals_exact_fit() {
        let (kc, z, y) = instance(10, 3, 21);
        let cfg = FitConfig::new(0.01, 0.05).unwrap();
        let a = fit(&kc, &z, &y, &no_sketch(10).unwrap(), &cfg, None).unwrap();
        let b = fit_exact(&kc, &z, &y, &cfg).unwrap();
        assert!((a.objective() - b.objective()).abs() < 1e-10);
        assert_eq!(a.sketch.kind, SketchKind::Identity);
    }

    #[test]
    fn kernel_ridge_special_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let n = 12;
        let kc = random_psd(n, n, &mut rng);
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let z = DMatrix::zeros(n, 0);
        let mu2 = 0.01;
        let cfg = FitConfig::new(mu2, 0.0).unwrap();
        let r = fit_exact(&kc, &z, &y, &cfg).unwrap();
        let shifted = kc.values() + DMatrix::identity(n, n) * (n as f64 * mu2);
        let kr = shifted.cholesky().unwrap().solve(&y);
        let a = kc.values() * kc.values() + kc.values() * (n as f64 * mu2);
        let b = kc.values() * &y;
        let rel = (&a * &kr - &b).norm() / b.norm();
        assert!(rel < 1e-8);
        let prob = SketchedProblem::exact(&kc, &z, &y, &cfg).unwrap();
        let f_kr = prob.objective(&kr, &DVector::zeros(0)).unwrap();
        assert!((r.objective() - f_kr).abs() < 1e-10 * f_kr.max(1.0));
    }

    #[test]
    fn heavy_smoothing_shrinks_the_kernel_part() {
        let (kc, z, y) = instance(10, 2, 31);
        let mut last = f64::INFINITY;
        for mu2 in [1e-3, 1e-1, 1e1, 1e3] {
            let r = fit_exact(&kc, &z, &y, &FitConfig::new(mu2, 0.01).unwrap()).unwrap();
            let size = (kc.values() * &r.alpha).norm();
            assert!(size < last);
            last = size;
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn unscaled_lambda_zero_solution_is_homogeneous() {
        let (kc, z, y) = instance(9, 2, 32);
        let s = gaussian_sketch(4, 9, 1).unwrap();
        let cfg = FitConfig {
            tol: 1e-14,
            inner_tol: 1e-12,
            kkt_tol: 1e-9,
            max_outer: 20_000,
            ..FitConfig::new(0.05, 0.0).unwrap()
        };
        let a = fit(&kc, &z, &y, &s, &cfg, None).unwrap();
        let b = fit(&kc, &z, &(&y * 3.0), &s, &cfg, None).unwrap();
        assert!(a.converged && b.converged);
        assert!((&b.gamma - &a.gamma * 3.0).amax() < 1e-5 * a.gamma.amax().max(1.0));
        let sk = s.apply(kc.values()).unwrap();
        let fa = sk.tr_mul(&a.alpha);
        let fb = sk.tr_mul(&b.alpha);
        assert!((fb - fa * 3.0).amax() < 1e-5 * (y.amax() * 3.0));
    }

    #[test]
    fn power_iteration_matches_eigen() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let z = DMatrix::from_fn(30, 6, |_, _| rng.random::<f64>());
        let a = z.tr_mul(&z);
        let top = power_iteration(&a, 1e-12, 10_000).unwrap();
        let exact = a.clone().symmetric_eigenvalues().max();
        assert!((top - exact).abs() < 1e-8 * exact);
        assert_eq!(power_iteration(&DMatrix::zeros(3, 3), 1e-8, 10).unwrap(), 0.0);
    }

    #[test]
    fn fit_result_json_layout() {
        let (kc, z, y) = instance(5, 2, 41);
        let s = gaussian_sketch(2, 5, 9).unwrap();
        let r = fit(&kc, &z, &y, &s, &FitConfig::new(0.1, 0.1).unwrap(), None).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["alpha", "gamma", "sketch", "mu2", "lambda", "n_iter", "converged", "objective_trace", "kkt"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["sketch"]["kind"], "grs");
        assert_eq!(v["sketch"]["m"], 2);
        assert_eq!(v["sketch"]["seed"], 9);
        assert!(v["kkt"].get("alpha_res").is_some());
        let back: FitResult = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::new(0.0, 0.1).is_err());
        assert!(FitConfig::new(0.1, -0.1).is_err());
        let mut c = FitConfig::new(0.1, 0.1).unwrap();
        c.tol = 0.0;
        assert!(c.validate().is_err());
    }
}
