//! Reproducing kernels on `[0, 1]`, the data-driven basis functions
//! `B_k(t) = <X_k, K(t, .)>` and the cross-kernel matrix
//! `K^c_ik = <X_i, B_k> = int int X_i(t) X_k(u) K(t, u) du dt`.

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::funcdata::{FunctionalDataset, Grid};

/// Relative tolerance below which negative eigenvalues of `K^c` are clipped.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Fourth Bernoulli polynomial, `x^4 - 2x^3 + x^2 - 1/30`, on `[0, 1]`.
pub fn bernoulli_b4(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid(format!("B4 is defined on [0, 1], got {x}")));
    }
    Ok(b4(x))
}

#[inline]
fn b4(x: f64) -> f64 {
    let x2 = x * x;
    x2 * x2 - 2.0 * x2 * x + x2 - 1.0 / 30.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralBasis {
    /// `sqrt(2) cos(l pi t)`, `l >= 1`.
    Cosine,
    /// `sqrt(2) sin(l pi t)`, `l >= 1`.
    Sine,
}

impl SpectralBasis {
    #[inline]
    pub fn eval(self, l: usize, t: f64) -> f64 {
        let arg = l as f64 * PI * t;
        match self {
            SpectralBasis::Cosine => SQRT_2 * arg.cos(),
            SpectralBasis::Sine => SQRT_2 * arg.sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelFunction {
    /// `K(s,t) = -B4(|s-t|/2)/3 - B4((s+t)/2)/3
    ///         = sum_k 2 (k pi)^-4 cos(k pi s) cos(k pi t)`.
    Bernoulli,
    /// `K(s,t) = sum_l theta[l-1] phi_l(s) phi_l(t)` for a finite eigenvalue
    /// sequence and an orthonormal trigonometric basis.
    Spectral {
        theta: Vec<f64>,
        basis: SpectralBasis,
    },
}

impl KernelFunction {
    /// Finite spectral kernel; eigenvalues must be finite and nonnegative.
    pub fn spectral(theta: Vec<f64>, basis: SpectralBasis) -> Result<Self> {
        if theta.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::invalid("kernel eigenvalues must be finite and >= 0"));
        }
        Ok(KernelFunction::Spectral { theta, basis })
    }

    /// The truncated cosine series of the Bernoulli kernel, `theta_l = (l pi)^-4`.
    pub fn bernoulli_series(terms: usize) -> Self {
        let theta = (1..=terms).map(|l| (l as f64 * PI).powi(-4)).collect();
        KernelFunction::Spectral {
            theta,
            basis: SpectralBasis::Cosine,
        }
    }

    pub fn eval(&self, s: f64, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!(
                "kernel arguments must lie in [0, 1], got ({s}, {t})"
            )));
        }
        Ok(self.eval_unchecked(s, t))
    }

    #[inline]
    fn eval_unchecked(&self, s: f64, t: f64) -> f64 {
        match self {
            KernelFunction::Bernoulli => -(b4((s - t).abs() / 2.0) + b4((s + t) / 2.0)) / 3.0,
            KernelFunction::Spectral { theta, basis } => theta
                .iter()
                .enumerate()
                .map(|(i, th)| th * basis.eval(i + 1, s) * basis.eval(i + 1, t))
                .sum(),
        }
    }
}

/// Free-function form of [`KernelFunction::eval`].
pub fn kernel_eval(kernel: &KernelFunction, s: f64, t: f64) -> Result<f64> {
    kernel.eval(s, t)
}

/// The kernel evaluated on every pair of grid points.
#[derive(Debug, Clone)]
pub struct KernelGram {
    grid: Grid,
    values: DMatrix<f64>,
}

impl KernelGram {
    pub fn new(kernel: &KernelFunction, grid: &Grid) -> Self {
        let g = grid.len();
        let pts = grid.points();
        let mut values = DMatrix::zeros(g, g);
        for b in 0..g {
            for a in b..g {
                let v = kernel.eval_unchecked(pts[a], pts[b]);
                values[(a, b)] = v;
                values[(b, a)] = v;
            }
        }
        KernelGram {
            grid: grid.clone(),
            values,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    fn check_grid(&self, cols: usize) -> Result<()> {
        if cols != self.grid.len() {
            return Err(Error::invalid(format!(
                "curves have {cols} samples but the kernel grid has {}",
                self.grid.len()
            )));
        }
        Ok(())
    }

    /// Rows of `W * X * K_grid`: the basis functions `B_k` on the grid.
    pub fn basis(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_grid(x.ncols())?;
        Ok((x * &self.values) * self.grid.weight())
    }

    /// `W^2 X K_grid X'`, symmetrized.
    pub fn cross_kernel(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_grid(x.ncols())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("curve samples must be finite"));
        }
        let w = self.grid.weight();
        let xk = x * &self.values;
        let mut m = (&xk * x.transpose()) * (w * w);
        symmetrize(&mut m);
        Ok(m)
    }

    /// `k_j = int int x_new(t) X_j(u) K(t, u) du dt` for every training curve.
    pub fn cross_vector(&self, x_train: &DMatrix<f64>, x_new: &[f64]) -> Result<DVector<f64>> {
        self.check_grid(x_train.ncols())?;
        self.check_grid(x_new.len())?;
        let w = self.grid.weight();
        let kx = &self.values * DVector::from_column_slice(x_new);
        Ok((x_train * kx) * (w * w))
    }

    /// Evaluates `f(t) = sum_k c_k B_k(t)` on the grid.
    pub fn expand(&self, x_train: &DMatrix<f64>, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_grid(x_train.ncols())?;
        if coeffs.len() != x_train.nrows() {
            return Err(Error::invalid(format!(
                "{} coefficients for {} curves",
                coeffs.len(),
                x_train.nrows()
            )));
        }
        let combined = x_train.tr_mul(coeffs);
        Ok((&self.values * combined) * self.grid.weight())
    }
}

/// Replaces `m` by `(m + m') / 2` with a fixed evaluation order.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Basis functions `B_k` of every dataset curve, one row per curve.
pub fn basis_functions(kernel: &KernelFunction, ds: &FunctionalDataset) -> Result<DMatrix<f64>> {
    if ds.n() == 0 {
        return Err(Error::invalid("dataset is empty"));
    }
    KernelGram::new(kernel, ds.grid()).basis(ds.x())
}

/// Eigendecomposition of `K^c` with eigenvalues sorted descending and clipped at zero.
#[derive(Debug, Clone)]
pub struct KcSpectrum {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

/// The `n x n` cross-kernel matrix. The eigendecomposition is computed on
/// first request and cached.
#[derive(Debug, Clone)]
pub struct CrossKernelMatrix {
    values: DMatrix<f64>,
    spectrum: OnceLock<KcSpectrum>,
}

impl CrossKernelMatrix {
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::invalid("cross-kernel matrix must be square"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cross-kernel matrix has non-finite entries"));
        }
        let scale = values.amax();
        let n = values.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                if (values[(i, j)] - values[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::invalid("cross-kernel matrix is not symmetric"));
                }
            }
        }
        Ok(CrossKernelMatrix {
            values,
            spectrum: OnceLock::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Principal submatrix on `rows` (the cross-kernel of that subset of curves).
    pub fn principal(&self, rows: &[usize]) -> CrossKernelMatrix {
        CrossKernelMatrix {
            values: self.values.select_rows(rows).select_columns(rows),
            spectrum: OnceLock::new(),
        }
    }

    /// Block `K^c[rows, cols]`.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        self.values.select_rows(rows).select_columns(cols)
    }

    /// Eigendecomposition; fails when an eigenvalue is below `-1e-8 * mu_1`.
    pub fn spectrum(&self) -> Result<&KcSpectrum> {
        if let Some(s) = self.spectrum.get() {
            return Ok(s);
        }
        let s = decompose(&self.values)?;
        Ok(self.spectrum.get_or_init(|| s))
    }

    /// Empirical kernel eigenvalues `mu_j / n`, descending.
    pub fn empirical_eigenvalues(&self) -> Result<Vec<f64>> {
        let n = self.n() as f64;
        Ok(self.spectrum()?.eigenvalues.iter().map(|e| e / n).collect())
    }

    /// Eigenvalues before clipping (ascending order not guaranteed).
    pub fn raw_eigenvalues(&self) -> DVector<f64> {
        self.values.clone().symmetric_eigenvalues()
    }
}

fn decompose(values: &DMatrix<f64>) -> Result<KcSpectrum> {
    let n = values.nrows();
    if n == 0 {
        return Ok(KcSpectrum {
            eigenvalues: DVector::zeros(0),
            eigenvectors: DMatrix::zeros(0, 0),
        });
    }
    let eig = values.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let bottom = eig.eigenvalues[order[n - 1]];
    if bottom < -PSD_TOLERANCE * top.max(0.0) {
        return Err(Error::numerical(format!(
            "cross-kernel matrix is indefinite: smallest eigenvalue {bottom:e}, largest {top:e}"
        )));
    }
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i].max(0.0)));
    let eigenvectors = eig.eigenvectors.select_columns(&order);
    Ok(KcSpectrum {
        eigenvalues,
        eigenvectors,
    })
}

/// Assembles `K^c` for `ds` by midpoint quadrature.
pub fn build_kc(kernel: &KernelFunction, ds: &FunctionalDataset) -> Result<CrossKernelMatrix> {
    if ds.n() == 0 {
        return Err(Error::invalid("dataset is empty"));
    }
    build_kc_with(&KernelGram::new(kernel, ds.grid()), ds)
}

/// As [`build_kc`] with a precomputed grid Gram matrix.
pub fn build_kc_with(gram: &KernelGram, ds: &FunctionalDataset) -> Result<CrossKernelMatrix> {
    let values = gram.cross_kernel(ds.x())?;
    Ok(CrossKernelMatrix {
        values,
        spectrum: OnceLock::new(),
    })
}

/// `K^c` from spectral coordinates: `sum_l theta_l c_il c_kl`, where
/// `coeffs[(i, l)] = <X_i, phi_l>`.
pub fn kc_spectral_oracle(theta: &[f64], coeffs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if coeffs.ncols() != theta.len() {
        return Err(Error::invalid(format!(
            "{} eigenvalues for {} coefficient columns",
            theta.len(),
            coeffs.ncols()
        )));
    }
    let mut scaled = coeffs.clone();
    for (l, th) in theta.iter().enumerate() {
        scaled.column_mut(l).scale_mut(*th);
    }
    Ok(scaled * coeffs.transpose())
}
