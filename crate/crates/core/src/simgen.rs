//! Synthetic data for the two simulation designs.
//!
//! Both designs use the slope `f*(t) = sum_{k<=50} 4 (-1)^(k+1) k^-2 sqrt2 cos(k pi t)`
//! and curves `X(t) = xi_1 U_1 + sum_{k=2}^{50} xi_k U_k sqrt2 cos(k pi t)` with
//! `U_k ~ U(-sqrt3, sqrt3)`, scalar covariates `z_ij ~ U(0, 1)` and Gaussian noise.
//! They differ only in the score scales `xi_k`.
//!
//! Responses are computed from the exact inner products of `f*` with the curve
//! basis, never by quadrature, so grid error only ever enters the estimator.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcdata::{DatasetMeta, FunctionalDataset, Grid};
use crate::rng::{self, entity};

/// Number of basis terms in the curve and slope expansions.
pub const TRUNCATION: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Example {
    /// Well-spaced scores `xi_k = (-1)^(k+1) k^(-v/2)`.
    One,
    /// Closely spaced scores, constant over blocks of five.
    Two,
}

impl Example {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Example::One),
            2 => Ok(Example::Two),
            other => Err(Error::invalid(format!("unknown example id {other}"))),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Example::One => 1,
            Example::Two => 2,
        }
    }
}

fn alternating(k: usize) -> f64 {
    if k % 2 == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Score scales `xi_1..xi_50` of the given example.
pub fn xi_sequence(example_id: u8, v: f64) -> Result<Vec<f64>> {
    let example = Example::from_id(example_id)?;
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::invalid(format!("v must be positive, got {v}")));
    }
    Ok((1..=TRUNCATION)
        .map(|k| {
            let kf = k as f64;
            match example {
                Example::One => alternating(k) * kf.powf(-v / 2.0),
                Example::Two => match k {
                    1 => 1.0,
                    2..=4 => 0.2 * alternating(k) * (1.0 - 0.0001 * kf),
                    _ => {
                        let block = (5 * (k / 5)) as f64;
                        0.2 * alternating(k) * (block.powf(-v / 2.0) - 0.0001 * (k % 5) as f64)
                    }
                },
            }
        })
        .collect())
}

/// Cosine coefficients `g_k = 4 (-1)^(k+1) k^-2` of the true slope.
pub fn slope_coefficients() -> Vec<f64> {
    (1..=TRUNCATION)
        .map(|k| 4.0 * alternating(k) / (k as f64).powi(2))
        .collect()
}

/// `k`-th curve basis function (1-based): the constant for `k = 1`,
/// `sqrt2 cos(k pi t)` otherwise.
pub fn curve_basis(k: usize, t: f64) -> f64 {
    if k == 1 {
        1.0
    } else {
        SQRT_2 * (k as f64 * PI * t).cos()
    }
}

/// The curve basis on a grid, `TRUNCATION x G`.
pub fn curve_basis_on_grid(grid: &Grid) -> DMatrix<f64> {
    let pts = grid.points();
    DMatrix::from_fn(TRUNCATION, grid.len(), |k, a| curve_basis(k + 1, pts[a]))
}

/// Exact `int f*(t) e_k(t) dt` for the curve basis `e_k`.
pub fn slope_curve_products() -> Vec<f64> {
    let g = slope_coefficients();
    (1..=TRUNCATION)
        .map(|k| if k == 1 { 0.0 } else { g[k - 1] })
        .collect()
}

/// `f*` on the grid.
pub fn true_slope_on_grid(grid: &Grid) -> DVector<f64> {
    let g = slope_coefficients();
    grid.sample(|t| {
        g.iter()
            .enumerate()
            .rev()
            .map(|(i, gk)| gk * SQRT_2 * ((i + 1) as f64 * PI * t).cos())
            .sum()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub example: Example,
    pub n: usize,
    pub p: usize,
    pub v: f64,
    pub sigma: f64,
    pub seed: u64,
    pub gamma0: Vec<f64>,
}

impl SimSpec {
    /// Design with `sigma = 1` and `gamma0 = (2, -2, 0, ..., 0)`.
    pub fn new(example: Example, n: usize, p: usize, v: f64, seed: u64) -> Result<Self> {
        if p < 2 {
            return Err(Error::invalid(format!("the default gamma0 needs p >= 2, got {p}")));
        }
        let mut gamma0 = vec![0.0; p];
        gamma0[0] = 2.0;
        gamma0[1] = -2.0;
        let spec = SimSpec {
            example,
            n,
            p,
            v,
            sigma: 1.0,
            seed,
            gamma0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        self.sigma = sigma;
        self.validate()?;
        Ok(self)
    }

    pub fn with_gamma0(mut self, gamma0: Vec<f64>) -> Result<Self> {
        self.p = gamma0.len();
        self.gamma0 = gamma0;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n must be positive"));
        }
        if self.gamma0.len() != self.p {
            return Err(Error::invalid("gamma0 length must equal p"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        xi_sequence(self.example.id(), self.v).map(|_| ())
    }

    pub fn xi(&self) -> Vec<f64> {
        xi_sequence(self.example.id(), self.v).expect("validated spec")
    }
}

/// Ground truth behind a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralTruth {
    pub g: Vec<f64>,
    pub xi: Vec<f64>,
    pub gamma0: Vec<f64>,
    #[serde(skip)]
    pub u_draws: DMatrix<f64>,
}

impl SpectralTruth {
    /// Weights `w_k` such that `int f* X = sum_k w_k U_k`.
    pub fn signal_weights(&self) -> DVector<f64> {
        let products = slope_curve_products();
        DVector::from_iterator(
            TRUNCATION,
            self.xi.iter().zip(&products).map(|(x, p)| x * p),
        )
    }

    /// Exact `int f* X_i` for every generated curve.
    pub fn functional_signal(&self) -> DVector<f64> {
        &self.u_draws * self.signal_weights()
    }

    /// Exact `<X_i, sqrt2 cos(l pi .)>` for `l = 1..=50`.
    pub fn cosine_coefficients(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.u_draws.nrows(), TRUNCATION, |i, l| {
            if l == 0 {
                0.0
            } else {
                self.xi[l] * self.u_draws[(i, l)]
            }
        })
    }
}

/// Fresh draws of `(U, Z, eps)` for `count` observations.
#[derive(Debug, Clone)]
pub struct Draws {
    pub u: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub eps: DVector<f64>,
}

/// Draws `(U, Z, eps)` from the streams derived from `seed`; each matrix is
/// filled row-major from its own stream.
pub fn draw(spec: &SimSpec, count: usize, seed: u64) -> Draws {
    let root3 = 3f64.sqrt();
    let unif_u = Uniform::new(-root3, root3).expect("valid range");
    let mut s = rng::substream(seed, &[entity::U]);
    let mut u = DMatrix::zeros(count, TRUNCATION);
    for i in 0..count {
        for k in 0..TRUNCATION {
            u[(i, k)] = unif_u.sample(&mut s);
        }
    }
    let mut s = rng::substream(seed, &[entity::Z]);
    let mut z = DMatrix::zeros(count, spec.p);
    for i in 0..count {
        for j in 0..spec.p {
            z[(i, j)] = s.random::<f64>();
        }
    }
    let mut s = rng::substream(seed, &[entity::EPSILON]);
    let eps = DVector::from_iterator(
        count,
        (0..count).map(|_| {
            let e: f64 = StandardNormal.sample(&mut s);
            spec.sigma * e
        }),
    );
    Draws { u, z, eps }
}

/// Generates a dataset on `grid` together with its ground truth.
pub fn generate(spec: &SimSpec, grid: &Grid) -> Result<(FunctionalDataset, SpectralTruth)> {
    spec.validate()?;
    let xi = spec.xi();
    let Draws { u, z, eps } = draw(spec, spec.n, spec.seed);
    let truth = SpectralTruth {
        g: slope_coefficients(),
        xi,
        gamma0: spec.gamma0.clone(),
        u_draws: u,
    };

    let scores = scaled_scores(&truth.u_draws, &truth.xi);
    let x = scores * curve_basis_on_grid(grid);
    let gamma0 = DVector::from_column_slice(&spec.gamma0);
    let y = truth.functional_signal() + &z * gamma0 + eps;

    let meta = DatasetMeta {
        example_id: Some(spec.example.id()),
        v: Some(spec.v),
        seed: Some(spec.seed),
        sigma: Some(spec.sigma),
    };
    let ds = FunctionalDataset::new(grid.clone(), x, z, y, meta)?;
    Ok((ds, truth))
}

/// `xi_k U_ik`, the basis coordinates of each curve.
pub fn scaled_scores(u: &DMatrix<f64>, xi: &[f64]) -> DMatrix<f64> {
    let mut c = u.clone();
    for (k, x) in xi.iter().enumerate() {
        c.column_mut(k).scale_mut(*x);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcdata::make_grid;

    #[test]
    fn xi_examples() {
        let one = xi_sequence(1, 2.0).unwrap();
        assert!((one[2] - 1.0 / 3.0).abs() < 1e-15);
        assert!((one[1] + 0.5).abs() < 1e-15);
        for v in [1.1, 2.0, 4.0] {
            assert_eq!(xi_sequence(1, v).unwrap()[0], 1.0);
            assert_eq!(xi_sequence(2, v).unwrap()[0], 1.0);
        }
        let two = xi_sequence(2, 2.0).unwrap();
        assert!((two[4] - 0.04).abs() < 1e-15);
        assert!((two[1] + 0.2 * (1.0 - 0.0002)).abs() < 1e-15);
        // k = 7: 0.2 * (+1) * (5^-1 - 0.0002)
        assert!((two[6] - 0.2 * (0.2 - 0.0002)).abs() < 1e-15);
        // k = 10: 0.2 * (-1) * 10^-1
        assert!((two[9] + 0.02).abs() < 1e-15);
        assert!(xi_sequence(3, 2.0).is_err());
        assert!(xi_sequence(1, 0.0).is_err());
    }

    #[test]
    fn uniform_scores_have_unit_variance() {
        let spec = SimSpec::new(Example::One, 2000, 2, 2.0, 5).unwrap();
        let d = draw(&spec, 2000, 5);
        let draws = d.u.as_slice();
        assert_eq!(draws.len(), 100_000);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.02, "{var}");
        let bound = 3f64.sqrt();
        assert!(draws.iter().all(|v| v.abs() < bound));
        assert!(d.z.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn exact_signal_matches_quadrature() {
        let grid = make_grid(1000).unwrap();
        for example in [Example::One, Example::Two] {
            let spec = SimSpec::new(example, 40, 3, 1.1, 9)
                .unwrap()
                .with_sigma(0.0)
                .unwrap()
                .with_gamma0(vec![0.0; 3])
                .unwrap();
            let (ds, truth) = generate(&spec, &grid).unwrap();
            let slope = true_slope_on_grid(&grid);
            for i in 0..ds.n() {
                let row: Vec<f64> = ds.x().row(i).iter().copied().collect();
                let quad = grid.integrate_product(&row, slope.as_slice()).unwrap();
                assert!((quad - ds.y()[i]).abs() < 1e-6, "{quad} vs {}", ds.y()[i]);
                assert!((truth.functional_signal()[i] - ds.y()[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let grid = make_grid(50).unwrap();
        let spec = SimSpec::new(Example::Two, 10, 4, 2.0, 77).unwrap();
        let (a, _) = generate(&spec, &grid).unwrap();
        let (b, _) = generate(&spec, &grid).unwrap();
        assert_eq!(a, b);
        let other = SimSpec { seed: 78, ..spec };
        assert_ne!(generate(&other, &grid).unwrap().0, a);
        assert_eq!(a.meta().example_id, Some(2));
    }

    #[test]
    fn true_slope_endpoints_and_norm() {
        let partial: f64 = (1..=50).map(|k| alternating(k) / (k as f64).powi(2)).sum();
        let sum_sq: f64 = (1..=50).map(|k| 1.0 / (k as f64).powi(2)).sum();
        assert!((partial - 0.822_27).abs() < 1e-3);
        let tiny = Grid::midpoint(2).unwrap();
        let coeffs = slope_coefficients();
        let at = |t: f64| -> f64 {
            coeffs
                .iter()
                .enumerate()
                .map(|(i, g)| g * SQRT_2 * ((i + 1) as f64 * PI * t).cos())
                .sum()
        };
        assert!((at(0.0) - 4.0 * SQRT_2 * partial).abs() < 1e-12);
        assert!((at(1.0) + 4.0 * SQRT_2 * sum_sq).abs() < 1e-12);
        assert!((true_slope_on_grid(&tiny)[0] - at(0.25)).abs() < 1e-12);

        let grid = make_grid(1000).unwrap();
        let f = true_slope_on_grid(&grid);
        let norm2 = grid.integrate_product(f.as_slice(), f.as_slice()).unwrap();
        let parseval: f64 = (1..=50).map(|k| 16.0 / (k as f64).powi(4)).sum();
        assert!((norm2 - parseval).abs() < 1e-6);
    }

    #[test]
    fn cosine_coefficients_match_quadrature() {
        let grid = make_grid(1000).unwrap();
        let spec = SimSpec::new(Example::One, 5, 2, 2.0, 3).unwrap();
        let (ds, truth) = generate(&spec, &grid).unwrap();
        let coeffs = truth.cosine_coefficients();
        for l in 1..=50 {
            let phi = grid.sample(|t| SQRT_2 * (l as f64 * PI * t).cos());
            for i in 0..5 {
                let row: Vec<f64> = ds.x().row(i).iter().copied().collect();
                let q = grid.integrate_product(&row, phi.as_slice()).unwrap();
                assert!((q - coeffs[(i, l - 1)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SimSpec::new(Example::One, 10, 1, 2.0, 0).is_err());
        assert!(SimSpec::new(Example::One, 0, 3, 2.0, 0).is_err());
        assert!(SimSpec::new(Example::One, 10, 3, -1.0, 0).is_err());
        let s = SimSpec::new(Example::One, 10, 3, 2.0, 0).unwrap();
        assert_eq!(s.gamma0, vec![2.0, -2.0, 0.0]);
        assert!(s.clone().with_sigma(-1.0).is_err());
    }
}
