//! Kernel complexity, critical radius and statistical dimension of an
//! empirical kernel spectrum, and the rules that turn them into a sketch size.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bracket width at which the critical-radius bisection stops.
pub const RADIUS_TOLERANCE: f64 = 1e-10;

fn check_spectrum(eigenvalues: &[f64]) -> Result<()> {
    if eigenvalues.is_empty() {
        return Err(Error::invalid("empty eigenvalue sequence"));
    }
    if eigenvalues.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("eigenvalues must be finite and nonnegative"));
    }
    if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::invalid("eigenvalues must be sorted in descending order"));
    }
    Ok(())
}

#[inline]
fn complexity(eigenvalues: &[f64], delta: f64) -> f64 {
    let s: f64 = eigenvalues.iter().map(|&mu| mu.min(delta)).sum();
    (s / eigenvalues.len() as f64).sqrt()
}

/// `R(delta) = sqrt(mean_j min(delta, mu_j))`.
pub fn kernel_complexity(eigenvalues: &[f64], delta: f64) -> Result<f64> {
    check_spectrum(eigenvalues)?;
    if !(delta >= 0.0) {
        return Err(Error::invalid(format!("delta must be >= 0, got {delta}")));
    }
    Ok(complexity(eigenvalues, delta))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Smallest `delta > 0` with `R(delta) <= delta^2 / sigma`, by bisection.
///
/// `R(delta) / delta^2` is strictly decreasing, so the feasible set is a
/// half-line and the returned value is its left end up to
/// [`RADIUS_TOLERANCE`] (always on the feasible side).
pub fn critical_radius(eigenvalues: &[f64], sigma: f64) -> Result<f64> {
    check_spectrum(eigenvalues)?;
    check_sigma(sigma)?;
    if eigenvalues[0] == 0.0 {
        return Ok(0.0);
    }
    let feasible = |d: f64| complexity(eigenvalues, d) <= d * d / sigma;
    let mut hi = f64::max(1.0, (sigma * complexity(eigenvalues, eigenvalues[0]) * 2.0).sqrt());
    while !feasible(hi) {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > RADIUS_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatDimReport {
    pub sigma: f64,
    pub critical_radius: f64,
    pub stat_dim: usize,
    /// `(delta, R(delta))` samples on a log scale around the critical radius.
    pub complexity_curve: Vec<(f64, f64)>,
}

/// Critical radius and `d_n = min { j : mu_j <= delta_n^2 }` (1-based, `n` if empty).
pub fn statistical_dimension(eigenvalues: &[f64], sigma: f64) -> Result<StatDimReport> {
    let radius = critical_radius(eigenvalues, sigma)?;
    let threshold = radius * radius;
    let stat_dim = eigenvalues
        .iter()
        .position(|&mu| mu <= threshold)
        .map_or(eigenvalues.len(), |j| j + 1);
    let centre = if radius > 0.0 { radius } else { eigenvalues[0].max(1e-12) };
    let complexity_curve = (-20..=20)
        .map(|k| {
            let d = centre * 10f64.powf(k as f64 / 10.0);
            (d, complexity(eigenvalues, d))
        })
        .collect();
    Ok(StatDimReport {
        sigma,
        critical_radius: radius,
        stat_dim,
        complexity_curve,
    })
}

/// Rule mapping the sample size (and optionally the statistical dimension)
/// to a sketch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum SketchDimPolicy {
    /// `floor(n^(1/3))`.
    CubeRoot,
    /// `ceil(c d_n)`.
    StatDim { c: f64 },
    /// `ceil(c d_n log(n)^4)`.
    StatDimRos { c: f64 },
    /// A fixed `m`, clamped to `[1, n]`.
    Fixed { m: usize },
}

impl SketchDimPolicy {
    pub fn needs_stat_dim(&self) -> bool {
        matches!(self, SketchDimPolicy::StatDim { .. } | SketchDimPolicy::StatDimRos { .. })
    }
}

impl FromStr for SketchDimPolicy {
    type Err = Error;

    /// Accepts `auto`, `cuberoot`, `statdim[:c]`, `statdim-ros[:c]` or an integer.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((a, b)) => (a, Some(b)),
            None => (s.as_str(), None),
        };
        let constant = |arg: Option<&str>| -> Result<f64> {
            let c = match arg {
                None => 1.0,
                Some(a) => a
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad policy constant {a:?}")))?,
            };
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::invalid(format!("policy constant must be positive, got {c}")));
            }
            Ok(c)
        };
        match (name, arg) {
            ("auto" | "cuberoot", None) => Ok(SketchDimPolicy::CubeRoot),
            ("statdim", _) => Ok(SketchDimPolicy::StatDim { c: constant(arg)? }),
            ("statdim-ros", _) => Ok(SketchDimPolicy::StatDimRos { c: constant(arg)? }),
            _ => match name.parse::<usize>() {
                Ok(m) if m >= 1 && arg.is_none() => Ok(SketchDimPolicy::Fixed { m }),
                _ => Err(Error::invalid(format!("unknown sketch-dimension policy {s:?}"))),
            },
        }
    }
}

fn integer_cube_root(n: usize) -> usize {
    let mut r = (n as f64).cbrt().floor() as usize;
    while (r + 1).pow(3) <= n {
        r += 1;
    }
    while r > 0 && r.pow(3) > n {
        r -= 1;
    }
    r
}

/// Sketch dimension for sample size `n`; the statistical-dimension policies
/// need `stat_dim`.
pub fn choose_sketch_dim(n: usize, policy: &SketchDimPolicy, stat_dim: Option<usize>) -> Result<usize> {
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    let need = || {
        stat_dim.ok_or_else(|| {
            Error::invalid("statistical-dimension policy requires the statistical dimension")
        })
    };
    let raw = match *policy {
        SketchDimPolicy::CubeRoot => integer_cube_root(n),
        SketchDimPolicy::Fixed { m } => m,
        SketchDimPolicy::StatDim { c } | SketchDimPolicy::StatDimRos { c } if !(c > 0.0) => {
            return Err(Error::invalid(format!("policy constant must be positive, got {c}")));
        }
        SketchDimPolicy::StatDim { c } => (c * need()? as f64).ceil() as usize,
        SketchDimPolicy::StatDimRos { c } => {
            let log = (n as f64).ln();
            (c * need()? as f64 * log.powi(4)).ceil().min(n as f64) as usize
        }
    };
    Ok(raw.clamp(1, n))
}
