//! Random `m x n` sketch matrices and the statistical-dimension tools used to
//! size them.
//!
//! All three random constructions satisfy `E[S'S] = I_n`:
//!
//! * GRS: i.i.d. `N(0, 1/m)` entries.
//! * ROS: `S = sqrt(n/m) P H R` with `R` a Rademacher diagonal, `H` an
//!   orthonormal transform (Hadamard or DCT-II) and `P` a row selection
//!   sampled without replacement.
//! * SUB: `S = sqrt(n/m) P`, the ROS construction with `H R = I`.

mod statdim;
pub mod transform;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use statdim::{
    choose_sketch_dim, critical_radius, kernel_complexity, statistical_dimension, StatDimReport,
    SketchDimPolicy,
};
use transform::{OrthoTransform, TransformPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SketchKind {
    #[serde(rename = "grs")]
    Gaussian,
    #[serde(rename = "ros")]
    Ros,
    #[serde(rename = "sub")]
    Sub,
    /// No compression: `S = I_n`.
    #[serde(rename = "none")]
    Identity,
}

impl SketchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SketchKind::Gaussian => "grs",
            SketchKind::Ros => "ros",
            SketchKind::Sub => "sub",
            SketchKind::Identity => "none",
        }
    }
}

impl fmt::Display for SketchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SketchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "grs" | "gaussian" => Ok(SketchKind::Gaussian),
            "ros" => Ok(SketchKind::Ros),
            "sub" => Ok(SketchKind::Sub),
            "none" | "identity" => Ok(SketchKind::Identity),
            other => Err(Error::invalid(format!("unknown sketch kind {other:?}"))),
        }
    }
}

/// The `(kind, m, seed)` triple that reproduces a sketch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchId {
    pub kind: SketchKind,
    pub m: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
enum Structure {
    Dense,
    Ros {
        rows: Vec<usize>,
        signs: Vec<f64>,
        transform: OrthoTransform,
    },
    Sub {
        cols: Vec<usize>,
    },
    Identity,
}

#[derive(Debug, Clone)]
pub struct SketchMatrix {
    kind: SketchKind,
    seed: u64,
    values: DMatrix<f64>,
    structure: Structure,
}

fn check_dims(m: usize, n: usize) -> Result<()> {
    if m < 1 || m > n {
        return Err(Error::invalid(format!(
            "sketch dimension must satisfy 1 <= m <= n, got m = {m}, n = {n}"
        )));
    }
    Ok(())
}

/// Gaussian sketch with i.i.d. `N(0, 1/m)` entries.
pub fn gaussian_sketch(m: usize, n: usize, seed: u64) -> Result<SketchMatrix> {
    check_dims(m, n)?;
    let mut stream = rng::stream(seed);
    let normal = Normal::new(0.0, 1.0 / (m as f64).sqrt()).expect("valid normal");
    // Row-major draw order.
    let mut values = DMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            values[(i, j)] = normal.sample(&mut stream);
        }
    }
    Ok(SketchMatrix {
        kind: SketchKind::Gaussian,
        seed,
        values,
        structure: Structure::Dense,
    })
}

/// Randomized orthogonal system sketch.
pub fn ros_sketch(m: usize, n: usize, seed: u64) -> Result<SketchMatrix> {
    check_dims(m, n)?;
    let mut stream = rng::stream(seed);
    let rows = index::sample(&mut stream, n, m).into_vec();
    let signs: Vec<f64> = (0..n)
        .map(|_| if stream.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let transform = OrthoTransform::for_len(n);
    let scale = (n as f64 / m as f64).sqrt();
    let values = DMatrix::from_fn(m, n, |i, l| scale * transform.entry(n, rows[i], l) * signs[l]);
    Ok(SketchMatrix {
        kind: SketchKind::Ros,
        seed,
        values,
        structure: Structure::Ros {
            rows,
            signs,
            transform,
        },
    })
}

/// Row-subsampling sketch.
pub fn sub_sketch(m: usize, n: usize, seed: u64) -> Result<SketchMatrix> {
    check_dims(m, n)?;
    let mut stream = rng::stream(seed);
    let cols = index::sample(&mut stream, n, m).into_vec();
    let scale = (n as f64 / m as f64).sqrt();
    let mut values = DMatrix::zeros(m, n);
    for (i, &c) in cols.iter().enumerate() {
        values[(i, c)] = scale;
    }
    Ok(SketchMatrix {
        kind: SketchKind::Sub,
        seed,
        values,
        structure: Structure::Sub { cols },
    })
}

pub fn identity_sketch(n: usize) -> Result<SketchMatrix> {
    check_dims(n, n)?;
    Ok(SketchMatrix {
        kind: SketchKind::Identity,
        seed: 0,
        values: DMatrix::identity(n, n),
        structure: Structure::Identity,
    })
}

impl SketchMatrix {
    /// Dispatches on `kind`; `m` and `seed` are ignored for the identity.
    pub fn new(kind: SketchKind, m: usize, n: usize, seed: u64) -> Result<Self> {
        match kind {
            SketchKind::Gaussian => gaussian_sketch(m, n, seed),
            SketchKind::Ros => ros_sketch(m, n, seed),
            SketchKind::Sub => sub_sketch(m, n, seed),
            SketchKind::Identity => identity_sketch(n),
        }
    }

    pub fn kind(&self) -> SketchKind {
        self.kind
    }

    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    pub fn n(&self) -> usize {
        self.values.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> SketchId {
        SketchId {
            kind: self.kind,
            m: self.m(),
            seed: self.seed,
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.n() {
            return Err(Error::invalid(format!(
                "sketch has {} columns but the operand has {rows} rows",
                self.n()
            )));
        }
        Ok(())
    }

    /// `S A`, exploiting the sketch structure where it pays off.
    pub fn apply(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(a.nrows())?;
        let (m, n) = (self.m(), self.n());
        Ok(match &self.structure {
            Structure::Identity => a.clone(),
            Structure::Sub { cols } => {
                let scale = (n as f64 / m as f64).sqrt();
                a.select_rows(cols) * scale
            }
            Structure::Ros { .. } if m >= 2 * ceil_log2(n) => self.apply_ros_fast(a),
            _ => &self.values * a,
        })
    }

    /// `S A` by a plain dense product.
    pub fn apply_dense(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(a.nrows())?;
        Ok(&self.values * a)
    }

    fn apply_ros_fast(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let Structure::Ros {
            rows,
            signs,
            transform,
        } = &self.structure
        else {
            unreachable!("not a ROS sketch");
        };
        let (m, n) = (self.m(), self.n());
        let scale = (n as f64 / m as f64).sqrt();
        let mut plan = TransformPlan::new(*transform, n);
        let mut col = vec![0.0; n];
        let mut out = DMatrix::zeros(m, a.ncols());
        for c in 0..a.ncols() {
            for (l, v) in col.iter_mut().enumerate() {
                *v = signs[l] * a[(l, c)];
            }
            plan.apply(&mut col);
            for (i, &r) in rows.iter().enumerate() {
                out[(i, c)] = scale * col[r];
            }
        }
        out
    }

    /// `S' alpha`.
    pub fn transpose_apply(&self, alpha: &DVector<f64>) -> Result<DVector<f64>> {
        if alpha.len() != self.m() {
            return Err(Error::invalid(format!(
                "expected {} sketched coefficients, got {}",
                self.m(),
                alpha.len()
            )));
        }
        Ok(match &self.structure {
            Structure::Identity => alpha.clone(),
            _ => self.values.tr_mul(alpha),
        })
    }
}

fn ceil_log2(n: usize) -> usize {
    (usize::BITS - n.saturating_sub(1).leading_zeros()) as usize
}
