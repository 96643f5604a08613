//! Quadrature grids, functional datasets and the dataset directory format.
//!
//! A dataset directory holds `manifest.json`, `x.csv` (n x G curve samples),
//! `z.csv` (n x p scalar design), `y.csv` (n x 1 responses) and `grid.csv`
//! (G x 1 abscissae). CSV files have no header, use `,` as delimiter and `\n`
//! line endings, and print every value with 17 significant digits so that a
//! save/load cycle is bit-exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Midpoint quadrature grid on `[0, 1]`: `t_a = (a + 0.5) / G`, weight `1 / G`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
    weight: f64,
}

impl Grid {
    pub fn midpoint(num_points: usize) -> Result<Self> {
        if num_points < 2 {
            return Err(Error::invalid(format!(
                "grid needs at least 2 points, got {num_points}"
            )));
        }
        let g = num_points as f64;
        let points = (0..num_points).map(|a| (a as f64 + 0.5) / g).collect();
        Ok(Grid {
            points,
            weight: 1.0 / g,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Evaluates `f` at every grid point.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.points.iter().map(|&t| f(t)))
    }

    /// Quadrature approximation of `int_0^1 a(t) b(t) dt`.
    pub fn integrate_product(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != self.len() || b.len() != self.len() {
            return Err(Error::invalid(format!(
                "integrand lengths ({}, {}) do not match grid size {}",
                a.len(),
                b.len(),
                self.len()
            )));
        }
        let sum: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        Ok(self.weight * sum)
    }
}

/// Builds the `G`-point midpoint grid.
pub fn make_grid(num_points: usize) -> Result<Grid> {
    Grid::midpoint(num_points)
}

/// Provenance recorded alongside a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub example_id: Option<u8>,
    pub v: Option<f64>,
    pub seed: Option<u64>,
    pub sigma: Option<f64>,
}

/// `n` curves sampled on a grid, an `n x p` scalar design and `n` responses.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    grid: Grid,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    y: DVector<f64>,
    meta: DatasetMeta,
}

impl FunctionalDataset {
    pub fn new(
        grid: Grid,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        y: DVector<f64>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || z.nrows() != n {
            return Err(Error::invalid(format!(
                "row counts disagree: x has {}, z has {}, y has {}",
                x.nrows(),
                z.nrows(),
                n
            )));
        }
        if x.ncols() != grid.len() {
            return Err(Error::invalid(format!(
                "x has {} columns but the grid has {} points",
                x.ncols(),
                grid.len()
            )));
        }
        if !all_finite(x.as_slice()) || !all_finite(z.as_slice()) || !all_finite(y.as_slice()) {
            return Err(Error::invalid("dataset contains non-finite entries"));
        }
        Ok(FunctionalDataset {
            grid,
            x,
            z,
            y,
            meta,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Curve samples, one row per observation.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    /// Returns the sub-dataset made of `rows`, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n()) {
            return Err(Error::invalid(format!(
                "row index {bad} out of range for n = {}",
                self.n()
            )));
        }
        Ok(FunctionalDataset {
            grid: self.grid.clone(),
            x: self.x.select_rows(rows),
            z: self.z.select_rows(rows),
            y: self.y.select_rows(rows),
            meta: self.meta.clone(),
        })
    }
}

fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    n: usize,
    p: usize,
    #[serde(rename = "G")]
    g: usize,
    example_id: Option<u8>,
    v: Option<f64>,
    seed: Option<u64>,
    sigma: Option<f64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const X_FILE: &str = "x.csv";
pub const Z_FILE: &str = "z.csv";
pub const Y_FILE: &str = "y.csv";
pub const GRID_FILE: &str = "grid.csv";

/// Writes `ds` to `dir`, creating the directory if needed.
pub fn save_dataset(ds: &FunctionalDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        n: ds.n(),
        p: ds.p(),
        g: ds.grid.len(),
        example_id: ds.meta.example_id,
        v: ds.meta.v,
        seed: ds.meta.seed,
        sigma: ds.meta.sigma,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    write_matrix_csv(&dir.join(X_FILE), &ds.x)?;
    write_matrix_csv(&dir.join(Z_FILE), &ds.z)?;
    write_matrix_csv(&dir.join(Y_FILE), &DMatrix::from_column_slice(ds.n(), 1, ds.y.as_slice()))?;
    let points = DMatrix::from_column_slice(ds.grid.len(), 1, ds.grid.points());
    write_matrix_csv(&dir.join(GRID_FILE), &points)
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<FunctionalDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = read_json(&manifest_path)?;

    let grid_path = dir.join(GRID_FILE);
    let points = read_matrix_csv(&grid_path, Some(1))?;
    expect_shape(&grid_path, &points, manifest.g, 1)?;
    let grid = Grid::midpoint(manifest.g).map_err(|e| Error::format(&grid_path, e.to_string()))?;
    if points.as_slice() != grid.points() {
        return Err(Error::format(&grid_path, "grid is not the midpoint grid of size G"));
    }

    let x_path = dir.join(X_FILE);
    let x = read_matrix_csv(&x_path, Some(manifest.g))?;
    expect_shape(&x_path, &x, manifest.n, manifest.g)?;

    let z_path = dir.join(Z_FILE);
    let z = read_matrix_csv(&z_path, Some(manifest.p))?;
    expect_shape(&z_path, &z, manifest.n, manifest.p)?;

    let y_path = dir.join(Y_FILE);
    let y = read_matrix_csv(&y_path, Some(1))?;
    expect_shape(&y_path, &y, manifest.n, 1)?;

    let meta = DatasetMeta {
        example_id: manifest.example_id,
        v: manifest.v,
        seed: manifest.seed,
        sigma: manifest.sigma,
    };
    FunctionalDataset::new(grid, x, z, y.column(0).into_owned(), meta)
        .map_err(|e| Error::format(dir, e.to_string()))
}

fn expect_shape(path: &Path, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::format(
            path,
            format!(
                "expected {rows} x {cols} from manifest, found {} x {}",
                m.nrows(),
                m.ncols()
            ),
        ));
    }
    Ok(())
}

/// Formats a value with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a numeric matrix in the headerless CSV dialect.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut record = Vec::with_capacity(m.ncols());
    for i in 0..m.nrows() {
        record.clear();
        record.extend(m.row(i).iter().map(|&v| format_f64(v)));
        w.write_record(&record)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Reads a headerless numeric CSV. `cols` is the expected width when known;
/// it is only used to shape an empty-row file (`p = 0`).
pub fn read_matrix_csv(path: &Path, cols: Option<usize>) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes.as_slice());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        // A zero-width matrix row serializes as an empty line.
        if rec.len() == 1 && rec[0].is_empty() {
            rows.push(Vec::new());
            continue;
        }
        let row = rec
            .iter()
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::format(path, format!("line {}: bad number {s:?}: {e}", line + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let width = rows.first().map(Vec::len).or(cols).unwrap_or(0);
    if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(Error::format(
            path,
            format!("line {} has a different column count", i + 1),
        ));
    }
    Ok(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}
