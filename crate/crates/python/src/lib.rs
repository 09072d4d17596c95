//! Python bindings for the sparsetomo core.
//!
//! Matrices cross the boundary as lists of rows. Library errors map to
//! `ValueError` (bad input or config), `ArithmeticError` (numerical failure)
//! and `OSError` (files).

use nalgebra::{DMatrix, Matrix2xX, Matrix3, Vector3};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sparsetomo_core::geometry::{self, Ensemble3, GramMatrix, Rotation3};
use sparsetomo_core::imaging::{build_design_matrix, candidate_mask, render_profile, PixelGrid, Profile};
use sparsetomo_core::io::ReadAudit;
use sparsetomo_core::mixture::{pyramid_fixture, RadialMixture3};
use sparsetomo_core::pipeline::{self, Command, RunConfig};
use sparsetomo_core::profile_estimation::{deconvolve_profile, DeconvolutionSettings};
use sparsetomo_core::reconstruction;
use sparsetomo_core::rng::rng_from_seed;
use sparsetomo_core::shape_recovery;
use sparsetomo_core::sparse_solver::{lars_path_dense, LarsOptions};
use sparsetomo_core::Error;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyArithmeticError::new_err(e.to_string()),
        _ => match e {
            Error::Io(_) => PyOSError::new_err(e.to_string()),
            _ => PyValueError::new_err(e.to_string()),
        },
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn dmatrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

fn square(rows: &[Vec<f64>]) -> PyResult<GramMatrix> {
    let m = dmatrix(rows)?;
    if m.nrows() != m.ncols() {
        return Err(PyValueError::new_err("Gram matrix must be square"));
    }
    Ok(GramMatrix::from_matrix_unchecked(m))
}

/// Points given as a list of `[x, y]` pairs.
fn points2(points: &[Vec<f64>]) -> PyResult<Matrix2xX<f64>> {
    if points.iter().any(|p| p.len() != 2) {
        return Err(PyValueError::new_err("expected [x, y] points"));
    }
    Ok(Matrix2xX::from_fn(points.len(), |r, c| points[c][r]))
}

fn columns2(m: &Matrix2xX<f64>) -> Vec<[f64; 2]> {
    m.column_iter().map(|c| [c[0], c[1]]).collect()
}

fn points3(points: &[Vec<f64>]) -> PyResult<Vec<Vector3<f64>>> {
    points
        .iter()
        .map(|p| match p.as_slice() {
            [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
            _ => Err(PyValueError::new_err("expected [x, y, z] points")),
        })
        .collect()
}

/// A rotation of 3-space (orthogonal, determinant +1).
#[pyclass(name = "Rotation", frozen)]
struct PyRotation(Rotation3);

#[pymethods]
impl PyRotation {
    #[new]
    fn new(matrix: Vec<Vec<f64>>) -> PyResult<Self> {
        let m = dmatrix(&matrix)?;
        if m.shape() != (3, 3) {
            return Err(PyValueError::new_err("rotation must be 3x3"));
        }
        Rotation3::from_matrix(Matrix3::from_fn(|i, j| m[(i, j)])).map(PyRotation).map_err(py_err)
    }

    /// Haar-uniform draw, deterministic in `seed`.
    #[staticmethod]
    fn haar(seed: u64) -> Self {
        PyRotation(geometry::sample_haar_rotation(&mut rng_from_seed(seed)))
    }

    #[staticmethod]
    fn identity() -> Self {
        PyRotation(Rotation3::identity())
    }

    fn matrix(&self) -> Vec<Vec<f64>> {
        (0..3).map(|i| (0..3).map(|j| self.0.matrix()[(i, j)]).collect()).collect()
    }

    fn __matmul__(&self, other: PyRef<'_, PyRotation>) -> Self {
        PyRotation(self.0.compose(&other.0))
    }

    fn __repr__(&self) -> String {
        format!("Rotation({:?})", self.matrix())
    }
}

/// Isotropic Gaussian mixture in 3D.
#[pyclass(name = "Mixture", frozen)]
struct PyMixture(RadialMixture3);

#[pymethods]
impl PyMixture {
    #[new]
    fn new(means: Vec<Vec<f64>>, weights: Vec<f64>, sigma: f64) -> PyResult<Self> {
        let pts = points3(&means)?;
        RadialMixture3::new(Ensemble3::from_points(&pts), weights, sigma).map(PyMixture).map_err(py_err)
    }

    /// The four-component pyramid test particle.
    #[staticmethod]
    fn pyramid() -> Self {
        PyMixture(pyramid_fixture())
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.0.weights().to_vec()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.0.kernel_sigma()
    }

    #[getter]
    fn means(&self) -> Vec<[f64; 3]> {
        let m = self.0.means();
        (0..m.k()).map(|i| m.point(i).into()).collect()
    }

    fn density(&self, x: [f64; 3]) -> f64 {
        self.0.eval3(&Vector3::from(x))
    }

    fn rotate(&self, rotation: PyRef<'_, PyRotation>) -> Self {
        PyMixture(self.0.rotate(&rotation.0))
    }

    /// Projected 2D means along `rotation`.
    fn project(&self, rotation: PyRef<'_, PyRotation>) -> Vec<[f64; 2]> {
        columns2(&geometry::project(&rotation.0, self.0.means()))
    }

    /// Gram matrix of the centered means.
    fn gram(&self) -> Vec<Vec<f64>> {
        rows(self.0.means().centered().gram().matrix())
    }

    fn __repr__(&self) -> String {
        format!("Mixture(k={}, sigma={}, weights={:?})", self.0.k(), self.0.kernel_sigma(), self.0.weights())
    }
}

/// Gram matrix of a list of vectors (all of one length).
#[pyfunction]
fn gram(vectors: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = dmatrix(&vectors)?.transpose();
    Ok(rows(geometry::gram(&m).matrix()))
}

/// Echelon-form 3D points whose Gram matrix is `g`.
#[pyfunction]
#[pyo3(signature = (g, rank=3))]
fn factor_gram(g: Vec<Vec<f64>>, rank: usize) -> PyResult<Vec<[f64; 3]>> {
    let v = geometry::factor_gram(&square(&g)?, rank).map_err(py_err)?;
    Ok((0..v.k()).map(|i| v.point(i).into()).collect())
}

#[pyfunction]
fn rank3_truncate(g: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(shape_recovery::rank3_truncate(&square(&g)?).matrix()))
}

/// `(3 / 2N) Σ Gram(means)` over N projected point sets.
#[pyfunction]
fn average_gram(views: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
    let m = views.iter().map(|v| points2(v)).collect::<PyResult<Vec<_>>>()?;
    Ok(rows(shape_recovery::average_gram(&m).map_err(py_err)?.matrix()))
}

/// Smallest Frobenius distance from `candidate` to projected Gram matrices
/// of `g` sampled at `samples` random directions.
#[pyfunction]
#[pyo3(signature = (candidate, g, samples=1000, seed=0))]
fn roman_distance(candidate: Vec<Vec<f64>>, g: Vec<Vec<f64>>, samples: usize, seed: u64) -> PyResult<f64> {
    let factor = geometry::factor_gram(&square(&g)?, 3).map_err(py_err)?;
    let locus = geometry::sample_roman_surface(&factor, samples, seed);
    geometry::roman_distance(&square(&candidate)?, &locus).map_err(py_err)
}

/// Noisy T×T image of `mixture` seen along `rotation`, as a list of rows.
#[pyfunction]
#[pyo3(signature = (mixture, rotation, t=64, extent=2.2, noise_sd=1e-4, seed=0))]
fn render(
    mixture: PyRef<'_, PyMixture>,
    rotation: PyRef<'_, PyRotation>,
    t: usize,
    extent: f64,
    noise_sd: f64,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let grid = PixelGrid::new(t, extent).map_err(py_err)?;
    let p = render_profile(&mixture.0, &rotation.0, &grid, noise_sd, seed).map_err(py_err)?;
    Ok(rows(&p.pixels))
}

/// Sparse deconvolution of one image. Returns a dict with `means`, `weights`
/// (descending) and `oversized`.
#[pyfunction]
#[pyo3(signature = (image, extent=2.2, w=std::f64::consts::FRAC_PI_3, sigma2=0.2116, mass=None, t_factor=0.95, allow_negative=false))]
#[allow(clippy::too_many_arguments)]
fn deconvolve<'py>(
    py: Python<'py>,
    image: Vec<Vec<f64>>,
    extent: f64,
    w: f64,
    sigma2: f64,
    mass: Option<f64>,
    t_factor: f64,
    allow_negative: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let pixels = dmatrix(&image)?;
    if pixels.nrows() != pixels.ncols() {
        return Err(PyValueError::new_err("image must be square"));
    }
    let grid = PixelGrid::new(pixels.nrows(), extent).map_err(py_err)?;
    let profile = Profile::new(grid, pixels, 0).map_err(py_err)?;
    let mask = candidate_mask(&grid, w).map_err(py_err)?;
    let design = build_design_matrix(&grid, &mask, sigma2).map_err(py_err)?;
    let mass = mass.unwrap_or_else(|| profile.total_intensity());
    let mut settings = DeconvolutionSettings { t_factor, ..Default::default() };
    settings.lars.nonnegative = !allow_negative;
    let d = py.detach(|| deconvolve_profile(&design, &profile, mass, &settings)).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("means", columns2(&d.estimate.means2d))?;
    out.set_item("weights", d.estimate.weights.clone())?;
    out.set_item("mass", d.estimate.mass)?;
    out.set_item("oversized", d.estimate.oversized)?;
    Ok(out)
}

/// Breakpoints `(t, beta)` of the L1-constrained least-squares path for a
/// dense design given as rows.
#[pyfunction]
#[pyo3(signature = (x, y, nonnegative=true, max_steps=500))]
fn lasso_path(x: Vec<Vec<f64>>, y: Vec<f64>, nonnegative: bool, max_steps: usize) -> PyResult<Vec<(f64, Vec<f64>)>> {
    let opts = LarsOptions { max_steps, nonnegative, t_limit: None };
    let path = lars_path_dense(&dmatrix(&x)?, &y, &opts).map_err(py_err)?;
    Ok(path.breakpoints().iter().map(|b| (b.t, b.beta.clone())).collect())
}

/// Mixture with Gram matrix `g` (rank ≤ 3), the given weights and kernel σ².
#[pyfunction]
fn assemble(g: Vec<Vec<f64>>, weights: Vec<f64>, sigma2: f64) -> PyResult<PyMixture> {
    let r = reconstruction::assemble(&square(&g)?, &weights, sigma2).map_err(py_err)?;
    Ok(PyMixture(r.mixture))
}

/// Gram gap (best labeling) plus sorted-weight L1 gap; zero for rotated or
/// reflected copies.
#[pyfunction]
fn shape_distance(a: PyRef<'_, PyMixture>, b: PyRef<'_, PyMixture>) -> PyResult<f64> {
    reconstruction::shape_distance(&a.0, &b.0).map_err(py_err)
}

/// Runs a batch command (`simulate`, `deconvolve`, `reconstruct`, `evaluate`,
/// `render`) with `key = value` config text; returns the report as a dict of
/// strings.
#[pyfunction]
fn run<'py>(py: Python<'py>, command: &str, config: &str) -> PyResult<Bound<'py, PyDict>> {
    let cmd = match command {
        "simulate" => Command::Simulate,
        "deconvolve" => Command::Deconvolve,
        "reconstruct" => Command::Reconstruct,
        "evaluate" => Command::Evaluate,
        "render" => Command::Render,
        other => return Err(PyValueError::new_err(format!("unknown command {other:?}"))),
    };
    let cfg = RunConfig::parse(config).map_err(py_err)?;
    let report = py.detach(|| pipeline::run(cmd, &cfg, &ReadAudit::new())).map_err(py_err)?;
    let out = PyDict::new(py);
    for (k, v) in report.entries() {
        out.set_item(k, v)?;
    }
    Ok(out)
}

#[pymodule]
fn sparsetomo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRotation>()?;
    m.add_class::<PyMixture>()?;
    m.add_function(wrap_pyfunction!(gram, m)?)?;
    m.add_function(wrap_pyfunction!(factor_gram, m)?)?;
    m.add_function(wrap_pyfunction!(rank3_truncate, m)?)?;
    m.add_function(wrap_pyfunction!(average_gram, m)?)?;
    m.add_function(wrap_pyfunction!(roman_distance, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(deconvolve, m)?)?;
    m.add_function(wrap_pyfunction!(lasso_path, m)?)?;
    m.add_function(wrap_pyfunction!(assemble, m)?)?;
    m.add_function(wrap_pyfunction!(shape_distance, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
