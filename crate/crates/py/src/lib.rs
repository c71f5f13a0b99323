//! Python bindings: plain lists in, plain lists out. Matrices are lists of
//! equal-length rows.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mfgp_core::benchmarks::Benchmark;
use mfgp_core::error::Error;
use mfgp_core::gp::{fit as gp_fit, FitConfig, GpModel, KernelFamily, NoisePolicy};
use mfgp_core::harness;
use mfgp_core::pipeline::{self, PipelineConfig, PipelineModel};
use mfgp_core::reducer::RankChoice;
use mfgp_core::sampling::{design, DesignKind};
use mfgp_core::subspace::ActiveSubspace;
use mfgp_core::{Bounds, Dataset};

fn err(e: Error) -> PyErr {
    match e {
        Error::Numerical(_) | Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(PyValueError::new_err(format!("{what}: no rows")));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!(
            "{what}: rows must be nonempty and of equal length"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn parse_benchmark(name: &str) -> PyResult<Benchmark> {
    name.parse().map_err(err)
}

fn parse_design(kind: &str) -> PyResult<DesignKind> {
    kind.parse().map_err(err)
}

fn noise_policy(free: bool) -> NoisePolicy {
    if free {
        NoisePolicy::Free
    } else {
        NoisePolicy::FixedZero
    }
}

/// Design points in the unit cube, one row per point.
#[pyfunction]
#[pyo3(signature = (kind, n, dim, seed = 0))]
fn sample(kind: &str, n: usize, dim: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let bounds = Bounds::new(vec![0.0; dim], vec![1.0; dim]).map_err(err)?;
    let pts = design(parse_design(kind)?, n, &bounds, seed).map_err(err)?;
    Ok(matrix_rows(&pts))
}

#[pyfunction]
fn benchmark_names() -> Vec<&'static str> {
    vec!["piston", "ebola", "paraboloid"]
}

/// Lower and upper input bounds of a named benchmark.
#[pyfunction]
fn benchmark_bounds(name: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let b = parse_benchmark(name)?.bounds();
    Ok((b.lower().to_vec(), b.upper().to_vec()))
}

#[pyfunction]
fn benchmark_eval(name: &str, x: Vec<f64>) -> PyResult<f64> {
    parse_benchmark(name)?.eval(&x).map_err(err)
}

/// Sampled benchmark data: (inputs, outputs, gradients).
#[pyfunction]
#[pyo3(signature = (name, n, kind = "lhs", seed = 0))]
fn benchmark_dataset(
    name: &str,
    n: usize,
    kind: &str,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let ds = parse_benchmark(name)?
        .dataset(parse_design(kind)?, n, seed)
        .map_err(err)?;
    let grads = ds.gradients().map(matrix_rows).unwrap_or_default();
    Ok((
        matrix_rows(ds.inputs()),
        ds.outputs().iter().copied().collect(),
        grads,
    ))
}

#[pyfunction]
fn r2_score(y_true: Vec<f64>, y_pred: Vec<f64>) -> PyResult<f64> {
    harness::r2_score(&y_true, &y_pred).map_err(err)
}

/// Eigendecomposition of the gradient outer-product average:
/// (eigenvalues descending, eigenvectors as one list per column).
#[pyfunction]
fn active_subspace(gradients: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let g = to_matrix(&gradients, "gradients")?;
    let sub = ActiveSubspace::from_gradients(&g).map_err(err)?;
    let w = sub.eigenvectors();
    let cols = (0..w.ncols())
        .map(|j| w.column(j).iter().copied().collect())
        .collect();
    Ok((sub.eigenvalues().to_vec(), cols))
}

/// Gaussian process regressor with an anisotropic squared-exponential kernel.
#[pyclass]
struct Gp {
    inner: GpModel,
}

#[pymethods]
impl Gp {
    /// Fit by maximized marginal likelihood over random restarts.
    #[staticmethod]
    #[pyo3(signature = (x, y, free_noise = false, restarts = 10, seed = 0))]
    fn fit(x: Vec<Vec<f64>>, y: Vec<f64>, free_noise: bool, restarts: usize, seed: u64) -> PyResult<Gp> {
        let inputs = to_matrix(&x, "x")?;
        let outputs = DVector::from_vec(y);
        let cfg = FitConfig {
            restarts,
            noise: noise_policy(free_noise),
            seed,
            ..FitConfig::default()
        };
        let inner = gp_fit(&inputs, &outputs, KernelFamily::RbfArd, &cfg).map_err(err)?;
        Ok(Gp { inner })
    }

    /// Posterior mean and variance per row of x.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let pts = to_matrix(&x, "x")?;
        let (mean, var) = self.inner.predict_diag(&pts).map_err(err)?;
        Ok((mean.iter().copied().collect(), var.iter().copied().collect()))
    }

    fn log_marginal_likelihood(&self) -> f64 {
        self.inner.log_marginal_likelihood()
    }

    fn noise_variance(&self) -> f64 {
        self.inner.noise_variance()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Gp> {
        Ok(Gp {
            inner: GpModel::from_json(s).map_err(err)?,
        })
    }
}

/// Two-level multi-fidelity surrogate: a reduced response surface feeds a
/// synthetic bottom level under the data.
#[pyclass]
struct MfSurrogate {
    inner: PipelineModel,
}

#[pymethods]
impl MfSurrogate {
    /// Train on inputs, outputs, and optional per-row gradients (estimated
    /// when absent). `bounds` is an optional (lower, upper) pair for the
    /// synthetic design box; the data hull is used otherwise.
    #[staticmethod]
    #[pyo3(signature = (
        x, y, gradients = None, reducer = "linear", rank = 1, n_lf_extra = 0,
        bounds = None, free_noise = false, seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        gradients: Option<Vec<Vec<f64>>>,
        reducer: &str,
        rank: usize,
        n_lf_extra: usize,
        bounds: Option<(Vec<f64>, Vec<f64>)>,
        free_noise: bool,
        seed: u64,
    ) -> PyResult<MfSurrogate> {
        let inputs = to_matrix(&x, "x")?;
        let outputs = DVector::from_vec(y);
        let grads = gradients.map(|g| to_matrix(&g, "gradients")).transpose()?;
        let ds = Dataset::new(inputs, outputs, grads).map_err(err)?;
        let cfg = PipelineConfig {
            reducer: reducer.parse().map_err(err)?,
            rank: RankChoice::Fixed(rank),
            n_lf_extra,
            noise: noise_policy(free_noise),
            bounds: bounds
                .map(|(lo, hi)| Bounds::new(lo, hi))
                .transpose()
                .map_err(err)?,
            seed,
            ..PipelineConfig::default()
        };
        Ok(MfSurrogate {
            inner: pipeline::run(&ds, &cfg).map_err(err)?,
        })
    }

    /// Monte Carlo mean and variance through the fidelity chain.
    #[pyo3(signature = (x, particles = 200, seed = 0))]
    fn predict(&self, x: Vec<Vec<f64>>, particles: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let pts = to_matrix(&x, "x")?;
        let p = self.inner.predict(&pts, particles, seed).map_err(err)?;
        Ok((
            p.mean.iter().copied().collect(),
            p.variance.iter().copied().collect(),
        ))
    }

    /// Leading eigenvalues of the trained reduction, when it is linear.
    fn eigenvalues(&self) -> Option<Vec<f64>> {
        self.inner.surface.reducer().eigenvalues().map(|e| e.to_vec())
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<MfSurrogate> {
        Ok(MfSurrogate {
            inner: PipelineModel::from_json(s).map_err(err)?,
        })
    }
}

#[pymodule]
fn mfgp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_names, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_eval, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(r2_score, m)?)?;
    m.add_function(wrap_pyfunction!(active_subspace, m)?)?;
    m.add_class::<Gp>()?;
    m.add_class::<MfSurrogate>()?;
    Ok(())
}
