//! Python bindings. Matrices cross the boundary as lists of rows.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fedpac_core::config::ConfigFile;
use fedpac_core::data::label_heterogeneity;
use fedpac_core::model::theory::{self, DiscreteWorld, LinearClassifier};
use fedpac_core::numerics::{keyed_rng, Matrix};
use fedpac_core::orchestrator::{build_federation, run_experiment};
use fedpac_core::qpsolve::{self, SimplexQP, DEFAULT_TOL};
use fedpac_core::verify::{self, Level};
use fedpac_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config { .. }
        | Error::Shape(_)
        | Error::Invalid(_)
        | Error::Empty(_)
        | Error::Format(_)
        | Error::Length(_)
        | Error::Consistency(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

fn config(text: &str) -> PyResult<ConfigFile> {
    let cfg = ConfigFile::parse(text).map_err(to_py)?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Euclidean projection onto the probability simplex.
#[pyfunction]
fn project_simplex(v: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(qpsolve::project_simplex(&v).map_err(to_py)?.into_vec())
}

/// `argmin αᵀQα` over the simplex.
#[pyfunction]
#[pyo3(signature = (q, tol = DEFAULT_TOL))]
fn solve_qp(q: Vec<Vec<f64>>, tol: f64) -> PyResult<Vec<f64>> {
    let qp = SimplexQP::new(matrix(q)?).map_err(to_py)?;
    Ok(qpsolve::solve(&qp, tol).map_err(to_py)?.into_vec())
}

/// Lattice minimum with spacing `step`, `m <= 4`.
#[pyfunction]
fn qp_oracle(q: Vec<Vec<f64>>, step: f64) -> PyResult<Vec<f64>> {
    let qp = SimplexQP::new(matrix(q)?).map_err(to_py)?;
    Ok(qpsolve::brute_force_oracle(&qp, step).map_err(to_py)?.into_vec())
}

#[pyfunction]
fn qp_objective(q: Vec<Vec<f64>>, alpha: Vec<f64>) -> PyResult<f64> {
    let qp = SimplexQP::new(matrix(q)?).map_err(to_py)?;
    if alpha.len() != qp.dim() {
        return Err(PyValueError::new_err("alpha length differs from Q"));
    }
    Ok(qp.objective(&alpha))
}

/// A finite input space with one joint distribution per client.
#[pyclass(name = "DiscreteWorld", module = "fedpac", from_py_object)]
#[derive(Clone)]
struct PyWorld {
    inner: DiscreteWorld,
}

#[pymethods]
impl PyWorld {
    /// `features` is S x d, `conditionals` one S x K table per client.
    #[new]
    fn new(features: Vec<Vec<f64>>, marginal: Vec<f64>, conditionals: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        let conds = conditionals.into_iter().map(matrix).collect::<PyResult<_>>()?;
        let inner = DiscreteWorld::new(matrix(features)?, marginal, conds).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn random(inputs: usize, classes: usize, dim: usize, clients: usize, seed: u64) -> PyResult<Self> {
        let inner = DiscreteWorld::random(inputs, classes, dim, clients, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.features().to_rows()
    }

    #[getter]
    fn marginal(&self) -> Vec<f64> {
        self.inner.marginal().to_vec()
    }

    #[getter]
    fn clients(&self) -> usize {
        self.inner.clients()
    }

    fn joint(&self, client: usize) -> PyResult<Vec<Vec<f64>>> {
        if client >= self.inner.clients() {
            return Err(PyValueError::new_err(format!("no client {client}")));
        }
        Ok(self.inner.joint(client).to_rows())
    }

    fn sample_empirical(&self, client: usize, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        if client >= self.inner.clients() || n == 0 {
            return Err(PyValueError::new_err("need a valid client and n > 0"));
        }
        let mut rng = keyed_rng(seed, &[client as u64, n as u64]);
        Ok(self.inner.sample_empirical(client, n, &mut rng).to_rows())
    }

    /// Closed-form classifier `g` (K x d) for an empirical joint.
    fn fit_classifier(&self, p_hat: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let g = theory::fit_classifier_closed_form(&self.inner, &matrix(p_hat)?).map_err(to_py)?;
        Ok(g.table().to_rows())
    }

    fn chi2_distance(&self, p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<f64> {
        theory::chi2_distance(&self.inner, &matrix(p)?, &matrix(q)?).map_err(to_py)
    }

    /// `P_X(x) (1 + f(x)ᵀg(y)) / K`
    fn model_joint(&self, g: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let g = LinearClassifier::new(matrix(g)?).map_err(to_py)?;
        Ok(theory::model_joint(&self.inner, &g).to_rows())
    }

    /// `(empirical, gap, constant)`
    fn decompose(&self, p_true: Vec<Vec<f64>>, p_hat: Vec<Vec<f64>>, g: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64)> {
        let g = LinearClassifier::new(matrix(g)?).map_err(to_py)?;
        let d = theory::decompose_test_loss(&self.inner, &matrix(p_true)?, &matrix(p_hat)?, &g).map_err(to_py)?;
        Ok((d.empirical, d.gap, d.constant))
    }

    fn variance_term(&self, client: usize) -> PyResult<f64> {
        theory::variance_term(&self.inner, client).map_err(to_py)
    }

    /// The combination-weight QP matrix for `target`.
    fn exact_qp(&self, target: usize, n: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        Ok(theory::exact_qp(&self.inner, target, &n)
            .map_err(to_py)?
            .matrix()
            .to_rows())
    }
}

/// Validates config text and returns it with every key spelled out.
#[pyfunction]
fn effective_config(text: &str) -> PyResult<String> {
    Ok(config(text)?.to_text())
}

/// Runs one seed of the experiment described by `text`. Returns a dict with
/// per-round mean accuracy, final per-client accuracies, and the last weight
/// matrix (or `None`).
#[pyfunction]
#[pyo3(signature = (text = "", seed = None))]
fn run<'py>(py: Python<'py>, text: &str, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(text)?;
    let seed = seed.unwrap_or(cfg.experiment.seeds[0]);
    let result = py.detach(|| run_experiment(&cfg.experiment, seed)).map_err(to_py)?;
    let last = result.final_report();
    let out = PyDict::new(py);
    out.set_item("algorithm", cfg.experiment.algorithm.name())?;
    out.set_item("seed", seed)?;
    out.set_item(
        "mean_accuracy",
        result.reports.iter().map(|r| r.mean_accuracy).collect::<Vec<_>>(),
    )?;
    out.set_item("final_accuracies", last.accuracies.clone())?;
    let weights = result
        .reports
        .iter()
        .rev()
        .find_map(|r| r.weights.as_ref())
        .map(Matrix::to_rows);
    out.set_item("weights", weights)?;
    Ok(out)
}

/// Per-client training label histograms and the mean total-variation
/// distance to the pooled label distribution.
#[pyfunction]
#[pyo3(signature = (text = "", seed = None))]
fn partition_stats(text: &str, seed: Option<u64>) -> PyResult<(Vec<Vec<usize>>, f64)> {
    let cfg = config(text)?;
    let seed = seed.unwrap_or(cfg.experiment.seeds[0]);
    let k = cfg.experiment.dims.classes;
    let data = build_federation(&cfg.experiment, seed).map_err(to_py)?;
    let hists = data.iter().map(|d| d.train.label_histogram(k)).collect();
    Ok((hists, label_heterogeneity(&data, k)))
}

/// `[(name, passed, measured, threshold)]` for every numerical self-check.
#[pyfunction]
#[pyo3(signature = (level = "fast"))]
fn verify_suite(py: Python<'_>, level: &str) -> PyResult<Vec<(String, bool, f64, f64)>> {
    let level: Level = level.parse().map_err(PyValueError::new_err)?;
    let results = py
        .detach(|| verify::run_suite(level, verify::Options::default()))
        .map_err(to_py)?;
    Ok(results
        .into_iter()
        .map(|r| (r.name.to_string(), r.passed, r.measured, r.threshold))
        .collect())
}

#[pymodule]
fn fedpac(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWorld>()?;
    m.add_function(wrap_pyfunction!(project_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(solve_qp, m)?)?;
    m.add_function(wrap_pyfunction!(qp_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(qp_objective, m)?)?;
    m.add_function(wrap_pyfunction!(effective_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(partition_stats, m)?)?;
    m.add_function(wrap_pyfunction!(verify_suite, m)?)?;
    Ok(())
}
