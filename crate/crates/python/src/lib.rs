use critscore::inference::{detect_critical_numeric, subvector_statistic_with};
use critscore::models::expmix::{expmix_simulate, ExpMixData, ExpMixModel};
use critscore::models::lmm::{lmm_mle, LmmModel, MleConfig, SigmaMode};
use critscore::models::toy::{toy_simulate, toy_statistic_closed_form, ToyData, ToyModel};
use critscore::sim::{run_power, SimResult};
use critscore::{
    invert_region, modified_statistic, modified_statistic_with, run_coverage, Error, Formula, GroupedDataset,
    ParameterPoint, SimConfig, StatOptions,
};
use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(critscore_py, NumericalError, PyArithmeticError);

fn to_py(e: Error) -> PyErr {
    if e.is_numerical() {
        NumericalError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Serialize through JSON so results arrive as plain dicts and lists.
fn to_object<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn sigma_mode(sigma_known: Option<f64>) -> SigmaMode {
    sigma_known.map_or(SigmaMode::Unknown, SigmaMode::Known)
}

/// Outcome of a modified score test.
#[pyclass(name = "TestResult", frozen)]
struct PyTestResult {
    inner: critscore::TestResult,
}

#[pymethods]
impl PyTestResult {
    #[getter]
    fn statistic(&self) -> f64 {
        self.inner.statistic
    }

    #[getter]
    fn df(&self) -> usize {
        self.inner.df
    }

    #[getter]
    fn p_value(&self) -> f64 {
        self.inner.p_value
    }

    /// Derivative order used for each coordinate (1 regular, 2 critical).
    #[getter]
    fn pattern(&self) -> Vec<u32> {
        self.inner.pattern.iter().map(|&k| u32::from(k)).collect()
    }

    #[getter]
    fn condition_number(&self) -> f64 {
        self.inner.condition_number
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "TestResult(statistic={}, df={}, p_value={})",
            self.inner.statistic, self.inner.df, self.inner.p_value
        )
    }
}

impl From<critscore::TestResult> for PyTestResult {
    fn from(inner: critscore::TestResult) -> Self {
        Self { inner }
    }
}

/// Grouped longitudinal data for the linear mixed model.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: GroupedDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (path, formula = "y ~ 1 + x | re(1) + re(x)", group = "group"))]
    fn read_csv(path: &str, formula: &str, group: &str) -> PyResult<Self> {
        let f = Formula::parse(formula).map_err(to_py)?;
        let inner = critscore::parse_long_csv(path, &f, group).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        critscore::write_long_csv(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn n_groups(&self) -> usize {
        self.inner.data.n_groups()
    }

    #[getter]
    fn n_obs(&self) -> usize {
        self.inner.data.n_obs()
    }

    #[getter]
    fn n_scales(&self) -> usize {
        self.inner.data.n_scales()
    }

    #[getter]
    fn n_fixed(&self) -> usize {
        self.inner.data.n_fixed()
    }

    #[getter]
    fn group_ids(&self) -> Vec<String> {
        self.inner.group_ids.clone()
    }

    #[getter]
    fn formula(&self) -> String {
        self.inner.formula.to_string()
    }
}

fn lmm_point(model: &LmmModel, lambda: Vec<f64>, psi: Vec<f64>, sigma: Option<f64>) -> PyResult<ParameterPoint> {
    if model.with_sigma() && sigma.is_none() {
        return Err(PyValueError::new_err("sigma is required unless sigma_known is given"));
    }
    model.theta(&lambda, &psi, sigma.unwrap_or(f64::NAN)).map_err(to_py)
}

fn lmm_model(sigma_known: Option<f64>) -> LmmModel {
    LmmModel { sigma: sigma_mode(sigma_known) }
}

/// Modified score test of `(lambda, psi[, sigma])` jointly, or of the
/// coordinates in `interest` with the others treated as nuisance values.
#[pyfunction]
#[pyo3(signature = (data, lambda_, psi, sigma = None, sigma_known = None, interest = None, project_nuisance = false))]
fn lmm_test(
    data: &PyDataset,
    lambda_: Vec<f64>,
    psi: Vec<f64>,
    sigma: Option<f64>,
    sigma_known: Option<f64>,
    interest: Option<Vec<usize>>,
    project_nuisance: bool,
) -> PyResult<PyTestResult> {
    let model = lmm_model(sigma_known);
    let theta = lmm_point(&model, lambda_, psi, sigma)?;
    let opts = StatOptions {
        project_nuisance,
        ..StatOptions::default()
    };
    let d = &data.inner.data;
    let res = match interest {
        Some(idx) => subvector_statistic_with(&model, &theta, d, &idx, &opts),
        None => modified_statistic_with(&model, &theta, d, &opts),
    };
    res.map(Into::into).map_err(to_py)
}

/// Maximum likelihood estimates with `psi` profiled out.
#[pyfunction]
#[pyo3(signature = (data, sigma_known = None))]
fn lmm_fit<'py>(py: Python<'py>, data: &PyDataset, sigma_known: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
    let fit = lmm_mle(&data.inner.data, &MleConfig::new(sigma_mode(sigma_known))).map_err(to_py)?;
    to_object(
        py,
        &serde_json::json!({
            "lambda": fit.lambda,
            "psi": fit.psi,
            "sigma": fit.sigma,
            "loglik": fit.loglik,
            "converged": fit.converged,
            "grad_norm": fit.grad_norm,
        }),
    )
}

/// Confidence region for the scale parameters over the grid `axes`, the
/// remaining parameters held at `psi` (and `sigma`).
#[pyfunction]
#[pyo3(signature = (data, axes, psi, sigma = None, sigma_known = None, levels = vec![0.8, 0.9, 0.95, 0.99]))]
fn lmm_region<'py>(
    py: Python<'py>,
    data: &PyDataset,
    axes: Vec<Vec<f64>>,
    psi: Vec<f64>,
    sigma: Option<f64>,
    sigma_known: Option<f64>,
    levels: Vec<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let model = lmm_model(sigma_known);
    let d1 = data.inner.data.n_scales();
    let base = lmm_point(&model, vec![0.0; d1], psi, sigma)?;
    let interest: Vec<usize> = (0..d1).collect();
    let grid = invert_region(&model, &data.inner.data, &base, &interest, axes, &levels, &StatOptions::default())
        .map_err(to_py)?;
    to_object(py, &grid)
}

#[pyfunction]
fn toy_statistic(theta: f64, y: Vec<Vec<f64>>) -> PyResult<f64> {
    let data = ToyData::new(matrix(y)?).map_err(to_py)?;
    let t = ToyModel::theta(theta).map_err(to_py)?;
    Ok(modified_statistic(&ToyModel, &t, &data).map_err(to_py)?.statistic)
}

#[pyfunction]
fn toy_statistic_exact(theta: f64, y: Vec<Vec<f64>>) -> PyResult<f64> {
    let data = ToyData::new(matrix(y)?).map_err(to_py)?;
    toy_statistic_closed_form(theta, &data).map_err(to_py)
}

#[pyfunction]
fn toy_sample(theta: f64, n: usize, r: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let d = toy_simulate(theta, n, r, seed).map_err(to_py)?;
    Ok(d.y().row_iter().map(|row| row.iter().copied().collect()).collect())
}

#[pyfunction]
fn expmix_test(lambda_: f64, psi: f64, y: Vec<Vec<f64>>) -> PyResult<PyTestResult> {
    let data = ExpMixData::new(matrix(y)?).map_err(to_py)?;
    let t = ExpMixModel::theta(lambda_, psi).map_err(to_py)?;
    modified_statistic(&ExpMixModel, &t, &data).map(Into::into).map_err(to_py)
}

#[pyfunction]
fn expmix_sample(lambda_: f64, psi: f64, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let d = expmix_simulate(lambda_, psi, n, seed).map_err(to_py)?;
    Ok(d.y().row_iter().map(|row| row.iter().copied().collect()).collect())
}

/// Eigenpairs of `info` whose eigenvalue is at most `rel_threshold` times the largest.
#[pyfunction]
#[pyo3(signature = (info, rel_threshold = 1e-8))]
fn detect_critical(info: Vec<Vec<f64>>, rel_threshold: f64) -> PyResult<Vec<(f64, Vec<f64>)>> {
    let m = matrix(info)?;
    if m.nrows() != m.ncols() {
        return Err(PyValueError::new_err("information matrix must be square"));
    }
    Ok(detect_critical_numeric(&m, rel_threshold)
        .into_iter()
        .map(|d| (d.eigenvalue, d.vector.iter().copied().collect()))
        .collect())
}

#[pyfunction]
fn chisq_quantile(df: usize, p: f64) -> PyResult<f64> {
    critscore::chisq_quantile(df, p).map_err(to_py)
}

#[pyfunction]
fn chisq_cdf(df: usize, x: f64) -> PyResult<f64> {
    critscore::chisq_cdf(df, x).map_err(to_py)
}

#[pyfunction]
fn chisq_sf(df: usize, x: f64) -> PyResult<f64> {
    critscore::chisq_sf(df, x).map_err(to_py)
}

fn sim_config(config: Option<&str>) -> PyResult<SimConfig> {
    match config {
        Some(src) => SimConfig::from_json(src).map_err(to_py),
        None => Ok(SimConfig::default()),
    }
}

fn sim_summary<'py>(py: Python<'py>, r: &SimResult) -> PyResult<Bound<'py, PyAny>> {
    to_object(
        py,
        &serde_json::json!({
            "mode": r.mode,
            "level": r.level,
            "critical_value": r.critical_value,
            "null_lambda": r.null_lambda,
            "mle_failures": r.mle_failures,
            "rows": r.rows,
        }),
    )
}

/// Coverage experiment from a JSON configuration (defaults fill missing fields).
#[pyfunction]
#[pyo3(signature = (config = None))]
fn simulate_coverage<'py>(py: Python<'py>, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let c = sim_config(config)?;
    let r = py.allow_threads(|| run_coverage(&c)).map_err(to_py)?;
    sim_summary(py, &r)
}

/// Rejection rates of the null `null_lambda` as the true scales vary.
#[pyfunction]
#[pyo3(signature = (null_lambda, config = None))]
fn simulate_power<'py>(py: Python<'py>, null_lambda: [f64; 2], config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let c = sim_config(config)?;
    let r = py.allow_threads(|| run_power(&c, null_lambda)).map_err(to_py)?;
    sim_summary(py, &r)
}

#[pymodule]
fn critscore_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<PyTestResult>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(lmm_test, m)?)?;
    m.add_function(wrap_pyfunction!(lmm_fit, m)?)?;
    m.add_function(wrap_pyfunction!(lmm_region, m)?)?;
    m.add_function(wrap_pyfunction!(toy_statistic, m)?)?;
    m.add_function(wrap_pyfunction!(toy_statistic_exact, m)?)?;
    m.add_function(wrap_pyfunction!(toy_sample, m)?)?;
    m.add_function(wrap_pyfunction!(expmix_test, m)?)?;
    m.add_function(wrap_pyfunction!(expmix_sample, m)?)?;
    m.add_function(wrap_pyfunction!(detect_critical, m)?)?;
    m.add_function(wrap_pyfunction!(chisq_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(chisq_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(chisq_sf, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_coverage, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_power, m)?)?;
    Ok(())
}
