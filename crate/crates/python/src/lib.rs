use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use proxmed::data::{Dataset, RowMatrix};
use proxmed::dml::{psi_dml, DmlConfig};
use proxmed::error::Error;
use proxmed::estimators::{EstimateReport, Method, Pipeline};
use proxmed::sim::{analytic_piie, generate, run_scenario, DgpCoefficients, McConfig, ScenarioSpec};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 | 3 => PyValueError::new_err(msg),
        5 => PyOSError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn matrix(rows: Vec<Vec<f64>>, n: usize, what: &str) -> PyResult<RowMatrix> {
    if rows.len() != n {
        return Err(PyValueError::new_err(format!("{what} has {} rows, expected {n}", rows.len())));
    }
    RowMatrix::from_rows(&rows).map_err(py_err)
}

fn dataset(
    y: Vec<f64>,
    a: Vec<f64>,
    m: Vec<f64>,
    x: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
) -> PyResult<Dataset> {
    let n = y.len();
    let (x, w, z) = (matrix(x, n, "x")?, matrix(w, n, "w")?, matrix(z, n, "z")?);
    Dataset::new(y, a, m, x, w, z).map_err(py_err)
}

fn rows(mat: &RowMatrix) -> Vec<Vec<f64>> {
    (0..mat.nrows()).map(|i| mat.row(i).to_vec()).collect()
}

fn report_dict<'py>(py: Python<'py>, r: &EstimateReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("method", r.method.tag())?;
    d.set_item("psi", r.psi_hat)?;
    d.set_item("piie", r.piie_hat)?;
    d.set_item("se", r.se)?;
    d.set_item("ci", (r.ci_lo, r.ci_hi))?;
    d.set_item("n_boot", r.n_boot)?;
    d.set_item("diagnostics", r.diagnostics.clone())?;
    Ok(d)
}

/// Draws `n` units from the linear-Gaussian simulation design.
///
/// Returns a dict with `y`, `a`, `m` (lists) and `x`, `w`, `z` (lists of rows).
#[pyfunction]
#[pyo3(signature = (n, seed=0))]
fn simulate(py: Python<'_>, n: usize, seed: u64) -> PyResult<Bound<'_, PyDict>> {
    let d = py
        .allow_threads(|| generate(&DgpCoefficients::default(), n, seed))
        .map_err(py_err)?
        .data;
    let out = PyDict::new(py);
    out.set_item("y", d.y().to_vec())?;
    out.set_item("a", d.a().to_vec())?;
    out.set_item("m", d.m().to_vec())?;
    out.set_item("x", rows(d.x()))?;
    out.set_item("w", rows(d.w()))?;
    out.set_item("z", rows(d.z()))?;
    Ok(out)
}

/// Population PIIE of the simulation design.
#[pyfunction]
fn true_piie() -> f64 {
    analytic_piie(&DgpCoefficients::default())
}

/// PIIE estimates with bootstrap intervals (`boot = 0` is allowed for P-MR
/// alone, which then uses a Wald interval). `DML-MR` is cross-fitted with
/// default settings and reports a Wald interval.
#[pyfunction]
#[pyo3(signature = (y, a, m, x, w, z, estimators=vec!["P-MR".to_string()], boot=200, seed=0))]
#[allow(clippy::too_many_arguments)]
fn estimate<'py>(
    py: Python<'py>,
    y: Vec<f64>,
    a: Vec<f64>,
    m: Vec<f64>,
    x: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    estimators: Vec<String>,
    boot: usize,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let d = dataset(y, a, m, x, w, z)?;
    let methods: Vec<Method> = estimators
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_, _>>()
        .map_err(py_err)?;
    let reports = py
        .allow_threads(|| -> Result<Vec<EstimateReport>, Error> {
            let parametric: Vec<Method> = methods.iter().copied().filter(|m| *m != Method::DmlMr).collect();
            let mut out = if parametric.is_empty() {
                Vec::new()
            } else {
                Pipeline::new(&parametric)?.estimate(&d, boot, seed)?
            };
            if methods.contains(&Method::DmlMr) {
                out.push(psi_dml(&d, &DmlConfig::default(), seed)?.report());
            }
            Ok(out)
        })
        .map_err(py_err)?;
    reports.iter().map(|r| report_dict(py, r)).collect()
}

/// Monte Carlo summary of one simulation scenario (1-4).
#[pyfunction]
#[pyo3(signature = (scenario, replications, n=1000, boot=200, seed=0))]
fn scenario(
    py: Python<'_>,
    scenario: u8,
    replications: usize,
    n: usize,
    boot: usize,
    seed: u64,
) -> PyResult<Bound<'_, PyDict>> {
    let s = py
        .allow_threads(|| {
            let cfg = McConfig {
                replications,
                n,
                n_boot: boot,
                seed,
                methods: Method::TABLE.to_vec(),
            };
            run_scenario(&ScenarioSpec::standard(scenario)?, &cfg)
        })
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("scenario", s.scenario)?;
    out.set_item("truth", s.truth)?;
    out.set_item("failed_replications", s.failed_replications)?;
    out.set_item("valid", s.valid)?;
    let table = PyDict::new(py);
    for r in &s.rows {
        let row = PyDict::new(py);
        row.set_item("bias", r.bias)?;
        row.set_item("mse", r.mse)?;
        row.set_item("coverage", r.coverage)?;
        row.set_item("length", r.length)?;
        row.set_item("replications", r.replications)?;
        table.set_item(r.method.tag(), row)?;
    }
    out.set_item("rows", table)?;
    Ok(out)
}

#[pymodule]
#[pyo3(name = "proxmed")]
fn proxmed_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(true_piie, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(scenario, m)?)?;
    Ok(())
}
