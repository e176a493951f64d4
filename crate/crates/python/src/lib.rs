//! Python bindings. Quantities use the same names as the CLI (`omega_4`,
//! `delta_2`) and failed lines use 1-based bus numbers.

use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;

use ropdf::config::{parse_config_str, Overrides, RunConfig};
use ropdf::pipeline::{self, Command};
use ropdf::regression::{fit_history, RegressionOptions};

fn err(e: ropdf::Error) -> PyErr {
    match e {
        ropdf::Error::MissingArtifact { .. } => PyFileNotFoundError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn grid(z_min: f64, z_max: f64, n_cells: usize) -> PyResult<ropdf::SpatialGrid1D> {
    ropdf::SpatialGrid1D::new(z_min, z_max, n_cells).map_err(err)
}

/// Power network with machines at every bus.
#[pyclass(name = "Case", frozen)]
struct PyCase {
    inner: ropdf::GridCase,
}

#[pymethods]
impl PyCase {
    /// Bundled case (`case9`, `case30`, `case57`) or path to a case file.
    #[new]
    fn new(name_or_path: &str) -> PyResult<Self> {
        Ok(PyCase {
            inner: ropdf::config::load_case(name_or_path).map_err(err)?,
        })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    /// Equilibrium angles and the max power mismatch.
    fn equilibrium(&self) -> PyResult<(Vec<f64>, f64)> {
        let eq = ropdf::solve_equilibrium(&self.inner, 1e-10, 50).map_err(err)?;
        Ok((eq.delta, eq.residual_norm))
    }

    /// Copy without the line between buses `i` and `j` (1-based).
    fn without_line(&self, i: usize, j: usize) -> PyResult<Self> {
        if i == 0 || j == 0 {
            return Err(PyValueError::new_err("bus numbers start at 1"));
        }
        Ok(PyCase {
            inner: ropdf::apply_line_failure(&self.inner, i - 1, j - 1).map_err(err)?,
        })
    }

    /// Noise correlation matrix for `kind` (`uncorrelated`, `exponential`,
    /// `constant`); `param` overrides the standard lambda or rho.
    #[pyo3(signature = (kind, param=None))]
    fn correlation(&self, kind: &str, param: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
        let kind = match (kind, param) {
            ("exponential", Some(lambda)) => ropdf::CorrelationKind::Exponential { lambda },
            ("constant", Some(rho)) => ropdf::CorrelationKind::Constant { rho },
            (label, _) => ropdf::CorrelationKind::standard(&self.inner.name, label).map_err(err)?,
        };
        let m = ropdf::build_correlation(&self.inner, &kind).map_err(err)?;
        Ok(m.r
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Case({:?}, n={})", self.inner.name, self.inner.n)
    }
}

/// Run configuration; every key is optional.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => parse_config_str(text, "python").map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    /// Applies the CLI-style overrides.
    #[pyo3(signature = (*, out=None, seed=None, case=None, correlation=None, failure=None, qoi=None, method=None))]
    #[allow(clippy::too_many_arguments)]
    fn set(
        &mut self,
        out: Option<String>,
        seed: Option<u64>,
        case: Option<String>,
        correlation: Option<String>,
        failure: Option<String>,
        qoi: Option<Vec<String>>,
        method: Option<String>,
    ) -> PyResult<()> {
        let o = Overrides {
            out: out.map(Into::into),
            seed,
            case,
            correlation,
            failure,
            qoi: qoi.unwrap_or_default(),
            method,
        };
        let mut next = self.inner.clone();
        next.apply(&o).map_err(err)?;
        self.inner = next;
        Ok(())
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }
}

/// Runs one pipeline command into `out` and returns the written artifacts.
#[pyfunction]
fn run(command: &str, config: &PyConfig, out: &str) -> PyResult<Vec<String>> {
    let command: Command = command.parse().map_err(err)?;
    Ok(pipeline::run_command(command, &config.inner, out)
        .map_err(err)?
        .artifacts)
}

/// Reruns a manifest into `out`; returns (artifacts checked, mismatches).
#[pyfunction]
fn replay(manifest: &str, out: &str) -> PyResult<(usize, Vec<String>)> {
    let r = pipeline::replay(manifest, out).map_err(err)?;
    Ok((r.checked, r.mismatches))
}

#[pyfunction]
fn silverman_bandwidth(samples: Vec<f64>) -> PyResult<f64> {
    ropdf::silverman_bandwidth(&samples).map_err(err)
}

/// Gaussian KDE at the centres of a uniform grid; Silverman bandwidth by default.
#[pyfunction]
#[pyo3(signature = (samples, z_min, z_max, n_cells, bandwidth=None))]
fn kde(
    samples: Vec<f64>,
    z_min: f64,
    z_max: f64,
    n_cells: usize,
    bandwidth: Option<f64>,
) -> PyResult<Vec<f64>> {
    let g = grid(z_min, z_max, n_cells)?;
    let h = match bandwidth {
        Some(h) => h,
        None => ropdf::silverman_bandwidth(&samples).map_err(err)?,
    };
    ropdf::kde_evaluate(&samples, h, &g).map_err(err)
}

/// Transports `initial` (cell values on the grid) with a constant interface
/// speed; returns the density at each of `times` (the first is the start).
#[pyfunction]
#[pyo3(signature = (initial, z_min, z_max, speed, times, scheme="lax_wendroff_limited"))]
fn transport(
    initial: Vec<f64>,
    z_min: f64,
    z_max: f64,
    speed: f64,
    times: Vec<f64>,
    scheme: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let g = grid(z_min, z_max, initial.len())?;
    let scheme = match scheme {
        "upwind1" => ropdf::Scheme::Upwind1,
        "lax_wendroff_limited" => ropdf::Scheme::LaxWendroffLimited,
        other => return Err(PyValueError::new_err(format!("unknown scheme {other:?}"))),
    };
    let t_final = times.last().copied().unwrap_or(0.0).max(1e-12);
    let field = ropdf::AdvectionField::constant(vec![speed; g.n_cells + 1], t_final);
    let config = ropdf::SolverConfig {
        scheme,
        ..ropdf::SolverConfig::default()
    };
    let sol = ropdf::solve_ropdf(&initial, &g, &field, &times, &config).map_err(err)?;
    Ok(sol.density.values)
}

/// Regression function `E[y | x = z]` at the grid centres. Returns the
/// chosen method, the bandwidth (None for the line) and the values.
#[pyfunction]
#[pyo3(signature = (x, y, z_min, z_max, n_cells, mode="auto"))]
fn regress(
    x: Vec<f64>,
    y: Vec<f64>,
    z_min: f64,
    z_max: f64,
    n_cells: usize,
    mode: &str,
) -> PyResult<(String, Option<f64>, Vec<f64>)> {
    let g = grid(z_min, z_max, n_cells)?;
    let mode = serde_json::from_value(serde_json::Value::String(mode.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown mode {mode:?}")))?;
    let opts = RegressionOptions {
        mode,
        ..RegressionOptions::default()
    };
    let data = ropdf::RegressionData::new(x, y, 0.0, ropdf::Qoi::speed(0)).map_err(err)?;
    let est = fit_history(&[data], &g, &opts).map_err(err)?.remove(0);
    Ok((est.method.to_string(), est.bandwidth, est.m_values))
}

#[pymodule]
#[pyo3(name = "ropdf")]
fn ropdf_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCase>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(silverman_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(kde, m)?)?;
    m.add_function(wrap_pyfunction!(transport, m)?)?;
    m.add_function(wrap_pyfunction!(regress, m)?)?;
    Ok(())
}
