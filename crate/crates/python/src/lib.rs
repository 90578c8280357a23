//! Python bindings: grid operators, the exact propagator, schemes on single
//! states, and the experiment drivers returning JSON reports.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use stomax::cli::{self, Overrides, Report, Subcommand};
use stomax::experiments;
use stomax::grid::{self, FieldState, GridLayout, GridSpec};
use stomax::noise::{self, NoiseSpec, SpectralNoise};
use stomax::propagator::{self, MaxwellMatrix, PropagatorCache};
use stomax::schemes::{self, ModelSpec, SchemeKind};

fn py_err(e: stomax::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Uniform Yee grid on the unit square.
#[pyclass(module = "stomax_py", frozen)]
struct Grid {
    spec: GridSpec,
    layout: GridLayout,
}

impl Grid {
    fn state(&self, data: Vec<f64>) -> PyResult<FieldState> {
        FieldState::from_vec(&self.spec, data).map_err(py_err)
    }
}

#[pymethods]
impl Grid {
    #[new]
    #[pyo3(signature = (n_cells, epsilon = 1.0, mu = 1.0))]
    fn new(n_cells: usize, epsilon: f64, mu: f64) -> PyResult<Self> {
        let spec = GridSpec::new(n_cells, epsilon, mu).map_err(py_err)?;
        let layout = grid::build_layout(&spec).map_err(py_err)?;
        Ok(Grid { spec, layout })
    }

    #[getter]
    fn n_cells(&self) -> usize {
        self.spec.n_cells
    }

    #[getter]
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Smooth electric pulse with a divergence-free random magnetic field.
    fn initial_condition(&self, seed: u64) -> Vec<f64> {
        experiments::initial_condition(&self.layout, seed).into_vec()
    }

    fn apply_maxwell(&self, u: Vec<f64>) -> PyResult<Vec<f64>> {
        let u = self.state(u)?;
        Ok(grid::apply_maxwell(&self.spec, &u).map_err(py_err)?.into_vec())
    }

    /// Cell-centred divergence of the magnetic field, row-major `n x n`.
    fn divergence(&self, u: Vec<f64>) -> PyResult<Vec<f64>> {
        let u = self.state(u)?;
        grid::divergence_h(&self.spec, &u).map_err(py_err)
    }

    fn v_inner(&self, u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
        let (u, v) = (self.state(u)?, self.state(v)?);
        grid::v_inner(&self.spec, &u, &v).map_err(py_err)
    }

    fn energy(&self, u: Vec<f64>) -> PyResult<f64> {
        let u = self.state(u)?;
        grid::energy(&self.spec, &u).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid(n_cells={}, epsilon={}, mu={})",
            self.spec.n_cells, self.spec.epsilon, self.spec.mu
        )
    }
}

/// Exact `exp(dt A)` together with the assembled operator.
#[pyclass(module = "stomax_py", frozen)]
struct Propagator {
    spec: GridSpec,
    matrix: MaxwellMatrix,
    cache: PropagatorCache,
}

#[pymethods]
impl Propagator {
    #[new]
    fn new(grid: &Grid, dt: f64) -> PyResult<Self> {
        let matrix = propagator::assemble(&grid.spec, &grid.layout).map_err(py_err)?;
        let cache = propagator::exp_propagator(&matrix, dt).map_err(py_err)?;
        Ok(Propagator {
            spec: grid.spec,
            matrix,
            cache,
        })
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.cache.dt()
    }

    fn apply(&self, u: Vec<f64>) -> PyResult<Vec<f64>> {
        let u = FieldState::from_vec(&self.spec, u).map_err(py_err)?;
        Ok(self.cache.apply(&u).map_err(py_err)?.into_vec())
    }

    /// Largest `|Re lambda|` of the assembled operator.
    fn spectral_abscissa(&self) -> f64 {
        self.matrix.spectral_abscissa()
    }

    /// One step of `scheme` for `model` (JSON, see `ModelSpec`) with the
    /// nodal noise increment `dw`.
    fn step(&self, scheme: &str, model_json: &str, u: Vec<f64>, dw: Vec<f64>) -> PyResult<Vec<f64>> {
        let model: ModelSpec =
            serde_json::from_str(model_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let scheme: SchemeKind = serde_json::from_value(serde_json::Value::String(scheme.to_string()))
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let u = FieldState::from_vec(&self.spec, u).map_err(py_err)?;
        let dw = FieldState::from_vec(&self.spec, dw).map_err(py_err)?;
        let dt = self.cache.dt();
        let next = match scheme {
            SchemeKind::Sexp => schemes::sexp_step(&self.cache, &model, &u, &dw),
            SchemeKind::Em => schemes::em_step(&self.matrix, dt, &model, &u, &dw),
            SchemeKind::Sem => {
                let solver = propagator::sem_solver(&self.matrix, dt).map_err(py_err)?;
                schemes::sem_step(&solver, &model, &u, &dw)
            }
        };
        Ok(next.map_err(py_err)?.into_vec())
    }
}

/// Eigenvalue of the noise covariance for mode `(j, k)`.
#[pyfunction]
fn q_eigenvalue(j: i64, k: i64) -> PyResult<f64> {
    noise::q_eigenvalue(j, k).map_err(py_err)
}

/// Exact per-unit-time energy injection of additive noise on `grid`.
#[pyfunction]
fn drift_rate(grid: &Grid, lambda_e: f64, lambda_h: f64) -> PyResult<f64> {
    let noise = SpectralNoise::new(&grid.layout, &NoiseSpec::default()).map_err(py_err)?;
    let model = ModelSpec::pure_additive(lambda_e, lambda_h);
    experiments::theoretical_drift_rate(&noise, &model, &grid.spec, &grid.layout).map_err(py_err)
}

/// Runs a subcommand (`convergence`, `trace`, `divergence` or `check`) on a
/// JSON configuration with optional `key=value` overrides and returns the
/// report as JSON. Nothing is written to disk.
#[pyfunction]
#[pyo3(signature = (subcommand, config_json = "", overrides = Vec::new()))]
fn run(py: Python<'_>, subcommand: &str, config_json: &str, overrides: Vec<String>) -> PyResult<String> {
    let sub: Subcommand = serde_json::from_value(serde_json::Value::String(subcommand.to_string()))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let o = Overrides {
        set: overrides,
        ..Default::default()
    };
    let cfg = cli::parse_config(config_json, sub, &o).map_err(py_err)?;
    let report = py.detach(|| cli::execute(&cfg)).map_err(py_err)?;
    let value = match &report {
        Report::Convergence(r) => serde_json::to_value(r),
        Report::Trace(r) => serde_json::to_value(r),
        Report::Divergence(r) => serde_json::to_value(r),
        Report::Check(r) => serde_json::to_value(r),
    }
    .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(value.to_string())
}

#[pymodule]
fn stomax_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Grid>()?;
    m.add_class::<Propagator>()?;
    m.add_function(wrap_pyfunction!(q_eigenvalue, m)?)?;
    m.add_function(wrap_pyfunction!(drift_rate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
