//! Python bindings: configuration, the environment, the conformal radius,
//! the function-encoder basis, checkpoints and the top-level operations.
//! Structured results (summaries, metrics, acceptance reports) come back as
//! plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

use shieldrl::conformal::{AcpConfig, AcpState};
use shieldrl::env::{HiddenParams, PointEnv};
use shieldrl::function_encoder::{BasisSet, TransitionDataset};
use shieldrl::harness::{self, acceptance, Checkpoint, EvalOptions, ExperimentConfig, MetricsWriter};

fn err(e: shieldrl::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_suite(name: &str) -> Option<acceptance::Suite> {
    acceptance::Suite::EACH
        .into_iter()
        .chain([acceptance::Suite::All])
        .find(|s| s.name() == name)
}

/// Experiment configuration, built from TOML text plus `section.key=value`
/// overrides.
#[pyclass(name = "Config", module = "shieldrl_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = "", overrides = Vec::new()))]
    fn new(toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml_with_overrides(toml, &overrides).map_err(err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.experiment.seed
    }

    #[getter]
    fn policy_input_dim(&self) -> usize {
        self.inner.policy_input_dim()
    }
}

#[pyclass(name = "Env", module = "shieldrl_py")]
struct PyEnv {
    inner: PointEnv,
}

#[pymethods]
impl PyEnv {
    /// `phi` is `(gravity, mass, damping, friction)` multipliers; nominal by default.
    #[new]
    #[pyo3(signature = (config, seed = 0, phi = None))]
    fn new(config: &PyConfig, seed: u64, phi: Option<[f64; 4]>) -> PyResult<Self> {
        let phi = phi.map_or(HiddenParams::nominal(), |p| HiddenParams {
            gravity_scale: p[0],
            mass_scale: p[1],
            damping_scale: p[2],
            friction_scale: p[3],
        });
        let inner = PointEnv::reset_seeded(&config.inner.env, phi, seed).map_err(err)?;
        Ok(Self { inner })
    }

    fn observation(&self) -> Vec<f64> {
        self.inner.observation()
    }

    /// Returns `(observation, reward, cost, done)`.
    fn step(&mut self, action: [f64; 2]) -> PyResult<(Vec<f64>, f64, u8, bool)> {
        let t = self.inner.step(action).map_err(err)?;
        Ok((self.inner.observation(), t.reward, t.cost, self.inner.done()))
    }

    /// Safety margin at the current position; `<= 0` means a collision.
    fn nu(&self) -> f64 {
        self.inner.nu_at(self.inner.state().pos())
    }

    #[getter]
    fn done(&self) -> bool {
        self.inner.done()
    }

    /// Position and velocity, the state the dynamics model predicts.
    #[getter]
    fn kinematics(&self) -> Vec<f64> {
        self.inner.kinematics().to_vec()
    }

    #[getter]
    fn phi(&self) -> Vec<f64> {
        self.inner.phi().to_vec()
    }

    #[getter]
    fn obstacles(&self) -> Vec<[f64; 2]> {
        self.inner.layout().obstacles.clone()
    }

    #[getter]
    fn goal(&self) -> [f64; 2] {
        self.inner.layout().goal
    }
}

/// Adaptive conformal radius over a stream of nonconformity scores.
#[pyclass(name = "Acp", module = "shieldrl_py")]
struct PyAcp {
    inner: AcpState,
}

#[pymethods]
impl PyAcp {
    #[new]
    #[pyo3(signature = (delta = 0.02, warmup_len = 100, eta_scale = 0.05, min_scores = 5))]
    fn new(delta: f64, warmup_len: usize, eta_scale: f64, min_scores: usize) -> PyResult<Self> {
        let cfg = AcpConfig {
            delta,
            warmup_len,
            eta_scale,
            min_scores,
        };
        cfg.validate().map_err(err)?;
        Ok(Self {
            inner: AcpState::new(&cfg),
        })
    }

    fn observe(&mut self, score: f64) -> PyResult<()> {
        self.inner.observe(score).map_err(err)
    }

    #[getter]
    fn radius(&self) -> f64 {
        self.inner.radius()
    }

    #[getter]
    fn miss_rate(&self) -> f64 {
        self.inner.miss_rate()
    }

    #[getter]
    fn warmed_up(&self) -> bool {
        self.inner.warmed_up()
    }
}

#[pyclass(name = "Basis", module = "shieldrl_py", skip_from_py_object)]
#[derive(Clone)]
struct PyBasis {
    inner: BasisSet,
}

#[pymethods]
impl PyBasis {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = BasisSet::load(&path).map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, None).map_err(err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    /// Least-squares coefficients from `(state, action, next_state)` rows;
    /// returns `(coefficients, residual)`.
    #[pyo3(signature = (states, actions, next_states, ridge = 1e-6))]
    fn fit(
        &self,
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        next_states: Vec<Vec<f64>>,
        ridge: f64,
    ) -> PyResult<(Vec<f64>, f64)> {
        if states.len() != actions.len() || states.len() != next_states.len() {
            return Err(PyValueError::new_err(
                "states, actions and next_states differ in length",
            ));
        }
        let mut data = TransitionDataset::new();
        for ((s, a), n) in states.iter().zip(&actions).zip(&next_states) {
            data.push(s, a, n);
        }
        let c = self.inner.compute_coefficients(&data, ridge).map_err(err)?;
        Ok((c.b, c.residual))
    }

    fn predict_next_state(&self, coefficients: Vec<f64>, state: Vec<f64>, action: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner
            .predict_next_state(&coefficients, &state, &action)
            .map_err(err)
    }
}

#[pyclass(name = "Checkpoint", module = "shieldrl_py", skip_from_py_object)]
#[derive(Clone)]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn epochs_done(&self) -> usize {
        self.inner.epochs_done
    }

    #[getter]
    fn steps_done(&self) -> usize {
        self.inner.steps_done
    }

    #[getter]
    fn lagrange_multiplier(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    /// Evaluation summary as a dict. `shield=None` keeps the checkpoint's setting.
    #[pyo3(signature = (episodes = 100, ood = false, shield = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        episodes: usize,
        ood: bool,
        shield: Option<bool>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mut opts = EvalOptions::new(episodes, ood);
        opts.shield = shield;
        let ckpt = &self.inner;
        let (summary, _) = py.detach(|| harness::evaluate(ckpt, &opts, None)).map_err(err)?;
        to_py(py, &summary)
    }
}

/// Collects random-policy data and trains a basis.
#[pyfunction]
fn pretrain_fe(py: Python<'_>, config: &PyConfig) -> PyResult<PyBasis> {
    let cfg = &config.inner;
    let (inner, _) = py.detach(|| harness::pretrain_fe(cfg)).map_err(err)?;
    Ok(PyBasis { inner })
}

/// Trains a policy; returns the checkpoint and the metric records.
#[pyfunction]
#[pyo3(signature = (config, basis = None))]
fn train<'py>(
    py: Python<'py>,
    config: &PyConfig,
    basis: Option<&PyBasis>,
) -> PyResult<(PyCheckpoint, Bound<'py, PyAny>)> {
    let cfg = &config.inner;
    let basis = basis.map(|b| b.inner.clone());
    let (ckpt, records) = py
        .detach(|| {
            let mut writer = MetricsWriter::memory();
            harness::train(cfg, basis, &mut writer).map(|c| (c, writer.records))
        })
        .map_err(err)?;
    Ok((PyCheckpoint { inner: ckpt }, to_py(py, &records)?))
}

/// Runs one acceptance suite by name and returns its report entries.
#[pyfunction]
fn run_acceptance<'py>(py: Python<'py>, suite: &str) -> PyResult<Bound<'py, PyAny>> {
    let s = parse_suite(suite).ok_or_else(|| {
        let names: Vec<&str> = acceptance::Suite::EACH.iter().map(|s| s.name()).collect();
        PyValueError::new_err(format!(
            "unknown suite {suite:?}; expected one of {} or all",
            names.join(", ")
        ))
    })?;
    let results = py
        .detach(|| acceptance::run_suite(s, &mut std::io::sink()))
        .map_err(err)?;
    to_py(py, &results)
}

#[pymodule]
fn shieldrl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyAcp>()?;
    m.add_class::<PyBasis>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(pretrain_fe, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_acceptance, m)?)?;
    Ok(())
}
