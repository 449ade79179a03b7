//! Python bindings: the simulator, the composition rule, GAE, and the
//! gradient and coverage checks.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;

use aspmcp_core::analysis::{coverage as coverage_of, gradcheck as run_gradcheck, COVERAGE_CELL};
use aspmcp_core::asp::load_primitives;
use aspmcp_core::env::{observe, Action, EnvState, Goal, RewardMode, TaskSpec, Variant, View};
use aspmcp_core::policy::{compose_raw, GATE_FLOOR};
use aspmcp_core::ppo::{compute_gae, Trajectory};
use aspmcp_core::{Error, SimRng};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Contract(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// One simulator instance with its own RNG. Observations use the
/// positions-and-goal layout.
#[pyclass(name = "Env", unsendable)]
struct PyEnv {
    task: TaskSpec,
    rng: SimRng,
    state: Option<(EnvState, Goal)>,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (task, seed=0))]
    fn new(task: &str, seed: u64) -> PyResult<Self> {
        let variant: Variant = task.parse().map_err(py_err)?;
        Ok(Self {
            task: TaskSpec::new(variant),
            rng: SimRng::seed_from_u64(seed),
            state: None,
        })
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        View::PositionsAndGoal.dim()
    }

    #[getter]
    fn horizon(&self) -> u32 {
        self.task.horizon
    }

    fn reset(&mut self) -> PyResult<Vec<f64>> {
        let (s, g) = self.task.reset(&mut self.rng).map_err(py_err)?;
        let obs = observe(&s, &g, View::PositionsAndGoal);
        self.state = Some((s, g));
        Ok(obs)
    }

    /// Returns `(obs, reward, done, success)`.
    fn step(&mut self, action: Vec<f64>) -> PyResult<(Vec<f64>, f64, bool, bool)> {
        if action.len() != Action::DIM {
            return Err(PyValueError::new_err(format!("action must have {} entries", Action::DIM)));
        }
        let (s, g) = self
            .state
            .take()
            .ok_or_else(|| PyRuntimeError::new_err("call reset() first"))?;
        let tr = self
            .task
            .step(&s, &Action::from_slice(&action), &g, RewardMode::EveryStep)
            .map_err(py_err)?;
        let obs = observe(&tr.state, &g, View::PositionsAndGoal);
        if !tr.done {
            self.state = Some((tr.state, g));
        }
        Ok((obs, tr.reward, tr.done, tr.success))
    }
}

/// Weighted product of diagonal Gaussians. `means` and `variances` are
/// K rows of action_dim entries; returns `(mu, variance)`.
#[pyfunction]
fn compose(means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let k = weights.len();
    let a = means.first().map_or(0, Vec::len);
    let rows_ok = |m: &[Vec<f64>]| m.len() == k && m.iter().all(|r| r.len() == a);
    if k == 0 || a == 0 || !rows_ok(&means) || !rows_ok(&variances) {
        return Err(PyValueError::new_err("need K rows of equal length for means and variances"));
    }
    if weights.iter().any(|w| !(*w >= GATE_FLOOR)) || variances.iter().flatten().any(|v| !(*v > 0.0)) {
        return Err(PyValueError::new_err("weights must be >= the gate floor and variances positive"));
    }
    let m: Vec<f64> = means.concat();
    let v: Vec<f64> = variances.concat();
    Ok(compose_raw(&m, &v, &weights, a))
}

/// Generalized advantage estimates and returns for one trajectory.
/// `values` has one more entry than `rewards`: the bootstrap value.
#[pyfunction]
fn gae(rewards: Vec<f64>, values: Vec<f64>, dones: Vec<bool>, gamma: f64, lam: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if values.len() != rewards.len() + 1 || dones.len() != rewards.len() {
        return Err(PyValueError::new_err("need len(values) == len(rewards) + 1 == len(dones) + 1"));
    }
    let mut t = Trajectory::new(1, 1);
    for (i, r) in rewards.iter().enumerate() {
        t.push(&[0.0], &[0.0], 0.0, *r, values[i], dones[i], i as u32);
    }
    t.finish(values[rewards.len()]);
    compute_gae(&t, gamma, lam).map_err(py_err)
}

/// Runs every finite-difference gradient suite; returns
/// `(passed, worst_relative_error)`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<(bool, f64)> {
    let r = py.detach(|| run_gradcheck(seed, false)).map_err(py_err)?;
    Ok((r.passed(), r.worst))
}

/// Visited fraction of the pretraining workspace under `n_skills` random
/// compositions of the primitives stored in `checkpoint`.
#[pyfunction]
#[pyo3(signature = (checkpoint, n_skills=32, seed=0))]
fn coverage(checkpoint: PathBuf, n_skills: usize, seed: u64) -> PyResult<f64> {
    let prims = load_primitives(&checkpoint).map_err(py_err)?;
    let task = TaskSpec::new(Variant::Pretrain);
    let r = coverage_of(&prims, &task, n_skills, COVERAGE_CELL, &mut SimRng::seed_from_u64(seed)).map_err(py_err)?;
    Ok(r.visited_fraction)
}

/// SHA-256 of the primitive parameters stored in `checkpoint`.
#[pyfunction]
fn primitives_fingerprint(checkpoint: PathBuf) -> PyResult<String> {
    Ok(load_primitives(&checkpoint).map_err(py_err)?.fingerprint())
}

#[pymodule]
fn aspmcp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnv>()?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(gae, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(primitives_fingerprint, m)?)?;
    Ok(())
}
