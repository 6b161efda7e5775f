//! Python bindings: benchmark models, policy evaluation, the LP oracle and PQA-ALM.
//!
//! Policies cross the boundary as lists of per-state probability rows.

use almcmdp::al::{self, AlmConfig, DualState};
use almcmdp::cmdp::{self, TabularCmdp, TabularPolicy};
use almcmdp::envs;
use almcmdp::harness::{self, ExperimentConfig};
use almcmdp::lp;
use almcmdp::pqa::{self, PqaConfig, PqaOracle};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn policy_rows(policy: &TabularPolicy) -> Vec<Vec<f64>> {
    policy.rows().map(<[f64]>::to_vec).collect()
}

fn policy_from_rows(cmdp: &TabularCmdp, rows: Vec<Vec<f64>>) -> PyResult<TabularPolicy> {
    if rows.len() != cmdp.n_states() || rows.iter().any(|r| r.len() != cmdp.n_actions()) {
        return Err(PyValueError::new_err(format!(
            "policy must have {} rows of {} probabilities",
            cmdp.n_states(),
            cmdp.n_actions()
        )));
    }
    TabularPolicy::from_probs(cmdp.n_states(), cmdp.n_actions(), rows.concat()).map_err(value_error)
}

/// A validated tabular constrained MDP.
#[pyclass(name = "TabularCmdp", module = "almcmdp_py", frozen)]
struct PyCmdp {
    inner: TabularCmdp,
}

#[pymethods]
impl PyCmdp {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        TabularCmdp::from_json_str(text)
            .map(|inner| Self { inner })
            .map_err(value_error)
    }

    #[staticmethod]
    fn cliff_world() -> Self {
        Self {
            inner: envs::cliff_world().0,
        }
    }

    #[staticmethod]
    fn deep_sea_treasure() -> Self {
        Self {
            inner: envs::deep_sea_treasure().0,
        }
    }

    fn to_json(&self) -> String {
        self.inner.to_json_string()
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    #[getter]
    fn n_constraints(&self) -> usize {
        self.inner.n_constraints()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    #[getter]
    fn thresholds(&self) -> Vec<f64> {
        self.inner.thresholds()
    }

    fn __repr__(&self) -> String {
        format!(
            "TabularCmdp(n_states={}, n_actions={}, n_constraints={}, gamma={})",
            self.inner.n_states(),
            self.inner.n_actions(),
            self.inner.n_constraints(),
            self.inner.gamma()
        )
    }
}

/// Returns `(V(ρ), state values)` of `policy` for `reward` (the model reward by default).
#[pyfunction]
#[pyo3(signature = (cmdp, policy, reward=None))]
fn policy_evaluate(cmdp: &PyCmdp, policy: Vec<Vec<f64>>, reward: Option<Vec<f64>>) -> PyResult<(f64, Vec<f64>)> {
    let m = &cmdp.inner;
    let pi = policy_from_rows(m, policy)?;
    let reward = reward.unwrap_or_else(|| m.reward().to_vec());
    let values = cmdp::policy_evaluate(m, &pi, &reward).map_err(value_error)?;
    Ok((values.scalar_value, values.v))
}

/// Constraint values `V_ci(ρ)` of `policy`.
#[pyfunction]
fn constraint_values(cmdp: &PyCmdp, policy: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let pi = policy_from_rows(&cmdp.inner, policy)?;
    al::constraint_values(&cmdp.inner, &pi).map_err(value_error)
}

/// Solves the occupancy LP; keys `v_star`, `lambda_star`, `duality_gap`, `policy`.
#[pyfunction]
fn solve_lp<'py>(py: Python<'py>, cmdp: &PyCmdp) -> PyResult<Bound<'py, PyDict>> {
    let sol = lp::solve_occupancy_lp(&cmdp.inner).map_err(value_error)?;
    let out = PyDict::new(py);
    out.set_item("v_star", sol.v_star)?;
    out.set_item("lambda_star", sol.lambda_star.clone())?;
    out.set_item("duality_gap", sol.duality_gap)?;
    out.set_item("policy", policy_rows(&sol.policy()))?;
    Ok(out)
}

#[pyfunction]
fn slater_margin(cmdp: &PyCmdp, constraint: usize) -> PyResult<f64> {
    lp::slater_margin(&cmdp.inner, constraint).map_err(value_error)
}

#[pyfunction]
fn project_simplex(v: Vec<f64>) -> Vec<f64> {
    pqa::project_simplex(&v)
}

/// AL value of `policy` at multipliers `lam` and penalty `beta`.
#[pyfunction]
fn al_value(cmdp: &PyCmdp, policy: Vec<Vec<f64>>, lam: Vec<f64>, beta: f64) -> PyResult<f64> {
    let pi = policy_from_rows(&cmdp.inner, policy)?;
    let dual = DualState::new(lam, beta, 1.0, 1).map_err(value_error)?;
    al::al_value(&cmdp.inner, &pi, &dual).map_err(value_error)
}

/// Runs PQA-ALM from the uniform policy; returns `(policy rows, trace CSV)`.
#[pyfunction]
#[pyo3(signature = (cmdp, outer_iters=10, inner_iters=100, beta=10.0, eta=1.0))]
fn run_pqa_alm(
    cmdp: &PyCmdp,
    outer_iters: usize,
    inner_iters: u64,
    beta: f64,
    eta: f64,
) -> PyResult<(Vec<Vec<f64>>, String)> {
    let mut oracle = PqaOracle {
        config: PqaConfig::fixed(eta, inner_iters),
    };
    let config = AlmConfig::fixed(outer_iters, inner_iters, beta);
    let (policy, trace) = al::run_alm(&cmdp.inner, &mut oracle, &config).map_err(value_error)?;
    Ok((policy_rows(&policy), trace.to_csv_string()))
}

/// Runs an experiment config file and writes its outputs; returns `(report, all qualify)`.
#[pyfunction]
fn run_experiment(config_path: &str, out_dir: &str) -> PyResult<(String, bool)> {
    let config = ExperimentConfig::load(config_path).map_err(value_error)?;
    let result = harness::run_experiment(&config).map_err(value_error)?;
    harness::emit_outputs(&result, std::path::Path::new(out_dir)).map_err(value_error)?;
    Ok((result.report(), result.all_qualify()))
}

#[pymodule]
fn almcmdp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCmdp>()?;
    m.add_function(wrap_pyfunction!(policy_evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(constraint_values, m)?)?;
    m.add_function(wrap_pyfunction!(solve_lp, m)?)?;
    m.add_function(wrap_pyfunction!(slater_margin, m)?)?;
    m.add_function(wrap_pyfunction!(project_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(al_value, m)?)?;
    m.add_function(wrap_pyfunction!(run_pqa_alm, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
