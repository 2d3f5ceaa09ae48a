//! Python bindings over the command-line harness. Every call loads the
//! state directory, acts, and writes it back, exactly like one CLI verb.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sealvault::adversary::{self, canned_scenario, AttackScenario, ScenarioId};
use sealvault::harness::{demo_world, Harness, HarnessError};
use sealvault::sim::WorldConfig;

fn py_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Usage(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn scenario_id(name: &str) -> PyResult<ScenarioId> {
    ScenarioId::ALL
        .into_iter()
        .find(|id| id.as_str() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown scenario {name}")))
}

fn captured(f: impl FnOnce(&mut Vec<u8>) -> Result<(), HarnessError>) -> PyResult<String> {
    let mut out = Vec::new();
    f(&mut out).map_err(py_err)?;
    Ok(String::from_utf8_lossy(&out).into_owned())
}

/// Names of the canned attack scenarios.
#[pyfunction]
fn scenario_ids() -> Vec<&'static str> {
    ScenarioId::ALL.iter().map(|id| id.as_str()).collect()
}

/// Runs a canned scenario against a fresh in-memory machine. Returns the
/// outcome as JSON text and the list of mismatches against its expectation.
#[pyfunction]
#[pyo3(signature = (name, seed = 1))]
fn run_canned(name: &str, seed: u64) -> PyResult<(String, Vec<String>)> {
    let scenario = canned_scenario(scenario_id(name)?);
    let mut world = demo_world(seed).map_err(py_err)?;
    let outcome =
        adversary::run(&scenario, &mut world, &[]).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let diffs = adversary::diff_outcome(&scenario.expected_outcome, &outcome);
    Ok((outcome.to_json().to_string(), diffs))
}

/// A persistent machine in a state directory.
#[pyclass]
struct StateDir {
    harness: Harness,
}

#[pymethods]
impl StateDir {
    #[new]
    #[pyo3(signature = (path, seed = 0, now = None))]
    fn new(path: PathBuf, seed: u64, now: Option<u64>) -> Self {
        Self { harness: Harness::new(path, seed, now) }
    }

    fn exists(&self) -> bool {
        self.harness.exists()
    }

    #[pyo3(signature = (files, policy, transition_cost = None))]
    fn provision(&self, files: Vec<PathBuf>, policy: &str, transition_cost: Option<u64>) -> PyResult<String> {
        let mut config = WorldConfig::default();
        if let Some(c) = transition_cost {
            config.transition_cost = c;
        }
        captured(|out| self.harness.provision(&files, policy, config, out))
    }

    #[pyo3(signature = (advance = None, without_token = false))]
    fn commit(&self, advance: Option<u64>, without_token: bool) -> PyResult<String> {
        captured(|out| self.harness.commit(advance, without_token, out))
    }

    /// Runs a scenario given as JSON text; raises on an outcome mismatch.
    fn attack(&self, scenario_json: &str) -> PyResult<String> {
        let scenario: AttackScenario =
            serde_json::from_str(scenario_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        captured(|out| self.harness.attack(&scenario, out))
    }

    fn recover(&self, out_dir: PathBuf) -> PyResult<usize> {
        let mut sink = Vec::new();
        self.harness.recover(&out_dir, &mut sink).map_err(py_err)
    }

    #[pyo3(signature = (all = false))]
    fn report(&self, all: bool) -> PyResult<String> {
        captured(|out| self.harness.report(all, out))
    }

    fn advance_time(&self, secs: u64) -> PyResult<String> {
        captured(|out| self.harness.advance_time(secs, out))
    }

    /// `base` resolves `@PATH` arguments in the script.
    #[pyo3(signature = (script, base = PathBuf::from(".")))]
    fn run_workload(&self, script: &str, base: PathBuf) -> PyResult<String> {
        captured(|out| self.harness.run_workload(script, &base, out))
    }

    fn transcript(&self) -> PyResult<String> {
        self.harness.transcript_text().map_err(py_err)
    }
}

#[pymodule]
#[pyo3(name = "sealvault")]
fn sealvault_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(scenario_ids, m)?)?;
    m.add_function(wrap_pyfunction!(run_canned, m)?)?;
    m.add_class::<StateDir>()?;
    Ok(())
}
