//! Python bindings: simulator access, posterior replay, model inference and
//! cohort evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rlt4rec::evalharness::{evaluate_cohort, Agent, CohortSpec};
use rlt4rec::model::{load_checkpoint, next_item_dist, save_checkpoint, HyperParams, ModelParams, TokenSeq};
use rlt4rec::policies::{posterior_update, PolicyKind, PosteriorState};
use rlt4rec::simenv::{gen_offline_dataset, pd1, pd2, GroupModel, InteractionHistory};
use rlt4rec::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        e if e.is_usage() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn builtin(name: &str) -> Result<GroupModel, Error> {
    match name {
        "pd1" => Ok(pd1()),
        "pd2" => Ok(pd2()),
        other => GroupModel::load(&PathBuf::from(other)),
    }
}

fn replay(gm: &GroupModel, observations: &[(usize, f64)]) -> Result<Vec<f64>, Error> {
    let mut state = PosteriorState::new(gm);
    for &(v, r) in observations {
        state = posterior_update(&state, gm, v, r)?;
    }
    Ok(state.probs().to_vec())
}

/// Group model as JSON: `"pd1"`, `"pd2"` or a path to a saved model.
#[pyfunction]
fn group_model_json(dataset: &str) -> PyResult<String> {
    builtin(dataset).map(|gm| gm.to_json()).map_err(to_py)
}

/// Exact group posterior after the given `(item, rating)` observations.
#[pyfunction]
fn posterior(dataset: &str, observations: Vec<(usize, f64)>) -> PyResult<Vec<f64>> {
    let gm = builtin(dataset).map_err(to_py)?;
    replay(&gm, &observations).map_err(to_py)
}

/// Offline sequences as lists of `(item, rating)` plus their group labels.
#[pyfunction]
#[pyo3(signature = (dataset, users_per_group, seq_len, seed=0))]
fn generate(
    dataset: &str,
    users_per_group: usize,
    seq_len: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<(usize, f64)>>, Vec<usize>)> {
    let gm = builtin(dataset).map_err(to_py)?;
    let (data, _) = gen_offline_dataset(&gm, users_per_group, seq_len, seed).map_err(to_py)?;
    let seqs = data.sequences.iter().map(|s| s.pairs().to_vec()).collect();
    Ok((seqs, data.group_labels))
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: ModelParams<f32>,
}

#[pymethods]
impl PyModel {
    /// Fresh initialization from a JSON object of hyperparameters.
    #[staticmethod]
    #[pyo3(signature = (hyperparams="{}"))]
    fn init(hyperparams: &str) -> PyResult<Self> {
        let hp: HyperParams = serde_json::from_str(hyperparams).map_err(|e| to_py(e.into()))?;
        let inner = ModelParams::init(&hp).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.hp.n_items
    }

    /// Hyperparameters as JSON.
    fn hyperparams(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.hp).map_err(|e| to_py(e.into()))
    }

    /// Probability of each item being next, given a history and target.
    #[pyo3(signature = (history, target=5.0))]
    fn next_item_dist(&self, history: Vec<(usize, f64)>, target: f64) -> PyResult<Vec<f64>> {
        let prompt = TokenSeq::from_history(&InteractionHistory::from_pairs(history));
        let mut ratings = prompt.ratings().to_vec();
        ratings.push(target);
        let seq = TokenSeq::new(ratings, prompt.items().to_vec()).map_err(to_py)?;
        let mut out = next_item_dist(&self.inner, &[seq]).map_err(to_py)?;
        Ok(out.remove(0))
    }
}

/// Cohort evaluation; returns `(t, mean_rating, stderr)` rows.
#[pyfunction]
#[pyo3(signature = (policy, dataset, users_per_group=200, horizon=25, seed=0, model=None, target=5.0))]
fn evaluate(
    py: Python<'_>,
    policy: &str,
    dataset: &str,
    users_per_group: usize,
    horizon: usize,
    seed: u64,
    model: Option<&PyModel>,
    target: f64,
) -> PyResult<Vec<(usize, f64, f64)>> {
    let kind: PolicyKind = policy.parse().map_err(to_py)?;
    let gm = builtin(dataset).map_err(to_py)?;
    let spec = CohortSpec {
        users_per_group,
        horizon,
        ks: Vec::new(),
        seed,
        ..CohortSpec::default()
    };
    let agent = match model {
        Some(m) => Agent::with_model(kind, &m.inner, target),
        None => Agent::new(kind),
    };
    let (report, _) = py
        .detach(|| evaluate_cohort(&agent, &gm, &spec, dataset))
        .map_err(to_py)?;
    Ok(report.curve.iter().map(|p| (p.t, p.mean_rating, p.stderr)).collect())
}

#[pymodule]
fn rlt4rec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(group_model_json, m)?)?;
    m.add_function(wrap_pyfunction!(posterior, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
