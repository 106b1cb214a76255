//! Python bindings: the environment, agent, generative model, replays and
//! the counterfactual operations.

use std::path::PathBuf;

use cfstates::agent::{argmax, observations_tensor, record_replay, AgentNet};
use cfstates::counterfactual::{self, CfConfig, CounterfactualResult, EntropyOrder, HighlightConfig, KeyFrameConfig};
use cfstates::env::{self, Action, MiniInvaders};
use cfstates::genmodel::{GenArch, GenInputs, GenModel};
use cfstates::persistence::{encode_png, Replay};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn err(e: cfstates::Error) -> PyErr {
    match e {
        cfstates::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn action(a: &Bound<'_, PyAny>) -> PyResult<Action> {
    if let Ok(id) = a.extract::<usize>() {
        return Action::from_id(id).map_err(err);
    }
    let name: String = a.extract()?;
    Action::from_name(&name).map_err(err)
}

fn png<'py>(py: Python<'py>, frame: &env::Frame) -> PyResult<Bound<'py, PyBytes>> {
    Ok(PyBytes::new(py, &encode_png(frame).map_err(err)?))
}

/// `(id, name)` for every action.
#[pyfunction]
fn actions() -> Vec<(usize, &'static str)> {
    Action::ALL.iter().map(|a| (a.id(), a.name())).collect()
}

/// A stack of frames in planar channel order.
#[pyclass(name = "Observation", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyObservation(env::Observation);

#[pymethods]
impl PyObservation {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        env::Observation::from_planar(height, width, data).map(Self).map_err(err)
    }

    /// `(channels, height, width)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.0.shape();
        (c, h, w)
    }

    fn data(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    fn latest_png<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        png(py, &self.0.latest_frame())
    }
}

#[pyclass(name = "Env")]
struct PyEnv(MiniInvaders);

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (seed, frame_skip = env::DEFAULT_FRAME_SKIP))]
    fn new(seed: u64, frame_skip: usize) -> Self {
        Self(MiniInvaders::new(seed, frame_skip))
    }

    /// Applies an action id or name; returns `(reward, done)`.
    fn step(&mut self, a: &Bound<'_, PyAny>) -> PyResult<(f32, bool)> {
        self.0.step(action(a)?).map_err(err)
    }

    #[getter]
    fn done(&self) -> bool {
        self.0.done()
    }

    #[getter]
    fn score(&self) -> f32 {
        self.0.score
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps
    }

    fn observation(&self) -> PyObservation {
        PyObservation(self.0.observation.clone())
    }

    fn frame_png<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        png(py, &self.0.observation.latest_frame())
    }
}

#[pyclass(name = "Agent", frozen)]
struct PyAgent(AgentNet);

#[pymethods]
impl PyAgent {
    /// A freshly initialized, untrained agent.
    #[new]
    fn new(seed: u64) -> Self {
        Self(AgentNet::new(seed))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        AgentNet::load(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    /// Action probabilities for one observation.
    fn policy(&self, obs: &PyObservation) -> PyResult<Vec<f32>> {
        let z = self.0.latent(&observations_tensor(&[&obs.0]).map_err(err)?).map_err(err)?;
        Ok(self.0.policy_probs(&z).map_err(err)?.into_vec())
    }

    /// Greedy action id.
    fn act(&self, obs: &PyObservation) -> PyResult<usize> {
        Ok(argmax(&self.policy(obs)?))
    }

    /// Plays one greedy episode and records it.
    #[pyo3(signature = (seed, id, frame_skip = env::DEFAULT_FRAME_SKIP))]
    fn record(&self, seed: u64, id: &str, frame_skip: usize) -> PyResult<PyReplay> {
        record_replay(&self.0, seed, id, frame_skip).map(PyReplay).map_err(err)
    }
}

#[pyclass(name = "Replay", frozen)]
struct PyReplay(Replay);

#[pymethods]
impl PyReplay {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Replay::load(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }

    #[getter]
    fn score(&self) -> f32 {
        self.0.score
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn actions(&self) -> Vec<u8> {
        self.0.steps.iter().map(|s| s.action).collect()
    }

    fn entropies(&self) -> Vec<f64> {
        self.0.entropies()
    }

    fn observation(&self, t: usize) -> PyResult<PyObservation> {
        self.0.observation(t).map(PyObservation).map_err(err)
    }

    fn frame_png<'py>(&self, py: Python<'py>, t: usize) -> PyResult<Bound<'py, PyBytes>> {
        png(py, &self.0.frame(t).map_err(err)?)
    }
}

#[pyclass(name = "GenModel", frozen)]
struct PyGenModel(GenModel);

#[pymethods]
impl PyGenModel {
    /// An untrained full model.
    #[new]
    #[pyo3(signature = (seed, width_divisor = 4))]
    fn new(seed: u64, width_divisor: usize) -> PyResult<Self> {
        let arch = GenArch { width_divisor, ..Default::default() };
        GenModel::new(arch, GenInputs::FULL, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        GenModel::load(&dir).map(Self).map_err(err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.0.save(&dir).map_err(err)
    }
}

#[pyclass(name = "Counterfactual", frozen)]
struct PyCounterfactual(CounterfactualResult);

#[pymethods]
impl PyCounterfactual {
    #[getter]
    fn action(&self) -> usize {
        self.0.action.id()
    }

    #[getter]
    fn target(&self) -> usize {
        self.0.target.id()
    }

    #[getter]
    fn success(&self) -> bool {
        self.0.success
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps
    }

    #[getter]
    fn latent_delta(&self) -> f64 {
        self.0.latent_delta
    }

    #[getter]
    fn pi_agent(&self) -> Vec<f32> {
        self.0.pi_agent.clone()
    }

    #[getter]
    fn pi_before(&self) -> Vec<f32> {
        self.0.pi_before.clone()
    }

    #[getter]
    fn pi_after(&self) -> Vec<f32> {
        self.0.pi_after.clone()
    }

    #[getter]
    fn objective(&self) -> Vec<f64> {
        self.0.objective.clone()
    }

    fn counterfactual(&self) -> PyObservation {
        PyObservation(self.0.counterfactual.clone())
    }

    /// PNG bytes keyed by `query`, `reconstruction`, `counterfactual` and
    /// `highlight`.
    fn panels<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let p = self.0.panels(&HighlightConfig::default()).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("query", png(py, &p.query)?)?;
        d.set_item("reconstruction", png(py, &p.reconstruction)?)?;
        d.set_item("counterfactual", png(py, &p.counterfactual)?)?;
        d.set_item("highlight", png(py, &p.highlight)?)?;
        Ok(d)
    }
}

fn cf_config(max_steps: Option<usize>, step_size: Option<f32>) -> CfConfig {
    let mut c = CfConfig::default();
    if let Some(v) = max_steps {
        c.max_steps = v;
    }
    if let Some(v) = step_size {
        c.step_size = v;
    }
    c
}

#[pyfunction]
#[pyo3(signature = (agent, model, obs, target, max_steps = None, step_size = None))]
fn generate_counterfactual(
    py: Python<'_>,
    agent: &PyAgent,
    model: &PyGenModel,
    obs: &PyObservation,
    target: &Bound<'_, PyAny>,
    max_steps: Option<usize>,
    step_size: Option<f32>,
) -> PyResult<PyCounterfactual> {
    let target = action(target)?;
    let config = cf_config(max_steps, step_size);
    py.detach(|| counterfactual::generate_counterfactual(&agent.0, &model.0, &obs.0, target, &config))
        .map(PyCounterfactual)
        .map_err(err)
}

/// Returns the chosen action id and `(action, success, steps, latent_delta)`
/// for every candidate tried.
#[pyfunction]
#[pyo3(signature = (agent, model, obs, max_steps = None, step_size = None))]
fn select_cf_action(
    py: Python<'_>,
    agent: &PyAgent,
    model: &PyGenModel,
    obs: &PyObservation,
    max_steps: Option<usize>,
    step_size: Option<f32>,
) -> PyResult<(usize, Vec<(usize, bool, usize, f64)>)> {
    let config = cf_config(max_steps, step_size);
    let (a, table) =
        py.detach(|| counterfactual::select_cf_action(&agent.0, &model.0, &obs.0, &config)).map_err(err)?;
    Ok((a.id(), table.into_iter().map(|c| (c.action.id(), c.success, c.steps, c.latent_delta)).collect()))
}

#[pyfunction]
#[pyo3(signature = (entropies, n, min_gap = 3, order = "low"))]
fn select_key_frames(entropies: Vec<f64>, n: usize, min_gap: usize, order: &str) -> PyResult<Vec<usize>> {
    let order = match order {
        "low" => EntropyOrder::Low,
        "high" => EntropyOrder::High,
        o => return Err(PyValueError::new_err(format!("order must be 'low' or 'high', not {o:?}"))),
    };
    counterfactual::select_key_frames(&entropies, n, &KeyFrameConfig { min_gap, order }).map_err(err)
}

#[pymodule(name = "cfstates")]
pub fn cfstates_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyObservation>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyAgent>()?;
    m.add_class::<PyReplay>()?;
    m.add_class::<PyGenModel>()?;
    m.add_class::<PyCounterfactual>()?;
    m.add_function(wrap_pyfunction!(actions, m)?)?;
    m.add_function(wrap_pyfunction!(generate_counterfactual, m)?)?;
    m.add_function(wrap_pyfunction!(select_cf_action, m)?)?;
    m.add_function(wrap_pyfunction!(select_key_frames, m)?)?;
    Ok(())
}
