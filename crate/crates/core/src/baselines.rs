//! Ablated generator configurations and non-generative baselines.

use serde::{Deserialize, Serialize};

use crate::agent::{argmax, observations_tensor, AgentNet};
use crate::counterfactual::{cf_optimize, render_state, CfConfig, Identity, WaeDecoder};
use crate::env::{Action, Observation};
use crate::error::{Error, Result};
use crate::genmodel::GenInputs;
use crate::genmodel::GenModel;
use crate::persistence::{dequantize, RolloutDataset};
use crate::tensor::Tensor;

/// Generator inputs of one ablation configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub id: usize,
    pub encoder: bool,
    pub wae: bool,
    pub agent: bool,
    pub policy: bool,
}

const fn cfg(id: usize, encoder: bool, wae: bool, agent: bool, policy: bool) -> AblationConfig {
    AblationConfig { id, encoder, wae, agent, policy }
}

/// Configurations 1–10, by which of `E(s)`, `z_w`, `z`, `π` the generator sees.
pub const ABLATIONS: [AblationConfig; 10] = [
    cfg(1, false, false, false, true),
    cfg(2, false, false, true, false),
    cfg(3, false, false, true, true),
    cfg(4, false, true, false, false),
    cfg(5, false, true, false, true),
    cfg(6, true, false, false, true),
    cfg(7, true, false, true, false),
    cfg(8, true, false, true, true),
    cfg(9, true, true, false, false),
    cfg(10, true, true, false, true),
];

/// How a counterfactual is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfMethod {
    /// Edit the action distribution by hand.
    HandPerturb,
    /// Gradient descent in the configuration's latent space.
    Gradient,
}

impl AblationConfig {
    pub fn by_id(id: usize) -> Result<Self> {
        ABLATIONS
            .iter()
            .copied()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("ablation configuration {id} not in 1..=10")))
    }

    pub fn inputs(&self) -> GenInputs {
        GenInputs { encoder: self.encoder, wae: self.wae, agent: self.agent, policy: self.policy }
    }

    /// Gradient descent where a latent is available, hand editing otherwise.
    pub fn default_method(&self) -> CfMethod {
        if self.wae || self.agent {
            CfMethod::Gradient
        } else {
            CfMethod::HandPerturb
        }
    }
}

/// Raises `π(a′)` just above `π(a)` and renormalizes, so that `a′` becomes
/// the most likely action.
pub fn perturb_policy_hand(pi: &[f32], a: Action, target: Action) -> Result<Vec<f32>> {
    if a == target {
        return Err(Error::DegeneratePerturbation);
    }
    let mut out = pi.to_vec();
    out[target.id()] = pi[a.id()] * 1.01;
    let sum: f32 = out.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::DegeneratePerturbation);
    }
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub counterfactual: Observation,
    pub pi_after: Vec<f32>,
    pub steps: usize,
    pub success: bool,
}

/// Counterfactual for `obs` from a generator trained under an ablation.
pub fn ablation_generate(
    agent: &AgentNet,
    model: &GenModel,
    obs: &Observation,
    target: Action,
    method: CfMethod,
    config: &CfConfig,
) -> Result<AblationResult> {
    let inputs = model.inputs;
    let s = observations_tensor(&[obs])?;
    let z = agent.latent(&s)?;
    let pi = agent.policy_probs(&z)?.into_vec();
    let zv = z.data().to_vec();
    let (zw, z_used, pi_after, steps, success) = match method {
        CfMethod::HandPerturb => {
            if !inputs.policy {
                return Err(Error::InvalidArgument("hand perturbation needs π as a generator input".into()));
            }
            let p = perturb_policy_hand(&pi, Action::ALL[argmax(&pi)], target)?;
            let zw = if inputs.wae { Some(model.wae_encode(&z)?.into_vec()) } else { None };
            (zw, Some(zv), p, 0, true)
        }
        CfMethod::Gradient if inputs.wae => {
            let zw0 = model.wae_encode(&z)?.into_vec();
            let t = cf_optimize(&zw0, target, &agent.policy, &mut WaeDecoder::new(model), config)?;
            (Some(t.latent), None, t.policy, t.steps, t.success)
        }
        CfMethod::Gradient if inputs.agent => {
            let cfg = CfConfig { renormalize: false, ..*config };
            let t = cf_optimize(&zv, target, &agent.policy, &mut Identity, &cfg)?;
            (None, Some(t.latent), t.policy, t.steps, t.success)
        }
        CfMethod::Gradient => {
            return Err(Error::InvalidArgument("configuration has no latent to optimize".into()));
        }
    };
    let img = render_state(model, &s, zw.as_deref(), z_used.as_deref(), &pi_after)?;
    Ok(AblationResult {
        counterfactual: Observation { height: obs.height, width: obs.width, data: img.into_vec() },
        pi_after,
        steps,
        success,
    })
}

/// Dataset states indexed by agent latent, for the nearest-neighbour baseline.
#[derive(Debug, Clone)]
pub struct NnIndex {
    pub z: Tensor,
    /// The agent's greedy action in each indexed state.
    pub actions: Vec<usize>,
}

impl NnIndex {
    pub fn build(agent: &AgentNet, dataset: &RolloutDataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let idx: Vec<usize> = (0..dataset.len()).collect();
        let mut rows = Vec::new();
        for chunk in idx.chunks(64) {
            rows.extend_from_slice(agent.latent(&dataset.observations(chunk))?.data());
        }
        let z = Tensor::from_vec(&[dataset.len(), crate::agent::LATENT_DIM], rows)?;
        let actions = dataset.records.iter().map(|r| argmax(&r.policy)).collect();
        Ok(NnIndex { z, actions })
    }

    /// Index of and latent L2 distance to the closest state where the agent
    /// picks `target`; ties go to the lowest index.
    pub fn query(&self, z: &[f32], target: Action) -> Result<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &a) in self.actions.iter().enumerate() {
            if a != target.id() {
                continue;
            }
            let d: f64 = self.z.row(i).iter().zip(z).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, d)| (i, d.sqrt())).ok_or(Error::NoCounterfactual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnMatch {
    /// Record index in the dataset.
    pub index: usize,
    pub distance: f64,
    pub observation: Observation,
}

/// Nearest-neighbour counterfactual: the closest real state with the target
/// action. `index` must have been built from `dataset`.
pub fn nn_counterfactual(
    agent: &AgentNet,
    index: &NnIndex,
    dataset: &RolloutDataset,
    obs: &Observation,
    target: Action,
) -> Result<NnMatch> {
    let z = agent.a_of_s(obs)?;
    let (i, distance) = index.query(&z.0, target)?;
    Ok(NnMatch { index: i, distance, observation: dataset.observation(i) })
}

/// Pixel L2 distance from `candidate` to the closest observation in the
/// dataset; lower means more like a real state.
pub fn realism_distance(candidate: &[f32], dataset: &RolloutDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut best = f64::INFINITY;
    for r in &dataset.records {
        if r.observation.len() != candidate.len() {
            return Err(Error::Shape("candidate does not match dataset observations".into()));
        }
        let mut d = 0.0f32;
        for (&q, &c) in r.observation.iter().zip(candidate) {
            let diff = dequantize(q) - c;
            d += diff * diff;
        }
        best = best.min(d as f64);
    }
    Ok(best.sqrt())
}
