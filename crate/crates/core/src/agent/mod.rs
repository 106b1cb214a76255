//! The A2C agent, decomposed into the latent map `A`, the policy head `π`
//! and the value head.

mod a2c;
mod rollout;

pub use a2c::{actor_critic_loss, gae, train_agent, A2cConfig, AcLoss, TrainStats};
pub use rollout::{
    collect_dataset, evaluate_policy, greedy_actions, observations_tensor, random_policy_scores, record_replay,
    CollectConfig, EpisodeStats,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{Action, Observation, CHANNELS, FRAME_H, FRAME_W, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::genmodel::entropy;
use crate::nn::{softmax_in_place, softmax_rows, Conv2d, Layer, Linear, Mode, Param, Sequential};
use crate::persistence::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 256;
const CONV_FILTERS: usize = 32;

/// Activation of the agent's last hidden layer for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentLatent(pub Vec<f32>);

/// A probability vector over the six actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution(pub Vec<f32>);

impl ActionDistribution {
    pub fn new(p: Vec<f32>) -> Result<Self> {
        if p.len() != NUM_ACTIONS {
            return Err(Error::Shape(format!("policy needs {NUM_ACTIONS} entries, got {}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("policy entries".into()));
        }
        let sum: f32 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidArgument(format!("policy sums to {sum}")));
        }
        Ok(ActionDistribution(p))
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> Action {
        Action::ALL[argmax(&self.0)]
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.0)
    }
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Outputs of one batched forward pass.
#[derive(Debug, Clone)]
pub struct AgentOutput {
    pub latent: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
    pub values: Vec<f32>,
}

/// Conv trunk `A(s)` followed by linear policy and value heads.
#[derive(Debug, Clone)]
pub struct AgentNet {
    pub trunk: Sequential,
    pub policy: Linear,
    pub value: Linear,
}

impl AgentNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut ch = CHANNELS;
        for i in 0..4 {
            layers.push(Layer::Conv(Conv2d::new(&format!("agent.conv{i}"), ch, CONV_FILTERS, 3, 2, 1, &mut rng)));
            layers.push(Layer::relu());
            ch = CONV_FILTERS;
        }
        let flat = CONV_FILTERS * (FRAME_H / 16) * (FRAME_W / 16);
        layers.push(Layer::reshape(&[flat]));
        layers.push(Layer::Linear(Linear::new("agent.fc", flat, LATENT_DIM, &mut rng)));
        layers.push(Layer::relu());
        AgentNet {
            trunk: Sequential::new(layers),
            policy: Linear::new("agent.policy", LATENT_DIM, NUM_ACTIONS, &mut rng),
            value: Linear::new("agent.value", LATENT_DIM, 1, &mut rng),
        }
    }

    fn check_obs(obs: &Tensor) -> Result<()> {
        if obs.shape() != [obs.rows(), CHANNELS, FRAME_H, FRAME_W] || obs.rows() == 0 {
            return Err(Error::Shape(format!(
                "agent expects [n, {CHANNELS}, {FRAME_H}, {FRAME_W}], got {:?}",
                obs.shape()
            )));
        }
        Ok(())
    }

    fn check_latent(z: &Tensor) -> Result<()> {
        if z.shape() != [z.rows(), LATENT_DIM] || z.rows() == 0 {
            return Err(Error::Shape(format!("agent latent must be [n, {LATENT_DIM}], got {:?}", z.shape())));
        }
        Ok(())
    }

    /// `A(s)` for a batch of observations.
    pub fn latent(&self, obs: &Tensor) -> Result<Tensor> {
        Self::check_obs(obs)?;
        Ok(self.trunk.infer(obs))
    }

    /// `π(z)` for a batch of latents.
    pub fn policy_probs(&self, z: &Tensor) -> Result<Tensor> {
        Self::check_latent(z)?;
        Ok(softmax_rows(&self.policy.infer(z)))
    }

    pub fn infer(&self, obs: &Tensor) -> Result<AgentOutput> {
        let latent = self.latent(obs)?;
        let logits = self.policy.infer(&latent);
        let probs = softmax_rows(&logits);
        let values = self.value.infer(&latent).into_vec();
        Ok(AgentOutput { latent, logits, probs, values })
    }

    /// Forward pass that caches activations for [`AgentNet::backward`].
    pub fn forward(&mut self, obs: &Tensor) -> Result<AgentOutput> {
        Self::check_obs(obs)?;
        let latent = self.trunk.forward(obs, &mut Mode::Eval);
        let logits = self.policy.forward(&latent);
        let probs = softmax_rows(&logits);
        let values = self.value.forward(&latent).into_vec();
        Ok(AgentOutput { latent, logits, probs, values })
    }

    /// Accumulates parameter gradients given loss gradients with respect to
    /// the policy logits and the values.
    pub fn backward(&mut self, d_logits: &Tensor, d_values: &[f32]) {
        let dv = Tensor::from_vec(&[d_values.len(), 1], d_values.to_vec()).expect("value gradient shape");
        let mut dz = self.policy.backward(d_logits);
        dz.add_assign(&self.value.backward(&dv));
        self.trunk.backward(&dz);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.trunk.params();
        p.extend([&self.policy.weight, &self.policy.bias, &self.value.weight, &self.value.bias]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.trunk.params_mut();
        p.extend([&mut self.policy.weight, &mut self.policy.bias, &mut self.value.weight, &mut self.value.bias]);
        p
    }

    /// `A(s)` for a single observation.
    pub fn a_of_s(&self, obs: &Observation) -> Result<AgentLatent> {
        let t = observations_tensor(&[obs])?;
        Ok(AgentLatent(self.latent(&t)?.into_vec()))
    }

    /// `π(z)` for a single latent.
    pub fn pi_of_z(&self, z: &AgentLatent) -> Result<ActionDistribution> {
        if z.0.len() != LATENT_DIM {
            return Err(Error::Shape(format!("agent latent must have {LATENT_DIM} entries, got {}", z.0.len())));
        }
        let mut logits = self.policy.infer(&Tensor::from_vec(&[1, LATENT_DIM], z.0.clone())?).into_vec();
        softmax_in_place(&mut logits);
        Ok(ActionDistribution(logits))
    }

    pub fn value_of(&self, obs: &Observation) -> Result<f32> {
        let t = observations_tensor(&[obs])?;
        Ok(self.infer(&t)?.values[0])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.params())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut net = AgentNet::new(0);
        ckpt.restore(net.params_mut())?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        AgentNet::from_checkpoint(&load_checkpoint(path)?)
    }
}
