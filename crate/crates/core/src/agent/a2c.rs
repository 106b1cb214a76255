use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{observations_tensor, AgentNet};
use crate::env::{Action, MiniInvaders, DEFAULT_FRAME_SKIP, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, zero_grads, Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct A2cConfig {
    pub total_steps: usize,
    pub num_envs: usize,
    pub rollout_len: usize,
    pub gamma: f32,
    pub lambda: f32,
    pub lr: f32,
    pub entropy_coef: f32,
    pub value_coef: f32,
    pub max_grad_norm: f32,
    pub frame_skip: usize,
}

impl Default for A2cConfig {
    fn default() -> Self {
        A2cConfig {
            total_steps: 300_000,
            num_envs: 8,
            rollout_len: 5,
            gamma: 0.99,
            lambda: 1.0,
            lr: 1e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 40.0,
            frame_skip: DEFAULT_FRAME_SKIP,
        }
    }
}

/// Generalized advantage estimation over one environment's rollout.
///
/// `dones[t]` marks that the transition at `t` ended the episode, so nothing
/// after it is bootstrapped. Returns `(advantages, returns)`.
pub fn gae(
    rewards: &[f32],
    values: &[f32],
    dones: &[bool],
    last_value: f32,
    gamma: f32,
    lambda: f32,
) -> (Vec<f32>, Vec<f32>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "rollout arrays differ in length");
    let mut adv = vec![0.0f32; n];
    let mut next_adv = 0.0f64;
    let mut next_value = last_value as f64;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] as f64 + gamma as f64 * live * next_value - values[t] as f64;
        next_adv = delta + gamma as f64 * lambda as f64 * live * next_adv;
        adv[t] = next_adv as f32;
        next_value = values[t] as f64;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Value and gradients of the actor-critic objective, averaged over the batch:
/// `−log π(a|s)·A − β·H(π(s)) + c_v·½(R − V(s))²`.
#[derive(Debug, Clone)]
pub struct AcLoss {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub d_logits: Tensor,
    pub d_values: Vec<f32>,
}

pub fn actor_critic_loss(
    logits: &Tensor,
    values: &[f32],
    actions: &[usize],
    advantages: &[f32],
    returns: &[f32],
    entropy_coef: f32,
    value_coef: f32,
) -> Result<AcLoss> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if values.len() != n || actions.len() != n || advantages.len() != n || returns.len() != n {
        return Err(Error::Shape("actor-critic batch arrays differ in length".into()));
    }
    let k = logits.row_len();
    let inv_n = 1.0 / n as f64;
    let mut d_logits = Tensor::zeros(logits.shape());
    let mut d_values = vec![0.0f32; n];
    let (mut policy_loss, mut value_loss, mut ent_sum) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln();
        let logp: Vec<f64> = row.iter().map(|&l| l as f64 - lse).collect();
        let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
        let h: f64 = -p.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
        let a = actions[i];
        if a >= k {
            return Err(Error::InvalidArgument(format!("action {a} out of range")));
        }
        let adv = advantages[i] as f64;
        policy_loss -= logp[a] * adv;
        ent_sum += h;
        let err = returns[i] as f64 - values[i] as f64;
        value_loss += 0.5 * err * err;
        let d = d_logits.row_mut(i);
        for j in 0..k {
            let onehot = if j == a { 1.0 } else { 0.0 };
            let g = -adv * (onehot - p[j]) + entropy_coef as f64 * p[j] * (logp[j] + h);
            d[j] = (g * inv_n) as f32;
        }
        d_values[i] = (-(value_coef as f64) * err * inv_n) as f32;
    }
    let (policy_loss, value_loss, entropy) = (policy_loss * inv_n, value_loss * inv_n, ent_sum * inv_n);
    let loss = policy_loss - entropy_coef as f64 * entropy + value_coef as f64 * value_loss;
    Ok(AcLoss { loss, policy_loss, value_loss, entropy, d_logits, d_values })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    pub updates: usize,
    /// Final scores of completed training episodes, in completion order.
    pub episode_scores: Vec<f32>,
}

/// Synchronous advantage actor-critic over `num_envs` parallel environments.
/// Deterministic for a given config and seed. With `total_steps == 0` the
/// freshly initialized network is returned.
pub fn train_agent(
    config: &A2cConfig,
    seed: u64,
    mut progress: impl FnMut(&TrainStats),
) -> Result<(AgentNet, TrainStats)> {
    if config.num_envs == 0 || config.rollout_len == 0 {
        return Err(Error::InvalidArgument("num_envs and rollout_len must be positive".into()));
    }
    let mut net = AgentNet::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA2C0_A2C0);
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..Default::default() });
    let mut envs: Vec<MiniInvaders> =
        (0..config.num_envs).map(|_| MiniInvaders::new(rng.random(), config.frame_skip)).collect();
    let mut stats = TrainStats::default();
    let per_update = config.num_envs * config.rollout_len;
    let updates = config.total_steps / per_update;
    let (e, t_len) = (config.num_envs, config.rollout_len);

    for _ in 0..updates {
        let mut obs_batch = Vec::with_capacity(per_update);
        let mut actions = vec![0usize; per_update];
        let mut rewards = vec![0.0f32; per_update];
        let mut dones = vec![false; per_update];
        let mut values = vec![0.0f32; per_update];
        for t in 0..t_len {
            let obs: Vec<_> = envs.iter().map(|env| &env.observation).collect();
            let out = net.infer(&observations_tensor(&obs)?)?;
            for (i, env) in envs.iter_mut().enumerate() {
                let idx = i * t_len + t;
                let dist = WeightedIndex::new(out.probs.row(i)).map_err(|e| Error::NonFinite(e.to_string()))?;
                let a = dist.sample(&mut rng);
                obs_batch.push((idx, env.observation.clone()));
                actions[idx] = a;
                values[idx] = out.values[i];
                let (r, done) = env.step(Action::ALL[a])?;
                rewards[idx] = r;
                dones[idx] = done;
                if done {
                    stats.episode_scores.push(env.score);
                    *env = MiniInvaders::new(rng.random(), config.frame_skip);
                }
            }
        }
        let last: Vec<_> = envs.iter().map(|env| &env.observation).collect();
        let last_values = net.infer(&observations_tensor(&last)?)?.values;
        let mut advantages = vec![0.0f32; per_update];
        let mut returns = vec![0.0f32; per_update];
        for i in 0..e {
            let s = i * t_len..(i + 1) * t_len;
            let (adv, ret) = gae(
                &rewards[s.clone()],
                &values[s.clone()],
                &dones[s.clone()],
                last_values[i],
                config.gamma,
                config.lambda,
            );
            advantages[s.clone()].copy_from_slice(&adv);
            returns[s].copy_from_slice(&ret);
        }
        obs_batch.sort_by_key(|(idx, _)| *idx);
        let obs: Vec<_> = obs_batch.iter().map(|(_, o)| o).collect();
        zero_grads(net.params_mut());
        let out = net.forward(&observations_tensor(&obs)?)?;
        let loss = actor_critic_loss(
            &out.logits,
            &out.values,
            &actions,
            &advantages,
            &returns,
            config.entropy_coef,
            config.value_coef,
        )?;
        if !loss.loss.is_finite() {
            return Err(Error::NonFinite("actor-critic loss".into()));
        }
        net.backward(&loss.d_logits, &loss.d_values);
        let mut params = net.params_mut();
        clip_grad_norm(&mut params, config.max_grad_norm);
        opt.step(&mut params);
        stats.steps += per_update;
        stats.updates += 1;
        progress(&stats);
    }
    Ok((net, stats))
}

pub(super) fn uniform_action(rng: &mut ChaCha8Rng) -> Action {
    Action::ALL[rng.random_range(0..NUM_ACTIONS)]
}
