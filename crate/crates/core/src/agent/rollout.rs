use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::a2c::uniform_action;
use super::{argmax, AgentNet};
use crate::env::{Action, MiniInvaders, Observation, CHANNELS, DEFAULT_FRAME_SKIP, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::genmodel::entropy;
use crate::persistence::{quantize, Record, Replay, ReplayStep, RolloutDataset};
use crate::tensor::Tensor;

/// Stacks observations into a `[n, 12, h, w]` batch.
pub fn observations_tensor(obs: &[&Observation]) -> Result<Tensor> {
    let first = obs.first().ok_or(Error::EmptyBatch)?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(obs.len() * CHANNELS * h * w);
    for o in obs {
        if o.height != h || o.width != w || o.data.len() != CHANNELS * h * w {
            return Err(Error::Shape("observations in a batch differ in shape".into()));
        }
        data.extend_from_slice(&o.data);
    }
    Tensor::from_vec(&[obs.len(), CHANNELS, h, w], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub scores: Vec<f32>,
    pub mean: f64,
    pub std: f64,
}

impl EpisodeStats {
    pub fn from_scores(scores: Vec<f32>) -> Self {
        let n = scores.len().max(1) as f64;
        let mean = scores.iter().map(|&s| s as f64).sum::<f64>() / n;
        let var = scores.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
        EpisodeStats { scores, mean, std: var.sqrt() }
    }
}

/// Plays `episodes` episodes side by side, episode `i` seeded with `seed + i`.
/// `policy` receives the observations of all unfinished episodes at once.
pub fn evaluate_policy(
    episodes: usize,
    seed: u64,
    frame_skip: usize,
    mut policy: impl FnMut(&[&Observation]) -> Result<Vec<Action>>,
) -> Result<EpisodeStats> {
    let mut envs: Vec<MiniInvaders> =
        (0..episodes).map(|i| MiniInvaders::new(seed.wrapping_add(i as u64), frame_skip)).collect();
    loop {
        let live: Vec<usize> = (0..envs.len()).filter(|&i| !envs[i].done()).collect();
        if live.is_empty() {
            break;
        }
        let obs: Vec<&Observation> = live.iter().map(|&i| &envs[i].observation).collect();
        let actions = policy(&obs)?;
        if actions.len() != live.len() {
            return Err(Error::Shape("policy returned the wrong number of actions".into()));
        }
        for (&i, a) in live.iter().zip(actions) {
            envs[i].step(a)?;
        }
    }
    Ok(EpisodeStats::from_scores(envs.iter().map(|e| e.score).collect()))
}

/// Greedy play: always the most probable action.
pub fn greedy_actions(net: &AgentNet, obs: &[&Observation]) -> Result<Vec<Action>> {
    let out = net.infer(&observations_tensor(obs)?)?;
    Ok((0..obs.len()).map(|i| Action::ALL[argmax(out.probs.row(i))]).collect())
}

/// Scores of a uniformly random policy.
pub fn random_policy_scores(episodes: usize, seed: u64, frame_skip: usize) -> Result<EpisodeStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0DD5_EED5);
    evaluate_policy(episodes, seed, frame_skip, |obs| Ok(obs.iter().map(|_| uniform_action(&mut rng)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub records: usize,
    pub epsilon: f64,
    pub num_envs: usize,
    pub frame_skip: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig { records: 200_000, epsilon: 0.2, num_envs: 8, frame_skip: DEFAULT_FRAME_SKIP }
    }
}

/// Runs the frozen agent ε-greedily and records every visited state with the
/// agent's action distribution there.
pub fn collect_dataset(net: &AgentNet, config: &CollectConfig, seed: u64) -> Result<RolloutDataset> {
    if !(0.0..=1.0).contains(&config.epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon {} outside [0, 1]", config.epsilon)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_envs = config.num_envs.max(1);
    let mut next_episode = 0u32;
    let mut envs: Vec<(u32, MiniInvaders)> = (0..num_envs)
        .map(|_| {
            next_episode += 1;
            (next_episode - 1, MiniInvaders::new(rng.random(), config.frame_skip))
        })
        .collect();
    let first = &envs[0].1.observation;
    let mut ds = RolloutDataset::new(CHANNELS, first.height, first.width, NUM_ACTIONS);
    while ds.len() < config.records {
        let obs: Vec<&Observation> = envs.iter().map(|(_, e)| &e.observation).collect();
        let out = net.infer(&observations_tensor(&obs)?)?;
        for (i, (episode, env)) in envs.iter_mut().enumerate() {
            if ds.len() >= config.records {
                break;
            }
            let policy = out.probs.row(i).to_vec();
            let action = if rng.random::<f64>() < config.epsilon {
                uniform_action(&mut rng)
            } else {
                Action::ALL[argmax(&policy)]
            };
            ds.push(Record {
                observation: env.observation.data.iter().map(|&v| quantize(v)).collect(),
                policy,
                action: action.id() as u8,
                episode: *episode,
                step: env.steps as u32,
            })?;
            env.step(action)?;
            if env.done() {
                *episode = next_episode;
                next_episode += 1;
                *env = MiniInvaders::new(rng.random(), config.frame_skip);
            }
        }
    }
    Ok(ds)
}

/// Records one greedy episode of the frozen agent.
pub fn record_replay(net: &AgentNet, seed: u64, id: &str, frame_skip: usize) -> Result<Replay> {
    let mut env = MiniInvaders::new(seed, frame_skip);
    let mut steps = Vec::new();
    while !env.done() {
        let out = net.infer(&observations_tensor(&[&env.observation])?)?;
        let policy = out.probs.row(0).to_vec();
        let action = Action::ALL[argmax(&policy)];
        let frame = Replay::push_frame(&env.observation.latest_frame());
        let (reward, _) = env.step(action)?;
        let entropy = entropy(&policy) as f32;
        steps.push(ReplayStep { frame, action: action.id() as u8, reward, policy, entropy });
    }
    let o = &env.observation;
    Ok(Replay {
        id: id.to_string(),
        seed,
        height: o.height,
        width: o.width,
        num_actions: NUM_ACTIONS,
        score: env.score,
        steps,
    })
}
