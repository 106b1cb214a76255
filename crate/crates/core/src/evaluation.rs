//! Measurements on trained artifacts: agent strength, invariance of the
//! encoder, conditioning strength of the generator and counterfactual
//! quality.

use serde::{Deserialize, Serialize};

use crate::agent::{
    argmax, evaluate_policy, greedy_actions, observations_tensor, random_policy_scores, AgentNet, EpisodeStats,
};
use crate::baselines::{ablation_generate, realism_distance, CfMethod};
use crate::counterfactual::{
    cf_optimize, generate_counterfactual, select_key_frames, CfConfig, KeyFrameConfig, WaeDecoder,
};
use crate::env::{Action, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::genmodel::{GenModel, GenParts};
use crate::persistence::{Replay, RolloutDataset};
use crate::tensor::Tensor;
use crate::training::TrainData;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentComparison {
    pub agent: EpisodeStats,
    pub random: EpisodeStats,
    /// Agent mean divided by random mean.
    pub ratio: f64,
}

/// Greedy agent against the uniform random policy on the same episode seeds.
pub fn compare_agent_to_random(
    agent: &AgentNet,
    episodes: usize,
    seed: u64,
    frame_skip: usize,
) -> Result<AgentComparison> {
    let a = evaluate_policy(episodes, seed, frame_skip, |obs| greedy_actions(agent, obs))?;
    let r = random_policy_scores(episodes, seed, frame_skip)?;
    let ratio = if r.mean > 0.0 { a.mean / r.mean } else { f64::INFINITY };
    Ok(AgentComparison { agent: a, random: r, ratio })
}

/// Scores of an agent that acts on `argmax π(D_w(E_w(A(s))))`.
pub fn wae_policy_scores(
    agent: &AgentNet,
    model: &GenModel,
    episodes: usize,
    seed: u64,
    frame_skip: usize,
) -> Result<EpisodeStats> {
    evaluate_policy(episodes, seed, frame_skip, |obs| {
        let z = agent.latent(&observations_tensor(obs)?)?;
        let zhat = model.wae_decode(&model.wae_encode(&z)?)?;
        let p = agent.policy_probs(&zhat)?;
        (0..p.rows()).map(|i| Action::from_id(argmax(p.row(i)))).collect()
    })
}

/// Largest deviation of `‖E_w(z)‖` from 1 over the rows of `z`.
pub fn wae_norm_deviation(model: &GenModel, z: &Tensor) -> Result<f64> {
    let zw = model.wae_encode(z)?;
    Ok((0..zw.rows())
        .map(|i| (zw.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max))
}

/// Mean absolute pixel change of `G(E(s), π)` when `π` is replaced by the
/// one-hot distribution of each action other than the agent's choice.
pub fn conditioning_sensitivity(model: &GenModel, data: &TrainData<'_>, idx: &[usize]) -> Result<f64> {
    if !(model.inputs.encoder && model.inputs.policy) || model.inputs.wae || model.inputs.agent {
        return Err(Error::InvalidArgument("conditioning check needs a generator fed exactly E(s) and π".into()));
    }
    if idx.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (mut sum, mut count) = (0.0f64, 0usize);
    for chunk in idx.chunks(32) {
        let b = data.batch(chunk);
        let e = model.encode(&b.s)?;
        let base = model.generate(&GenParts { e: Some(&e), zw: None, z: None, pi: Some(&b.pi) })?;
        for k in 1..NUM_ACTIONS {
            let mut onehot = Tensor::zeros(&[chunk.len(), NUM_ACTIONS]);
            for r in 0..chunk.len() {
                onehot.row_mut(r)[(argmax(b.pi.row(r)) + k) % NUM_ACTIONS] = 1.0;
            }
            let swapped = model.generate(&GenParts { e: Some(&e), zw: None, z: None, pi: Some(&onehot) })?;
            sum += swapped.data().iter().zip(base.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
            count += base.len();
        }
    }
    Ok(sum / count as f64)
}

/// A counterfactual question: what would make the agent take `target` at
/// step `t` of a replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfQuery {
    pub replay: usize,
    pub t: usize,
    pub target: Action,
}

/// Up to `n` queries pairing key frames with every action the agent did not
/// choose there. Key frames are taken evenly from all replays.
pub fn key_frame_queries(replays: &[Replay], n: usize, config: &KeyFrameConfig) -> Result<Vec<CfQuery>> {
    if replays.is_empty() {
        return Ok(Vec::new());
    }
    let per_frame = NUM_ACTIONS - 1;
    let frames_per_replay = n.div_ceil(per_frame * replays.len());
    let mut frames = Vec::new();
    for (ri, r) in replays.iter().enumerate() {
        frames.push(select_key_frames(&r.entropies(), frames_per_replay, config)?.into_iter().map(move |t| (ri, t)));
    }
    let mut queries = Vec::new();
    // Round-robin over replays so a short budget still covers all of them.
    let mut iters: Vec<_> = frames.into_iter().collect();
    loop {
        let mut any = false;
        for it in iters.iter_mut() {
            if let Some((ri, t)) = it.next() {
                any = true;
                let chosen = argmax(&replays[ri].steps[t].policy);
                for a in Action::ALL.into_iter().filter(|a| a.id() != chosen) {
                    queries.push(CfQuery { replay: ri, t, target: a });
                }
            }
        }
        if !any || queries.len() >= n {
            break;
        }
    }
    queries.truncate(n);
    Ok(queries)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfSuccessReport {
    pub queries: usize,
    pub successes: usize,
    pub rate: f64,
    /// Median optimizer steps over successful queries.
    pub median_steps: Option<f64>,
}

pub fn cf_success(
    agent: &AgentNet,
    model: &GenModel,
    replays: &[Replay],
    queries: &[CfQuery],
    config: &CfConfig,
) -> Result<CfSuccessReport> {
    let mut steps = Vec::new();
    for q in queries {
        let obs = replays[q.replay].observation(q.t)?;
        let r = generate_counterfactual(agent, model, &obs, q.target, config)?;
        if r.success {
            steps.push(r.steps as f64);
        }
    }
    let successes = steps.len();
    Ok(CfSuccessReport {
        queries: queries.len(),
        successes,
        rate: if queries.is_empty() { 0.0 } else { successes as f64 / queries.len() as f64 },
        median_steps: median(&mut steps),
    })
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) { (v[m - 1] + v[m]) / 2.0 } else { v[m] })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RealismReport {
    pub pairs: usize,
    /// Pairs where the full model's counterfactual is closer to real data.
    pub full_wins: usize,
    pub win_rate: f64,
    pub mean_full: f64,
    pub mean_other: f64,
}

/// Distance to the nearest dataset state of counterfactuals from the full
/// model against those of another configuration, query by query.
pub fn realism_comparison(
    agent: &AgentNet,
    full: &GenModel,
    other: &GenModel,
    dataset: &RolloutDataset,
    replays: &[Replay],
    queries: &[CfQuery],
    config: &CfConfig,
) -> Result<RealismReport> {
    let (mut wins, mut sum_full, mut sum_other) = (0, 0.0, 0.0);
    for q in queries {
        let obs = replays[q.replay].observation(q.t)?;
        let a = generate_counterfactual(agent, full, &obs, q.target, config)?;
        let b = ablation_generate(agent, other, &obs, q.target, CfMethod::Gradient, config)?;
        let da = realism_distance(&a.counterfactual.data, dataset)?;
        let db = realism_distance(&b.counterfactual.data, dataset)?;
        if da < db {
            wins += 1;
        }
        sum_full += da;
        sum_other += db;
    }
    let n = queries.len().max(1) as f64;
    Ok(RealismReport {
        pairs: queries.len(),
        full_wins: wins,
        win_rate: wins as f64 / n,
        mean_full: sum_full / n,
        mean_other: sum_other / n,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub steps: usize,
    pub non_increasing: usize,
    pub fraction: f64,
}

/// Fraction of optimizer steps that do not increase the objective.
/// Increases below `tolerance` (relative) count as non-increasing.
pub fn monotone_fraction(
    agent: &AgentNet,
    model: &GenModel,
    replays: &[Replay],
    queries: &[CfQuery],
    config: &CfConfig,
    tolerance: f64,
) -> Result<MonotoneReport> {
    let mut dec = WaeDecoder::new(model);
    let (mut steps, mut ok) = (0, 0);
    for q in queries {
        let obs = replays[q.replay].observation(q.t)?;
        let z = agent.latent(&observations_tensor(&[&obs])?)?;
        let zw0 = model.wae_encode(&z)?.into_vec();
        let trace = cf_optimize(&zw0, q.target, &agent.policy, &mut dec, config)?;
        for w in trace.objective.windows(2) {
            steps += 1;
            if w[1] <= w[0] + tolerance * w[0].abs().max(1.0) {
                ok += 1;
            }
        }
    }
    Ok(MonotoneReport { steps, non_increasing: ok, fraction: if steps == 0 { 1.0 } else { ok as f64 / steps as f64 } })
}
