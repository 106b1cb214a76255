//! End-to-end artifact builder. Each stage writes its output into one
//! directory and is skipped when that output already exists, so an
//! interrupted run picks up where it stopped.
//!
//! ```text
//! dir/agent.ckpt           trained agent
//! dir/agent.json           agent training statistics
//! dir/dataset.cfds         ε-greedy rollout dataset
//! dir/models/<name>/       generative models (see training::train_in_dir)
//! dir/replays/<id>.cfrp    greedy replays for the explorer
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{collect_dataset, record_replay, train_agent, AgentNet};
use crate::baselines::AblationConfig;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::genmodel::{GenInputs, GenModel};
use crate::persistence::{atomic_write, Replay, RolloutDataset};
use crate::training::{train_in_dir, TrainConfig, TrainData, TrainReport};

pub const FULL_MODEL: &str = "full";
pub const FREE_ENCODER_MODEL: &str = "lambda0";
/// Generator fed only the agent latent and the policy.
pub const LATENT_ONLY_ABLATION: usize = 3;

/// Seeds of the individual stages, all derived from the master seed.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(stage.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

const AGENT_STAGE: u64 = 1;
const COLLECT_STAGE: u64 = 2;
const MODEL_INIT_STAGE: u64 = 3;
const MODEL_TRAIN_STAGE: u64 = 4;
const HOLDOUT_STAGE: u64 = 5;
const REPLAY_STAGE: u64 = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentSummary {
    pub steps: usize,
    pub updates: usize,
    pub episodes: usize,
    /// Mean score of the last 100 training episodes.
    pub recent_mean: f64,
    pub seconds: f64,
}

pub fn model_dir(dir: &Path, name: &str) -> PathBuf {
    dir.join("models").join(name)
}

pub fn replay_dir(dir: &Path) -> PathBuf {
    dir.join("replays")
}

pub fn ensure_agent(dir: &Path, config: &Config) -> Result<AgentNet> {
    let path = dir.join("agent.ckpt");
    if path.exists() {
        return AgentNet::load(&path);
    }
    std::fs::create_dir_all(dir)?;
    log::info!("training agent for {} steps", config.agent.total_steps);
    let start = std::time::Instant::now();
    let mut next_report = 0;
    let (net, stats) = train_agent(&config.agent, stage_seed(config.seed, AGENT_STAGE), |s| {
        if s.steps >= next_report {
            log::info!(
                "agent steps {} episodes {} recent mean {:.2}",
                s.steps,
                s.episode_scores.len(),
                recent(&s.episode_scores)
            );
            next_report += 20_000;
        }
    })?;
    let summary = AgentSummary {
        steps: stats.steps,
        updates: stats.updates,
        episodes: stats.episode_scores.len(),
        recent_mean: recent(&stats.episode_scores),
        seconds: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    atomic_write(&dir.join("agent.json"), &json)?;
    net.save(&path)?;
    Ok(net)
}

fn recent(scores: &[f32]) -> f64 {
    let tail = &scores[scores.len().saturating_sub(100)..];
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|&s| s as f64).sum::<f64>() / tail.len() as f64
    }
}

pub fn ensure_dataset(dir: &Path, config: &Config, agent: &AgentNet) -> Result<RolloutDataset> {
    let path = dir.join("dataset.cfds");
    if path.exists() {
        return RolloutDataset::load(&path);
    }
    log::info!("collecting {} records", config.collect.records);
    let ds = collect_dataset(agent, &config.collect, stage_seed(config.seed, COLLECT_STAGE))?;
    ds.save(&path)?;
    Ok(ds)
}

/// The train/holdout view of the dataset used by every model of a run.
pub fn train_data<'a>(config: &Config, agent: &AgentNet, dataset: &'a RolloutDataset) -> Result<TrainData<'a>> {
    TrainData::with_holdout(agent, dataset, config.pipeline.holdout, stage_seed(config.seed, HOLDOUT_STAGE))
}

/// Trains (or resumes, or loads) one generative model under `dir/models/name`.
pub fn ensure_model(
    dir: &Path,
    name: &str,
    inputs: GenInputs,
    train: &TrainConfig,
    config: &Config,
    data: &TrainData<'_>,
) -> Result<(GenModel, TrainReport)> {
    let out = model_dir(dir, name);
    if out.join("summary.json").exists() {
        let t = crate::training::Trainer::resume(&out)?;
        return Ok((t.model, t.report));
    }
    log::info!("training model {name}");
    let model = GenModel::new(config.arch, inputs, stage_seed(config.seed, MODEL_INIT_STAGE))?;
    let t = train_in_dir(model, data, train, stage_seed(config.seed, MODEL_TRAIN_STAGE), &out)?;
    Ok((t.model, t.report))
}

pub fn ensure_replays(dir: &Path, config: &Config, agent: &AgentNet) -> Result<Vec<Replay>> {
    let rdir = replay_dir(dir);
    std::fs::create_dir_all(&rdir)?;
    let mut out = Vec::new();
    for i in 0..config.pipeline.replays {
        let id = format!("replay-{i:03}");
        let path = rdir.join(format!("{id}.cfrp"));
        let replay = if path.exists() {
            Replay::load(&path)?
        } else {
            let r =
                record_replay(agent, stage_seed(config.seed, REPLAY_STAGE) + i as u64, &id, config.agent.frame_skip)?;
            r.save(&path)?;
            r
        };
        out.push(replay);
    }
    Ok(out)
}

/// Every replay stored under `dir/replays`, ordered by id.
pub fn load_replays(dir: &Path) -> Result<Vec<Replay>> {
    let rdir = replay_dir(dir);
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(&rdir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "cfrp"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    paths.sort();
    paths.iter().map(|p| Replay::load(p)).collect()
}

/// Everything the evaluation needs.
pub struct Artifacts {
    pub dir: PathBuf,
    pub agent: AgentNet,
    pub dataset: RolloutDataset,
    pub full: GenModel,
    pub full_report: TrainReport,
    /// Same inputs as the full model, trained without the adversarial term.
    pub free_encoder: GenModel,
    pub free_encoder_report: TrainReport,
    /// Generator fed `z` and `π` only.
    pub latent_only: GenModel,
    pub replays: Vec<Replay>,
}

impl Artifacts {
    /// Builds every missing artifact in `dir` and loads the rest.
    pub fn build(dir: &Path, config: &Config) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        atomic_write(&dir.join("config.toml"), config.to_toml()?.as_bytes())?;
        let agent = ensure_agent(dir, config)?;
        let replays = ensure_replays(dir, config, &agent)?;
        let dataset = ensure_dataset(dir, config, &agent)?;
        let data = train_data(config, &agent, &dataset)?;
        let (full, full_report) = ensure_model(dir, FULL_MODEL, GenInputs::FULL, &config.train, config, &data)?;
        let free_cfg = TrainConfig { lambda: config.pipeline.ablated_lambda, ..config.train.clone() };
        let (free_encoder, free_encoder_report) =
            ensure_model(dir, FREE_ENCODER_MODEL, GenInputs::FULL, &free_cfg, config, &data)?;
        let ablation = AblationConfig::by_id(LATENT_ONLY_ABLATION)?;
        let (latent_only, _) =
            ensure_model(dir, &format!("ablation-{}", ablation.id), ablation.inputs(), &config.train, config, &data)?;
        drop(data);
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            agent,
            dataset,
            full,
            full_report,
            free_encoder,
            free_encoder_report,
            latent_only,
            replays,
        })
    }
}
