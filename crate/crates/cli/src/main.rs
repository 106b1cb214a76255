use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use cfstates::agent::{
    argmax, collect_dataset, evaluate_policy, greedy_actions, observations_tensor, record_replay, train_agent, AgentNet,
};
use cfstates::baselines::{ablation_generate, nn_counterfactual, AblationConfig, CfMethod, NnIndex};
use cfstates::config::Config;
use cfstates::counterfactual::{latest, ActionLabel, CfRecord};
use cfstates::env::{Action, MiniInvaders};
use cfstates::evaluation::{
    cf_success, compare_agent_to_random, conditioning_sensitivity, key_frame_queries, realism_comparison,
    wae_norm_deviation, wae_policy_scores,
};
use cfstates::genmodel::{DiscriminatorLoss, GenModel};
use cfstates::persistence::{atomic_write, save_png, Replay, RolloutDataset};
use cfstates::pipeline::{self, Artifacts};
use cfstates::training::{train_in_dir, TrainData};
use cfstates_cli::service::{self, ActionChoice, AppState, Bundle, ServiceConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cfstates", version, about = "Counterfactual states for a pixel-input game agent")]
struct Cli {
    /// TOML file overriding the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Play episodes with a random or trained policy and print the scores.
    EnvPlay(EnvPlay),
    /// Train the agent with synchronous advantage actor-critic.
    AgentTrain(AgentTrain),
    /// Record an ε-greedy rollout dataset with a trained agent.
    Collect(Collect),
    /// Record one greedy episode for the explorer.
    ReplayRecord(ReplayRecord),
    /// Train the generative model (or one of its ablations).
    ModelTrain(ModelTrain),
    /// Generate a counterfactual for one replay step.
    CfGenerate(CfGenerate),
    /// Generate a counterfactual with an ablation model.
    Ablate(Ablate),
    /// Nearest real state in which the agent would take the target action.
    NnBaseline(NnBaseline),
    /// Build every artifact of a run and measure it.
    Evaluate(Evaluate),
    /// Serve replays and counterfactuals over HTTP.
    Serve(Serve),
}

#[derive(Clone, Copy, ValueEnum)]
enum PlayPolicy {
    Random,
    Agent,
}

#[derive(Args)]
struct EnvPlay {
    #[arg(long, value_enum, default_value = "random")]
    policy: PlayPolicy,
    /// Agent checkpoint, required for `--policy agent`.
    #[arg(long)]
    agent: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    episodes: usize,
    #[arg(long)]
    frame_skip: Option<usize>,
    /// Write every frame of the first episode as PNG into this directory.
    #[arg(long)]
    frames_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AgentTrain {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    num_envs: Option<usize>,
    #[arg(long)]
    rollout_len: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    entropy_coef: Option<f32>,
    #[arg(long)]
    value_coef: Option<f32>,
    #[arg(long)]
    frame_skip: Option<usize>,
    /// Greedy evaluation episodes after training; 0 skips the evaluation.
    #[arg(long, default_value_t = 50)]
    eval_episodes: usize,
}

#[derive(Args)]
struct Collect {
    #[arg(long)]
    agent: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    records: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    num_envs: Option<usize>,
    #[arg(long)]
    frame_skip: Option<usize>,
}

#[derive(Args)]
struct ReplayRecord {
    #[arg(long)]
    agent: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replay id; defaults to the file stem of `--out`.
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    frame_skip: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DiscLoss {
    Mse,
    Kl,
}

#[derive(Args)]
struct ModelTrain {
    #[arg(long)]
    agent: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory; an unfinished run there is resumed.
    #[arg(long)]
    out: PathBuf,
    /// Train the generator of this ablation (1-10) instead of the full model.
    #[arg(long)]
    ablation: Option<usize>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    wae_lr: Option<f32>,
    #[arg(long, value_enum)]
    disc_loss: Option<DiscLoss>,
    #[arg(long)]
    wae_separate: bool,
    #[arg(long)]
    width_divisor: Option<usize>,
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args)]
struct CfTarget {
    /// Replay file, or the id of a replay inside `--model-dir`.
    #[arg(long)]
    replay: String,
    #[arg(long)]
    t: usize,
    /// Target action: id, name, or `auto`.
    #[arg(long)]
    action: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    step_size: Option<f32>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct CfGenerate {
    /// Artifact directory holding `agent.ckpt` and `models/full`.
    #[arg(long, env = "CFSTATES_MODEL_DIR")]
    model_dir: Option<PathBuf>,
    /// Agent checkpoint; overrides the one in `--model-dir`.
    #[arg(long)]
    agent: Option<PathBuf>,
    /// Model directory; overrides the full model in `--model-dir`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    target: CfTarget,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Hand,
    Gradient,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    config_id: usize,
    #[arg(long)]
    agent: PathBuf,
    /// Directory of a model trained with `model-train --ablation K`.
    #[arg(long)]
    model: PathBuf,
    /// Defaults to the method the ablation was designed for.
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[command(flatten)]
    target: CfTarget,
}

#[derive(Args)]
struct NnBaseline {
    #[arg(long)]
    agent: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Index at most this many dataset records.
    #[arg(long)]
    nn_records: Option<usize>,
    #[arg(long)]
    replay: PathBuf,
    #[arg(long)]
    t: usize,
    #[arg(long)]
    action: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    /// Artifact directory; missing artifacts are built first.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 100)]
    queries: usize,
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Serve {
    #[arg(long, env = "CFSTATES_MODEL_DIR")]
    model_dir: Option<PathBuf>,
    #[arg(long, env = "CFSTATES_PORT")]
    port: Option<u16>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    cache_entries: Option<usize>,
    #[arg(long)]
    annotation_log: Option<PathBuf>,
}

fn set<T>(field: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *field = v;
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    set(&mut config.seed, cli.seed);
    Ok(config)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_action(s: &str) -> Result<ActionChoice> {
    let v = match s.parse::<u64>() {
        Ok(id) => serde_json::Value::from(id),
        Err(_) => serde_json::Value::from(s),
    };
    Ok(ActionChoice::parse(&v)?)
}

fn concrete_action(s: &str) -> Result<Action> {
    match parse_action(s)? {
        ActionChoice::Action(a) => Ok(a),
        ActionChoice::Auto => bail!("this command needs a concrete action, not auto"),
    }
}

fn load_replay(name: &str, model_dir: Option<&Path>) -> Result<Replay> {
    let path = Path::new(name);
    if path.is_file() {
        return Replay::load(path).with_context(|| format!("reading {name}"));
    }
    if let Some(dir) = model_dir {
        let candidate = pipeline::replay_dir(dir).join(format!("{name}.cfrp"));
        if candidate.is_file() {
            return Ok(Replay::load(&candidate)?);
        }
    }
    bail!("no replay file or replay id {name:?}")
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    match cli.command {
        Command::EnvPlay(a) => env_play(config, a),
        Command::AgentTrain(a) => agent_train(config, a),
        Command::Collect(a) => collect(config, a),
        Command::ReplayRecord(a) => replay_record(config, a),
        Command::ModelTrain(a) => model_train(config, a),
        Command::CfGenerate(a) => cf_generate(config, a),
        Command::Ablate(a) => ablate(config, a),
        Command::NnBaseline(a) => nn_baseline(config, a),
        Command::Evaluate(a) => evaluate(config, a),
        Command::Serve(a) => serve(config, a),
    }
}

fn env_play(config: Config, a: EnvPlay) -> Result<()> {
    let frame_skip = a.frame_skip.unwrap_or(config.agent.frame_skip);
    let agent = match (a.policy, &a.agent) {
        (PlayPolicy::Agent, Some(p)) => Some(AgentNet::load(p)?),
        (PlayPolicy::Agent, None) => bail!("--policy agent needs --agent"),
        (PlayPolicy::Random, _) => None,
    };
    if let Some(dir) = &a.frames_dir {
        std::fs::create_dir_all(dir)?;
        let mut env = MiniInvaders::new(config.seed, frame_skip);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut t = 0;
        while !env.done() {
            save_png(&dir.join(format!("frame-{t:05}.png")), &env.observation.latest_frame())?;
            let action = match &agent {
                Some(net) => greedy_actions(net, &[&env.observation])?[0],
                None => Action::ALL[rng.random_range(0..Action::ALL.len())],
            };
            env.step(action)?;
            t += 1;
        }
    }
    let stats = match &agent {
        Some(net) => evaluate_policy(a.episodes, config.seed, frame_skip, |obs| greedy_actions(net, obs))?,
        None => cfstates::agent::random_policy_scores(a.episodes, config.seed, frame_skip)?,
    };
    print_json(&stats)
}

fn agent_train(mut config: Config, a: AgentTrain) -> Result<()> {
    let c = &mut config.agent;
    set(&mut c.total_steps, a.total_steps);
    set(&mut c.num_envs, a.num_envs);
    set(&mut c.rollout_len, a.rollout_len);
    set(&mut c.lr, a.lr);
    set(&mut c.entropy_coef, a.entropy_coef);
    set(&mut c.value_coef, a.value_coef);
    set(&mut c.frame_skip, a.frame_skip);
    let mut next = 0;
    let (net, stats) = train_agent(&config.agent, config.seed, |s| {
        if s.steps >= next {
            let tail = &s.episode_scores[s.episode_scores.len().saturating_sub(100)..];
            let mean = tail.iter().sum::<f32>() / tail.len().max(1) as f32;
            log::info!("steps {} episodes {} recent mean {mean:.2}", s.steps, s.episode_scores.len());
            next += 10_000;
        }
    })?;
    net.save(&a.out)?;
    log::info!("saved {} after {} updates", a.out.display(), stats.updates);
    if a.eval_episodes > 0 {
        let eval_seed = pipeline::stage_seed(config.seed, 100);
        print_json(&compare_agent_to_random(&net, a.eval_episodes, eval_seed, config.agent.frame_skip)?)?;
    }
    Ok(())
}

fn collect(mut config: Config, a: Collect) -> Result<()> {
    let c = &mut config.collect;
    set(&mut c.records, a.records);
    set(&mut c.epsilon, a.epsilon);
    set(&mut c.num_envs, a.num_envs);
    set(&mut c.frame_skip, a.frame_skip);
    let net = AgentNet::load(&a.agent)?;
    let ds = collect_dataset(&net, &config.collect, config.seed)?;
    ds.save(&a.out)?;
    log::info!("wrote {} records to {}", ds.len(), a.out.display());
    Ok(())
}

fn replay_record(config: Config, a: ReplayRecord) -> Result<()> {
    let net = AgentNet::load(&a.agent)?;
    let id = match a.id {
        Some(id) => id,
        None => a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("replay").to_string(),
    };
    let replay = record_replay(&net, config.seed, &id, a.frame_skip.unwrap_or(config.agent.frame_skip))?;
    replay.save(&a.out)?;
    log::info!("recorded {} steps, score {}", replay.len(), replay.score);
    Ok(())
}

fn model_train(mut config: Config, a: ModelTrain) -> Result<()> {
    let t = &mut config.train;
    set(&mut t.lambda, a.lambda);
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.lr, a.lr);
    set(&mut t.wae_lr, a.wae_lr);
    set(&mut t.eval_every, a.eval_every);
    set(
        &mut t.disc_loss,
        a.disc_loss.map(|d| match d {
            DiscLoss::Mse => DiscriminatorLoss::Mse,
            DiscLoss::Kl => DiscriminatorLoss::Kl,
        }),
    );
    t.wae_separate |= a.wae_separate;
    set(&mut config.arch.width_divisor, a.width_divisor);
    set(&mut config.pipeline.holdout, a.holdout);
    let inputs = match a.ablation {
        Some(id) => AblationConfig::by_id(id)?.inputs(),
        None => cfstates::genmodel::GenInputs::FULL,
    };
    let agent = AgentNet::load(&a.agent)?;
    let dataset = RolloutDataset::load(&a.dataset)?;
    let data = TrainData::with_holdout(&agent, &dataset, config.pipeline.holdout, config.seed)?;
    let model = GenModel::new(config.arch, inputs, config.seed)?;
    let trainer = train_in_dir(model, &data, &config.train, config.seed, &a.out)?;
    print_json(&cfstates::training::TrainSummary::from_report(&trainer.config, &trainer.report))
}

#[derive(Serialize)]
struct CfOutput {
    replay: String,
    t: usize,
    #[serde(flatten)]
    record: CfRecord,
    candidates: Option<Vec<cfstates::counterfactual::Candidate>>,
}

fn apply_cf_flags(config: &mut Config, t: &CfTarget) {
    set(&mut config.cf.step_size, t.step_size);
    set(&mut config.cf.max_steps, t.max_steps);
}

fn cf_generate(mut config: Config, a: CfGenerate) -> Result<()> {
    apply_cf_flags(&mut config, &a.target);
    let dir = a.model_dir.as_deref();
    let agent_path = match (&a.agent, dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join("agent.ckpt"),
        (None, None) => bail!("need --model-dir or --agent"),
    };
    let model_path = match (&a.model, dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => pipeline::model_dir(d, pipeline::FULL_MODEL),
        (None, None) => bail!("need --model-dir or --model"),
    };
    let replay = load_replay(&a.target.replay, dir)?;
    let replay_id = replay.id.clone();
    let bundle =
        Bundle { agent: AgentNet::load(&agent_path)?, model: GenModel::load(&model_path)?, replays: vec![replay] };
    let choice = parse_action(&a.target.action)?;
    let answer = service::query(&bundle, &replay_id, a.target.t, choice, &config.cf)?;
    let out = &a.target.out;
    std::fs::create_dir_all(out)?;
    let panels = answer.result.panels(&config.highlight)?;
    save_png(&out.join("query.png"), &panels.query)?;
    save_png(&out.join("reconstruction.png"), &panels.reconstruction)?;
    save_png(&out.join("counterfactual.png"), &panels.counterfactual)?;
    save_png(&out.join("highlight.png"), &panels.highlight)?;
    let output =
        CfOutput { replay: replay_id, t: a.target.t, record: answer.result.record(), candidates: answer.candidates };
    write_json(&out.join("result.json"), &output)?;
    log::info!(
        "{} -> {}: success {} after {} steps",
        output.record.action.name,
        output.record.target.name,
        output.record.success,
        output.record.steps
    );
    Ok(())
}

#[derive(Serialize)]
struct AblateOutput {
    config_id: usize,
    encoder: bool,
    wae: bool,
    agent: bool,
    policy: bool,
    method: &'static str,
    replay: String,
    t: usize,
    action: ActionLabel,
    target: ActionLabel,
    pi_after: Vec<f32>,
    steps: usize,
    success: bool,
}

fn ablate(mut config: Config, a: Ablate) -> Result<()> {
    apply_cf_flags(&mut config, &a.target);
    let ablation = AblationConfig::by_id(a.config_id)?;
    let model = GenModel::load(&a.model)?;
    if model.inputs != ablation.inputs() {
        bail!("model in {} was not trained for ablation {}", a.model.display(), ablation.id);
    }
    let agent = AgentNet::load(&a.agent)?;
    let replay = load_replay(&a.target.replay, None)?;
    let obs = replay.observation(a.target.t)?;
    let target = concrete_action(&a.target.action)?;
    let method = match a.method {
        Some(Method::Hand) => CfMethod::HandPerturb,
        Some(Method::Gradient) => CfMethod::Gradient,
        None => ablation.default_method(),
    };
    let result = ablation_generate(&agent, &model, &obs, target, method, &config.cf)?;
    let out = &a.target.out;
    std::fs::create_dir_all(out)?;
    save_png(&out.join("query.png"), &obs.latest_frame())?;
    save_png(&out.join("counterfactual.png"), &latest(&result.counterfactual))?;
    let pi = agent.policy_probs(&agent.latent(&observations_tensor(&[&obs])?)?)?.into_vec();
    write_json(
        &out.join("result.json"),
        &AblateOutput {
            config_id: ablation.id,
            encoder: ablation.encoder,
            wae: ablation.wae,
            agent: ablation.agent,
            policy: ablation.policy,
            method: match method {
                CfMethod::HandPerturb => "hand",
                CfMethod::Gradient => "gradient",
            },
            replay: replay.id.clone(),
            t: a.target.t,
            action: Action::ALL[argmax(&pi)].into(),
            target: target.into(),
            pi_after: result.pi_after,
            steps: result.steps,
            success: result.success,
        },
    )
}

#[derive(Serialize)]
struct NnOutput {
    replay: String,
    t: usize,
    target: ActionLabel,
    index: usize,
    episode: u32,
    step: u32,
    latent_distance: f64,
    indexed_records: usize,
}

fn nn_baseline(mut config: Config, a: NnBaseline) -> Result<()> {
    set(&mut config.baseline.nn_records, a.nn_records);
    let agent = AgentNet::load(&a.agent)?;
    let mut dataset = RolloutDataset::load(&a.dataset)?;
    dataset.records.truncate(config.baseline.nn_records);
    let index = NnIndex::build(&agent, &dataset)?;
    let replay = Replay::load(&a.replay)?;
    let obs = replay.observation(a.t)?;
    let target = concrete_action(&a.action)?;
    let m = nn_counterfactual(&agent, &index, &dataset, &obs, target)?;
    std::fs::create_dir_all(&a.out)?;
    save_png(&a.out.join("query.png"), &obs.latest_frame())?;
    save_png(&a.out.join("neighbor.png"), &m.observation.latest_frame())?;
    let rec = &dataset.records[m.index];
    write_json(
        &a.out.join("result.json"),
        &NnOutput {
            replay: replay.id.clone(),
            t: a.t,
            target: target.into(),
            index: m.index,
            episode: rec.episode,
            step: rec.step,
            latent_distance: m.distance,
            indexed_records: dataset.len(),
        },
    )
}

#[derive(Serialize)]
struct EvalReport {
    agent: cfstates::evaluation::AgentComparison,
    full: Option<cfstates::training::TrainSummary>,
    free_encoder: Option<cfstates::training::TrainSummary>,
    conditioning_full: f64,
    conditioning_free_encoder: f64,
    wae_policy: cfstates::agent::EpisodeStats,
    wae_norm_deviation: f64,
    counterfactuals: cfstates::evaluation::CfSuccessReport,
    realism: cfstates::evaluation::RealismReport,
}

fn evaluate(config: Config, a: Evaluate) -> Result<()> {
    let art = Artifacts::build(&a.dir, &config)?;
    let eval_seed = pipeline::stage_seed(config.seed, 100);
    let frame_skip = config.agent.frame_skip;
    log::info!("evaluating agent");
    let agent = compare_agent_to_random(&art.agent, a.episodes, eval_seed, frame_skip)?;
    let data = pipeline::train_data(&config, &art.agent, &art.dataset)?;
    let held = &data.holdout[..data.holdout.len().min(config.train.eval_samples)];
    let summary = |name| -> Option<cfstates::training::TrainSummary> {
        let text = std::fs::read(pipeline::model_dir(&a.dir, name).join("summary.json")).ok()?;
        serde_json::from_slice(&text).ok()
    };
    log::info!("measuring conditioning");
    let conditioning_full = conditioning_sensitivity(&art.full, &data, held)?;
    let conditioning_free_encoder = conditioning_sensitivity(&art.free_encoder, &data, held)?;
    log::info!("evaluating the Wasserstein policy");
    let wae_policy = wae_policy_scores(&art.agent, &art.full, a.episodes, eval_seed, frame_skip)?;
    let zs = data.z.gather_rows(&data.holdout[..data.holdout.len().min(1000)]);
    let wae_norm_deviation = wae_norm_deviation(&art.full, &zs)?;
    log::info!("generating counterfactuals");
    let queries = key_frame_queries(&art.replays, a.queries, &config.keyframes)?;
    let counterfactuals = cf_success(&art.agent, &art.full, &art.replays, &queries, &config.cf)?;
    let pairs = key_frame_queries(&art.replays, a.pairs, &config.keyframes)?;
    let realism =
        realism_comparison(&art.agent, &art.full, &art.latent_only, &art.dataset, &art.replays, &pairs, &config.cf)?;
    let report = EvalReport {
        agent,
        full: summary(pipeline::FULL_MODEL),
        free_encoder: summary(pipeline::FREE_ENCODER_MODEL),
        conditioning_full,
        conditioning_free_encoder,
        wae_policy,
        wae_norm_deviation,
        counterfactuals,
        realism,
    };
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

fn serve(mut config: Config, a: Serve) -> Result<()> {
    let s = &mut config.serve;
    set(&mut s.port, a.port);
    set(&mut s.workers, a.workers);
    set(&mut s.cache_entries, a.cache_entries);
    if a.model_dir.is_some() {
        s.model_dir = a.model_dir;
    }
    if a.annotation_log.is_some() {
        s.annotation_log = a.annotation_log;
    }
    let dir =
        config.serve.model_dir.clone().context("no model directory: pass --model-dir or set CFSTATES_MODEL_DIR")?;
    let annotation_log = config.serve.annotation_log.clone().unwrap_or_else(|| dir.join("annotations.jsonl"));
    let state = AppState::new(ServiceConfig {
        cf: config.cf,
        highlight: config.highlight,
        keyframes: config.keyframes,
        workers: config.serve.workers,
        cache_entries: config.serve.cache_entries,
        annotation_log: Some(annotation_log),
    });
    let port = config.serve.port;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        tokio::spawn(service::load_in_background(Arc::clone(&state), dir));
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, service::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
