//! The acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-7 measure trained artifacts. They are built on first use (this
//! takes hours on one CPU core) under `CFSTATES_ARTIFACT_DIR`, by default
//! `target/cfstates-artifacts`, using the profile in `acceptance.toml`, and
//! reused afterwards. Criteria 8-10 are self-contained.
//!
//! A trained model missing a threshold prints FAIL without failing the run,
//! unless `CFSTATES_ACCEPTANCE_STRICT=1` is set.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use cfstates::agent::{actor_critic_loss, collect_dataset, CollectConfig};
use cfstates::agent::{argmax, observations_tensor, record_replay, AgentNet};
use cfstates::config::Config;
use cfstates::counterfactual::{
    best_candidate, cf_objective, select_cf_action, select_key_frames, CfConfig, EntropyOrder, KeyFrameConfig,
    WaeDecoder,
};
use cfstates::env::{Action, NUM_ACTIONS};
use cfstates::evaluation::{
    cf_success, compare_agent_to_random, conditioning_sensitivity, key_frame_queries, monotone_fraction,
    realism_comparison, wae_norm_deviation, wae_policy_scores,
};
use cfstates::genmodel::{
    adversarial_loss, autoencoder_loss, discriminator_loss, entropy, mmd_imq, mmd_imq_with_grad, DiscriminatorLoss,
    GenArch, GenInputs, GenModel,
};
use cfstates::nn::Layer;
use cfstates::persistence::{Checkpoint, Replay, ReplayStep, RolloutDataset};
use cfstates::pipeline::{self, Artifacts};
use cfstates::tensor::Tensor;
use cfstates::training::{eval_reconstruction, probe_invariance, train_models, TrainConfig, TrainData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

/// Why a check did not pass.
enum Miss {
    /// It ran and the measurement fell short of the threshold.
    Short(String),
    /// It could not run, or a correctness check failed.
    Broken(String),
}

fn broken(e: impl std::fmt::Display) -> Miss {
    Miss::Broken(e.to_string())
}

struct Line {
    id: usize,
    title: &'static str,
    pass: bool,
    short: bool,
    detail: String,
    seconds: f64,
}

fn run(id: usize, title: &'static str, f: impl FnOnce() -> Result<String, Miss>) -> Line {
    let start = Instant::now();
    let (pass, short, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(d)) => (true, false, d),
        Ok(Err(Miss::Short(d))) => (false, true, d),
        Ok(Err(Miss::Broken(d))) => (false, false, d),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, false, format!("panicked: {msg}"))
        }
    };
    let line = Line { id, title, pass, short, detail, seconds: start.elapsed().as_secs_f64() };
    print_line(&line);
    line
}

fn print_line(l: &Line) {
    let label = if l.id == 0 { "property    ".to_string() } else { format!("criterion {:>2}", l.id) };
    println!("{label} {} {} ({:.1}s): {}", if l.pass { "PASS" } else { "FAIL" }, l.title, l.seconds, l.detail);
}

fn ensure(cond: bool, detail: String) -> Result<String, Miss> {
    if cond {
        Ok(detail)
    } else {
        Err(Miss::Short(detail))
    }
}

struct StderrLog;

impl log::Log for StderrLog {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Info
    }

    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            eprintln!("[{}] {}", r.level(), r.args());
        }
    }

    fn flush(&self) {}
}

fn main() {
    let _ = log::set_logger(&StderrLog).map(|()| log::set_max_level(log::LevelFilter::Info));
    let mut lines = vec![
        run(8, "numerical oracles", || criterion_8().map_err(Miss::Broken)),
        run(9, "determinism and formats", || criterion_9().map_err(Miss::Broken)),
        run(10, "selection heuristics", || criterion_10().map_err(Miss::Broken)),
    ];
    lines.extend(trained_criteria());
    lines.sort_by_key(|l| if l.id == 0 { usize::MAX } else { l.id });
    println!("\nsummary");
    for l in &lines {
        print_line(l);
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("{} of {} checks passed", lines.len() - failed, lines.len());
    // Thresholds missed by trained models are reported but only fail the run
    // in strict mode; errors and correctness checks always do.
    let strict = std::env::var_os("CFSTATES_ACCEPTANCE_STRICT").is_some_and(|v| v != "0");
    if lines.iter().any(|l| !l.pass && (strict || !l.short)) {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Criteria on trained artifacts

fn artifact_dir() -> PathBuf {
    match std::env::var_os("CFSTATES_ARTIFACT_DIR") {
        Some(d) => PathBuf::from(d),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/cfstates-artifacts"),
    }
}

const TITLES: [&str; 7] = [
    "agent competence",
    "action invariance",
    "reconstruction",
    "generator conditioning",
    "Wasserstein autoencoder fidelity",
    "counterfactual success",
    "ablation ordering",
];

fn trained_criteria() -> Vec<Line> {
    let config = Config::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/acceptance.toml"))
        .expect("acceptance profile");
    let dir = artifact_dir();
    eprintln!("artifacts in {}", dir.display());
    let art = match Artifacts::build(&dir, &config) {
        Ok(a) => a,
        Err(e) => {
            return TITLES
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let l = Line {
                        id: i + 1,
                        title: t,
                        pass: false,
                        short: false,
                        detail: format!("artifacts: {e}"),
                        seconds: 0.0,
                    };
                    print_line(&l);
                    l
                })
                .collect()
        }
    };
    let data = pipeline::train_data(&config, &art.agent, &art.dataset).expect("train data");
    let held = &data.holdout[..data.holdout.len().min(config.train.eval_samples)];
    let eval_seed = pipeline::stage_seed(config.seed, 100);
    let frame_skip = config.agent.frame_skip;
    let episodes = 50;
    let mut agent_stats = None;
    let mut lines = Vec::new();

    lines.push(run(1, TITLES[0], || {
        let c = compare_agent_to_random(&art.agent, episodes, eval_seed, frame_skip).map_err(broken)?;
        let ok = c.agent.mean >= 3.0 * c.random.mean;
        let detail = format!(
            "greedy mean {:.3} (std {:.3}) vs random {:.3} over {episodes} episodes, ratio {:.2} (need >= 3)",
            c.agent.mean, c.agent.std, c.random.mean, c.ratio
        );
        agent_stats = Some(c.agent);
        ensure(ok, detail)
    }));

    lines.push(run(2, TITLES[1], || {
        let start = Instant::now();
        let seed = pipeline::stage_seed(config.seed, 101);
        let full = probe_invariance(&art.full, &data, held, seed).map_err(broken)?;
        let free = probe_invariance(&art.free_encoder, &data, held, seed).map_err(broken)?;
        let secs = start.elapsed().as_secs_f64();
        let ok = full.accuracy <= full.chance + 0.10 && free.accuracy >= free.chance + 0.25 && secs <= 600.0;
        ensure(
            ok,
            format!(
                "probe accuracy lambda={} {:.3} (chance {:.3}, need <= +0.10); lambda={} {:.3} (chance {:.3}, need >= +0.25); \
                 {} test samples, {secs:.0}s",
                config.train.lambda,
                full.accuracy,
                full.chance,
                config.pipeline.ablated_lambda,
                free.accuracy,
                free.chance,
                full.test_size
            ),
        )
    }));

    lines.push(run(3, TITLES[2], || {
        let mse = eval_reconstruction(&art.full, &data, held).map_err(broken)?;
        ensure(mse <= 0.01, format!("held-out per-pixel MSE {mse:.5} on {} samples (need <= 0.01)", held.len()))
    }));

    lines.push(run(4, TITLES[3], || {
        let full = conditioning_sensitivity(&art.full, &data, held).map_err(broken)?;
        let free = conditioning_sensitivity(&art.free_encoder, &data, held).map_err(broken)?;
        let ratio = full / free;
        ensure(
            ratio >= 10.0,
            format!(
                "mean abs pixel change {full:.5} (lambda={}) vs {free:.5} (lambda={}), ratio {ratio:.2} (need >= 10)",
                config.train.lambda, config.pipeline.ablated_lambda
            ),
        )
    }));

    lines.push(run(5, TITLES[4], || {
        let agent = match &agent_stats {
            Some(a) => a.clone(),
            None => cfstates::agent::evaluate_policy(episodes, eval_seed, frame_skip, |obs| {
                cfstates::agent::greedy_actions(&art.agent, obs)
            })
            .map_err(broken)?,
        };
        let wae = wae_policy_scores(&art.agent, &art.full, episodes, eval_seed, frame_skip).map_err(broken)?;
        let rows: Vec<usize> = (0..art.dataset.len()).step_by((art.dataset.len() / 1000).max(1)).take(1000).collect();
        let dev = wae_norm_deviation(&art.full, &data.z.gather_rows(&rows)).map_err(broken)?;
        let gap = (wae.mean - agent.mean).abs();
        ensure(
            gap <= 0.5 * agent.std && dev <= 1e-5,
            format!(
                "WAE policy mean {:.3} vs agent {:.3} (gap {gap:.3}, need <= {:.3}); max | ||E_w(z)|| - 1 | = {dev:.2e} on {} samples",
                wae.mean,
                agent.mean,
                0.5 * agent.std,
                rows.len()
            ),
        )
    }));

    lines.push(run(6, TITLES[5], || {
        let queries = key_frame_queries(&art.replays, 100, &config.keyframes).map_err(broken)?;
        let r = cf_success(&art.agent, &art.full, &art.replays, &queries, &config.cf).map_err(broken)?;
        ensure(
            r.queries == 100 && r.rate >= 0.7,
            format!(
                "{}/{} queries switched the argmax within {} steps ({:.1}%, need >= 70%), median steps {}",
                r.successes,
                r.queries,
                config.cf.max_steps,
                100.0 * r.rate,
                r.median_steps.map_or("n/a".into(), |m| format!("{m}"))
            ),
        )
    }));

    lines.push(run(7, TITLES[6], || {
        let pairs = key_frame_queries(&art.replays, 50, &config.keyframes).map_err(broken)?;
        let r =
            realism_comparison(&art.agent, &art.full, &art.latent_only, &art.dataset, &art.replays, &pairs, &config.cf)
                .map_err(broken)?;
        ensure(
            r.pairs == 50 && r.win_rate >= 0.8,
            format!(
                "full model closer to real states on {}/{} pairs ({:.0}%, need >= 80%); mean distance {:.3} vs {:.3}",
                r.full_wins,
                r.pairs,
                100.0 * r.win_rate,
                r.mean_full,
                r.mean_other
            ),
        )
    }));

    // Not a numbered criterion: the gradient-descent sanity property.
    let monotone = run(0, "monotone objective trace", || {
        let queries = key_frame_queries(&art.replays, 20, &config.keyframes).map_err(broken)?;
        let cfg = CfConfig { step_size: 1e-3, ..config.cf };
        let r = monotone_fraction(&art.agent, &art.full, &art.replays, &queries, &cfg, 0.0).map_err(broken)?;
        ensure(
            r.fraction >= 0.95,
            format!(
                "{}/{} steps non-increasing ({:.1}%) over {} queries",
                r.non_increasing,
                r.steps,
                100.0 * r.fraction,
                queries.len()
            ),
        )
    });
    lines.push(monotone);
    lines
}

// ---------------------------------------------------------------------------
// Criterion 8: numerical oracles

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_distributions(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Tensor {
    let mut t = random_tensor(rng, &[rows, k], 1.0).map(|v| v.exp());
    for i in 0..rows {
        let s: f32 = t.row(i).iter().sum();
        t.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// Relative error `‖g − n‖ / max(‖g‖, ‖n‖)` between an analytic gradient and
/// central differences of `f` taken in f32 input space.
fn fd_error(f: impl Fn(&[f32]) -> f64, x: &[f32], analytic: &[f32], h: f32) -> f64 {
    let mut num = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
        xp[i] += h;
        xm[i] -= h;
        let dh = xp[i] as f64 - xm[i] as f64;
        num.push((f(&xp) - f(&xm)) / dh);
    }
    rel_error(analytic.iter().map(|&v| v as f64), num.into_iter())
}

fn rel_error(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.zip(b) {
        diff += (x - y).powi(2);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-30)
}

fn brute_mmd(x: &Tensor, y: &Tensor, c: f64) -> f64 {
    let k = |a: &[f32], b: &[f32]| {
        let d: f64 = a.iter().zip(b).map(|(&u, &v)| (u as f64 - v as f64) * (u as f64 - v as f64)).sum();
        c / (c + d)
    };
    let (n, m) = (x.rows(), y.rows());
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sxx += k(x.row(i), x.row(j));
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            if i != j {
                syy += k(y.row(i), y.row(j));
            }
        }
    }
    for i in 0..n {
        for j in 0..m {
            sxy += k(x.row(i), y.row(j));
        }
    }
    sxx / (n * (n - 1)) as f64 + syy / (m * (m - 1)) as f64 - 2.0 * sxy / (n * m) as f64
}

/// `D_w` in evaluation mode, the policy head and the counterfactual objective,
/// all in f64.
fn objective_f64(model: &GenModel, head: &cfstates::nn::Linear, x: &[f64], x0: &[f64], target: usize) -> f64 {
    let mut h: Vec<f64> = x.to_vec();
    for layer in &model.wae_decoder.layers {
        h = match layer {
            Layer::Linear(l) => linear_f64(l, &h),
            Layer::BatchNorm(bn) => h
                .iter()
                .enumerate()
                .map(|(c, &v)| {
                    let g = bn.gamma.value.data()[c] as f64;
                    let b = bn.beta.value.data()[c] as f64;
                    let m = bn.running_mean.value.data()[c] as f64;
                    let var = bn.running_var.value.data()[c] as f64;
                    (v - m) / (var + bn.eps as f64).sqrt() * g + b
                })
                .collect(),
            Layer::LeakyRelu { slope, .. } => h.iter().map(|&v| if v > 0.0 { v } else { v * *slope as f64 }).collect(),
            other => panic!("unexpected layer in D_w: {other:?}"),
        };
    }
    let logits = linear_f64(head, &h);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let pa = (logits[target] - max).exp() / total;
    let dist: f64 = x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum();
    dist + (1.0 - pa).ln()
}

fn linear_f64(l: &cfstates::nn::Linear, x: &[f64]) -> Vec<f64> {
    let (w, b) = (l.weight.value.data(), l.bias.value.data());
    (0..b.len())
        .map(|o| b[o] as f64 + x.iter().enumerate().map(|(i, &v)| w[o * x.len() + i] as f64 * v).sum::<f64>())
        .collect()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    v.iter().map(|&a| (a as f64 / n) as f32).collect()
}

fn criterion_8() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut notes = Vec::new();

    // MMD against the double loop.
    let mut worst_mmd = 0.0f64;
    for _ in 0..20 {
        let (n, m, d) = (rng.random_range(2..12), rng.random_range(2..12), rng.random_range(1..9));
        let x = random_tensor(&mut rng, &[n, d], 2.0);
        let y = random_tensor(&mut rng, &[m, d], 2.0);
        let c = [1.0, 2.0 * d as f64, 256.0][rng.random_range(0..3)];
        worst_mmd = worst_mmd.max((mmd_imq(&x, &y, c).unwrap() - brute_mmd(&x, &y, c)).abs());
    }
    if worst_mmd > 1e-10 {
        return Err(format!("mmd differs from the double loop by {worst_mmd:e}"));
    }
    notes.push(format!("mmd max abs error {worst_mmd:.1e} over 20 instances"));

    // Loss gradients against central differences on toy shapes.
    let mut grads: Vec<(&str, f64)> = Vec::new();
    let h = 1e-3;
    let recon = random_tensor(&mut rng, &[3, 4], 1.0);
    let target = random_tensor(&mut rng, &[3, 4], 1.0);
    let (_, g) = autoencoder_loss(&recon, &target).unwrap();
    let f = |v: &[f32]| autoencoder_loss(&Tensor::from_vec(&[3, 4], v.to_vec()).unwrap(), &target).unwrap().0;
    grads.push(("autoencoder", fd_error(f, recon.data(), g.data(), h)));

    let logits = random_tensor(&mut rng, &[4, NUM_ACTIONS], 2.0);
    let pi = random_distributions(&mut rng, 4, NUM_ACTIONS);
    for (name, kind) in [("discriminator mse", DiscriminatorLoss::Mse), ("discriminator kl", DiscriminatorLoss::Kl)] {
        let (_, g) = discriminator_loss(&logits, &pi, kind).unwrap();
        let f = |v: &[f32]| {
            discriminator_loss(&Tensor::from_vec(&[4, NUM_ACTIONS], v.to_vec()).unwrap(), &pi, kind).unwrap().0
        };
        grads.push((name, fd_error(f, logits.data(), g.data(), h)));
    }
    let (_, g) = adversarial_loss(&logits, 20.0).unwrap();
    let f = |v: &[f32]| adversarial_loss(&Tensor::from_vec(&[4, NUM_ACTIONS], v.to_vec()).unwrap(), 20.0).unwrap().0;
    grads.push(("adversarial entropy", fd_error(f, logits.data(), g.data(), h)));

    let x = random_tensor(&mut rng, &[5, 4], 1.0);
    let y = random_tensor(&mut rng, &[6, 4], 1.0);
    let (_, g) = mmd_imq_with_grad(&x, &y, 8.0).unwrap();
    let f = |v: &[f32]| mmd_imq(&Tensor::from_vec(&[5, 4], v.to_vec()).unwrap(), &y, 8.0).unwrap();
    grads.push(("mmd", fd_error(f, x.data(), g.data(), h)));

    let values: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let actions: Vec<usize> = (0..4).map(|_| rng.random_range(0..NUM_ACTIONS)).collect();
    let adv: Vec<f32> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ret: Vec<f32> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ac = actor_critic_loss(&logits, &values, &actions, &adv, &ret, 0.01, 0.5).unwrap();
    let f = |v: &[f32]| {
        let l = Tensor::from_vec(&[4, NUM_ACTIONS], v.to_vec()).unwrap();
        actor_critic_loss(&l, &values, &actions, &adv, &ret, 0.01, 0.5).unwrap().loss
    };
    grads.push(("actor-critic logits", fd_error(f, logits.data(), ac.d_logits.data(), h)));
    let f = |v: &[f32]| actor_critic_loss(&logits, v, &actions, &adv, &ret, 0.01, 0.5).unwrap().loss;
    grads.push(("actor-critic values", fd_error(f, &values, &ac.d_values, h)));

    // Counterfactual objective through D_w and the policy head, against an
    // f64 reimplementation differentiated numerically.
    let arch = GenArch { width_divisor: 16, encoder_hidden: 16, wae_hidden: 32, ..Default::default() };
    let mut model = GenModel::new(arch, GenInputs::FULL, 81).unwrap();
    for layer in model.wae_decoder.layers.iter_mut() {
        if let Layer::BatchNorm(bn) = layer {
            for v in bn.running_mean.value.data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
            for v in bn.running_var.value.data_mut() {
                *v = rng.random_range(0.05..0.5);
            }
        }
    }
    let mut head = AgentNet::new(82).policy;
    head.weight.value.scale(4.0);
    let mut worst_cf = 0.0f64;
    for q in 0..3 {
        let x0 = unit(&mut rng, arch.wae_dim);
        let x = unit(&mut rng, arch.wae_dim);
        let target = Action::ALL[1 + q];
        let eval = cf_objective(&x, &x0, target, &head, &mut WaeDecoder::new(&model)).unwrap();
        let (x64, x064): (Vec<f64>, Vec<f64>) =
            (x.iter().map(|&v| v as f64).collect(), x0.iter().map(|&v| v as f64).collect());
        let value = objective_f64(&model, &head, &x64, &x064, target.id());
        if (value - eval.value).abs() > 1e-4 * value.abs().max(1.0) {
            return Err(format!("objective {} vs f64 oracle {value}", eval.value));
        }
        let eps = 1e-6;
        let num: Vec<f64> = (0..x64.len())
            .map(|i| {
                let (mut p, mut m) = (x64.clone(), x64.clone());
                p[i] += eps;
                m[i] -= eps;
                (objective_f64(&model, &head, &p, &x064, target.id())
                    - objective_f64(&model, &head, &m, &x064, target.id()))
                    / (2.0 * eps)
            })
            .collect();
        worst_cf = worst_cf.max(rel_error(eval.grad.iter().map(|&v| v as f64), num.into_iter()));
    }
    grads.push(("counterfactual objective", worst_cf));

    let worst = grads.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    if worst.1 > 1e-3 {
        return Err(format!("{} gradient relative error {:.2e} (need <= 1e-3)", worst.0, worst.1));
    }
    notes.push(format!("{} loss gradients, worst relative error {:.1e} ({})", grads.len(), worst.1, worst.0));

    // Entropy unit cases.
    let cases: [(&[f32], f64); 5] = [
        (&[1.0, 0.0, 0.0], 0.0),
        (&[0.5, 0.5], 2f64.ln()),
        (&[0.25; 4], 4f64.ln()),
        (&[0.5, 0.25, 0.25, 0.0], 1.5 * 2f64.ln()),
        (&[0.125; 8], 8f64.ln()),
    ];
    for (p, expect) in cases {
        let e = entropy(p);
        if (e - expect).abs() > 1e-12 {
            return Err(format!("entropy of {p:?} is {e}, expected {expect}"));
        }
    }
    notes.push("entropy unit cases exact".into());
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------------------
// Criterion 9: determinism and formats

fn loss_trace(t: &cfstates::training::Trainer) -> Vec<u64> {
    t.report
        .epochs
        .iter()
        .flat_map(|e| [e.loss_disc, e.loss_ae, e.loss_adv, e.wae_recon, e.wae_mmd])
        .map(f64::to_bits)
        .collect()
}

/// Flips one byte at a spread of positions, every header byte included, and
/// reports the first position whose corruption went unnoticed.
fn undetected_corruption(bytes: &[u8], decode: impl Fn(&[u8]) -> bool) -> (usize, Option<usize>) {
    let stride = (bytes.len() / 1500).max(1);
    let positions: Vec<usize> =
        (0..bytes.len().min(64)).chain((64..bytes.len()).step_by(stride)).chain([bytes.len() - 1]).collect();
    let mut buf = bytes.to_vec();
    for &p in &positions {
        buf[p] ^= 0x5a;
        let ok = decode(&buf);
        buf[p] ^= 0x5a;
        if ok {
            return (positions.len(), Some(p));
        }
    }
    (positions.len(), None)
}

fn criterion_9() -> Check {
    let mut notes = Vec::new();
    let agent = AgentNet::new(90);
    let ds = collect_dataset(&agent, &CollectConfig { records: 40, num_envs: 2, ..Default::default() }, 91)
        .map_err(|e| e.to_string())?;
    let data = TrainData::new(&agent, &ds).map_err(|e| e.to_string())?;
    let arch = GenArch { width_divisor: 16, encoder_hidden: 16, wae_hidden: 32, ..Default::default() };
    let cfg = TrainConfig { epochs: 2, batch_size: 8, eval_every: 0, ..Default::default() };
    let train = || train_models(GenModel::new(arch, GenInputs::FULL, 92).unwrap(), &data, &cfg, 93).unwrap();
    let (a, b) = (train(), train());
    if loss_trace(&a) != loss_trace(&b) || a.model.to_checkpoint() != b.model.to_checkpoint() {
        return Err("two runs with the same seed diverged".into());
    }
    notes.push(format!("loss trace of {} values identical bit for bit", loss_trace(&a).len()));

    let ds_bytes = ds.to_bytes();
    if RolloutDataset::from_bytes(&ds_bytes).map_err(|e| e.to_string())? != ds {
        return Err("dataset round trip changed the records".into());
    }
    let ckpt = a.model.to_checkpoint();
    let ck_bytes = ckpt.to_bytes().map_err(|e| e.to_string())?;
    if Checkpoint::from_bytes(&ck_bytes).map_err(|e| e.to_string())? != ckpt {
        return Err("checkpoint round trip changed tensors".into());
    }
    let replay = record_replay(&agent, 94, "r", 4).map_err(|e| e.to_string())?;
    let rp_bytes = replay.to_bytes();
    if Replay::from_bytes(&rp_bytes).map_err(|e| e.to_string())? != replay {
        return Err("replay round trip changed steps".into());
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    a.model.save(dir.path()).map_err(|e| e.to_string())?;
    if GenModel::load(dir.path()).map_err(|e| e.to_string())?.to_checkpoint() != ckpt {
        return Err("model directory round trip changed tensors".into());
    }
    notes.push("dataset, checkpoint, replay and model directory round trips exact".into());

    let mut tried = 0;
    for (name, bytes, decode) in [
        ("dataset", &ds_bytes, &(|b: &[u8]| RolloutDataset::from_bytes(b).is_ok()) as &dyn Fn(&[u8]) -> bool),
        ("checkpoint", &ck_bytes, &|b: &[u8]| Checkpoint::from_bytes(b).is_ok()),
        ("replay", &rp_bytes, &|b: &[u8]| Replay::from_bytes(b).is_ok()),
    ] {
        let (n, missed) = undetected_corruption(bytes, decode);
        tried += n;
        if let Some(p) = missed {
            return Err(format!("{name}: corrupting byte {p} went undetected"));
        }
        if decode(&bytes[..bytes.len() - 1]) {
            return Err(format!("{name}: truncation went undetected"));
        }
    }
    notes.push(format!("{tried} single-byte corruptions and 3 truncations all detected"));
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------------------
// Criterion 10: selection heuristics

/// Independent greedy reference: repeatedly take the lowest-entropy step (or
/// highest, earliest on ties) that keeps the gap to everything taken so far.
fn reference_key_frames(e: &[f64], n: usize, gap: usize, order: EntropyOrder) -> Vec<usize> {
    let mut taken: Vec<usize> = Vec::new();
    while taken.len() < n {
        let mut best: Option<usize> = None;
        for t in 0..e.len() {
            if taken.iter().any(|&s| s.abs_diff(t) < gap) {
                continue;
            }
            best = match best {
                None => Some(t),
                Some(b) => {
                    let better = match order {
                        EntropyOrder::Low => e[t] < e[b],
                        EntropyOrder::High => e[t] > e[b],
                    };
                    Some(if better { t } else { b })
                }
            };
        }
        match best {
            Some(t) => taken.push(t),
            None => break,
        }
    }
    taken
}

fn fuzzed_replay(rng: &mut ChaCha8Rng) -> Replay {
    // A few shared distributions make entropy ties common.
    let templates: Vec<Vec<f32>> =
        (0..rng.random_range(1..6)).map(|_| random_distributions(rng, 1, NUM_ACTIONS).into_vec()).collect();
    let len = rng.random_range(0..120);
    let steps = (0..len)
        .map(|_| {
            let policy = templates[rng.random_range(0..templates.len())].clone();
            ReplayStep {
                frame: vec![0; 3],
                action: argmax(&policy) as u8,
                reward: 0.0,
                entropy: entropy(&policy) as f32,
                policy,
            }
        })
        .collect();
    Replay { id: "fuzz".into(), seed: 0, height: 1, width: 1, num_actions: NUM_ACTIONS, score: 0.0, steps }
}

fn criterion_10() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = KeyFrameConfig::default();
    let mut selected = 0;
    for case in 0..1000 {
        let replay = fuzzed_replay(&mut rng);
        let e = replay.entropies();
        let n = rng.random_range(0..16);
        let got = select_key_frames(&e, n, &cfg).map_err(|err| err.to_string())?;
        selected += got.len();
        if got.len() > n {
            return Err(format!("replay {case}: {} frames for n={n}", got.len()));
        }
        for (i, &a) in got.iter().enumerate() {
            for &b in &got[i + 1..] {
                if a.abs_diff(b) < 3 {
                    return Err(format!("replay {case}: frames {a} and {b} closer than 3 steps"));
                }
            }
        }
        if got.windows(2).any(|w| e[w[0]] > e[w[1]]) {
            return Err(format!("replay {case}: frames {got:?} not in ascending entropy order"));
        }
        if got != reference_key_frames(&e, n, 3, EntropyOrder::Low) {
            return Err(format!("replay {case}: {got:?} differs from the greedy reference"));
        }
    }
    let mut notes = vec![format!("1000 fuzzed replays, {selected} key frames, gaps and order hold")];

    let c =
        |action, success, latent_delta| cfstates::counterfactual::Candidate { action, success, steps: 1, latent_delta };
    let tables = [
        (vec![c(Action::Left, true, 0.4), c(Action::Right, true, 0.9), c(Action::Fire, true, 0.2)], Action::Right),
        (vec![c(Action::Left, false, 3.0), c(Action::Right, true, 0.1), c(Action::Fire, false, 2.0)], Action::Right),
        (vec![c(Action::LeftFire, true, 0.7), c(Action::RightFire, true, 0.7)], Action::LeftFire),
    ];
    for (table, expect) in &tables {
        let got = best_candidate(table).map_err(|e| e.to_string())?.action;
        if got != *expect {
            return Err(format!("picked {got:?} from {table:?}, expected {expect:?}"));
        }
    }
    if best_candidate(&[c(Action::Left, false, 1.0)]).is_ok() {
        return Err("a table without successes produced an action".into());
    }

    // On live models the table never holds NoOp or the agent's own choice.
    let agent = AgentNet::new(100);
    let arch = GenArch { width_divisor: 16, encoder_hidden: 16, wae_hidden: 32, ..Default::default() };
    let model = GenModel::new(arch, GenInputs::FULL, 101).unwrap();
    let replay = record_replay(&agent, 102, "r", 4).map_err(|e| e.to_string())?;
    let cf = CfConfig { max_steps: 30, step_size: 0.5, ..Default::default() };
    for t in (0..replay.len()).step_by(5).take(4) {
        let obs = replay.observation(t).map_err(|e| e.to_string())?;
        let current =
            argmax(agent.policy_probs(&agent.latent(&observations_tensor(&[&obs]).unwrap()).unwrap()).unwrap().data());
        match select_cf_action(&agent, &model, &obs, &cf) {
            Ok((a, table)) => {
                if table.iter().any(|c| c.action == Action::NoOp || c.action.id() == current) {
                    return Err(format!("table at t={t} includes NoOp or the current action"));
                }
                if a != best_candidate(&table).unwrap().action {
                    return Err(format!("t={t}: returned {a:?}, not the largest successful move"));
                }
            }
            Err(cfstates::Error::NoCounterfactual) => {}
            Err(e) => return Err(e.to_string()),
        }
    }
    notes.push(format!("{} hand-built tables and live tables exclude NoOp", tables.len()));
    Ok(notes.join("; "))
}
