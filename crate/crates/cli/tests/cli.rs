use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde_json::Value;

const TINY: &str = r#"
seed = 11

[agent]
total_steps = 160
num_envs = 2

[collect]
records = 300
num_envs = 2

[arch]
width_divisor = 16
encoder_hidden = 16
wae_hidden = 32

[train]
epochs = 1
batch_size = 16
eval_every = 0

[cf]
max_steps = 30
step_size = 0.5
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cfstates"));
    c.env("RUST_LOG", "warn").env("RUST_BACKTRACE", "0").env_remove("CFSTATES_MODEL_DIR").env_remove("CFSTATES_PORT");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Agent, dataset, replay and a full model trained for one epoch, shared by
/// the tests that only read them.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = root.join("tiny.toml");
        std::fs::write(&cfg, TINY).unwrap();
        let c = p(&cfg);
        let agent = root.join("agent.ckpt");
        let dataset = root.join("data.cfds");
        let replay = root.join("ep-7.cfrp");
        let model = root.join("full");
        run(&["--config", c, "agent-train", "--out", p(&agent), "--eval-episodes", "0"]);
        run(&["--config", c, "collect", "--agent", p(&agent), "--out", p(&dataset)]);
        run(&["--config", c, "--seed", "7", "replay-record", "--agent", p(&agent), "--out", p(&replay)]);
        run(&["--config", c, "model-train", "--agent", p(&agent), "--dataset", p(&dataset), "--out", p(&model)]);
        Fixture { _dir: dir, root }
    })
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn is_png(path: &Path) -> bool {
    std::fs::read(path).map(|b| b.starts_with(b"\x89PNG\r\n\x1a\n")).unwrap_or(false)
}

#[test]
fn pipeline_commands_write_their_outputs() {
    let f = fixture();
    for name in ["agent.ckpt", "data.cfds", "ep-7.cfrp", "full/train.jsonl", "full/summary.json"] {
        assert!(f.path(name).is_file(), "{name} missing");
    }
    let lines = std::fs::read_to_string(f.path("full/train.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);
    let summary = read_json(&f.path("full/summary.json"));
    assert_eq!(summary["seed"], 11);
    assert_eq!(summary["epochs"], 1);
    assert_eq!(summary["config"]["batch_size"], 16);
}

#[test]
fn cf_generate_writes_panels_and_record() {
    let f = fixture();
    let out = f.path("cf-out");
    run(&[
        "--config",
        p(&f.path("tiny.toml")),
        "cf-generate",
        "--agent",
        p(&f.path("agent.ckpt")),
        "--model",
        p(&f.path("full")),
        "--replay",
        p(&f.path("ep-7.cfrp")),
        "--t",
        "3",
        "--action",
        "fire",
        "--out",
        p(&out),
    ]);
    for name in ["query.png", "reconstruction.png", "counterfactual.png", "highlight.png"] {
        assert!(is_png(&out.join(name)), "{name}");
    }
    let r = read_json(&out.join("result.json"));
    assert_eq!(r["replay"], "ep-7");
    assert_eq!(r["t"], 3);
    assert_eq!(r["target"]["name"], "Fire");
    assert!(r["steps"].as_u64().unwrap() <= 30);
    assert_eq!(r["pi_after"].as_array().unwrap().len(), 6);
    assert!(r["candidates"].is_null());
}

#[test]
fn cf_generate_resolves_replay_ids_in_the_model_dir() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("replays")).unwrap();
    std::fs::copy(f.path("ep-7.cfrp"), dir.path().join("replays/ep-7.cfrp")).unwrap();
    std::fs::copy(f.path("agent.ckpt"), dir.path().join("agent.ckpt")).unwrap();
    let out = dir.path().join("out");
    let status = bin()
        .env("CFSTATES_MODEL_DIR", dir.path())
        .args(["--config", p(&f.path("tiny.toml")), "cf-generate", "--model", p(&f.path("full"))])
        .args(["--replay", "ep-7", "--t", "0", "--action", "auto", "--out", p(&out)])
        .output()
        .unwrap();
    let r = if status.status.success() {
        read_json(&out.join("result.json"))
    } else {
        // Auto may legitimately find nothing on an untrained model.
        assert!(String::from_utf8_lossy(&status.stderr).contains("no counterfactual found"));
        return;
    };
    assert!(r["success"].as_bool().unwrap());
    assert!(!r["candidates"].as_array().unwrap().is_empty());
}

#[test]
fn nn_baseline_and_ablation_outputs() {
    let f = fixture();
    let out = f.path("nn-out");
    // An untrained agent prefers few actions; use any one the index holds.
    let found = (0..6).any(|a| {
        bin()
            .args(["nn-baseline", "--agent", p(&f.path("agent.ckpt")), "--dataset", p(&f.path("data.cfds"))])
            .args(["--nn-records", "100", "--replay", p(&f.path("ep-7.cfrp")), "--t", "2"])
            .args(["--action", &a.to_string(), "--out", p(&out)])
            .stderr(Stdio::null())
            .status()
            .unwrap()
            .success()
    });
    assert!(found);
    assert!(is_png(&out.join("query.png")) && is_png(&out.join("neighbor.png")));
    let r = read_json(&out.join("result.json"));
    assert_eq!(r["indexed_records"], 100);
    assert!(r["index"].as_u64().unwrap() < 100);

    let cfg = f.path("tiny.toml");
    let c = p(&cfg);
    let model = f.path("abl-5");
    run(&[
        "--config",
        c,
        "model-train",
        "--agent",
        p(&f.path("agent.ckpt")),
        "--dataset",
        p(&f.path("data.cfds")),
        "--out",
        p(&model),
        "--ablation",
        "5",
    ]);
    let out = f.path("abl-out");
    run(&[
        "--config",
        c,
        "ablate",
        "--config-id",
        "5",
        "--agent",
        p(&f.path("agent.ckpt")),
        "--model",
        p(&model),
        "--replay",
        p(&f.path("ep-7.cfrp")),
        "--t",
        "1",
        "--action",
        "left",
        "--out",
        p(&out),
    ]);
    assert!(is_png(&out.join("counterfactual.png")));
    assert_eq!(read_json(&out.join("result.json"))["config_id"], 5);
    // The full model does not match ablation 2's inputs.
    let bad = bin()
        .args(["ablate", "--config-id", "2", "--agent", p(&f.path("agent.ckpt")), "--model", p(&f.path("full"))])
        .args(["--replay", p(&f.path("ep-7.cfrp")), "--t", "1", "--action", "left", "--out", p(&out)])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn env_play_saves_frames() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    let out = run(&["--seed", "3", "env-play", "--episodes", "2", "--frames-dir", p(&frames)]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(!stdout.is_empty());
    let count = std::fs::read_dir(&frames).unwrap().count();
    assert!(count > 1);
    assert!(is_png(&frames.join("frame-00000.png")));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let out = bin().args(["--config", p(&cfg), "env-play"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn resumed_training_rejects_a_changed_config() {
    let f = fixture();
    let out = bin()
        .args(["--config", p(&f.path("tiny.toml")), "model-train", "--agent", p(&f.path("agent.ckpt"))])
        .args(["--dataset", p(&f.path("data.cfds")), "--out", p(&f.path("full")), "--lr", "0.5"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

fn http_get(port: u16, path: &str) -> Option<(u16, String)> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(10))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut text = String::new();
    s.read_to_string(&mut text).ok()?;
    let status = text.split_whitespace().nth(1)?.parse().ok()?;
    let body = text.split_once("\r\n\r\n")?.1.to_string();
    Some((status, body))
}

#[test]
fn serve_answers_over_http() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("replays")).unwrap();
    std::fs::create_dir_all(dir.path().join("models")).unwrap();
    std::fs::copy(f.path("ep-7.cfrp"), dir.path().join("replays/ep-7.cfrp")).unwrap();
    std::fs::copy(f.path("agent.ckpt"), dir.path().join("agent.ckpt")).unwrap();
    let full = dir.path().join("models/full");
    std::fs::create_dir_all(&full).unwrap();
    for e in std::fs::read_dir(f.path("full")).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), full.join(e.file_name())).unwrap();
    }
    let port = 20000 + (std::process::id() % 20000) as u16;
    let mut child = bin()
        .env("CFSTATES_MODEL_DIR", dir.path())
        .env("CFSTATES_PORT", port.to_string())
        .arg("serve")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(60);
    let mut replays = None;
    while Instant::now() < deadline {
        match http_get(port, "/api/replays") {
            Some((200, body)) => {
                replays = Some(body);
                break;
            }
            _ => std::thread::sleep(Duration::from_millis(200)),
        }
    }
    let actions = http_get(port, "/api/actions");
    let missing = http_get(port, "/api/replays/ep-7/frames/99999");
    child.kill().unwrap();
    child.wait().unwrap();
    let replays: Value = serde_json::from_str(&replays.expect("server never became ready")).unwrap();
    assert_eq!(replays[0]["id"], "ep-7");
    assert_eq!(actions.unwrap().0, 200);
    let (status, body) = missing.unwrap();
    assert_eq!(status, 404);
    assert!(body.contains("not_found"));
}
