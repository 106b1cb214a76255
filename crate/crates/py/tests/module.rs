use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pymodule;

fn run(code: &str) {
    Python::attach(|py| {
        let globals = PyDict::new(py);
        globals.set_item("cfstates", wrap_pymodule!(cfstates_py::cfstates_module)(py)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        globals.set_item("tmp", dir.path().to_str().unwrap()).unwrap();
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn actions_and_environment() {
    run(r#"
acts = cfstates.actions()
assert [a[1] for a in acts] == ["NoOp", "Left", "Right", "Fire", "LeftFire", "RightFire"]
env = cfstates.Env(3)
assert env.observation().shape == (12, 64, 64)
reward, done = env.step("fire")
reward, done = env.step(1)
assert env.steps == 2 and not done
assert env.frame_png()[:4] == b"\x89PNG"
try:
    env.step("jump")
    raise AssertionError("accepted a bad action")
except ValueError:
    pass
"#);
}

#[test]
fn replay_round_trip_and_key_frames() {
    run(r#"
import os
agent = cfstates.Agent(5)
replay = agent.record(4, "ep")
assert len(replay) > 0 and replay.id == "ep"
path = os.path.join(tmp, "ep.cfrp")
replay.save(path)
again = cfstates.Replay.load(path)
assert again.entropies() == replay.entropies()
assert again.actions() == replay.actions()
frames = cfstates.select_key_frames(again.entropies(), 3)
assert len(frames) <= 3 and all(b - a >= 3 for a, b in zip(sorted(frames), sorted(frames)[1:]))
probs = agent.policy(again.observation(0))
assert abs(sum(probs) - 1.0) < 1e-5
assert agent.act(again.observation(0)) == probs.index(max(probs))
try:
    cfstates.Replay.load(os.path.join(tmp, "missing.cfrp"))
    raise AssertionError("loaded a missing file")
except OSError:
    pass
"#);
}

#[test]
fn counterfactuals_from_python() {
    run(r#"
agent = cfstates.Agent(5)
model = cfstates.GenModel(6, width_divisor=16)
obs = agent.record(4, "ep").observation(2)
cf = cfstates.generate_counterfactual(agent, model, obs, "left", max_steps=20, step_size=0.5)
assert cf.target == 1 and cf.steps <= 20
assert len(cf.pi_after) == 6
panels = cf.panels()
assert sorted(panels) == ["counterfactual", "highlight", "query", "reconstruction"]
assert all(v[:4] == b"\x89PNG" for v in panels.values())
try:
    chosen, table = cfstates.select_cf_action(agent, model, obs, max_steps=20, step_size=0.5)
    assert chosen in [c[0] for c in table if c[1]]
except ValueError as e:
    assert "no counterfactual" in str(e)
"#);
}
