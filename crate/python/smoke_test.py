"""Builds the extension module, imports it and runs a short end-to-end pass.

    python python/smoke_test.py [--model-dir DIR]

With --model-dir (an artifact directory from `cfstates evaluate`), the
trained agent, full model and first replay are used instead of fresh ones.
"""

import argparse
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "cfstates-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = os.path.join(ROOT, "target", "release", "libcfstates_py.so")
    dest = tempfile.mkdtemp(prefix="cfstates-py-")
    shutil.copy(lib, os.path.join(dest, "cfstates.so"))
    return dest


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--model-dir")
    args = parser.parse_args()

    sys.path.insert(0, build())
    import cfstates

    names = [name for _, name in cfstates.actions()]
    print("actions:", names)

    env = cfstates.Env(seed=1)
    while not env.done and env.steps < 50:
        env.step("fire")
    print(f"env: {env.steps} steps, score {env.score}")

    if args.model_dir:
        agent = cfstates.Agent.load(os.path.join(args.model_dir, "agent.ckpt"))
        model = cfstates.GenModel.load(os.path.join(args.model_dir, "models", "full"))
        replays = sorted(os.listdir(os.path.join(args.model_dir, "replays")))
        replay = cfstates.Replay.load(os.path.join(args.model_dir, "replays", replays[0]))
    else:
        agent = cfstates.Agent(0)
        model = cfstates.GenModel(0, width_divisor=16)
        replay = agent.record(7, "smoke")
    print(f"replay {replay.id}: {len(replay)} steps, score {replay.score}")

    frames = cfstates.select_key_frames(replay.entropies(), 3)
    print("key frames:", frames)
    obs = replay.observation(frames[0])
    current = agent.act(obs)
    target = next(i for i, _ in cfstates.actions() if i not in (0, current))
    cf = cfstates.generate_counterfactual(agent, model, obs, target)
    print(
        f"{names[cf.action]} -> {names[cf.target]}: success {cf.success} "
        f"in {cf.steps} steps, latent moved {cf.latent_delta:.4f}"
    )
    panels = cf.panels()
    assert all(png[:4] == b"\x89PNG" for png in panels.values())
    print("panels:", {k: len(v) for k, v in panels.items()})
    print("ok")


if __name__ == "__main__":
    main()
