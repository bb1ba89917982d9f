"""Train a PPO navigation policy on frozen encoder features and evaluate it.

The policy sees three consecutive image latents plus proprioception and the
body-frame goal offset. The encoder checkpoint is never touched during
training; its digest is compared before and after. Evaluation runs the
deterministic policy on held-out layouts and reports the navigation metrics.

    python demos/03_contrastive_pretraining.py --save enc.ckpt
    python demos/04_navigation_policy.py --encoder enc.ckpt --steps 500000
"""

import argparse
import json
from pathlib import Path

from splatnav.contrast import Encoder
from splatnav.env import EnvConfig, NavEnv
from splatnav.metrics import PolicyController, evaluate, plot_reward_curve, plot_trajectories
from splatnav.policy import Agent, PPOConfig, encoder_digest, train
from splatnav.world import WorldBuilder, default_template, randomize_layout

ap = argparse.ArgumentParser()
ap.add_argument("--encoder", required=True)
ap.add_argument("--steps", type=int, default=100_000)
ap.add_argument("--obstacles", type=int, default=0)
ap.add_argument("--out", default="demo_out")
args = ap.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

enc = Encoder.load(args.encoder)
digest = encoder_digest(enc)
env_cfg = EnvConfig(t_limit=400, success_radius=0.1, obstacle_pool=8 if args.obstacles else None)
template = default_template(args.obstacles)
builder = WorldBuilder()
ac, norm, report = train(lambda i: NavEnv(template, env_cfg, builder), enc,
                         PPOConfig(horizon=2048, batch_size=256), args.steps, seed=0,
                         log_path=out / "train_log.jsonl")
assert encoder_digest(enc) == digest, "encoder changed"
plot_reward_curve(report.curve, out / "reward_curve.svg")
ac.save(out / "policy.ckpt", norm)

layouts = [randomize_layout(template, 5000 + k) for k in range(5)]
res = evaluate(lambda s: NavEnv(s, env_cfg, builder), lambda: PolicyController(Agent(enc, ac, norm)),
               layouts, 10, seed=7)
print(json.dumps(res.report.to_dict(), indent=1))
plot_trajectories([r for r in res.records if r.layout == 0], out / "trajectories.svg", builder.grid(layouts[0]))
print(f"plots in {out}")
