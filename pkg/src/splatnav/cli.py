"""Command-line entry point: ``splatnav <stage> [--config FILE] [--seed N] [--out DIR]``.

Stages write into ``<out>/<stage>.partial`` and rename it to ``<out>/<stage>``
once every output and the manifest are written, so a failed stage leaves
its partial outputs behind under the ``.partial`` name.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import benchmarks
from .contrast import Encoder, load_dataset, pretrain, save_dataset, separation
from .env import NavEnv
from .errors import CheckpointError, SceneFormatError, SplatNavError
from .fit import fit
from .gaussians import CameraModel, load_scene, save_scene
from .metrics import PolicyController, evaluate, plot_reward_curve, plot_trajectories, save_records
from .nn import checkpoint
from .policy import ActorCritic, Agent, encoder_digest, train
from .render import RenderConfig, render, write_ppm
from .runconfig import ConfigError, RunConfig, bundled_config, load_config, to_dict
from .world import (LayoutTemplate, WorldBuilder, collect_dataset, default_template, load_layout,
                    load_scene_ref, randomize_layout)

logger = logging.getLogger("splatnav")

MANIFEST = "run_manifest.json"
STAGES = ("fit-scene", "collect-dataset", "pretrain-encoder", "train-policy", "evaluate")
STAGE_DIRS = {"fit-scene": "scene", "collect-dataset": "dataset", "pretrain-encoder": "encoder",
              "train-policy": "policy", "evaluate": "eval", "render": "render"}


class InputError(SplatNavError):
    """Missing or unreadable stage input (exit code 2)."""


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _digest(path: Path) -> str:
    return checkpoint.checksum_bytes(path.read_bytes())


def _require(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


class Stage:
    """Staging directory plus manifest bookkeeping for one subcommand."""

    def __init__(self, name, cfg: RunConfig, section):
        self.name = name
        self.cfg = cfg
        self.section = section
        self.final = Path(cfg.out_dir) / STAGE_DIRS[name]
        self.dir = self.final.with_name(self.final.name + ".partial")
        self.inputs = {}
        self.t0 = time.time()

    def add_input(self, name, path):
        p = Path(path)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        h = checkpoint.checksum_bytes(b"".join(_digest(q).encode() for q in files))
        self.inputs[name] = {"path": str(p), "sha256": h}

    def __enter__(self):
        if self.dir.exists():
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            logger.error("%s failed; partial outputs kept in %s", self.name, self.dir)
            return False
        outputs = {str(p.relative_to(self.dir)): _digest(p) for p in sorted(self.dir.rglob("*")) if p.is_file()}
        manifest = {"stage": self.name, "seed": self.cfg.seed, "config": to_dict(self.section),
                    "inputs": self.inputs, "outputs": outputs, "git_describe": git_describe(),
                    "wall_time_s": round(time.time() - self.t0, 3),
                    "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S")}
        (self.dir / MANIFEST).write_text(json.dumps(manifest, indent=1))
        if self.final.exists():
            shutil.rmtree(self.final)
        self.dir.rename(self.final)
        logger.info("%s wrote %s", self.name, self.final)
        return False


# --- shared helpers ----------------------------------------------------------------

def world_template(cfg: RunConfig, scene_path=None, n_obstacles=None) -> LayoutTemplate:
    w = cfg.world
    n = w.n_obstacles if n_obstacles is None else n_obstacles
    if w.template is None:
        t = default_template(n, tuple(w.size), w.height)
    elif isinstance(w.template, str):
        t = load_layout(_require(w.template, "layout template"))
    else:
        t = LayoutTemplate.from_dict(w.template)
    if scene_path is not None:
        t = LayoutTemplate.from_dict({**t.to_dict(), "background": str(Path(scene_path).resolve())}, t.base_dir)
    return t


def fitted_scene(cfg: RunConfig, explicit=None):
    """Scene file for the world background: explicit path, else the fit stage output when enabled."""
    if explicit is not None:
        return _require(explicit, "scene")
    p = Path(cfg.out_dir) / STAGE_DIRS["fit-scene"] / "scene.json"
    if cfg.world.fitted_background and p.exists():
        return p
    return None


def builder_for(cfg: RunConfig) -> WorldBuilder:
    return WorldBuilder(cfg.world.fusion)


def env_render_cfg(cfg: RunConfig) -> RenderConfig:
    return RenderConfig(background_color=cfg.env.background_color)


def load_encoder(path) -> Encoder:
    try:
        return Encoder.load(_require(path, "encoder checkpoint"))
    except CheckpointError as exc:
        raise InputError(f"encoder checkpoint {path}: {exc}") from None


def load_policy(path):
    try:
        ac, norm = ActorCritic.load(_require(path, "policy checkpoint"))
    except CheckpointError as exc:
        raise InputError(f"policy checkpoint {path}: {exc}") from None
    if norm is None:
        raise InputError(f"policy checkpoint {path} has no observation normalizer")
    return ac, norm


# --- stages -----------------------------------------------------------------------

def cmd_fit_scene(cfg: RunConfig, args):
    fs = cfg.fit
    ref = fs.scene if fs.scene is not None else world_template(cfg).background
    try:
        truth = load_scene_ref(ref, None, "fit.scene")
    except SceneFormatError as exc:
        raise InputError(str(exc)) from None
    bounds = world_template(cfg).bounds
    rng = np.random.default_rng([cfg.seed, 11])
    views = benchmarks.interior_views(truth, (bounds.lo, bounds.hi), fs.views + fs.holdout, fs.resolution,
                                      seed=cfg.seed, fov_deg=fs.fov_deg)
    init = benchmarks.scramble(truth, rng, jitter=fs.jitter)
    fit_cfg = fs.fit
    fit_cfg.seed = cfg.seed
    with Stage("fit-scene", cfg, fs) as st:
        if isinstance(ref, str):
            st.add_input("scene", ref)
        scene, report = fit(init, views[:fs.views], fit_cfg, holdout=views[fs.views:])
        save_scene(scene, st.dir / "scene.json")
        (st.dir / "fit_report.json").write_text(json.dumps(report.to_dict()))
    return st.final


def cmd_collect(cfg: RunConfig, args):
    scene = fitted_scene(cfg, getattr(args, "scene", None))
    template = world_template(cfg, scene)
    c = cfg.collect
    with Stage("collect-dataset", cfg, c) as st:
        if scene is not None:
            st.add_input("scene", scene)
        images, poses = collect_dataset(template, c.images, seed=cfg.seed, resolution=c.resolution,
                                        n_layouts=c.n_layouts, render_cfg=env_render_cfg(cfg),
                                        fov_deg=cfg.env.fov_deg)
        save_dataset(st.dir, images, poses, {"seed": cfg.seed})
    return st.final


def cmd_pretrain(cfg: RunConfig, args):
    data = _require(getattr(args, "data", None) or Path(cfg.out_dir) / STAGE_DIRS["collect-dataset"], "dataset")
    try:
        images = load_dataset(data)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read dataset {data}: {exc}") from None
    p = cfg.pretrain
    if images.shape[1] != p.encoder.resolution:
        raise InputError(f"dataset resolution {images.shape[1]} != encoder resolution {p.encoder.resolution}")
    hold = min(p.holdout, len(images) // 5)
    train_imgs, held = images[:len(images) - hold], images[len(images) - hold:]
    with Stage("pretrain-encoder", cfg, p) as st:
        st.add_input("dataset", data)
        enc, report = pretrain(train_imgs, p.encoder, p.augment, epochs=p.epochs, batch=p.batch, seed=cfg.seed,
                               lr=p.lr, denominator=p.denominator)
        enc.save(st.dir / "encoder.ckpt")
        out = {"epoch_losses": report.epoch_losses, "losses": report.losses, "train_images": len(train_imgs)}
        if hold >= 2:
            pos, neg = separation(enc, held, p.augment, seed=cfg.seed)
            out.update(heldout_images=hold, positive_cosine=pos, negative_cosine=neg, margin=pos - neg)
        (st.dir / "pretrain_report.json").write_text(json.dumps(out))
    return st.final


def _encoder_path(cfg, args):
    return getattr(args, "encoder", None) or Path(cfg.out_dir) / STAGE_DIRS["pretrain-encoder"] / "encoder.ckpt"


def cmd_train(cfg: RunConfig, args):
    enc_path = _encoder_path(cfg, args)
    encoder = load_encoder(enc_path)
    before = checkpoint.checksum(enc_path)
    scene = fitted_scene(cfg, getattr(args, "scene", None))
    template = world_template(cfg, scene)
    builder = builder_for(cfg)
    t = cfg.train
    with Stage("train-policy", cfg, t) as st:
        st.add_input("encoder", enc_path)
        if scene is not None:
            st.add_input("scene", scene)
        ac, norm, report = train(lambda i: NavEnv(template, cfg.env, builder, env_render_cfg(cfg)), encoder, t.ppo,
                                 t.total_steps, seed=cfg.seed, log_path=st.dir / "train_log.jsonl")
        ac.save(st.dir / "policy.ckpt", norm)
        after = checkpoint.checksum(enc_path)
        if after != before:
            raise RuntimeError("encoder checkpoint changed during policy training")
        (st.dir / "train_report.json").write_text(json.dumps({
            "curve": report.curve, "episode_returns": report.episode_returns,
            "episode_outcomes": report.episode_outcomes, "encoder_checksum_before": before,
            "encoder_checksum_after": after, "encoder_digest": encoder_digest(encoder)}))
        plot_reward_curve(report.curve, st.dir / "reward_curve.svg")
    return st.final


def cmd_evaluate(cfg: RunConfig, args):
    enc_path = _encoder_path(cfg, args)
    pol_path = getattr(args, "policy", None) or Path(cfg.out_dir) / STAGE_DIRS["train-policy"] / "policy.ckpt"
    encoder = load_encoder(enc_path)
    ac, norm = load_policy(pol_path)
    if ac.obs_dim != 3 * encoder.spec.out_dim + 9:
        raise InputError(f"policy input size {ac.obs_dim} does not match encoder latent {encoder.spec.out_dim}")
    e = cfg.evaluate
    scene = fitted_scene(cfg, getattr(args, "scene", None))
    template = world_template(cfg, scene, e.n_obstacles)
    layouts = [randomize_layout(template, 1_000_000 + cfg.seed * 1000 + k) for k in range(e.layouts)]
    builder = builder_for(cfg)
    with Stage("evaluate", cfg, e) as st:
        st.add_input("encoder", enc_path)
        st.add_input("policy", pol_path)
        if scene is not None:
            st.add_input("scene", scene)
        res = evaluate(lambda src: NavEnv(src, cfg.env, builder, env_render_cfg(cfg)),
                       lambda: PolicyController(Agent(encoder, ac, norm), e.stochastic, cfg.seed),
                       layouts, e.episodes_per_layout, seed=cfg.seed, eps=e.eps)
        (st.dir / "metrics.json").write_text(json.dumps(res.report.to_dict(), indent=1))
        save_records(res.records, st.dir / "records.jsonl")
        if e.plots:
            first = [r for r in res.records if r.layout == 0] or res.records
            plot_trajectories(first, st.dir / "trajectories.svg", builder.grid(layouts[0]))
    logger.info("metrics %s", json.dumps(res.report.to_dict()))
    return st.final


def cmd_render(cfg: RunConfig, args):
    if args.scene is not None:
        try:
            scene = load_scene(_require(args.scene, "scene"))
        except SceneFormatError as exc:
            raise InputError(f"scene {args.scene}: {exc}") from None
    else:
        layout = randomize_layout(world_template(cfg, fitted_scene(cfg)), cfg.seed)
        scene = builder_for(cfg).build(layout).scene
    x, y, z, yaw, *rest = args.pose
    cam = CameraModel.from_pose([x, y, z], yaw, rest[0] if rest else 0.0, width=args.resolution,
                                height=args.resolution, fov_deg=cfg.env.fov_deg)
    with Stage("render", cfg, cfg.env) as st:
        if args.scene is not None:
            st.add_input("scene", args.scene)
        out = render(scene, cam, env_render_cfg(cfg))
        write_ppm(st.dir / "color.ppm", out.color)
        np.save(st.dir / "depth.npy", out.depth.astype(np.float32))
    return st.final


def cmd_pipeline(cfg: RunConfig, args):
    for name in STAGES:
        logger.info("pipeline: %s", name)
        COMMANDS[name](cfg, argparse.Namespace())
    return Path(cfg.out_dir)


COMMANDS = {"fit-scene": cmd_fit_scene, "collect-dataset": cmd_collect, "pretrain-encoder": cmd_pretrain,
            "train-policy": cmd_train, "evaluate": cmd_evaluate, "render": cmd_render, "pipeline": cmd_pipeline}


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splatnav", description="Gaussian-splat visual navigation pipeline")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="RunConfig JSON (or 'tiny' for the bundled tiny config)")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--out", help="output root (overrides $SPLATNAV_OUT and the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("collect-dataset", "train-policy", "evaluate"):
            p.add_argument("--scene", help="fitted background scene JSON")
        if name == "pretrain-encoder":
            p.add_argument("--data", help="dataset directory")
        if name in ("train-policy", "evaluate"):
            p.add_argument("--encoder", help="encoder checkpoint")
        if name == "evaluate":
            p.add_argument("--policy", help="policy checkpoint")
        if name == "render":
            p.add_argument("--scene", help="scene JSON; default renders a world layout")
            p.add_argument("--pose", type=float, nargs="+", default=[1.0, 1.0, 1.0, 0.0],
                           help="x y z yaw [pitch]")
            p.add_argument("--resolution", type=int, default=64)
    return ap


def resolve_config(args) -> RunConfig:
    path = args.config
    if path is not None and not Path(path).exists() and bundled_config(path).exists():
        path = bundled_config(path)
    out = args.out or os.environ.get("SPLATNAV_OUT")
    cfg = load_config(path, {"seed": args.seed})
    if out:
        cfg.out_dir = str(Path(out).resolve())
    return cfg


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.command == "render" and len(args.pose) not in (4, 5):
            raise InputError("--pose takes x y z yaw [pitch]")
        out = COMMANDS[args.command](cfg, args)
    except (ConfigError, InputError) as exc:
        print(f"splatnav: invalid input: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any stage failure as exit 1
        logger.debug("stage failure", exc_info=True)
        print(f"splatnav: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
