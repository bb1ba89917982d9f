"""One JSON document configuring every pipeline stage.

Unknown keys and type mismatches raise :class:`ConfigError` naming the
offending field (``train.ppo.batch_size``), so the CLI can exit with code 2
before any stage runs.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .contrast import AugmentConfig, EncoderSpec
from .env import EnvConfig
from .errors import SplatNavError
from .fit import FitConfig
from .policy import PPOConfig
from .world import FusionConfig


class ConfigError(SplatNavError, ValueError):
    pass


def _sub(cls):
    return field(default_factory=cls, metadata={"section": cls})


@dataclass
class WorldStage:
    template: object = None  # layout template dict or path; None selects the built-in room
    n_obstacles: int = 0
    size: tuple = (8.0, 8.0)
    height: float = 3.0
    fitted_background: bool = True
    fusion: FusionConfig = _sub(FusionConfig)


@dataclass
class FitStage:
    scene: object = None  # ground-truth scene ref; None reuses the world background
    views: int = 20
    holdout: int = 4
    resolution: int = 64
    fov_deg: float = 90.0
    jitter: float = 0.03
    fit: FitConfig = _sub(FitConfig)

    def __post_init__(self):
        if self.views < 1 or self.holdout < 0:
            raise ValueError("views must be positive and holdout nonnegative")


@dataclass
class CollectStage:
    images: int = 10000
    resolution: int = 64
    n_layouts: int = 10


@dataclass
class PretrainStage:
    epochs: int = 20
    batch: int = 256
    lr: float = 1e-3
    denominator: str = "cross_view"
    holdout: int = 200
    encoder: EncoderSpec = _sub(EncoderSpec)
    augment: AugmentConfig = _sub(AugmentConfig)

    def __post_init__(self):
        if self.denominator not in ("cross_view", "simclr"):
            raise ValueError(f"denominator must be 'cross_view' or 'simclr', got {self.denominator!r}")


@dataclass
class TrainStage:
    total_steps: int = 500_000
    ppo: PPOConfig = _sub(PPOConfig)


@dataclass
class EvalStage:
    layouts: int = 10
    episodes_per_layout: int = 10
    n_obstacles: int | None = None  # None keeps world.n_obstacles
    eps: float | None = None
    stochastic: bool = False
    plots: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    world: WorldStage = _sub(WorldStage)
    fit: FitStage = _sub(FitStage)
    collect: CollectStage = _sub(CollectStage)
    pretrain: PretrainStage = _sub(PretrainStage)
    env: EnvConfig = _sub(EnvConfig)
    train: TrainStage = _sub(TrainStage)
    evaluate: EvalStage = _sub(EvalStage)

    def validate(self):
        r = self.pretrain.encoder.resolution
        if not (self.env.resolution == self.collect.resolution == r):
            raise ConfigError(f"env.resolution ({self.env.resolution}), collect.resolution "
                              f"({self.collect.resolution}) and pretrain.encoder.resolution ({r}) must agree")
        return self


def _check_type(default, value, where):
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (tuple, list)):
        ok = isinstance(value, (tuple, list))
    elif isinstance(default, (str, dict)):
        ok = isinstance(value, type(default))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {json.dumps(value)}")


def build(cls, data, where="config"):
    """Construct dataclass ``cls`` from plain JSON data, validating field by field."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where != "config" else key
        f = known.get(key)
        if f is None:
            raise ConfigError(f"{path}: unknown key")
        section = f.metadata.get("section")
        if section is not None:
            kwargs[key] = build(section, value, path)
            continue
        default = f.default if f.default is not MISSING else (
            f.default_factory() if f.default_factory is not MISSING else None)
        _check_type(default, value, path)
        kwargs[key] = tuple(value) if isinstance(default, tuple) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (or defaults), apply top-level overrides and resolve relative paths."""
    data, base = {}, Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        base = path.resolve().parent
    cfg = build(RunConfig, data)
    for k, v in (overrides or {}).items():
        if v is not None:
            setattr(cfg, k, v)
    cfg.out_dir = str((base / cfg.out_dir).resolve()) if not Path(cfg.out_dir).is_absolute() else cfg.out_dir
    cfg.world.template = _resolve_ref(cfg.world.template, base)
    cfg.fit.scene = _resolve_ref(cfg.fit.scene, base)
    return cfg.validate()


def _resolve_ref(ref, base: Path):
    if isinstance(ref, str):
        p = Path(ref)
        return str(p if p.is_absolute() else (base / p).resolve())
    if isinstance(ref, dict) and "path" in ref:
        return {**ref, "path": _resolve_ref(ref["path"], base)}
    return ref


def bundled_config(name: str) -> Path:
    return Path(__file__).parent / "configs" / f"{name}.json"
