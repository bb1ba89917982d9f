"""Goal-reaching navigation environment with rendered RGB observations.

The agent is a sphere driven by body-frame velocity commands ``(vx, vy, vz)``
and a yaw rate, integrated kinematically. Each step renders a forward
camera view, which is optionally photometrically randomized per episode.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import EpisodeClosedError, LayoutInfeasibleError
from .gaussians import CameraModel
from .render import RenderConfig, render
from .world import LayoutTemplate, SceneLayout, World, WorldBuilder, collides, randomize_layout

TERMINALS = ("none", "goal", "collision", "timeout")


@dataclass
class EnvConfig:
    dt: float = 1.0 / 30.0
    v_max: float = 1.5
    w_max: float = 1.5
    r_goal: float = 10.0
    r_col: float = -1.0
    t_limit: int = 5000
    kappa: float = 0.1
    success_radius: float = 0.5
    gamma: float = 0.99
    agent_radius: float = 0.15
    resolution: int = 64
    fov_deg: float = 90.0
    background_color: tuple = (0.55, 0.65, 0.8)
    randomize: bool = True
    brightness: tuple = (0.5, 1.5)
    hue: tuple = (-0.5, 0.5)
    patch_prob: float = 0.5
    max_patches: int = 3
    patch_size: tuple = (0.1, 0.3)
    obstacle_pool: int | None = None
    random_spawn_yaw: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_limit < 1:
            raise ValueError("t_limit must be at least 1")
        if not self.success_radius > 0:
            raise ValueError("success_radius must be positive")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.v_max <= 0 or self.w_max <= 0 or self.agent_radius <= 0:
            raise ValueError("v_max, w_max and agent_radius must be positive")
        self.brightness = tuple(self.brightness)
        self.hue = tuple(self.hue)
        self.patch_size = tuple(self.patch_size)
        self.background_color = tuple(self.background_color)

    @property
    def r_step(self) -> float:
        return -1.0 / self.t_limit


@dataclass
class AgentState:
    position: np.ndarray
    yaw: float = 0.0
    linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw_rate: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.linear_velocity = np.asarray(self.linear_velocity, dtype=np.float64).reshape(3)


@dataclass
class StepResult:
    observation: np.ndarray
    proprioception: np.ndarray
    goal_offset: np.ndarray
    reward: float
    terminal: str
    info: dict = field(default_factory=dict)

    @property
    def done(self) -> bool:
        return self.terminal != "none"


def wrap_angle(a: float) -> float:
    """Wrap to ``(-pi, pi]``."""
    w = math.remainder(a, 2 * math.pi)
    return math.pi if w == -math.pi else w


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def distance_to_goal(state, goal) -> float:
    pos = state.position if isinstance(state, AgentState) else state
    return float(np.linalg.norm(np.asarray(goal, dtype=np.float64) - np.asarray(pos, dtype=np.float64)))


def proprioception(state: AgentState) -> np.ndarray:
    """``[sin yaw, cos yaw, vx, vy, vz, yaw_rate]`` with body-frame velocities."""
    return np.array([math.sin(state.yaw), math.cos(state.yaw), *state.linear_velocity, state.yaw_rate])


def goal_offset(state: AgentState, goal) -> np.ndarray:
    return yaw_matrix(state.yaw).T @ (np.asarray(goal, dtype=np.float64) - state.position)


# --- photometric randomization --------------------------------------------------

@dataclass
class Photometric:
    brightness: float = 1.0
    hue_shift: float = 0.0
    patches: list = field(default_factory=list)  # (top, left, height, width, r, g, b) in unit coordinates


def sample_photometric(rng, cfg: EnvConfig) -> Photometric:
    b = float(rng.uniform(*cfg.brightness))
    h = float(rng.uniform(*cfg.hue))
    patches = []
    if rng.uniform() < cfg.patch_prob:
        for _ in range(int(rng.integers(1, cfg.max_patches + 1))):
            hh, ww = rng.uniform(*cfg.patch_size, size=2)
            top, left = rng.uniform(0, 1 - hh), rng.uniform(0, 1 - ww)
            patches.append((float(top), float(left), float(hh), float(ww), *rng.uniform(size=3).tolist()))
    return Photometric(b, h, patches)


def apply_photometric(image, p: Photometric) -> np.ndarray:
    """Brightness scale, then hue rotation (in turns), then opaque patches; clamped to [0, 1]."""
    out = np.asarray(image, dtype=np.float64)
    if p.brightness != 1.0:
        out = out * p.brightness
    if p.hue_shift != 0.0:
        hsv = rgb_to_hsv(np.clip(out, 0.0, 1.0))
        hsv[..., 0] = np.mod(hsv[..., 0] + p.hue_shift, 1.0)
        out = hsv_to_rgb(hsv)
    if p.patches:
        out = out.copy()
        H, W = out.shape[:2]
        for top, left, hh, ww, *rgb in p.patches:
            r0, c0 = int(top * H), int(left * W)
            out[r0:r0 + max(1, int(hh * H)), c0:c0 + max(1, int(ww * W))] = rgb
    return np.clip(out, 0.0, 1.0)


def randomize_observation(image, seed, cfg: EnvConfig | None = None) -> np.ndarray:
    """Seeded brightness/hue/patch perturbation of ``image``."""
    return apply_photometric(image, sample_photometric(np.random.default_rng(seed), cfg or EnvConfig()))


# --- environment ------------------------------------------------------------------

class NavEnv:
    """Single navigation environment instance.

    ``source`` is a :class:`LayoutTemplate` sampled at every reset, or a
    fixed :class:`SceneLayout`.
    """

    def __init__(self, source, cfg: EnvConfig | None = None, builder: WorldBuilder | None = None,
                 render_cfg: RenderConfig | None = None, log_path=None):
        self.source = source
        self.cfg = cfg or EnvConfig()
        self.builder = builder or WorldBuilder()
        self.render_cfg = render_cfg or RenderConfig(background_color=self.cfg.background_color)
        self.world: World | None = None
        self.state: AgentState | None = None
        self.photometric = Photometric()
        self.steps = 0
        self.d0 = 0.0
        self.distance = 0.0
        self.terminal = "none"
        self.seed = None
        self._log = open(log_path, "a") if log_path else None

    def close(self):
        if self._log:
            self._log.close()
            self._log = None

    @property
    def goal(self) -> np.ndarray:
        return self.world.goal

    def _layout_for(self, seed) -> SceneLayout:
        if isinstance(self.source, SceneLayout):
            return self.source
        if not isinstance(self.source, LayoutTemplate):
            raise TypeError("env source must be a LayoutTemplate or SceneLayout")
        pool = self.cfg.obstacle_pool
        if pool:
            return randomize_layout(self.source, int(seed) % pool, goal_seed=int(seed) + 7919)
        return randomize_layout(self.source, seed)

    def reset(self, seed=0, layout: SceneLayout | None = None) -> StepResult:
        """Start an episode; everything random is drawn from ``seed``."""
        rng = np.random.default_rng([int(seed), 1])
        self.world = self.builder.build(layout if layout is not None else self._layout_for(seed))
        region = self.world.layout.spawn_region
        for _ in range(1000):
            p = region.lo + (region.hi - region.lo) * rng.uniform(size=3)
            if not collides(self.world.grid, p, self.cfg.agent_radius):
                break
        else:
            raise LayoutInfeasibleError("no collision-free spawn point in the spawn region")
        yaw = wrap_angle(float(rng.uniform(-math.pi, math.pi))) if self.cfg.random_spawn_yaw else 0.0
        self.state = AgentState(p, yaw)
        self.photometric = sample_photometric(rng, self.cfg) if self.cfg.randomize else Photometric()
        self.steps = 0
        self.seed = seed
        self.terminal = "none"
        self.d0 = self.distance = distance_to_goal(self.state, self.goal)
        if self._log:
            self._write({"episode": {"seed": int(seed), "layout_hash": self.world.layout.digest(),
                                     "goal": self.goal.tolist(), "spawn": p.tolist(), "yaw": yaw}})
        return self._result(0.0, {"distance": self.distance, "step": 0})

    def observe(self, state: AgentState | None = None) -> np.ndarray:
        s = state or self.state
        cam = CameraModel.from_pose(s.position, s.yaw, 0.0, width=self.cfg.resolution,
                                    height=self.cfg.resolution, fov_deg=self.cfg.fov_deg)
        img = render(self.world.scene, cam, self.render_cfg).color
        return apply_photometric(img, self.photometric).astype(np.float32)

    def _result(self, reward, info, render_obs=True) -> StepResult:
        obs = self.observe() if render_obs else None
        return StepResult(obs, proprioception(self.state), goal_offset(self.state, self.goal), reward,
                          self.terminal, info)

    def step(self, action, render_obs=True) -> StepResult:
        if self.state is None or self.terminal != "none":
            raise EpisodeClosedError("step called on a finished or unstarted episode; call reset")
        c = self.cfg
        a = np.asarray(action, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(a)):
            raise ValueError(f"non-finite action {a.tolist()}")
        v = np.clip(a[:3], -c.v_max, c.v_max)
        w = float(np.clip(a[3], -c.w_max, c.w_max))
        s = self.state
        pos = s.position + yaw_matrix(s.yaw) @ v * c.dt
        self.state = AgentState(pos, wrap_angle(s.yaw + w * c.dt), v, w)
        self.steps += 1
        d_prev = self.distance
        self.distance = distance_to_goal(self.state, self.goal)
        reward = c.kappa * (d_prev - self.distance) + c.r_step
        if self.distance <= c.success_radius:
            self.terminal = "goal"
            reward += c.r_goal
        elif collides(self.world.grid, pos, c.agent_radius):
            self.terminal = "collision"
            reward += c.r_col
        elif self.steps >= c.t_limit:
            self.terminal = "timeout"
        if self._log:
            self._write({"t": self.steps, "position": pos.tolist(), "yaw": self.state.yaw,
                         "action": a.tolist(), "reward": reward, "terminal": self.terminal})
        return self._result(reward, {"distance": self.distance, "step": self.steps}, render_obs)

    def _write(self, record):
        self._log.write(json.dumps(record) + "\n")


def read_trajectory_log(path) -> list:
    """Episodes from a JSON-lines trajectory log as ``[{"episode": header, "steps": [...]}]``."""
    episodes = []
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        if "episode" in rec:
            episodes.append({"episode": rec["episode"], "steps": []})
        else:
            episodes[-1]["steps"].append(rec)
    return episodes


def config_dict(cfg: EnvConfig) -> dict:
    return asdict(cfg)
