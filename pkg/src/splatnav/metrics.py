"""Episode records, navigation metrics and the evaluation harness.

Outcomes are exclusive: ``success``, ``collision`` or ``timeout``. OS
counts any approach within ``eps`` of the goal; SR only episodes the
environment ended at the goal. SPL weights successes by
``l / max(d, l)`` where ``l`` is the voxel-graph shortest path and ``d``
the executed path length.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.ndimage import binary_dilation

from .errors import InvalidRecordError
from .world import OccupancyGrid

logger = logging.getLogger(__name__)

OUTCOMES = ("success", "collision", "timeout")
_TERMINAL_TO_OUTCOME = {"goal": "success", "collision": "collision", "timeout": "timeout"}
SQRT2, SQRT3 = math.sqrt(2.0), math.sqrt(3.0)


@dataclass
class EpisodeRecord:
    positions: list
    goal: list
    outcome: str
    shortest_path: float | None = None
    steps: int = 0
    seed: int | None = None
    layout: str | None = None

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise InvalidRecordError(f"unknown outcome {self.outcome!r}")
        if len(self.positions) < 1:
            raise InvalidRecordError("a record needs at least one position")
        self.positions = [list(map(float, p)) for p in self.positions]
        self.goal = [float(g) for g in self.goal]

    @property
    def path_length(self) -> float:
        p = self.positions
        return math.fsum(map(math.dist, p[:-1], p[1:]))

    @property
    def final_error(self) -> float:
        return math.dist(self.positions[-1], self.goal)

    @property
    def steps_to_success(self) -> int | None:
        return self.steps if self.outcome == "success" else None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    OS: float
    SR: float
    CR: float
    NE: float
    NE_std: float
    TTS: float | None
    SPL: float
    M: int
    timeout_rate: float = 0.0
    spl_episodes: int = 0
    eps: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


def oracle_success(record: EpisodeRecord, eps: float) -> bool:
    """Did the trajectory come within ``eps`` of the goal at any step (inclusive)?"""
    p = np.asarray(record.positions)
    return bool(np.min(np.linalg.norm(p - np.asarray(record.goal), axis=1)) <= eps)


def spl(records) -> float:
    """Success weighted by path length over records with a known shortest path."""
    used = [r for r in records if r.shortest_path is not None]
    if not used:
        raise InvalidRecordError("SPL needs at least one record with a shortest path")
    terms = []
    for r in used:
        if not r.shortest_path > 0:
            raise InvalidRecordError(f"shortest path must be positive, got {r.shortest_path}")
        if r.outcome == "success":
            terms.append(r.shortest_path / max(r.path_length, r.shortest_path))
    return math.fsum(terms) / len(used)


def aggregate(records, eps=0.5) -> MetricsReport:
    """All six metrics over ``records``; SPL skips records with no path (with a warning)."""
    records = list(records)
    M = len(records)
    if M == 0:
        raise InvalidRecordError("no records to aggregate")
    outcomes = [r.outcome for r in records]
    # correctly rounded sums: the report does not depend on episode order
    ne = [r.final_error for r in records]
    ne_mean = math.fsum(ne) / M
    succ_steps = [r.steps for r in records if r.outcome == "success"]
    missing = sum(r.shortest_path is None for r in records)
    if missing:
        logger.warning("%d episode(s) have no shortest path and are excluded from SPL", missing)
    return MetricsReport(
        OS=100.0 * sum(oracle_success(r, eps) for r in records) / M,
        SR=100.0 * outcomes.count("success") / M,
        CR=100.0 * outcomes.count("collision") / M,
        NE=ne_mean, NE_std=math.sqrt(math.fsum((x - ne_mean) ** 2 for x in ne) / M),
        TTS=sum(succ_steps) / len(succ_steps) if succ_steps else None,
        SPL=spl(records) if missing < M else 0.0,
        M=M, timeout_rate=100.0 * outcomes.count("timeout") / M,
        spl_episodes=M - missing, eps=eps)


def save_records(records, path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_dict()) + "\n")


def load_records(path) -> list:
    return [EpisodeRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


# --- shortest paths ---------------------------------------------------------------

def _offsets():
    out = []
    for d in np.ndindex(3, 3, 3):
        o = np.array(d) - 1
        if o.any():
            out.append(o)
    return np.array(out, dtype=np.int64)


_OFFSETS = _offsets()


@numba.njit(cache=True)
def _dijkstra(free, start, goal, offsets):
    nx, ny, nz = free.shape
    n = nx * ny * nz
    dist = np.full(n, np.inf)
    counts = np.zeros((n, 3), np.int64)
    done = np.zeros(n, np.bool_)
    s = (start[0] * ny + start[1]) * nz + start[2]
    g = (goal[0] * ny + goal[1]) * nz + goal[2]
    weights = np.array([1.0, math.sqrt(2.0), math.sqrt(3.0)])
    dist[s] = 0.0
    heap = [(0.0, s)]
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        if u == g:
            return counts[g]
        i = u // (ny * nz)
        j = (u // nz) % ny
        k = u % nz
        for o in range(offsets.shape[0]):
            a = i + offsets[o, 0]
            b = j + offsets[o, 1]
            c = k + offsets[o, 2]
            if a < 0 or b < 0 or c < 0 or a >= nx or b >= ny or c >= nz or not free[a, b, c]:
                continue
            kind = abs(offsets[o, 0]) + abs(offsets[o, 1]) + abs(offsets[o, 2]) - 1
            v = (a * ny + b) * nz + c
            nd = d + weights[kind]
            if nd < dist[v]:
                dist[v] = nd
                counts[v] = counts[u]
                counts[v, kind] += 1
                heapq.heappush(heap, (nd, v))
    return np.full(3, -1, np.int64)


def traversable(grid: OccupancyGrid, agent_radius: float) -> np.ndarray:
    """Voxels whose centre the agent sphere can occupy: obstacles inflated by the radius, limits enforced."""
    v = grid.voxel_size
    r = int(math.floor(agent_radius / v + 1e-9))
    ax = np.arange(-r, r + 1)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    ball = (X ** 2 + Y ** 2 + Z ** 2) * v * v <= agent_radius ** 2 + 1e-12
    blocked = binary_dilation(grid.occupancy, structure=ball) if grid.occupancy.any() else grid.occupancy.copy()
    centers = [grid.origin[a] + (np.arange(grid.dims[a]) + 0.5) * v for a in range(3)]
    inside = [(c >= grid.limits.lo[a]) & (c <= grid.limits.hi[a]) for a, c in enumerate(centers)]
    limits = inside[0][:, None, None] & inside[1][None, :, None] & inside[2][None, None, :]
    return ~blocked & limits


def path_steps(free: np.ndarray, start_idx, goal_idx):
    """Counts of (axial, face-diagonal, cube-diagonal) steps on a shortest 26-connected path, or None."""
    s = np.asarray(start_idx, dtype=np.int64)
    g = np.asarray(goal_idx, dtype=np.int64)
    if not (free[tuple(s)] and free[tuple(g)]):
        return None
    c = _dijkstra(np.ascontiguousarray(free), s, g, _OFFSETS)
    return None if c[0] < 0 else tuple(int(x) for x in c)


def steps_length(counts, voxel) -> float:
    return (counts[0] + counts[1] * SQRT2 + counts[2] * SQRT3) * voxel


def shortest_path_length(grid: OccupancyGrid, start, goal, agent_radius: float, free=None):
    """Shortest collision-free length from ``start`` to ``goal``, or None when unreachable.

    Endpoints snap to their voxel centres; the snapping offsets are added
    so the result never undercuts the straight line.
    """
    free = traversable(grid, agent_radius) if free is None else free
    s_idx, g_idx = grid.index_of(start), grid.index_of(goal)
    for idx in (s_idx, g_idx):
        if any(i < 0 or i >= n for i, n in zip(idx, grid.dims)):
            return None
    counts = path_steps(free, s_idx, g_idx)
    if counts is None:
        return None
    cs, cg = grid.center(s_idx), grid.center(g_idx)
    return (float(np.linalg.norm(np.asarray(start) - cs)) + steps_length(counts, grid.voxel_size)
            + float(np.linalg.norm(np.asarray(goal) - cg)))


# --- evaluation ---------------------------------------------------------------------

class PolicyController:
    """Deterministic (or stochastic) actions from a trained agent."""

    def __init__(self, agent, stochastic=False, seed=0):
        self.agent = agent
        self.stochastic = stochastic
        self.rng = np.random.default_rng(seed)

    def __call__(self, result, fresh):
        obs = self.agent.observe([result], [fresh])
        a, _, _ = self.agent.ac.act(obs[0], stochastic=self.stochastic, rng=self.rng)
        return a


def go_straight(result, fresh, speed=1.5, dt=1 / 30):
    """Scripted controller: fly along the body-frame goal offset, slowing on the last step."""
    off = np.asarray(result.goal_offset, dtype=np.float64)
    d = np.linalg.norm(off)
    v = off / d * min(speed, d / dt) if d > 0 else np.zeros(3)
    return np.array([*v, 0.0])


def do_nothing(result, fresh):
    return np.zeros(4)


@dataclass
class EvalResult:
    report: MetricsReport
    records: list = field(default_factory=list)


def run_episode(env, controller, seed, layout=None, free_cache=None) -> EpisodeRecord:
    r = env.reset(seed, layout=layout)
    positions = [env.state.position.tolist()]
    spawn, goal = env.state.position.copy(), env.goal.copy()
    fresh = True
    while not r.done:
        a = controller(r, fresh)
        fresh = False
        r = env.step(a)
        positions.append(env.state.position.tolist())
    grid = env.world.grid
    key = id(grid)
    if free_cache is not None and key in free_cache:
        free = free_cache[key][1]
    else:
        free = traversable(grid, env.cfg.agent_radius)
        if free_cache is not None:
            free_cache[key] = (grid, free)
    ell = shortest_path_length(grid, spawn, goal, env.cfg.agent_radius, free=free)
    if ell is not None and not ell > 0:
        raise InvalidRecordError(f"degenerate episode {seed}: spawn coincides with the goal")
    if ell is None:
        logger.warning("episode %s: goal unreachable on the voxel graph", seed)
    return EpisodeRecord(positions, goal.tolist(), _TERMINAL_TO_OUTCOME[r.terminal], ell, env.steps, int(seed),
                         env.world.layout.digest())


def evaluate(env_factory, controller_factory, layouts, episodes_per_layout, seed=0, eps=None) -> EvalResult:
    """Run ``episodes_per_layout`` seeded episodes on each layout source.

    ``env_factory(layout_source)`` builds an env; ``controller_factory()``
    returns a fresh controller per env. ``eps`` for OS defaults to the
    env's success radius.
    """
    records = []
    free_cache = {}
    env = None
    for li, source in enumerate(layouts):
        env = env_factory(source)
        controller = controller_factory()
        for k in range(episodes_per_layout):
            ep_seed = seed * 1_000_003 + li * 10_007 + k
            try:
                records.append(run_episode(env, controller, ep_seed, free_cache=free_cache))
            except Exception as exc:
                raise type(exc)(f"layout {li}, episode {k} (seed {ep_seed}): {exc}") from exc
        close = getattr(env, "close", None)
        if close:
            close()
    eps = env.cfg.success_radius if eps is None else eps
    return EvalResult(aggregate(records, eps), records)


# --- plots --------------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "splatnav"  # stable element ids, so plots are byte-reproducible
    return plt


def plot_reward_curve(curve, path, title="training return") -> None:
    """Per-iteration mean episode return as SVG; iterations with no finished episode are gaps."""
    plt = _pyplot()
    y = np.array([np.nan if v is None else v for v in curve], dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(1, len(y) + 1), y, marker=".")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean episode return")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_trajectories(records, path, grid: OccupancyGrid | None = None, height=1.0) -> None:
    """Top-down overlay of trajectories on the occupancy slice at ``height``."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    if grid is not None:
        k = min(max(int((height - grid.origin[2]) / grid.voxel_size), 0), grid.dims[2] - 1)
        ext = grid.extent
        ax.imshow(grid.occupancy[:, :, k].T, origin="lower", cmap="Greys", alpha=0.5,
                  extent=(ext.lo[0], ext.hi[0], ext.lo[1], ext.hi[1]))
    colors = {"success": "tab:green", "collision": "tab:red", "timeout": "tab:orange"}
    for r in records:
        p = np.asarray(r.positions)
        ax.plot(p[:, 0], p[:, 1], color=colors[r.outcome], lw=1)
        ax.plot(*r.goal[:2], marker="*", color="k", ms=6)
        ax.plot(p[0, 0], p[0, 1], marker="o", color=colors[r.outcome], ms=3)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
