"""Navigable scenes: layout composition, depth-fused occupancy, collisions.

World frame is z-up. A layout places foreground assets (each a Gaussian
scene with its own pose and uniform scale) into a background scene, and a
layout template holds the ranges that :func:`randomize_layout` samples from.

Occupancy is a truncated depth-fusion grid: each camera's first-surface
depth carves free space along its rays up to ``depth - truncation``; rays
that see only background carve to the grid exit. Everything never carved
stays occupied.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba
import numpy as np

from . import assets
from .errors import LayoutInfeasibleError, SceneFormatError
from .gaussians import CameraModel, GaussianScene, axis_angle_quat, load_scene, quat_to_rotmat
from .render import RenderConfig, render

logger = logging.getLogger(__name__)

DEFAULT_VOXEL = 0.1
DEFAULT_TRUNCATION_VOXELS = 2
MAX_LAYOUT_ATTEMPTS = 1000
MIN_COS = 0.05


class SceneLoadError(SceneFormatError):
    pass


# --- scene references -------------------------------------------------------

def load_scene_ref(ref, base_dir=None, label="scene") -> GaussianScene:
    """Resolve a scene reference.

    ``ref`` is a :class:`GaussianScene`, a path to a scene JSON file
    (relative paths resolve against ``base_dir``), or a dict
    ``{"builtin": name, "args": {...}}``.
    """
    if isinstance(ref, GaussianScene):
        return ref
    try:
        if isinstance(ref, dict):
            if "builtin" in ref:
                return assets.builtin(ref["builtin"], **ref.get("args", {}))
            if "path" in ref:
                ref = ref["path"]
            else:
                raise SceneLoadError(f"{label}: reference needs 'builtin' or 'path', got {sorted(ref)}")
        path = Path(ref)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return load_scene(path)
    except SceneLoadError:
        raise
    except (OSError, KeyError, TypeError, SceneFormatError) as exc:
        raise SceneLoadError(f"cannot load {label} from {ref!r}: {exc}") from exc


def _ref_json(ref):
    if isinstance(ref, GaussianScene):
        digest = hashlib.sha256(ref.means.tobytes() + ref.scales.tobytes() + ref.rgb.tobytes()).hexdigest()
        return {"inline": digest[:16]}
    return ref if isinstance(ref, dict) else str(ref)


def _content_ref(ref, base_dir):
    path = ref.get("path") if isinstance(ref, dict) else ref if isinstance(ref, str) else None
    if path is None:
        return ref
    p = Path(path) if base_dir is None or Path(path).is_absolute() else Path(base_dir) / path
    try:
        return {"file_sha256": _file_hash(str(p.resolve()), p.stat().st_mtime_ns)}
    except OSError:
        return ref


@functools.lru_cache(maxsize=256)
def _file_hash(path, mtime_ns):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# --- layouts ------------------------------------------------------------------

@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(self.hi < self.lo):
            raise ValueError(f"box has hi < lo: {self.lo} {self.hi}")

    def contains(self, p, tol=1e-9) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= self.lo - tol) and np.all(p <= self.hi + tol))

    def contains_box(self, other: "Box") -> bool:
        return self.contains(other.lo) and self.contains(other.hi)

    def inflate(self, r) -> "Box":
        return Box(self.lo - r, self.hi + r)

    def intersects(self, other: "Box") -> bool:
        return bool(np.all(self.lo <= other.hi) and np.all(other.lo <= self.hi))

    def distance_to(self, p) -> float:
        p = np.asarray(p, dtype=np.float64)
        return float(np.linalg.norm(p - np.clip(p, self.lo, self.hi)))

    def sample(self, rng) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.uniform(size=3)

    def to_list(self):
        return [self.lo.tolist(), self.hi.tolist()]

    @classmethod
    def parse(cls, v) -> "Box":
        if isinstance(v, Box):
            return v
        lo, hi = v
        return cls(lo, hi)

    def __eq__(self, other):
        return isinstance(other, Box) and np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)


@dataclass
class AssetPlacement:
    scene: object
    position: np.ndarray
    yaw: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)
        self.scale = float(self.scale)
        if not self.scale > 0:
            raise ValueError("asset scale must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(axis_angle_quat([0, 0, 1], self.yaw))

    def place(self, scene: GaussianScene) -> GaussianScene:
        return scene.transformed(self.rotation, self.position, self.scale)

    def to_dict(self):
        return {"scene": _ref_json(self.scene), "position": self.position.tolist(), "yaw": self.yaw,
                "scale": self.scale}

    def __eq__(self, other):
        return (isinstance(other, AssetPlacement) and _ref_json(self.scene) == _ref_json(other.scene)
                and np.array_equal(self.position, other.position) and self.yaw == other.yaw
                and self.scale == other.scale)


@dataclass
class SceneLayout:
    background: object
    bounds: Box
    spawn_region: Box
    goal_position: np.ndarray
    assets: list = field(default_factory=list)
    base_dir: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.bounds = Box.parse(self.bounds)
        self.spawn_region = Box.parse(self.spawn_region)
        self.goal_position = np.asarray(self.goal_position, dtype=np.float64).reshape(3)
        if not self.bounds.contains(self.goal_position):
            raise ValueError(f"goal {self.goal_position.tolist()} lies outside the layout bounds")
        if not self.bounds.contains_box(self.spawn_region):
            raise ValueError("spawn region is not inside the layout bounds")

    def __eq__(self, other):
        return (isinstance(other, SceneLayout) and _ref_json(self.background) == _ref_json(other.background)
                and self.bounds == other.bounds and self.spawn_region == other.spawn_region
                and np.array_equal(self.goal_position, other.goal_position) and self.assets == other.assets)

    def to_dict(self) -> dict:
        return {"background": _ref_json(self.background), "bounds": self.bounds.to_list(),
                "spawn_region": self.spawn_region.to_list(), "goal_position": self.goal_position.tolist(),
                "assets": [a.to_dict() for a in self.assets]}

    def obstacle_dict(self) -> dict:
        d = self.to_dict()
        del d["goal_position"]
        return d

    def digest(self, goal=True) -> str:
        """Content hash; file-backed scenes enter by file contents, so moving a run directory keeps it."""
        d = self.to_dict() if goal else self.obstacle_dict()
        d["background"] = _content_ref(d["background"], self.base_dir)
        for a in d["assets"]:
            a["scene"] = _content_ref(a["scene"], self.base_dir)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def compose(layout: SceneLayout, with_goal_marker=False) -> GaussianScene:
    """Background plus every placed asset as one flat scene."""
    parts = [load_scene_ref(layout.background, layout.base_dir, "background")]
    for k, a in enumerate(layout.assets):
        parts.append(a.place(load_scene_ref(a.scene, layout.base_dir, f"asset {k}")))
    if with_goal_marker:
        parts.append(assets.goal_marker().transformed(translation=layout.goal_position))
    return GaussianScene.concat(parts)


def asset_box(placement: AssetPlacement, scene: GaussianScene) -> Box:
    """Axis-aligned bound of a placed asset: means padded by the largest scale."""
    placed = placement.place(scene)
    if len(placed) == 0:
        return Box(placement.position, placement.position)
    pad = float(placed.scales.max())
    return Box(placed.means.min(axis=0) - pad, placed.means.max(axis=0) + pad)


def _range(v, n=None):
    """``[lo, hi]`` pair from either a fixed value or a two-element range."""
    a = np.asarray(v, dtype=np.float64)
    if n is None:
        return (float(a), float(a)) if a.ndim == 0 else (float(a[0]), float(a[1]))
    if a.shape == (n,):
        return a, a.copy()
    if a.shape == (2, n):
        return a[0], a[1]
    raise ValueError(f"expected a {n}-vector or a [lo, hi] pair, got shape {a.shape}")


@dataclass
class AssetRange:
    scene: object
    position: tuple
    yaw: tuple = (0.0, 0.0)
    scale: tuple = (1.0, 1.0)

    def __post_init__(self):
        self.position = Box(*_range(self.position, 3))
        self.yaw = _range(self.yaw)
        self.scale = _range(self.scale)
        if self.scale[0] <= 0 or self.scale[1] < self.scale[0] or self.yaw[1] < self.yaw[0]:
            raise ValueError("asset ranges need 0 < scale_lo <= scale_hi and yaw_lo <= yaw_hi")

    def sample(self, rng) -> AssetPlacement:
        def pick(lo, hi):
            return lo if lo == hi else float(rng.uniform(lo, hi))
        pos = np.array([pick(lo, hi) for lo, hi in zip(self.position.lo, self.position.hi)])
        return AssetPlacement(self.scene, pos, pick(*self.yaw), pick(*self.scale))


@dataclass
class LayoutTemplate:
    background: object
    bounds: Box
    spawn_region: Box
    goal_range: Box
    assets: list = field(default_factory=list)
    min_spawn_goal_distance: float = 0.0
    clearance: float = 0.15
    base_dir: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.bounds = Box.parse(self.bounds)
        self.spawn_region = Box.parse(self.spawn_region)
        if not isinstance(self.goal_range, Box):
            self.goal_range = Box(*_range(self.goal_range, 3))
        self.assets = [a if isinstance(a, AssetRange) else AssetRange(**a) for a in self.assets]
        if not self.bounds.contains_box(self.spawn_region):
            raise ValueError("spawn region is not inside the layout bounds")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "LayoutTemplate":
        known = {"background", "bounds", "spawn_region", "goal_range", "goal_position", "assets",
                 "min_spawn_goal_distance", "clearance"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown layout keys {sorted(unknown)}")
        goal = d.get("goal_range", d.get("goal_position"))
        if goal is None:
            raise ValueError("layout needs goal_range or goal_position")
        return cls(d["background"], d["bounds"], d["spawn_region"], goal,
                   [AssetRange(a["scene"], a["position"], a.get("yaw", 0.0), a.get("scale", 1.0))
                    for a in d.get("assets", [])],
                   float(d.get("min_spawn_goal_distance", 0.0)), float(d.get("clearance", 0.15)), base_dir)

    def to_dict(self) -> dict:
        return {"background": _ref_json(self.background), "bounds": self.bounds.to_list(),
                "spawn_region": self.spawn_region.to_list(), "goal_range": self.goal_range.to_list(),
                "assets": [{"scene": _ref_json(a.scene), "position": a.position.to_list(), "yaw": list(a.yaw),
                            "scale": list(a.scale)} for a in self.assets],
                "min_spawn_goal_distance": self.min_spawn_goal_distance, "clearance": self.clearance}


def load_layout(path) -> LayoutTemplate:
    """Read a layout file; fixed values are degenerate ranges."""
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneLoadError(f"cannot read layout {path}: {exc}") from exc
    return LayoutTemplate.from_dict(d, base_dir=path.parent)


def save_layout(layout, path) -> None:
    Path(path).write_text(json.dumps(layout.to_dict(), indent=1))


def randomize_layout(template: LayoutTemplate, seed, goal_seed=None) -> SceneLayout:
    """Sample asset poses and a goal from ``template``.

    With ``goal_seed`` the obstacles depend on ``seed`` only and the goal
    on ``goal_seed``, so many goals can share one obstacle arrangement.
    Rejects samples where the goal sits inside an inflated asset bound,
    an asset overlaps the inflated spawn region, or the goal is closer than
    ``min_spawn_goal_distance`` to the spawn region.
    """
    rng = np.random.default_rng(seed)
    goal_rng = rng if goal_seed is None else np.random.default_rng(goal_seed)
    scenes = [load_scene_ref(a.scene, template.base_dir, f"asset {k}") for k, a in enumerate(template.assets)]
    c = template.clearance
    spawn = template.spawn_region.inflate(c)
    g = template.goal_range
    for _ in range(MAX_LAYOUT_ATTEMPTS):
        placed = [a.sample(rng) for a in template.assets]
        boxes = [asset_box(p, s) for p, s in zip(placed, scenes)]
        goal = np.array([lo if lo == hi else goal_rng.uniform(lo, hi) for lo, hi in zip(g.lo, g.hi)])
        if not template.bounds.contains(goal):
            continue
        if any(b.inflate(c).contains(goal, tol=0) for b in boxes):
            continue
        if any(b.intersects(spawn) for b in boxes):
            continue
        if template.spawn_region.distance_to(goal) < template.min_spawn_goal_distance:
            continue
        return SceneLayout(template.background, template.bounds, template.spawn_region, goal, placed,
                           base_dir=template.base_dir)
    raise LayoutInfeasibleError(f"no feasible layout after {MAX_LAYOUT_ATTEMPTS} samples (seed {seed})")


# --- occupancy ----------------------------------------------------------------

@dataclass
class OccupancyGrid:
    """Boolean voxel grid. ``limits`` is the navigable box (defaults to the grid extent)."""

    origin: np.ndarray
    voxel_size: float
    occupancy: np.ndarray
    limits: Box | None = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.occupancy.ndim != 3 or min(self.occupancy.shape) < 1:
            raise ValueError("occupancy must be a non-empty 3D array")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        self.limits = self.extent if self.limits is None else Box.parse(self.limits)

    @classmethod
    def covering(cls, bounds: Box, voxel_size=DEFAULT_VOXEL, pad_voxels=0, fill=True) -> "OccupancyGrid":
        """Grid over ``bounds`` plus ``pad_voxels`` on every side, aligned to ``bounds.lo``."""
        bounds = Box.parse(bounds)
        dims = np.maximum(np.ceil((bounds.hi - bounds.lo) / voxel_size - 1e-9).astype(int), 1) + 2 * pad_voxels
        return cls(bounds.lo - pad_voxels * voxel_size, voxel_size, np.full(tuple(dims), fill, bool), bounds)

    @property
    def dims(self):
        return self.occupancy.shape

    @property
    def extent(self) -> Box:
        return Box(self.origin, self.origin + np.array(self.dims) * self.voxel_size)

    def index_of(self, p) -> tuple:
        return tuple(np.floor((np.asarray(p, dtype=np.float64) - self.origin) / self.voxel_size).astype(int))

    def center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size

    def occupied_centers(self) -> np.ndarray:
        return self.center(np.argwhere(self.occupancy))

    def with_occupancy(self, occupancy) -> "OccupancyGrid":
        return OccupancyGrid(self.origin.copy(), self.voxel_size, occupancy, self.limits)

    def copy(self) -> "OccupancyGrid":
        return self.with_occupancy(self.occupancy.copy())

    def __eq__(self, other):
        return (isinstance(other, OccupancyGrid) and np.array_equal(self.origin, other.origin)
                and self.voxel_size == other.voxel_size and self.limits == other.limits
                and np.array_equal(self.occupancy, other.occupancy))


_GRID_MAGIC = b"SPOG"
# version, dims, origin, voxel size, navigable box lo/hi
_HEADER = "<I3I3dd6d"


def dump_grid(grid: OccupancyGrid) -> bytes:
    """Run-length encoding: header, first value byte, then alternating run lengths."""
    flat = grid.occupancy.ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(edges).astype("<u4")
    head = _GRID_MAGIC + struct.pack(_HEADER, 1, *grid.dims, *grid.origin, grid.voxel_size,
                                     *grid.limits.lo, *grid.limits.hi)
    return head + struct.pack("<BI", int(flat[0]), len(runs)) + runs.tobytes()


def parse_grid(data: bytes) -> OccupancyGrid:
    hdr = struct.calcsize(_HEADER)
    if data[:4] != _GRID_MAGIC:
        raise SceneFormatError("not an occupancy dump")
    try:
        version, nx, ny, nz, ox, oy, oz, vs, *lim = struct.unpack_from(_HEADER, data, 4)
        first, n = struct.unpack_from("<BI", data, 4 + hdr)
    except struct.error as exc:
        raise SceneFormatError(f"truncated occupancy dump: {exc}") from exc
    if version != 1:
        raise SceneFormatError(f"unsupported occupancy dump version {version}")
    start = 4 + hdr + 5
    runs = np.frombuffer(data, dtype="<u4", count=n, offset=start) if len(data) >= start + 4 * n else None
    if runs is None or len(data) != start + 4 * n or runs.sum() != nx * ny * nz:
        raise SceneFormatError("occupancy dump length does not match its header")
    values = (np.arange(n) % 2 == 0) == bool(first)
    occ = np.repeat(values, runs).reshape(nx, ny, nz)
    return OccupancyGrid((ox, oy, oz), vs, occ, Box(lim[:3], lim[3:]))


def save_grid(grid, path) -> None:
    Path(path).write_bytes(dump_grid(grid))


def load_grid(path) -> OccupancyGrid:
    return parse_grid(Path(path).read_bytes())


@numba.njit(cache=True)
def _march(free, band, seen, origin, voxel, eye, dirs, t_stop, t_hit, trunc, step):
    nx, ny, nz = free.shape
    for r in range(dirs.shape[0]):
        d = dirs[r]
        # clip the ray against the grid box
        t0 = 0.0
        t1 = 1e30
        for a in range(3):
            size = (free.shape[a]) * voxel
            if abs(d[a]) < 1e-12:
                if eye[a] < origin[a] or eye[a] > origin[a] + size:
                    t1 = -1.0
            else:
                ta = (origin[a] - eye[a]) / d[a]
                tb = (origin[a] + size - eye[a]) / d[a]
                if ta > tb:
                    ta, tb = tb, ta
                t0 = max(t0, ta)
                t1 = min(t1, tb)
        if t1 <= t0:
            continue
        end = min(t1, t_stop[r])
        t = t0
        while t < end:
            i = int(math.floor((eye[0] + t * d[0] - origin[0]) / voxel))
            j = int(math.floor((eye[1] + t * d[1] - origin[1]) / voxel))
            k = int(math.floor((eye[2] + t * d[2] - origin[2]) / voxel))
            if 0 <= i < nx and 0 <= j < ny and 0 <= k < nz:
                free[i, j, k] = True
                seen[i, j, k] = True
            t += step
        if t_hit[r] > 0:
            t = max(t_hit[r] - trunc, t0)
            hi = min(t_hit[r] + trunc, t1)
            while t <= hi:
                i = int(math.floor((eye[0] + t * d[0] - origin[0]) / voxel))
                j = int(math.floor((eye[1] + t * d[1] - origin[1]) / voxel))
                k = int(math.floor((eye[2] + t * d[2] - origin[2]) / voxel))
                if 0 <= i < nx and 0 <= j < ny and 0 <= k < nz:
                    band[i, j, k] = True
                    seen[i, j, k] = True
                t += step


@dataclass
class FusionResult:
    grid: OccupancyGrid
    free: np.ndarray
    band: np.ndarray
    observed: np.ndarray


def fuse_occupancy(scene: GaussianScene, cameras, grid: OccupancyGrid | Box, truncation_voxels=DEFAULT_TRUNCATION_VOXELS,
                   render_cfg: RenderConfig | None = None, min_alpha=0.5, details=False):
    """Fuse rendered depth from ``cameras`` into an occupancy grid.

    ``grid`` gives the voxel lattice (its occupancy values are ignored) or
    is a box to cover at the default voxel size. Pixels whose accumulated
    alpha is below ``min_alpha`` count as seeing nothing and carve to the
    grid exit. Returns the grid, or a :class:`FusionResult` with
    ``details=True``.
    """
    cameras = list(cameras)
    if not cameras:
        raise ValueError("fuse_occupancy needs at least one camera")
    if not isinstance(grid, OccupancyGrid):
        grid = OccupancyGrid.covering(grid)
    cfg = replace(render_cfg or RenderConfig(), depth_mode="first_surface")
    voxel = grid.voxel_size
    free = np.zeros(grid.dims, bool)
    band = np.zeros(grid.dims, bool)
    seen = np.zeros(grid.dims, bool)
    trunc = truncation_voxels * voxel
    step = 0.25 * voxel
    for cam in cameras:
        out = render(scene, cam, cfg)
        dirs = cam.world_ray_directions().reshape(-1, 3)
        hit = (out.depth > 0) & (out.accumulated_alpha >= min_alpha)
        # truncation is measured along the surface normal, so grazing rays stop
        # carving well short of the surface instead of shaving it off
        cos = np.abs(np.sum(out.normal * cam.ray_directions(), axis=-1))
        cos = np.where(out.normal_defined, np.maximum(cos, MIN_COS), 1.0)
        t_hit = np.where(hit, out.depth, -1.0).reshape(-1)
        t_stop = np.where(hit, out.depth - trunc / cos, np.inf).reshape(-1)
        _march(free, band, seen, grid.origin, voxel, cam.center, np.ascontiguousarray(dirs), t_stop, t_hit,
               trunc, step)
    if not seen.any():
        logger.warning("no camera observed any voxel; the grid is fully occupied")
    # free space dominates the surface band; unobserved voxels stay occupied
    result = grid.with_occupancy(~free)
    if details:
        return FusionResult(result, free, band, seen)
    return result


def collides(grid: OccupancyGrid, position, agent_radius: float) -> bool:
    """True iff an occupied voxel centre lies within ``agent_radius`` or ``position`` is outside the grid."""
    if not agent_radius > 0:
        raise ValueError("agent_radius must be positive")
    p = np.asarray(position, dtype=np.float64)
    if not grid.limits.contains(p, tol=0.0):
        return True
    v = grid.voxel_size
    lo = np.maximum(np.floor((p - agent_radius - grid.origin) / v - 0.5).astype(int), 0)
    hi = np.minimum(np.ceil((p + agent_radius - grid.origin) / v - 0.5).astype(int) + 1, grid.dims)
    sub = grid.occupancy[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    if not sub.any():
        return False
    idx = np.argwhere(sub) + lo
    d2 = np.sum((grid.center(idx) - p) ** 2, axis=1)
    return bool(d2.min() <= agent_radius * agent_radius)


# --- worlds ---------------------------------------------------------------------

@dataclass
class FusionConfig:
    voxel_size: float = DEFAULT_VOXEL
    truncation_voxels: int = DEFAULT_TRUNCATION_VOXELS
    camera_spacing: float = 1.8
    heights: tuple = (0.8, 2.0)
    yaws: int = 6
    pitches: tuple = (-0.7, 0.0, 0.7)
    resolution: int = 48
    fov_deg: float = 90.0
    margin: float = 0.3


def fusion_cameras(layout: SceneLayout, cfg: FusionConfig | None = None) -> list:
    """A lattice of viewpoints over the layout bounds, skipping those inside assets."""
    cfg = cfg or FusionConfig()
    b = layout.bounds
    boxes = [asset_box(a, load_scene_ref(a.scene, layout.base_dir, f"asset {k}")).inflate(cfg.margin)
             for k, a in enumerate(layout.assets)]
    axes = []
    for a in range(2):
        n = max(1, int(round((b.hi[a] - b.lo[a] - 2 * cfg.margin) / cfg.camera_spacing)) + 1)
        axes.append(np.linspace(b.lo[a] + cfg.margin, b.hi[a] - cfg.margin, n))
    heights = [h for h in cfg.heights if b.lo[2] + cfg.margin <= h <= b.hi[2] - cfg.margin] or [0.5 * (b.lo[2] + b.hi[2])]
    cams = []
    for x in axes[0]:
        for y in axes[1]:
            for z in heights:
                p = np.array([x, y, z])
                if any(bx.contains(p, tol=0) for bx in boxes):
                    continue
                for k in range(cfg.yaws):
                    for pitch in cfg.pitches:
                        cams.append(CameraModel.from_pose(p, 2 * math.pi * k / cfg.yaws, pitch,
                                                          width=cfg.resolution, height=cfg.resolution,
                                                          fov_deg=cfg.fov_deg))
    return cams


@dataclass
class World:
    """A concrete layout with its rendered scene and collision grid."""

    layout: SceneLayout
    scene: GaussianScene
    grid: OccupancyGrid

    @property
    def goal(self) -> np.ndarray:
        return self.layout.goal_position


class WorldBuilder:
    """Builds worlds from layouts, reusing fused grids across layouts that differ only in the goal."""

    def __init__(self, fusion: FusionConfig | None = None, cache_size=64):
        self.fusion = fusion or FusionConfig()
        self.cache_size = cache_size
        self._grids: dict = {}
        self._scenes: dict = {}

    def obstacle_scene(self, layout: SceneLayout) -> GaussianScene:
        key = layout.digest(goal=False)
        if key not in self._scenes:
            self._remember(self._scenes, key, compose(layout))
        return self._scenes[key]

    def grid(self, layout: SceneLayout) -> OccupancyGrid:
        key = layout.digest(goal=False)
        if key not in self._grids:
            cams = fusion_cameras(layout, self.fusion)
            lattice = OccupancyGrid.covering(layout.bounds, self.fusion.voxel_size, self.fusion.truncation_voxels)
            g = fuse_occupancy(self.obstacle_scene(layout), cams, lattice, self.fusion.truncation_voxels)
            self._remember(self._grids, key, g)
        return self._grids[key]

    def build(self, layout: SceneLayout) -> World:
        marker = assets.goal_marker().transformed(translation=layout.goal_position)
        scene = GaussianScene.concat([self.obstacle_scene(layout), marker])
        return World(layout, scene, self.grid(layout))

    def _remember(self, store, key, value):
        if len(store) >= self.cache_size:
            store.pop(next(iter(store)))
        store[key] = value


def sample_free_pose(world_scene: GaussianScene, bounds: Box, rng, clearance=0.4, pitch=0.25, tree=None,
                     max_tries=1000):
    """Random ``(position, yaw, pitch)`` at least ``clearance`` from every Gaussian mean."""
    from scipy.spatial import cKDTree
    tree = tree or cKDTree(world_scene.means)
    inner = bounds.inflate(-clearance)
    for _ in range(max_tries):
        p = inner.sample(rng)
        if tree.query(p)[0] >= clearance:
            return p, float(rng.uniform(-math.pi, math.pi)), float(rng.uniform(-pitch, pitch))
    raise LayoutInfeasibleError("no free viewpoint found")


def collect_dataset(template: LayoutTemplate, n: int, seed=0, resolution=64, n_layouts=10,
                    render_cfg: RenderConfig | None = None, fov_deg=90.0):
    """Render ``n`` images from random free-space viewpoints across seeded layouts.

    Returns ``(images, poses)`` with images ``(n, res, res, 3)`` float32 and
    poses as ``[x, y, z, yaw, pitch, layout_index]`` lists.
    """
    from scipy.spatial import cKDTree
    cfg = render_cfg or RenderConfig()
    rng = np.random.default_rng(seed)
    worlds = []
    for k in range(max(1, n_layouts)):
        layout = randomize_layout(template, seed * 1000 + k)
        scene = compose(layout, with_goal_marker=True)
        worlds.append((layout, scene, cKDTree(scene.means)))
    images = np.zeros((n, resolution, resolution, 3), np.float32)
    poses = []
    for i in range(n):
        k = i % len(worlds)
        layout, scene, tree = worlds[k]
        p, yaw, pitch = sample_free_pose(scene, layout.bounds, rng, tree=tree)
        cam = CameraModel.from_pose(p, yaw, pitch, width=resolution, height=resolution, fov_deg=fov_deg)
        images[i] = render(scene, cam, cfg).color
        poses.append([*p.tolist(), yaw, pitch, k])
    return images, poses


def default_template(n_obstacles=0, size=(8.0, 8.0), height=3.0) -> LayoutTemplate:
    """Room with a spawn strip on one side and goals on the other; optional box obstacles in between."""
    sx, sy = size
    obstacles = [AssetRange({"builtin": "box", "args": {"seed": k}},
                            [[2.8, 1.0, 0.0], [5.2, sy - 1.0, 0.0]], (-math.pi, math.pi), (0.8, 1.2))
                 for k in range(n_obstacles)]
    return LayoutTemplate({"builtin": "room", "args": {"size": [sx, sy], "height": height}},
                          [[0, 0, 0], [sx, sy, height]], [[1.0, 1.0, 1.0], [2.0, sy - 1.0, 1.0]],
                          [[sx - 2.0, 1.0, 1.0], [sx - 1.0, sy - 1.0, 1.0]], obstacles,
                          min_spawn_goal_distance=3.0)
