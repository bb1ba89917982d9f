"""Front-to-back splat rendering with ray-plane depth and plane normals.

Normals in :class:`RenderOutput` and from :func:`pseudo_normal_from_depth`
are expressed in the camera frame. Depth is the distance along the unit
pixel ray to each Gaussian's plane, alpha-blended and renormalized by the
accumulated weight of intersecting Gaussians. Pixels without depth hold 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _raster
from .gaussians import SCALE_FLOOR, CameraModel, GaussianPrimitive, as_scene, plane_frame_of
from .errors import DimensionError

DEFAULT_ALPHA_MAX = 1.0 - 1e-6


@dataclass
class RenderConfig:
    transmittance_cutoff: float = 1e-4
    alpha_floor: float = 1.0 / 255.0
    background_color: tuple = (0.0, 0.0, 0.0)
    max_gaussians_per_ray: int = 1024
    alpha_max: float = DEFAULT_ALPHA_MAX
    depth_mode: str = "mean"  # or "first_surface"

    def __post_init__(self):
        if not 0.0 < self.transmittance_cutoff < 1.0:
            raise ValueError("transmittance_cutoff must lie in (0, 1)")
        if not 0.0 < self.alpha_floor < 1.0:
            raise ValueError("alpha_floor must lie in (0, 1)")
        if not 0.0 < self.alpha_max < 1.0:
            raise ValueError("alpha_max must lie in (0, 1)")
        if self.max_gaussians_per_ray < 1:
            raise ValueError("max_gaussians_per_ray must be positive")
        if self.depth_mode not in ("mean", "first_surface"):
            raise ValueError(f"unknown depth_mode {self.depth_mode!r}")
        self.background_color = tuple(float(c) for c in self.background_color)


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    final_transmittance: np.ndarray
    accumulated_alpha: np.ndarray = field(repr=False)
    contributors: np.ndarray = field(repr=False)

    @property
    def depth_defined(self) -> np.ndarray:
        return self.depth > 0

    @property
    def normal_defined(self) -> np.ndarray:
        return np.any(self.normal != 0, axis=-1)


class _Frame:
    """Per-view preprocessing shared by the forward and backward kernels."""

    def __init__(self, scene, cam: CameraModel, cfg: RenderConfig, colors=None, rots=None):
        self.scene = scene
        self.cam = cam
        self.cfg = cfg
        self.rots = scene.rotations() if rots is None else np.ascontiguousarray(rots, dtype=np.float64)
        if colors is None:
            colors = scene.colors_for_view(cam.center)
        self.raw_colors = colors
        self.colors = np.ascontiguousarray(np.clip(colors, 0.0, 1.0))
        (self.Rc, self.muc, self.w, self.kmin, self.sigma, self.valid,
         self.bbox, self.depth) = _raster.prepare(
            scene.means, self.rots, scene.scales, scene.opacities, cam.rotation, cam.translation,
            float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy), cam.width, cam.height,
            cfg.alpha_floor, SCALE_FLOOR)
        order = np.argsort(self.depth, kind="stable")
        self.offsets, self.items = _raster.bin_tiles(order, self.valid, self.bbox, cam.width, cam.height)
        self.dirs = np.ascontiguousarray(cam.ray_directions())
        self.bg = np.asarray(cfg.background_color, dtype=np.float64)

    def _common(self):
        c = self.cfg
        return (self.Rc, self.muc, self.w, self.kmin, self.sigma, self.scene.opacities, self.colors,
                self.bbox, self.offsets, self.items, self.dirs, self.bg,
                c.transmittance_cutoff, c.alpha_floor, c.alpha_max, int(c.max_gaussians_per_ray))

    def forward(self) -> RenderOutput:
        color, depth, normal, trans, acc, count = _raster.forward(
            *self._common(), self.cfg.depth_mode == "first_surface")
        return RenderOutput(color, depth, normal, trans, acc, count)

    def backward(self, g_color, g_depth, g_normal) -> dict:
        """Gradients w.r.t. world means, rotation matrices, scales, opacities, colours."""
        H, W = self.cam.height, self.cam.width
        g_color = _grad_or_zero(g_color, (H, W, 3))
        g_depth = _grad_or_zero(g_depth, (H, W))
        g_normal = _grad_or_zero(g_normal, (H, W, 3))
        g_muc, g_Rc, g_w, g_op, g_col = _raster.backward(*self._common(), g_color, g_depth, g_normal)
        Rwc = self.cam.rotation
        s = np.maximum(self.scene.scales, SCALE_FLOOR)
        g_scales = np.where(self.scene.scales > SCALE_FLOOR, -2.0 * g_w / s ** 3, 0.0)
        inside = (self.raw_colors >= 0.0) & (self.raw_colors <= 1.0)
        return {
            "means": g_muc @ Rwc,
            "rotations": np.einsum("ji,njk->nik", Rwc, g_Rc),
            "scales": g_scales,
            "opacities": g_op,
            "colors": np.where(inside, g_col, 0.0),
        }


def _grad_or_zero(g, shape):
    if g is None:
        return np.zeros(shape)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if g.shape != shape:
        raise DimensionError(f"gradient has shape {g.shape}, expected {shape}")
    return g


def _background_only(cam: CameraModel, cfg: RenderConfig) -> RenderOutput:
    H, W = cam.height, cam.width
    color = np.broadcast_to(np.asarray(cfg.background_color, dtype=np.float64), (H, W, 3)).copy()
    return RenderOutput(color, np.zeros((H, W)), np.zeros((H, W, 3)), np.ones((H, W)),
                        np.zeros((H, W)), np.zeros((H, W), dtype=np.int64))


def render(scene, cam: CameraModel, cfg: RenderConfig | None = None) -> RenderOutput:
    """Render colour, ray-plane depth, normals and transmittance for one view.

    ``scene`` is a :class:`~splatnav.gaussians.GaussianScene` or a list of
    primitives. Gaussians whose mean is not in front of the camera are
    skipped; an empty result is a background-only image.
    """
    cfg = cfg or RenderConfig()
    scene = as_scene(scene)
    if len(scene) == 0:
        return _background_only(cam, cfg)
    return _Frame(scene, cam, cfg).forward()


def ray_plane_depth(g: GaussianPrimitive, ray_origin, ray_dir):
    """Distance along ``ray_dir`` to ``g``'s plane, or ``None`` if it misses."""
    plane = plane_frame_of(g)
    o = np.asarray(ray_origin, dtype=np.float64)
    d = np.asarray(ray_dir, dtype=np.float64)
    denom = float(plane.normal @ d)
    if abs(denom) < _raster.PARALLEL_EPS:
        return None
    t = (plane.offset - float(plane.normal @ o)) / denom
    return t if t > 0 else None


def rendered_depth(depths, weights) -> float:
    """Weighted mean of per-Gaussian ray depths; 0 marks undefined depth."""
    depths = np.asarray(depths, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        return 0.0
    return float((weights * depths).sum() / total)


def _backproject(depth, cam: CameraModel):
    return depth[..., None] * cam.ray_directions()


def pseudo_normal_from_depth(depth, cam: CameraModel) -> np.ndarray:
    """Camera-facing normals from central differences of back-projected depth.

    Pixels on the border or whose 4-neighbourhood has undefined depth get
    the zero vector.
    """
    return _pseudo_normals(np.asarray(depth, dtype=np.float64), cam)[0]


def _pseudo_normals(depth, cam):
    H, W = depth.shape
    normals = np.zeros((H, W, 3))
    if H < 3 or W < 3:
        return normals, None
    P = _backproject(depth, cam)
    dirs = cam.ray_directions()
    dx = P[1:-1, 2:] - P[1:-1, :-2]
    dy = P[2:, 1:-1] - P[:-2, 1:-1]
    c = np.cross(dx, dy)
    norm = np.linalg.norm(c, axis=-1)
    ok = ((depth[1:-1, 1:-1] > 0) & (depth[1:-1, 2:] > 0) & (depth[1:-1, :-2] > 0)
          & (depth[2:, 1:-1] > 0) & (depth[:-2, 1:-1] > 0) & (norm > 1e-12))
    sign = np.where(np.sum(c * dirs[1:-1, 1:-1], axis=-1) > 0, -1.0, 1.0)
    chat = c / np.where(ok, norm, 1.0)[..., None]
    normals[1:-1, 1:-1] = np.where(ok[..., None], sign[..., None] * chat, 0.0)
    return normals, (dx, dy, chat, norm, sign, ok, dirs)


def pseudo_normal_backward(depth, cam: CameraModel, grad_normals) -> np.ndarray:
    """Vector-Jacobian product of :func:`pseudo_normal_from_depth`."""
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    g_depth = np.zeros((H, W))
    _, cache = _pseudo_normals(depth, cam)
    if cache is None:
        return g_depth
    dx, dy, chat, norm, sign, ok, dirs = cache
    gn = np.where(ok[..., None], grad_normals[1:-1, 1:-1], 0.0)
    proj = np.sum(chat * gn, axis=-1, keepdims=True)
    gc = sign[..., None] * (gn - chat * proj) / np.where(ok, norm, 1.0)[..., None]
    gdx = np.cross(dy, gc)
    gdy = np.cross(gc, dx)
    gP = np.zeros((H, W, 3))
    gP[1:-1, 2:] += gdx
    gP[1:-1, :-2] -= gdx
    gP[2:, 1:-1] += gdy
    gP[:-2, 1:-1] -= gdy
    return np.sum(gP * dirs, axis=-1)


# image dumps

def write_ppm(path, color) -> None:
    """Binary P6 dump of an ``(H, W, 3)`` image in [0, 1]."""
    img = np.clip(np.round(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)
    H, W, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    img = np.frombuffer(data[pos:pos + W * H * 3], dtype=np.uint8).reshape(H, W, 3)
    return img.astype(np.float64) / maxval


def write_float_image(path, arr) -> None:
    """8-byte ``(width, height)`` little-endian header then float32 LE values."""
    arr = np.asarray(arr)
    H, W = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<II", W, H))
        f.write(arr.astype("<f4").tobytes())


def read_float_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    W, H = struct.unpack("<II", data[:8])
    vals = np.frombuffer(data[8:], dtype="<f4")
    channels = vals.size // (W * H)
    return vals.reshape((H, W) if channels == 1 else (H, W, channels)).astype(np.float64)
