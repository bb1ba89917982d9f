"""Gaussian primitives, covariance algebra and pinhole cameras.

Quaternions are stored scalar-first ``(w, x, y, z)``. Camera rotations map
world coordinates into an OpenCV-style camera frame: x right, y down, z
forward. Pixel ``(u, v)`` integer indices sit at pixel centres.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateCovarianceError, SceneFormatError

SCALE_FLOOR = 1e-6
SH_C1 = 0.4886025119029199


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices for one ``(4,)`` or many ``(N, 4)`` quaternions.

    Quaternions are normalized first, so any nonzero input is accepted.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def rotmat_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` with ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    single = R.ndim == 2
    R = R.reshape(-1, 3, 3)
    out = np.empty((R.shape[0], 4))
    for i, m in enumerate(R):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.array(q)
        if q[0] < 0:
            q = -q
        out[i] = q / np.linalg.norm(q)
    return out[0] if single else out


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def _check_vec(name, value, n):
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (n,):
        raise SceneFormatError(f"{name} must have {n} components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SceneFormatError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class GaussianPrimitive:
    """One scene atom: position, orientation, extent, opacity and radiance.

    ``rgb`` holds 3 values per spherical-harmonic coefficient: 3 for degree 0
    (a plain colour), 12 for degree 1.
    """

    mean: np.ndarray
    quat: np.ndarray
    scales: np.ndarray
    opacity: float
    rgb: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def __post_init__(self):
        object.__setattr__(self, "mean", _check_vec("mean", self.mean, 3))
        quat = _check_vec("quat", self.quat, 4)
        if abs(np.linalg.norm(quat) - 1.0) > 1e-6:
            raise SceneFormatError(f"quat must be unit-norm, got norm {np.linalg.norm(quat):.8f}")
        object.__setattr__(self, "quat", quat)
        scales = _check_vec("scales", self.scales, 3)
        if np.any(scales <= 0):
            raise SceneFormatError("scales must be strictly positive")
        object.__setattr__(self, "scales", scales)
        op = float(self.opacity)
        if not (0.0 <= op <= 1.0):
            raise SceneFormatError(f"opacity must lie in [0, 1], got {op}")
        object.__setattr__(self, "opacity", op)
        rgb = np.asarray(self.rgb, dtype=np.float64).ravel()
        if rgb.size not in (3, 12) or not np.all(np.isfinite(rgb)):
            raise SceneFormatError("rgb must hold 3 (degree 0) or 12 (degree 1) finite values")
        object.__setattr__(self, "rgb", rgb)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.quat)

    @property
    def sh_degree(self) -> int:
        return 0 if self.rgb.size == 3 else 1


@dataclass(frozen=True)
class PlaneFrame:
    normal: np.ndarray
    offset: float


def covariance_of(g: GaussianPrimitive) -> np.ndarray:
    """``R S S^T R^T`` for the primitive; exactly symmetric."""
    R = g.rotation
    cov = (R * g.scales ** 2) @ R.T
    return 0.5 * (cov + cov.T)


def density_at(g: GaussianPrimitive, x) -> float:
    """Unnormalized Gaussian density ``exp(-0.5 * mahalanobis^2)`` at ``x``."""
    if np.any(g.scales < SCALE_FLOOR):
        raise DegenerateCovarianceError(
            f"scale {g.scales.min():.3g} is below the floor {SCALE_FLOOR:g}")
    local = g.rotation.T @ (np.asarray(x, dtype=np.float64) - g.mean)
    q = float(np.sum((local / g.scales) ** 2))
    return math.exp(-0.5 * q)


def smallest_axis(scales) -> np.ndarray:
    """Index of the smallest scale per row; ties go to the lowest index."""
    return np.argmin(np.asarray(scales), axis=-1)


def plane_frame_of(g: GaussianPrimitive) -> PlaneFrame:
    k = int(smallest_axis(g.scales))
    n = g.rotation[:, k]
    n = n / np.linalg.norm(n)
    return PlaneFrame(normal=n, offset=float(n @ g.mean))


@dataclass
class CameraModel:
    """Pinhole camera. ``rotation``/``translation`` map world to camera."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the camera frame, shape ``(H, W, 3)``."""
        u = (np.arange(self.width) - self.cx) / self.fx
        v = (np.arange(self.height) - self.cy) / self.fy
        d = np.stack(np.broadcast_arrays(u[None, :], v[:, None], 1.0), axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def world_ray_directions(self) -> np.ndarray:
        return self.ray_directions() @ self.rotation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width=64, height=64,
                fov_deg=90.0) -> "CameraModel":
        eye = np.asarray(eye, dtype=np.float64)
        f = np.asarray(target, dtype=np.float64) - eye
        f /= np.linalg.norm(f)
        right = np.cross(f, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(f, [0.0, 1.0, 0.0]) if abs(f[1]) < 0.9 else np.cross(f, [1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(f, right)
        R = np.stack([right, down, f])
        return cls.from_rotation(R, eye, width=width, height=height, fov_deg=fov_deg)

    @classmethod
    def from_rotation(cls, R, eye, *, width=64, height=64, fov_deg=90.0) -> "CameraModel":
        focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        R = np.asarray(R, dtype=np.float64)
        return cls(R, -R @ np.asarray(eye, dtype=np.float64), focal, focal,
                   (width - 1) / 2, (height - 1) / 2, width, height)

    @classmethod
    def from_pose(cls, position, yaw: float, pitch: float = 0.0, **kw) -> "CameraModel":
        """Forward-looking camera for a body at ``position`` with z-up yaw/pitch."""
        cp, sp = math.cos(pitch), math.sin(pitch)
        f = np.array([math.cos(yaw) * cp, math.sin(yaw) * cp, sp])
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        down = np.cross(f, right)
        return cls.from_rotation(np.stack([right, down, f]), position, **kw)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        if "eye" in d:
            return cls.look_at(d["eye"], d["target"], d.get("up", (0, 0, 1)),
                               width=d.get("width", 64), height=d.get("height", 64),
                               fov_deg=d.get("fov_deg", 90.0))
        return cls(d["rotation"], d["translation"], d["fx"], d["fy"], d["cx"], d["cy"],
                   d["width"], d["height"])


def project_mean(g: GaussianPrimitive, cam: CameraModel):
    """Pinhole projection of the mean.

    Returns ``(pixel, depth)`` or ``None`` when the mean is not strictly in
    front of the camera.
    """
    p = cam.to_camera(g.mean)
    if p[2] <= 0:
        return None
    pixel = np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])
    return pixel, float(p[2])


class GaussianScene:
    """Structure-of-arrays container for many primitives.

    Attributes are plain float64 arrays: ``means (N,3)``, ``quats (N,4)``,
    ``scales (N,3)``, ``opacities (N,)`` and ``rgb (N,K,3)`` with ``K`` the
    number of SH coefficients.
    """

    def __init__(self, means, quats, scales, opacities, rgb):
        self.means = np.ascontiguousarray(means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.quats = np.ascontiguousarray(quats, dtype=np.float64).reshape(n, 4)
        self.scales = np.ascontiguousarray(scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float64).reshape(n)
        rgb = np.asarray(rgb, dtype=np.float64)
        k = rgb.shape[1] if rgb.ndim == 3 else max(1, rgb.size // max(3 * n, 1))
        self.rgb = np.ascontiguousarray(rgb.reshape(n, k, 3))
        if self.rgb.shape[1] not in (1, 4):
            raise SceneFormatError("rgb must have 1 or 4 SH coefficients per primitive")

    def __len__(self):
        return len(self.means)

    @property
    def sh_degree(self) -> int:
        return 0 if self.rgb.shape[1] == 1 else 1

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianScene":
        k = 1 if sh_degree == 0 else 4
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, k, 3)))

    @classmethod
    def from_primitives(cls, prims: Iterable[GaussianPrimitive]) -> "GaussianScene":
        prims = list(prims)
        if not prims:
            return cls.empty()
        k = max(p.rgb.size // 3 for p in prims)
        rgb = np.zeros((len(prims), k, 3))
        for i, p in enumerate(prims):
            rgb[i, : p.rgb.size // 3] = p.rgb.reshape(-1, 3)
        return cls([p.mean for p in prims], [p.quat for p in prims], [p.scales for p in prims],
                   [p.opacity for p in prims], rgb)

    def primitives(self) -> list[GaussianPrimitive]:
        q = self.quats / np.linalg.norm(self.quats, axis=1, keepdims=True)
        return [GaussianPrimitive(self.means[i], q[i], self.scales[i], self.opacities[i],
                                  self.rgb[i].ravel()) for i in range(len(self))]

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.means.copy(), self.quats.copy(), self.scales.copy(),
                             self.opacities.copy(), self.rgb.copy())

    def subset(self, idx) -> "GaussianScene":
        return GaussianScene(self.means[idx], self.quats[idx], self.scales[idx],
                             self.opacities[idx], self.rgb[idx])

    def rotations(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros((0, 3, 3))
        return quat_to_rotmat(self.quats)

    def covariances(self) -> np.ndarray:
        R = self.rotations()
        return np.einsum("nij,nj,nkj->nik", R, self.scales ** 2, R)

    def normals(self) -> np.ndarray:
        """Smallest-axis unit normals, shape ``(N, 3)``."""
        R = self.rotations()
        k = smallest_axis(self.scales)
        return R[np.arange(len(self)), :, k]

    def colors_for_view(self, cam_center) -> np.ndarray:
        """Evaluate radiance toward ``cam_center``; degree 0 ignores the view."""
        base = self.rgb[:, 0, :]
        if self.sh_degree == 0:
            return base.copy()
        d = self.means - np.asarray(cam_center, dtype=np.float64)
        d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
        return base + SH_C1 * (-y * self.rgb[:, 1] + z * self.rgb[:, 2] - x * self.rgb[:, 3])

    @staticmethod
    def concat(scenes: Sequence["GaussianScene"]) -> "GaussianScene":
        scenes = [s for s in scenes if len(s)]
        if not scenes:
            return GaussianScene.empty()
        k = max(s.rgb.shape[1] for s in scenes)
        rgb = []
        for s in scenes:
            pad = np.zeros((len(s), k, 3))
            pad[:, : s.rgb.shape[1]] = s.rgb
            rgb.append(pad)
        return GaussianScene(np.concatenate([s.means for s in scenes]),
                             np.concatenate([s.quats for s in scenes]),
                             np.concatenate([s.scales for s in scenes]),
                             np.concatenate([s.opacities for s in scenes]),
                             np.concatenate(rgb))

    def transformed(self, rotation=None, translation=(0.0, 0.0, 0.0), scale: float = 1.0) -> "GaussianScene":
        """Apply ``x -> scale * R x + t`` to every primitive."""
        if scale <= 0:
            raise ValueError("scale must be positive")
        R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        q = rotmat_to_quat(R)
        means = scale * self.means @ R.T + np.asarray(translation, dtype=np.float64)
        quats = quat_multiply(q[None, :], self.quats)
        rgb = self.rgb.copy()
        if self.sh_degree == 1:
            # degree-1 SH coefficients rotate like the (y, z, x) vector components
            basis = np.stack([-self.rgb[:, 3], -self.rgb[:, 1], self.rgb[:, 2]], axis=1)
            rot = np.einsum("ij,njc->nic", R, basis)
            rgb[:, 1], rgb[:, 2], rgb[:, 3] = -rot[:, 1], rot[:, 2], -rot[:, 0]
        return GaussianScene(means, quats, self.scales * scale, self.opacities.copy(), rgb)

    def to_json(self) -> list:
        q = self.quats / np.linalg.norm(self.quats, axis=1, keepdims=True)
        return [{"mean": self.means[i].tolist(), "quat": q[i].tolist(),
                 "scales": self.scales[i].tolist(), "opacity": float(self.opacities[i]),
                 "rgb": self.rgb[i].ravel().tolist()} for i in range(len(self))]


def _reject_constant(token):
    raise SceneFormatError(f"non-finite literal {token!r} in scene file")


def parse_scene(text: str) -> GaussianScene:
    """Parse the JSON scene format; NaN/Inf are rejected."""
    try:
        data = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"invalid scene JSON: {exc}") from exc
    if not isinstance(data, list):
        raise SceneFormatError("scene file must be a JSON array of primitives")
    prims = []
    for i, rec in enumerate(data):
        missing = {"mean", "quat", "scales", "opacity", "rgb"} - set(rec)
        if missing:
            raise SceneFormatError(f"primitive {i} is missing fields {sorted(missing)}")
        try:
            prims.append(GaussianPrimitive(rec["mean"], rec["quat"], rec["scales"], rec["opacity"], rec["rgb"]))
        except (TypeError, ValueError) as exc:
            raise SceneFormatError(f"primitive {i}: {exc}") from exc
    return GaussianScene.from_primitives(prims)


def load_scene(path) -> GaussianScene:
    return parse_scene(Path(path).read_text())


def save_scene(scene: GaussianScene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_json()))


def as_scene(scene) -> GaussianScene:
    if isinstance(scene, GaussianScene):
        return scene
    return GaussianScene.from_primitives(scene)
