"""Procedural Gaussian assets standing in for reconstructed captures.

Surfaces are tiled with flat, camera-agnostic disks whose shortest axis is
the surface normal. Textures are deterministic functions of the seed.
"""

from __future__ import annotations

import numpy as np

from .gaussians import GaussianScene, rotmat_to_quat

PALETTES = [
    ((0.80, 0.78, 0.72), (0.55, 0.50, 0.45)),
    ((0.35, 0.45, 0.65), (0.75, 0.80, 0.90)),
    ((0.70, 0.55, 0.35), (0.45, 0.30, 0.20)),
    ((0.40, 0.60, 0.40), (0.80, 0.85, 0.70)),
    ((0.85, 0.70, 0.70), (0.55, 0.35, 0.40)),
    ((0.30, 0.30, 0.35), (0.65, 0.65, 0.60)),
]


def plane_patch(origin, u_dir, v_dir, size_u, size_v, spacing, palette=0, seed=0,
                thickness=0.005, opacity=0.95, checker=0.5, jitter=0.0) -> GaussianScene:
    """Tile the rectangle ``origin + a*u_dir + b*v_dir`` with flat Gaussians."""
    u_dir = np.asarray(u_dir, dtype=np.float64)
    v_dir = np.asarray(v_dir, dtype=np.float64)
    u_dir = u_dir / np.linalg.norm(u_dir)
    v_dir = v_dir / np.linalg.norm(v_dir)
    normal = np.cross(u_dir, v_dir)
    rng = np.random.default_rng(seed)
    nu = max(1, int(round(size_u / spacing)))
    nv = max(1, int(round(size_v / spacing)))
    a = (np.arange(nu) + 0.5) * size_u / nu
    b = (np.arange(nv) + 0.5) * size_v / nv
    A, B = np.meshgrid(a, b, indexing="ij")
    A, B = A.ravel(), B.ravel()
    if jitter:
        A = A + rng.uniform(-jitter, jitter, A.shape) * spacing
        B = B + rng.uniform(-jitter, jitter, B.shape) * spacing
    means = np.asarray(origin, dtype=np.float64) + A[:, None] * u_dir + B[:, None] * v_dir
    c0, c1 = (np.asarray(c) for c in PALETTES[palette % len(PALETTES)])
    cells = (np.floor(A / checker) + np.floor(B / checker)) % 2
    phase = rng.uniform(0, 2 * np.pi, 4)
    blob = 0.5 + 0.25 * (np.sin(A * 1.3 + phase[0]) * np.cos(B * 1.1 + phase[1])
                         + np.sin(A * 0.4 + B * 0.7 + phase[2]))
    rgb = np.where(cells[:, None] > 0, c0, c1) * (0.75 + 0.5 * blob[:, None])
    rgb = np.clip(rgb + rng.normal(0, 0.02, rgb.shape), 0.0, 1.0)
    q = rotmat_to_quat(np.stack([u_dir, v_dir, normal], axis=1))
    n = len(means)
    s_plane = 0.6 * spacing
    scales = np.column_stack([np.full(n, s_plane), np.full(n, s_plane), np.full(n, thickness)])
    return GaussianScene(means, np.tile(q, (n, 1)), scales, np.full(n, opacity), rgb[:, None, :])


def room(size=(8.0, 8.0), height=3.0, spacing=0.25, seed=0) -> GaussianScene:
    """Floor plus four inward-facing walls; the floor spans ``[0, sx] x [0, sy]`` at z=0."""
    sx, sy = size
    parts = [
        plane_patch([0, 0, 0], [1, 0, 0], [0, 1, 0], sx, sy, spacing, palette=0, seed=seed, checker=1.0),
        plane_patch([0, 0, 0], [1, 0, 0], [0, 0, 1], sx, height, spacing, palette=1, seed=seed + 1),
        plane_patch([sx, 0, 0], [0, 1, 0], [0, 0, 1], sy, height, spacing, palette=2, seed=seed + 2),
        plane_patch([sx, sy, 0], [-1, 0, 0], [0, 0, 1], sx, height, spacing, palette=3, seed=seed + 3),
        plane_patch([0, sy, 0], [0, -1, 0], [0, 0, 1], sy, height, spacing, palette=4, seed=seed + 4),
    ]
    return GaussianScene.concat(parts)


def box(size=(0.8, 0.8, 1.6), spacing=0.1, palette=5, seed=0) -> GaussianScene:
    """Closed box with its base centred on the origin at z=0."""
    sx, sy, sz = size
    x0, y0 = -sx / 2, -sy / 2
    parts = [
        plane_patch([x0, y0, 0], [1, 0, 0], [0, 0, 1], sx, sz, spacing, palette, seed, checker=0.2),
        plane_patch([x0 + sx, y0, 0], [0, 1, 0], [0, 0, 1], sy, sz, spacing, palette, seed + 1, checker=0.2),
        plane_patch([x0 + sx, y0 + sy, 0], [-1, 0, 0], [0, 0, 1], sx, sz, spacing, palette, seed + 2, checker=0.2),
        plane_patch([x0, y0 + sy, 0], [0, -1, 0], [0, 0, 1], sy, sz, spacing, palette, seed + 3, checker=0.2),
        plane_patch([x0, y0, sz], [1, 0, 0], [0, 1, 0], sx, sy, spacing, palette, seed + 4, checker=0.2),
    ]
    return GaussianScene.concat(parts)


def goal_marker(radius=0.2, count=48, color=(0.95, 0.15, 0.1), seed=0) -> GaussianScene:
    """Small bright sphere of Gaussians centred on the origin."""
    rng = np.random.default_rng(seed)
    # Fibonacci sphere for an even cover
    k = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * k / count)
    theta = np.pi * (1 + 5 ** 0.5) * k
    dirs = np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
    rots = []
    for n in dirs:
        t = np.cross(n, [0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.cross(n, [1.0, 0.0, 0.0])
        t /= np.linalg.norm(t)
        rots.append(np.stack([t, np.cross(n, t), n], axis=1))
    s = radius * 0.45
    rgb = np.clip(np.asarray(color) + rng.normal(0, 0.03, (count, 3)), 0, 1)
    return GaussianScene(dirs * radius, rotmat_to_quat(np.array(rots)),
                         np.tile([s, s, 0.01 * radius], (count, 1)), np.full(count, 0.95), rgb[:, None, :])


def planar_box_scene(spacing=0.2, seed=0) -> GaussianScene:
    """Back wall, floor and a cube: the fitting benchmark's ground truth."""
    parts = [
        plane_patch([-1.4, -1.6, 3.0], [1, 0, 0], [0, 1, 0], 2.8, 2.4, spacing, palette=1, seed=seed, checker=0.4),
        plane_patch([-1.4, 0.8, 0.8], [1, 0, 0], [0, 0, 1], 2.8, 2.2, spacing, palette=0, seed=seed + 1, checker=0.4),
    ]
    cube = box((0.6, 0.6, 0.6), spacing=0.15, palette=2, seed=seed + 2)
    # the benchmark uses a y-down world so the floor is at y=0.8
    flip = np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])
    parts.append(cube.transformed(flip, translation=(0.1, 0.8, 1.9)))
    return GaussianScene.concat(parts)


BUILTIN = {
    "room": room,
    "box": box,
    "goal_marker": goal_marker,
    "planar_box": planar_box_scene,
}


def builtin(name: str, **kwargs) -> GaussianScene:
    try:
        factory = BUILTIN[name]
    except KeyError:
        raise KeyError(f"unknown builtin asset {name!r}; known: {sorted(BUILTIN)}") from None
    return factory(**kwargs)
