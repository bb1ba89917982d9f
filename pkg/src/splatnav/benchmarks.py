"""Reusable scene reconstruction setups: scrambled initializations and posed target views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_erosion

from .assets import planar_box_scene
from .gaussians import CameraModel, GaussianScene
from .render import render

WALL_Z = 3.0


@dataclass
class PlanarProblem:
    truth: GaussianScene
    init: GaussianScene
    views: list
    eval_camera: CameraModel


def scramble(truth: GaussianScene, rng, jitter=0.03, scale=0.08) -> GaussianScene:
    """Same primitive count with jittered means, random orientations, isotropic scales and noisy colours."""
    init = truth.copy()
    n = len(init)
    init.means += rng.normal(0, jitter, (n, 3))
    q = rng.normal(size=(n, 4))
    init.quats[:] = q / np.linalg.norm(q, axis=1, keepdims=True)
    init.scales[:] = scale
    init.rgb[:] = np.clip(init.rgb + rng.normal(0, 0.1, init.rgb.shape), 0, 1)
    init.opacities[:] = 0.7
    return init


def interior_views(truth: GaussianScene, bounds, n_views, resolution=64, seed=0, fov_deg=90.0, margin=0.5):
    """Posed renders of ``truth`` from random z-up cameras inside ``bounds`` shrunk by ``margin``."""
    lo, hi = np.asarray(bounds[0], float) + margin, np.asarray(bounds[1], float) - margin
    rng = np.random.default_rng(seed)
    views = []
    for _ in range(n_views):
        p = lo + (hi - lo) * rng.uniform(size=3)
        cam = CameraModel.from_pose(p, rng.uniform(-np.pi, np.pi), rng.uniform(-0.5, 0.5),
                                    width=resolution, height=resolution, fov_deg=fov_deg)
        views.append((cam, render(truth, cam).color))
    return views


def planar_problem(seed=0, n_views=20, resolution=64) -> PlanarProblem:
    """Targets rendered from the planar box, and a scrambled initialization.

    The initial scene keeps the true Gaussian count but has jittered means,
    uniformly random orientations, isotropic scales and noisy colours, so
    flatness and orientation must be recovered by the optimizer.
    """
    truth = planar_box_scene()
    rng = np.random.default_rng(seed)
    views = []
    for _ in range(n_views):
        eye = [rng.uniform(-0.8, 0.8), rng.uniform(-0.6, 0.4), rng.uniform(-0.6, 0.2)]
        target = [rng.uniform(-0.3, 0.3), rng.uniform(0.0, 0.5), 2.5]
        cam = CameraModel.look_at(eye, target, up=(0, -1, 0), width=resolution, height=resolution,
                                  fov_deg=75)
        views.append((cam, render(truth, cam).color))
    init = scramble(truth, rng)
    ev = CameraModel.look_at([0, -0.2, 0], [0, -0.2, WALL_Z], up=(0, -1, 0),
                             width=resolution, height=resolution, fov_deg=60)
    return PlanarProblem(truth, init, views, ev)


def wall_depth_errors(scene, problem: PlanarProblem, min_alpha=0.9) -> np.ndarray:
    """Relative depth errors against the analytic back wall.

    Pixels count when the true scene shows the wall there and at its
    4-neighbours, and the fitted render has accumulated alpha above
    ``min_alpha``.
    """
    cam = problem.eval_camera
    d = cam.world_ray_directions()
    analytic = (WALL_Z - cam.center[2]) / d[..., 2]
    ref = render(problem.truth, cam)
    wall = binary_erosion(np.abs(ref.depth - analytic) < 1e-3 * analytic)
    out = render(scene, cam)
    mask = wall & (out.accumulated_alpha > min_alpha)
    return np.abs(out.depth[mask] - analytic[mask]) / analytic[mask]
