"""Gradient-based fitting of Gaussian scenes to posed images.

The objective is ``w_p * L1(render, target) + lambda_s * sum_i min(s_i)
+ lambda_n * sum_u |n_render(u) - n_depth(u)|_1`` where ``n_depth`` comes
from finite differences of the rendered ray-plane depth. The L1
subgradient at zero is taken as 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError
from .gaussians import SCALE_FLOOR, SH_C1, CameraModel, GaussianScene, as_scene
from .render import (RenderConfig, RenderOutput, _Frame, pseudo_normal_backward,
                     pseudo_normal_from_depth, render)

logger = logging.getLogger(__name__)

GROUPS = ("means", "quats", "scales", "opacities", "rgb")


@dataclass
class FitConfig:
    lambda_s: float = 100.0
    lambda_n: float = 0.01
    photometric_weight: float = 1.0
    learning_rates: dict = field(default_factory=lambda: {
        "means": 1.6e-4, "quats": 5e-3, "scales": 5e-3, "opacities": 5e-2, "rgb": 2.5e-3})
    iterations: int = 2000
    opacity_prune_threshold: float = 0.005
    prune_interval: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_s", "lambda_n", "photometric_weight", "opacity_prune_threshold"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        for k, v in self.learning_rates.items():
            if k not in GROUPS:
                raise ValueError(f"unknown parameter group {k!r}")
            if not v > 0:
                raise ValueError(f"learning rate for {k} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")


@dataclass
class FitReport:
    photometric: list = field(default_factory=list)
    scale_term: list = field(default_factory=list)
    normal_term: list = field(default_factory=list)
    total: list = field(default_factory=list)
    final_median_min_scale: float = float("nan")
    heldout_error: float = float("nan")
    primitive_counts: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("photometric", "scale_term", "normal_term", "total",
                                                 "final_median_min_scale", "heldout_error",
                                                 "primitive_counts")}


class GeometricLoss(NamedTuple):
    scale_term: float
    normal_term: float
    no_defined_pixels: bool


def photometric_loss(rendered, target) -> float:
    """Mean absolute error over pixels and channels."""
    color = rendered.color if isinstance(rendered, RenderOutput) else np.asarray(rendered)
    target = np.asarray(target, dtype=np.float64)
    if color.shape != target.shape:
        raise DimensionError(f"rendered {color.shape} and target {target.shape} differ")
    return float(np.mean(np.abs(color - target)))


def normal_consistency(n_render, n_depth) -> tuple[float, np.ndarray]:
    """Summed L1 normal difference over pixels where both normals are defined."""
    n_render = np.asarray(n_render, dtype=np.float64)
    n_depth = np.asarray(n_depth, dtype=np.float64)
    mask = np.any(n_render != 0, axis=-1) & np.any(n_depth != 0, axis=-1)
    return float(np.abs(n_render - n_depth)[mask].sum()), mask


def normal_consistency_grad(n_render, n_depth) -> np.ndarray:
    """Subgradient of :func:`normal_consistency` w.r.t. ``n_render``; 0 where components agree."""
    _, mask = normal_consistency(n_render, n_depth)
    return np.sign(np.asarray(n_render, dtype=np.float64) - n_depth) * mask[..., None]


def geometric_loss(scene, output: RenderOutput, cam: CameraModel) -> GeometricLoss:
    """Unweighted scale and normal terms of the geometric regularizer for one view."""
    scene = as_scene(scene)
    scale_term = float(scene.scales.min(axis=1).sum()) if len(scene) else 0.0
    n_depth = pseudo_normal_from_depth(output.depth, cam)
    normal_term, mask = normal_consistency(output.normal, n_depth)
    empty = not mask.any()
    if empty:
        logger.warning("no pixels with defined pseudo-normals; normal term is 0")
    return GeometricLoss(scale_term, normal_term, empty)


# parameterization

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


def quat_backward(quats, g_R) -> np.ndarray:
    """Gradient w.r.t. raw (unnormalized) quaternions given ``dL/dR``."""
    norm = np.linalg.norm(quats, axis=1, keepdims=True)
    q = quats / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    G = g_R
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
              + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    gy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
              - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    gz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
              + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    gq = np.stack([gw, gx, gy, gz], axis=1)
    return (gq - q * np.sum(gq * q, axis=1, keepdims=True)) / norm


def _sh_backward(scene: GaussianScene, cam_center, g_colors):
    """Chain view-evaluated colour gradients to SH coefficients and means."""
    g_rgb = np.zeros_like(scene.rgb)
    g_rgb[:, 0] = g_colors
    g_means = np.zeros_like(scene.means)
    if scene.sh_degree == 1:
        diff = scene.means - np.asarray(cam_center)
        r = np.maximum(np.linalg.norm(diff, axis=1, keepdims=True), 1e-12)
        d = diff / r
        x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
        g_rgb[:, 1] = -SH_C1 * y * g_colors
        g_rgb[:, 2] = SH_C1 * z * g_colors
        g_rgb[:, 3] = -SH_C1 * x * g_colors
        # colour = base + C1 * v . d with v = (-c3, -c1, c2) per channel
        v = np.stack([-scene.rgb[:, 3], -scene.rgb[:, 1], scene.rgb[:, 2]], axis=1)
        g_d = SH_C1 * np.einsum("nkc,nc->nk", v, g_colors)
        g_means = (g_d - d * np.sum(g_d * d, axis=1, keepdims=True)) / r
    return g_rgb, g_means


def scene_gradients(scene: GaussianScene, cam: CameraModel, target, cfg: FitConfig,
                    render_cfg: RenderConfig | None = None, terms=("photometric", "scale", "normal"),
                    signs: dict | None = None):
    """Loss terms and gradients w.r.t. natural parameters of ``scene``.

    Natural parameters are means, raw quaternions, scales, opacities and SH
    coefficients. With ``signs`` given, each L1 term is replaced by its
    linearization ``sum(sign * residual)`` using those frozen signs, which
    is what the finite-difference oracle needs near L1 kinks. Returns
    ``(losses, grads, signs, output)``.
    """
    render_cfg = render_cfg or RenderConfig()
    frame = _Frame(scene, cam, render_cfg)
    out = frame.forward()
    H, W = cam.height, cam.width
    losses = {"photometric": 0.0, "scale": 0.0, "normal": 0.0}
    used_signs = {}
    g_color = np.zeros((H, W, 3))
    g_depth = np.zeros((H, W))
    g_normal = np.zeros((H, W, 3))
    if "photometric" in terms:
        target = np.asarray(target, dtype=np.float64)
        if target.shape != out.color.shape:
            raise DimensionError(f"target {target.shape} does not match render {out.color.shape}")
        resid = out.color - target
        sg = np.sign(resid) if signs is None else signs["photometric"]
        used_signs["photometric"] = sg
        losses["photometric"] = float(np.mean(sg * resid))
        g_color = cfg.photometric_weight * sg / resid.size
    if "normal" in terms:
        n_depth = pseudo_normal_from_depth(out.depth, cam)
        resid = out.normal - n_depth
        sg = normal_consistency_grad(out.normal, n_depth) if signs is None else signs["normal"]
        used_signs["normal"] = sg
        losses["normal"] = float(np.sum(sg * resid))
        g_normal = cfg.lambda_n * sg
        g_depth = pseudo_normal_backward(out.depth, cam, -cfg.lambda_n * sg)
    g = frame.backward(g_color, g_depth, g_normal)
    g_scales = g["scales"]
    if "scale" in terms and len(scene):
        k = np.argmin(scene.scales, axis=1)
        losses["scale"] = float(scene.scales[np.arange(len(scene)), k].sum())
        g_scales = g_scales.copy()
        g_scales[np.arange(len(scene)), k] += cfg.lambda_s
    g_rgb, g_means_sh = _sh_backward(scene, cam.center, g["colors"])
    grads = {
        "means": g["means"] + g_means_sh,
        "quats": quat_backward(scene.quats, g["rotations"]),
        "scales": g_scales,
        "opacities": g["opacities"],
        "rgb": g_rgb,
    }
    losses["total"] = (cfg.photometric_weight * losses["photometric"] + cfg.lambda_s * losses["scale"]
                       + cfg.lambda_n * losses["normal"])
    return losses, grads, used_signs, out


def gradient_check(scene, cam: CameraModel, target, selector: str, eps: float = 1e-4,
                   cfg: FitConfig | None = None, render_cfg: RenderConfig | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``selector`` is ``"photometric"``, ``"scale"`` or ``"normal"``. Only
    parameters with ``|analytic| > 1e-6`` are compared. L1 terms are
    differenced through their frozen-sign linearization so a difference
    step straddling a kink does not pollute the oracle.
    """
    scene = as_scene(scene).copy()
    cfg = cfg or FitConfig(lambda_s=1.0, lambda_n=1.0)
    if selector not in ("photometric", "scale", "normal"):
        raise ValueError(f"unknown loss selector {selector!r}")
    weight = {"photometric": cfg.photometric_weight, "scale": cfg.lambda_s, "normal": cfg.lambda_n}[selector]
    terms = (selector,)
    _, grads, signs, _ = scene_gradients(scene, cam, target, cfg, render_cfg, terms)

    def value(sc):
        losses, _, _, _ = scene_gradients(sc, cam, target, cfg, render_cfg, terms, signs=signs)
        return weight * losses[selector]

    worst = 0.0
    for group, attr in (("means", "means"), ("quats", "quats"), ("scales", "scales"),
                        ("opacities", "opacities"), ("rgb", "rgb")):
        arr = getattr(scene, attr)
        for idx in np.ndindex(arr.shape):
            a = grads[group][idx]
            if abs(a) <= 1e-6:
                continue
            plus = scene.copy()
            getattr(plus, attr)[idx] += eps
            minus = scene.copy()
            getattr(minus, attr)[idx] -= eps
            num = (value(plus) - value(minus)) / (2 * eps)
            worst = max(worst, abs(a - num) / max(abs(a), abs(num)))
    return worst


class _Adam:
    def __init__(self, lrs: dict, betas=(0.9, 0.999), eps=1e-15):
        self.lrs = lrs
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            params[k] -= self.lrs[k] * mhat / (np.sqrt(vhat) + self.eps)

    def keep(self, mask):
        for k in self.m:
            self.m[k] = self.m[k][mask]
            self.v[k] = self.v[k][mask]


def _to_raw(scene: GaussianScene) -> dict:
    return {"means": scene.means.copy(), "quats": scene.quats.copy(),
            "scales": np.log(np.maximum(scene.scales, SCALE_FLOOR)),
            "opacities": _logit(scene.opacities), "rgb": scene.rgb.copy()}


def _from_raw(raw: dict) -> GaussianScene:
    return GaussianScene(raw["means"], raw["quats"], np.exp(raw["scales"]),
                         _sigmoid(raw["opacities"]), raw["rgb"])


def scene_extent(scene: GaussianScene) -> float:
    if len(scene) == 0:
        return 1.0
    c = scene.means.mean(axis=0)
    return float(max(np.linalg.norm(scene.means - c, axis=1).max(), 1e-3))


def fit(initial, views: Sequence[tuple], cfg: FitConfig | None = None,
        render_cfg: RenderConfig | None = None, holdout: Sequence[tuple] = ()):
    """Optimize ``initial`` against ``views``, a sequence of ``(camera, image)``.

    Returns the optimized scene and a :class:`FitReport`. One view is used
    per iteration, cycling through a seeded permutation each pass.
    """
    cfg = cfg or FitConfig()
    render_cfg = render_cfg or RenderConfig()
    scene = as_scene(initial).copy()
    if not views:
        raise ValueError("fit needs at least one posed image")
    report = FitReport()
    if cfg.iterations == 0:
        report.final_median_min_scale = float(np.median(scene.scales.min(axis=1))) if len(scene) else float("nan")
        report.heldout_error = _mean_error(scene, holdout or views, render_cfg)
        return scene, report
    lrs = dict(FitConfig().learning_rates)
    lrs.update(cfg.learning_rates)
    lrs["means"] = lrs["means"] * scene_extent(scene)
    raw = _to_raw(scene)
    opt = _Adam(lrs)
    rng = np.random.default_rng(cfg.seed)
    order = []
    log_floor = math.log(SCALE_FLOOR)
    for it in range(cfg.iterations):
        if not order:
            order = list(rng.permutation(len(views)))
        cam, target = views[order.pop()]
        current = _from_raw(raw)
        losses, grads, _, _ = scene_gradients(current, cam, target, cfg, render_cfg)
        if not math.isfinite(losses["total"]):
            raise NonFiniteError(f"non-finite loss at iteration {it}; {_blame(raw, grads)}")
        raw_grads = {
            "means": grads["means"],
            "quats": grads["quats"],
            "scales": grads["scales"] * current.scales,
            "opacities": grads["opacities"] * current.opacities * (1 - current.opacities),
            "rgb": grads["rgb"],
        }
        for k, g in raw_grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in parameter group {k!r} at iteration {it}")
        report.photometric.append(losses["photometric"])
        report.scale_term.append(losses["scale"])
        report.normal_term.append(losses["normal"])
        report.total.append(losses["total"])
        opt.step(raw, raw_grads)
        raw["quats"] /= np.linalg.norm(raw["quats"], axis=1, keepdims=True)
        np.maximum(raw["scales"], log_floor, out=raw["scales"])
        np.clip(raw["rgb"][:, 0], 0.0, 1.0, out=raw["rgb"][:, 0])
        for k, v in raw.items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"parameter group {k!r} became non-finite at iteration {it}")
        if cfg.prune_interval and (it + 1) % cfg.prune_interval == 0:
            keep = _sigmoid(raw["opacities"]) >= cfg.opacity_prune_threshold
            if not keep.all():
                for k in raw:
                    raw[k] = raw[k][keep]
                opt.keep(keep)
        report.primitive_counts.append(len(raw["means"]))
    scene = _from_raw(raw)
    report.final_median_min_scale = float(np.median(scene.scales.min(axis=1))) if len(scene) else float("nan")
    report.heldout_error = _mean_error(scene, holdout or views, render_cfg)
    return scene, report


def _blame(raw, grads) -> str:
    for k in GROUPS:
        if not np.all(np.isfinite(raw[k])):
            return f"parameter group {k!r} holds non-finite values"
    for k in GROUPS:
        if not np.all(np.isfinite(grads[k])):
            return f"gradient of parameter group {k!r} is non-finite"
    return "parameters are finite, so the target images are suspect"


def _mean_error(scene, views, render_cfg) -> float:
    errs = [photometric_loss(render(scene, cam, render_cfg), img) for cam, img in views]
    return float(np.mean(errs)) if errs else float("nan")
