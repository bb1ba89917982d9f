"""Contrastive pretraining of the image encoder.

Images are ``(64, 64, 3)`` float arrays in [0, 1]. The encoder is three
stride-2 convolutions and a dense layer (the feature ``h``) followed by a
two-layer projection head producing ``z``; ``encode`` returns ``z``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from . import nn
from .errors import CheckpointError, DegenerateInputError, DimensionError, NoNegativesError, NonFiniteError
from .nn import checkpoint
from .nn import functional as F
from .nn.layers import Conv2d, Dense
from .nn.tensor import Tensor
from .render import read_ppm, write_ppm

logger = logging.getLogger(__name__)


@dataclass
class EncoderSpec:
    conv_channels: tuple = (16, 32, 64)
    kernel: int = 3
    stride: int = 2
    feature_dim: int = 256
    hidden_dim: int = 256
    out_dim: int = 128
    temperature: float = 0.07
    resolution: int = 64

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if self.out_dim < 2:
            raise ValueError("out_dim must be at least 2")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class AugmentConfig:
    crop_scale: tuple = (0.6, 1.0)
    flip_p: float = 0.5
    blur_p: float = 0.5
    blur_sigma: tuple = (0.1, 1.0)

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop scale range must lie in (0, 1]")
        for name in ("flip_p", "blur_p"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if min(self.blur_sigma) < 0:
            raise ValueError("blur sigma must be nonnegative")


def crop_resize(image, top, left, side):
    """Bilinear resample of the square ``side`` crop at ``(top, left)`` back to full size."""
    H, W, _ = image.shape
    ys = top + np.arange(H) * (side - 1) / (H - 1)
    xs = left + np.arange(W) * (side - 1) / (W - 1)
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([map_coordinates(image[..., c], [Y, X], order=1, mode="nearest") for c in range(3)], axis=-1)


def blur(image, sigma):
    if sigma <= 0:
        return image.copy()
    return gaussian_filter(image, sigma=(sigma, sigma, 0), mode="reflect", truncate=2.0)


def augment(image, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    H, W, _ = image.shape
    scale = rng.uniform(*cfg.crop_scale)
    side = math.sqrt(scale) * min(H, W)
    top = rng.uniform(0, H - side)
    left = rng.uniform(0, W - side)
    flip = rng.uniform() < cfg.flip_p
    do_blur = rng.uniform() < cfg.blur_p
    sigma = rng.uniform(*cfg.blur_sigma)
    out = image if scale == 1.0 else crop_resize(image, top, left, side)
    if flip:
        out = out[:, ::-1]
    if do_blur:
        out = blur(out, sigma)
    return np.clip(out, 0.0, 1.0)


def augment_pair(image, seed, cfg: AugmentConfig | None = None):
    """Two independently augmented views of ``image``, deterministic in ``seed``."""
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    return augment(image, rng, cfg), augment(image, rng, cfg)


class Encoder:
    """Conv feature extractor plus projection head, owning its parameters."""

    def __init__(self, spec: EncoderSpec | None = None, seed=0):
        self.spec = spec or EncoderSpec()
        s = self.spec
        rng = np.random.default_rng(seed)
        self.params = nn.ParameterSet()
        self.convs = []
        c_in = 3
        size = s.resolution
        for k, c in enumerate(s.conv_channels):
            self.convs.append(Conv2d(self.params, f"conv{k}", c_in, c, s.kernel, rng, s.stride, s.kernel // 2))
            c_in = c
            size = (size + 2 * (s.kernel // 2) - s.kernel) // s.stride + 1
        self.fc = Dense(self.params, "fc", c_in * size * size, s.feature_dim, rng)
        self.head1 = Dense(self.params, "head1", s.feature_dim, s.hidden_dim, rng)
        self.head2 = Dense(self.params, "head2", s.hidden_dim, s.out_dim, rng, gain=1.0)

    def features(self, images) -> Tensor:
        """Pre-projection features ``h`` for a ``(B, H, W, 3)`` batch."""
        images = np.asarray(images)
        r = self.spec.resolution
        if images.ndim != 4 or images.shape[1:] != (r, r, 3):
            raise DimensionError(f"encoder expects (B, {r}, {r}, 3) images, got {images.shape}")
        x = Tensor((images.transpose(0, 3, 1, 2) - 0.5).astype(np.float32))
        for conv in self.convs:
            x = nn.relu(conv(x))
        return nn.relu(self.fc(F.flatten(x)))

    def project(self, images) -> Tensor:
        return self.head2(nn.relu(self.head1(self.features(images))))

    def encode_batch(self, images) -> np.ndarray:
        with nn.no_grad():
            return self.project(images).data.copy()

    def encode(self, image) -> np.ndarray:
        image = np.asarray(image)
        return self.encode_batch(image[None])[0]

    # persistence
    def state(self) -> dict:
        s = self.spec
        meta = {
            "meta.conv_channels": np.array(s.conv_channels, np.float32),
            "meta.dims": np.array([s.kernel, s.stride, s.feature_dim, s.hidden_dim, s.out_dim, s.resolution],
                                  np.float32),
            "meta.temperature": np.array([s.temperature], np.float32),
        }
        return {**meta, **self.params.arrays()}

    def save(self, path):
        checkpoint.save(path, self.state())

    @classmethod
    def from_state(cls, tensors: dict) -> "Encoder":
        try:
            k, stride, fd, hd, od, res = (int(v) for v in tensors["meta.dims"])
            spec = EncoderSpec(tuple(int(c) for c in tensors["meta.conv_channels"]), k, stride, fd, hd, od,
                               # float32 storage; 7 significant digits recover the configured value
                               float(f"{tensors['meta.temperature'][0]:.7g}"), res)
            enc = cls(spec)
            enc.params.load(tensors)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"not an encoder checkpoint: {exc}") from exc
        return enc

    @classmethod
    def load(cls, path) -> "Encoder":
        return cls.from_state(checkpoint.load(path))


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def info_nce(z_i, z_j, tau=0.07, denominator="cross_view") -> Tensor:
    """Mean InfoNCE over all ``2N`` anchors of a batch of positive pairs.

    With ``denominator="cross_view"`` an anchor from one view is scored
    against the ``N`` embeddings of the other view (its positive plus
    ``N - 1`` negatives). ``"simclr"`` scores it against all ``2N - 1``
    other embeddings in the batch.
    """
    z_i = z_i if isinstance(z_i, Tensor) else Tensor(np.asarray(z_i))
    z_j = z_j if isinstance(z_j, Tensor) else Tensor(np.asarray(z_j, dtype=z_i.dtype))
    N = z_i.shape[0]
    if N < 2:
        raise NoNegativesError("InfoNCE needs at least two pairs per batch")
    if z_j.shape != z_i.shape:
        raise DimensionError(f"view shapes differ: {z_i.shape} vs {z_j.shape}")
    z = F.l2_normalize(nn.concat([z_i, z_j], axis=0), axis=1)
    sim = nn.mul(F.gram(z), 1.0 / tau)
    idx = np.arange(2 * N)
    targets = (idx + N) % (2 * N)
    if denominator == "simclr":
        mask = ~np.eye(2 * N, dtype=bool)
    elif denominator == "cross_view":
        mask = np.zeros((2 * N, 2 * N), bool)
        mask[:N, N:] = True
        mask[N:, :N] = True
    else:
        raise ValueError(f"unknown denominator convention {denominator!r}")
    return F.softmax_cross_entropy_rows(sim, targets, mask)


def candidates_per_anchor(n_pairs, denominator="cross_view") -> int:
    return n_pairs if denominator == "cross_view" else 2 * n_pairs - 1


@dataclass
class PretrainReport:
    losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)


def pretrain(images, spec: EncoderSpec | None = None, aug: AugmentConfig | None = None, epochs=20,
             batch=256, seed=0, lr=1e-3, denominator="cross_view", log_every=0):
    """Train an encoder on ``images`` (``(M, H, W, 3)``) by minimizing InfoNCE.

    Each epoch visits a seeded permutation in batches of ``batch`` source
    images (the last partial batch is dropped); every source contributes a
    pair of augmented views. Returns ``(encoder, PretrainReport)``.
    """
    spec = spec or EncoderSpec()
    aug = aug or AugmentConfig()
    images = np.asarray(images)
    if len(images) < 2 * batch:
        raise ValueError(f"dataset of {len(images)} images is smaller than 2 x batch ({2 * batch})")
    enc = Encoder(spec, seed=seed)
    opt = nn.Adam(enc.params, lr=lr)
    rng = np.random.default_rng(seed + 1)
    report = PretrainReport()
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        batch_losses = []
        for start in range(0, len(order) - batch + 1, batch):
            idx = order[start:start + batch]
            seeds = rng.integers(0, 2**63, size=batch)
            pairs = [augment_pair(images[i], int(s), aug) for i, s in zip(idx, seeds)]
            views = np.stack([p[0] for p in pairs] + [p[1] for p in pairs]).astype(np.float32)
            enc.params.zero_grad()
            z = enc.project(views)
            loss = info_nce(z[:batch], z[batch:], spec.temperature, denominator)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"InfoNCE loss is {value} at epoch {epoch}, step {step}")
            loss.backward()
            for name, p in enc.params.items():
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NonFiniteError(f"non-finite gradient for {name} at epoch {epoch}, step {step}")
            opt.step()
            report.losses.append(value)
            batch_losses.append(value)
            step += 1
            if log_every and step % log_every == 0:
                logger.info("epoch %d step %d loss %.4f", epoch, step, value)
        report.epoch_losses.append(float(np.mean(batch_losses)))
    return enc, report


def separation(encoder: Encoder, images, aug: AugmentConfig | None = None, seed=0):
    """Mean cosine similarity of positive pairs and of negative pairs on ``images``.

    Each image yields two augmented views; positives pair an image's
    views, negatives pair view one of an image with view two of every
    other image.
    """
    aug = aug or AugmentConfig()
    rng = np.random.default_rng(seed)
    pairs = [augment_pair(img, int(rng.integers(0, 2**63)), aug) for img in images]
    a = encoder.encode_batch(np.stack([p[0] for p in pairs]).astype(np.float32)).astype(np.float64)
    b = encoder.encode_batch(np.stack([p[1] for p in pairs]).astype(np.float32)).astype(np.float64)
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    S = a @ b.T
    n = len(images)
    pos = float(np.trace(S) / n)
    neg = float((S.sum() - np.trace(S)) / (n * (n - 1)))
    return pos, neg


# dataset directory: NNNNN.ppm images plus manifest.json

def save_dataset(directory, images, poses=None, meta=None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, img in enumerate(images):
        name = f"{k:05d}.ppm"
        write_ppm(d / name, img)
        entry = {"file": name}
        if poses is not None:
            entry["pose"] = poses[k]
        entries.append(entry)
    manifest = {"count": len(entries), "resolution": list(np.asarray(images[0]).shape[:2]) if entries else None,
                "images": entries, **(meta or {})}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def load_dataset(directory) -> np.ndarray:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    return np.stack([read_ppm(d / e["file"]) for e in manifest["images"]]).astype(np.float32)
