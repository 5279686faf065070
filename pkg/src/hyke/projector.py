"""Tomographic measurement model: parallel-beam projector, exact adjoint,
count scaling with a uniform randoms plane, and Poisson sampling.

The forward projector integrates along rays with bilinear interpolation at
half-pixel steps; the backprojector applies the transpose of the very same
weights, so <Gx, y> == <x, G^T y> holds to rounding error by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from . import diffcore
from .diffcore import Tensor

__all__ = [
    "ProjectorConfig",
    "SinogramSeq",
    "radon_forward",
    "backproject",
    "measurement_expectation",
    "sample_poisson",
    "expected_counts",
]

RAY_STEP = 0.5  # half-pixel sampling along each ray


@dataclass
class ProjectorConfig:
    image_height: int = 128
    image_width: int = 128
    num_angles: int = 160
    num_bins: int = 128
    efficiencies: np.ndarray | None = None  # per-bin, default all ones
    randoms_fraction: float = 0.2
    target_total_counts: float = 1.8e7

    def __post_init__(self):
        if self.num_angles < 1 or self.num_bins < 1:
            raise ValueError("need at least one angle and one bin")
        if not (0.0 <= self.randoms_fraction < 1.0):
            raise ValueError("randoms_fraction must lie in [0, 1)")
        if self.efficiencies is None:
            self.efficiencies = np.ones(self.num_bins)
        else:
            self.efficiencies = np.asarray(self.efficiencies, dtype=np.float64)
            if self.efficiencies.shape != (self.num_bins,):
                raise ValueError("efficiencies must have one entry per bin")
            if np.any(self.efficiencies <= 0.0):
                raise ValueError("efficiencies must be positive")

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.num_angles) * (np.pi / self.num_angles)


@dataclass
class SinogramSeq:
    """[T, A, B] projection data, either model expectations or integer counts."""

    data: np.ndarray
    kind: str  # "expected" | "measured"
    scale_factor: float = 1.0
    randoms_level: float = 0.0
    randoms_fraction: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("expected", "measured"):
            raise ValueError(f"unknown sinogram kind {self.kind!r}")
        if np.any(self.data < 0):
            raise ValueError("sinogram data must be nonnegative")
        if self.kind == "measured" and not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError("measured sinograms hold integer counts")


@njit(cache=True, parallel=True)
def _radon_fwd(images, cos_t, sin_t, n_bins, out):
    frames, H, W = images.shape
    A = cos_t.shape[0]
    cx = (W - 1) / 2.0
    cy = (H - 1) / 2.0
    half = 0.5 * math.sqrt(H * H + W * W) + 1.0
    n_samp = int(2.0 * half / RAY_STEP) + 1
    for f in prange(frames):
        img = images[f]
        for a in range(A):
            c = cos_t[a]
            s = sin_t[a]
            for b in range(n_bins):
                off = b - (n_bins - 1) / 2.0
                acc = 0.0
                for i in range(n_samp):
                    u = -half + i * RAY_STEP
                    px = cx + off * c - u * s
                    py = cy + off * s + u * c
                    ix = int(math.floor(px))
                    iy = int(math.floor(py))
                    if ix < -1 or ix >= W or iy < -1 or iy >= H:
                        continue
                    fx = px - ix
                    fy = py - iy
                    if 0 <= ix < W and 0 <= iy < H:
                        acc += (1.0 - fx) * (1.0 - fy) * img[iy, ix]
                    if 0 <= ix + 1 < W and 0 <= iy < H:
                        acc += fx * (1.0 - fy) * img[iy, ix + 1]
                    if 0 <= ix < W and 0 <= iy + 1 < H:
                        acc += (1.0 - fx) * fy * img[iy + 1, ix]
                    if 0 <= ix + 1 < W and 0 <= iy + 1 < H:
                        acc += fx * fy * img[iy + 1, ix + 1]
                out[f, a, b] = acc * RAY_STEP


@njit(cache=True, parallel=True)
def _radon_adj(sinos, cos_t, sin_t, H, W, out):
    frames = sinos.shape[0]
    A = cos_t.shape[0]
    n_bins = sinos.shape[2]
    cx = (W - 1) / 2.0
    cy = (H - 1) / 2.0
    half = 0.5 * math.sqrt(H * H + W * W) + 1.0
    n_samp = int(2.0 * half / RAY_STEP) + 1
    for f in prange(frames):
        img = out[f]
        for a in range(A):
            c = cos_t[a]
            s = sin_t[a]
            for b in range(n_bins):
                val = sinos[f, a, b] * RAY_STEP
                if val == 0.0:
                    continue
                off = b - (n_bins - 1) / 2.0
                for i in range(n_samp):
                    u = -half + i * RAY_STEP
                    px = cx + off * c - u * s
                    py = cy + off * s + u * c
                    ix = int(math.floor(px))
                    iy = int(math.floor(py))
                    if ix < -1 or ix >= W or iy < -1 or iy >= H:
                        continue
                    fx = px - ix
                    fy = py - iy
                    if 0 <= ix < W and 0 <= iy < H:
                        img[iy, ix] += (1.0 - fx) * (1.0 - fy) * val
                    if 0 <= ix + 1 < W and 0 <= iy < H:
                        img[iy, ix + 1] += fx * (1.0 - fy) * val
                    if 0 <= ix < W and 0 <= iy + 1 < H:
                        img[iy + 1, ix] += (1.0 - fx) * fy * val
                    if 0 <= ix + 1 < W and 0 <= iy + 1 < H:
                        img[iy + 1, ix + 1] += fx * fy * val


def _forward_values(images: np.ndarray, cfg: ProjectorConfig) -> np.ndarray:
    lead = images.shape[:-2]
    H, W = images.shape[-2:]
    if (H, W) != (cfg.image_height, cfg.image_width):
        raise ValueError(f"image shape {(H, W)} != config "
                         f"{(cfg.image_height, cfg.image_width)}")
    flat = np.ascontiguousarray(images.reshape((-1, H, W)))
    out = np.zeros((flat.shape[0], cfg.num_angles, cfg.num_bins))
    _radon_fwd(flat, np.cos(cfg.angles), np.sin(cfg.angles), cfg.num_bins, out)
    return out.reshape(lead + (cfg.num_angles, cfg.num_bins))


def _adjoint_values(sinos: np.ndarray, cfg: ProjectorConfig) -> np.ndarray:
    lead = sinos.shape[:-2]
    A, B = sinos.shape[-2:]
    if (A, B) != (cfg.num_angles, cfg.num_bins):
        raise ValueError(f"sinogram shape {(A, B)} != config "
                         f"{(cfg.num_angles, cfg.num_bins)}")
    flat = np.ascontiguousarray(sinos.reshape((-1, A, B)))
    out = np.zeros((flat.shape[0], cfg.image_height, cfg.image_width))
    _radon_adj(flat, np.cos(cfg.angles), np.sin(cfg.angles),
               cfg.image_height, cfg.image_width, out)
    return out.reshape(lead + (cfg.image_height, cfg.image_width))


def _fw_radon(x, *, cfg):
    return _forward_values(x, cfg)


def _vjp_radon(vals, out, *, cfg):
    return lambda g: (_adjoint_values(g, cfg),)


def _fw_radon_adj(y, *, cfg):
    return _adjoint_values(y, cfg)


def _vjp_radon_adj(vals, out, *, cfg):
    return lambda g: (_forward_values(g, cfg),)


diffcore.register_op("radon", _fw_radon, _vjp_radon, linear=True)
diffcore.register_op("radon_adjoint", _fw_radon_adj, _vjp_radon_adj, linear=True)


def radon_forward(image, cfg: ProjectorConfig):
    """Project image[..., H, W] to sinogram[..., A, B]; differentiable on Tensors."""
    if isinstance(image, Tensor):
        return diffcore.record("radon", image, cfg=cfg)
    return _forward_values(np.asarray(image, dtype=np.float64), cfg)


def backproject(sinogram, cfg: ProjectorConfig):
    """Exact adjoint of radon_forward (same interpolation weights, transposed)."""
    if isinstance(sinogram, Tensor):
        return diffcore.record("radon_adjoint", sinogram, cfg=cfg)
    return _adjoint_values(np.asarray(sinogram, dtype=np.float64), cfg)


def measurement_expectation(activity_seq: np.ndarray, cfg: ProjectorConfig) -> SinogramSeq:
    """Expected sinogram counts for an activity sequence.

    Projects each frame, applies per-bin efficiencies, scales the whole
    sequence so the noiseless trues total target_total_counts*(1 - r),
    then adds a uniform randoms expectation carrying the remaining
    fraction r of the count budget.
    """
    activity = np.asarray(activity_seq, dtype=np.float64)
    if activity.ndim != 3:
        raise ValueError("activity sequence must be [T, H, W]")
    if np.any(activity < 0):
        raise ValueError("activity must be nonnegative")
    trues = _forward_values(activity, cfg) * cfg.efficiencies[None, None, :]
    total = trues.sum()
    if total <= 0.0 and cfg.target_total_counts > 0:
        raise ValueError("cannot scale an all-zero activity sequence to a "
                         "positive count target")
    r = cfg.randoms_fraction
    scale = cfg.target_total_counts * (1.0 - r) / total if total > 0 else 0.0
    randoms_level = cfg.target_total_counts * r / trues.size
    expected = trues * scale + randoms_level
    return SinogramSeq(expected, "expected", scale_factor=scale,
                       randoms_level=randoms_level, randoms_fraction=r)


def sample_poisson(expected: SinogramSeq, seed: int) -> SinogramSeq:
    """Independent Poisson draws per bin; deterministic for a given seed."""
    if expected.kind != "expected":
        raise ValueError("sample_poisson takes an expected sinogram")
    if not np.all(np.isfinite(expected.data)):
        raise ValueError("expected sinogram contains non-finite values")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(expected.data).astype(np.int64)
    return SinogramSeq(counts, "measured", scale_factor=expected.scale_factor,
                       randoms_level=expected.randoms_level,
                       randoms_fraction=expected.randoms_fraction, seed=seed)


def expected_counts(xhat: Tensor, cfg: ProjectorConfig, scale_factor,
                    randoms_level) -> Tensor:
    """Differentiable measurement model for reconstructed activities.

    xhat is [..., T, H, W]; scale_factor broadcasts over leading dims
    (one stored value per sequence). Mirrors measurement_expectation.
    """
    y = diffcore.record("radon", xhat, cfg=cfg)
    y = diffcore.mul(y, Tensor(cfg.efficiencies[None, :]))
    y = diffcore.mul(y, Tensor(np.asarray(scale_factor, dtype=np.float64)))
    return diffcore.add_const(y, np.asarray(randoms_level, dtype=np.float64))
