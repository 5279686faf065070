"""Synthetic ground truth: a brain-like nested-ellipse phantom, per-ROI
Gaussian kinetic parameters, a multi-exponential arterial input function,
and activity sequences generated by the two-tissue compartment model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Tensor
from .kinetics import (
    DEFAULT_DECAY_TAU,
    HybridModel,
    ScanSchedule,
    combine_frames,
    decode_frames,
    make_decode_plan,
)

__all__ = [
    "LabelMap",
    "RoiKineticPrior",
    "FengParams",
    "KineticFields",
    "ScanSchedule",
    "NUM_ROIS",
    "ROI_NAMES",
    "build_label_map",
    "load_label_raster",
    "feng_input",
    "default_roi_priors",
    "sample_kinetics",
    "generate_ground_truth",
]

NUM_ROIS = 7
ROI_NAMES = {
    0: "background",
    1: "skull",
    2: "gray_matter",
    3: "white_matter",
    4: "ventricle_left",
    5: "ventricle_right",
    6: "deep_nucleus",
    7: "tumor",
}

PARAM_NAMES = ("k1", "k2", "k3", "k4", "V")


@dataclass
class LabelMap:
    """H x W integer grid; 0 is background, 1..R are ROIs."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError("label map must be 2-D")
        if self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def rois(self) -> list[int]:
        present = np.unique(self.labels)
        return [int(r) for r in present if r != 0]

    def mask(self, label: int) -> np.ndarray:
        m = self.labels == label
        if not m.any():
            raise ValueError(f"label {label} has no pixels")
        return m


@dataclass
class RoiKineticPrior:
    """Gaussian mean/std per kinetic parameter for one ROI."""

    means: dict
    stds: dict

    def __post_init__(self):
        for name in PARAM_NAMES:
            if name not in self.means or name not in self.stds:
                raise ValueError(f"prior missing parameter {name!r}")
            if self.means[name] <= 0:
                raise ValueError(f"prior mean for {name} must be positive")
            if self.stds[name] < 0:
                raise ValueError(f"prior std for {name} must be nonnegative")
        if not (0.0 < self.means["V"] < 1.0):
            raise ValueError("V prior mean must lie in (0, 1)")


@dataclass
class FengParams:
    """Multi-exponential arterial input: fast bolus spike plus slow tails."""

    a1: float = 851.1    # concentration / min
    a2: float = 21.88    # concentration
    a3: float = 20.81
    l1: float = 4.134    # 1 / min
    l2: float = 0.0104
    l3: float = 0.1191

    def __post_init__(self):
        if not (self.l1 > self.l3 > self.l2 > 0):
            raise ValueError("decay rates must satisfy L1 > L3 > L2 > 0")


def feng_input(params: FengParams, t) -> np.ndarray | float:
    """Plasma concentration C_P(t) = (A1*t - A2 - A3)e^(-L1 t) + A2 e^(-L2 t)
    + A3 e^(-L3 t), evaluated in a regrouped form that is exactly zero at t=0."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("input function is defined for t >= 0")
    e1 = np.exp(-params.l1 * t_arr)
    out = (params.a1 * t_arr * e1
           + params.a2 * (np.exp(-params.l2 * t_arr) - e1)
           + params.a3 * (np.exp(-params.l3 * t_arr) - e1))
    return out if np.ndim(t) else float(out)


def default_roi_priors() -> dict[int, RoiKineticPrior]:
    """FDG-flavoured defaults chosen to give visually distinct TACs per ROI;
    fully overridable through the experiment config."""
    table = {
        # label: (k1,     k2,     k3,     k4,     V)
        1: (0.025, 0.180, 0.010, 0.0080, 0.020),   # skull
        2: (0.102, 0.150, 0.045, 0.0300, 0.050),   # gray matter
        3: (0.054, 0.120, 0.030, 0.0250, 0.030),   # white matter
        4: (0.012, 0.120, 0.002, 0.0010, 0.015),   # ventricle, CSF-like
        5: (0.012, 0.120, 0.002, 0.0010, 0.015),
        6: (0.090, 0.150, 0.040, 0.0400, 0.040),   # deep nucleus
        7: (0.140, 0.150, 0.100, 0.0030, 0.060),   # tumor, trapping-dominant
    }
    priors = {}
    for label, vals in table.items():
        means = dict(zip(PARAM_NAMES, vals))
        stds = {name: 0.1 * mean for name, mean in means.items()}
        priors[label] = RoiKineticPrior(means, stds)
    return priors


def _ellipse_mask(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def build_label_map(width: int, height: int, seed: int) -> LabelMap:
    """Brain-like phantom: skull ring, gray shell, white core, two ventricle
    lobes, a deep nucleus, and a small tumor inside white matter. Geometry is
    jittered a few percent per seed; the same seed always yields the same map.
    """
    if width < 16 or height < 16:
        raise ValueError("phantom needs at least 16x16 pixels to place all ROIs")
    rng = np.random.default_rng(seed)
    jit = lambda lo, hi: 1.0 + rng.uniform(lo, hi)
    h, w = height, width
    cy, cx = (h - 1) / 2.0 + rng.uniform(-0.01, 0.01) * h, \
             (w - 1) / 2.0 + rng.uniform(-0.01, 0.01) * w
    ry1, rx1 = 0.47 * h * jit(-0.03, 0.03), 0.44 * w * jit(-0.03, 0.03)

    labels = np.zeros((h, w), dtype=np.uint8)
    labels[_ellipse_mask(h, w, cy, cx, ry1, rx1)] = 1                  # skull
    labels[_ellipse_mask(h, w, cy, cx, 0.90 * ry1, 0.90 * rx1)] = 2    # gray
    labels[_ellipse_mask(h, w, cy, cx, 0.70 * ry1, 0.70 * rx1)] = 3    # white
    vy = cy - 0.06 * h
    vry, vrx = 0.15 * h * jit(-0.1, 0.1), 0.060 * w * jit(-0.1, 0.1)
    labels[_ellipse_mask(h, w, vy, cx - 0.11 * w, vry, vrx) & (labels == 3)] = 4
    labels[_ellipse_mask(h, w, vy, cx + 0.11 * w, vry, vrx) & (labels == 3)] = 5
    ny = cy + 0.17 * h * jit(-0.05, 0.05)
    labels[_ellipse_mask(h, w, ny, cx, 0.075 * h, 0.11 * w) & (labels == 3)] = 6
    tumor_r = max(1.0, 0.05 * min(h, w) * jit(-0.15, 0.15))
    ty = cy - 0.20 * h + rng.uniform(-0.03, 0.03) * h
    tx = cx + 0.16 * w + rng.uniform(-0.03, 0.03) * w
    labels[_ellipse_mask(h, w, ty, tx, tumor_r, tumor_r) & (labels == 3)] = 7

    # anchors guarantee every ROI survives small grids
    anchors = {
        1: (int(round(cy)), int(round(cx + (rx1 + 0.90 * rx1) / 2.0))),
        2: (int(round(cy)), int(round(cx + (0.90 * rx1 + 0.70 * rx1) / 2.0))),
        3: (int(round(cy - 0.5 * ry1)), int(round(cx))),
        4: (int(round(vy)), int(round(cx - 0.11 * w))),
        5: (int(round(vy)), int(round(cx + 0.11 * w))),
        6: (int(round(ny)), int(round(cx))),
        7: (int(round(ty)), int(round(tx))),
    }
    for label, (ay, ax) in anchors.items():
        if not (labels == label).any():
            if not (0 <= ay < h and 0 <= ax < w):
                raise ValueError(f"could not place ROI {label} on a {h}x{w} grid")
            labels[ay, ax] = label
    for label in range(1, NUM_ROIS + 1):
        if not (labels == label).any():
            raise ValueError(f"could not place ROI {label} on a {h}x{w} grid")
    return LabelMap(labels)


def load_label_raster(path, width: int, height: int) -> LabelMap:
    """Read a user-supplied raw u8 label raster (row-major H x W)."""
    raw = np.fromfile(Path(path), dtype=np.uint8)
    if raw.size != width * height:
        raise ValueError(f"raster holds {raw.size} bytes, expected {width * height}")
    return LabelMap(raw.reshape(height, width))


@dataclass
class KineticFields:
    """Per-pixel physical kinetic parameters of the data-generating model."""

    k1: np.ndarray
    k2: np.ndarray
    k3: np.ndarray
    k4: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        shape = self.k1.shape
        for name in PARAM_NAMES:
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError("all parameter planes must share one shape")

    @property
    def shape(self):
        return self.k1.shape

    def planes(self) -> np.ndarray:
        return np.stack([self.k1, self.k2, self.k3, self.k4, self.V], axis=0)

    @classmethod
    def from_planes(cls, planes: np.ndarray) -> "KineticFields":
        return cls(*[planes[i] for i in range(5)])


def sample_kinetics(label_map: LabelMap, priors: dict[int, RoiKineticPrior],
                    seed: int) -> KineticFields:
    """Draw per-pixel parameters from each ROI's Gaussians. Rates truncate
    below at 1e-4, V clamps to [0.01, 0.99]; background pixels stay zero."""
    for label in label_map.rois:
        if label not in priors:
            raise ValueError(f"no kinetic prior for ROI {label}")
    rng = np.random.default_rng(seed)
    h, w = label_map.labels.shape
    fields = {name: np.zeros((h, w)) for name in PARAM_NAMES}
    for label in sorted(label_map.rois):
        mask = label_map.labels == label
        n = int(mask.sum())
        prior = priors[label]
        for name in PARAM_NAMES:
            draw = rng.normal(prior.means[name], prior.stds[name], size=n)
            if name == "V":
                draw = np.clip(draw, 0.01, 0.99)
            else:
                draw = np.maximum(draw, 1e-4)
            fields[name][mask] = draw
    return KineticFields(**fields)


def generate_ground_truth(fields: KineticFields, feng: FengParams,
                          schedule: ScanSchedule, dt: float = 0.05,
                          tau: float | None = DEFAULT_DECAY_TAU) -> np.ndarray:
    """Solve the two-tissue model per pixel from zero initial state and
    integrate frames; returns a nonnegative [T, H, W] activity sequence."""
    h, w = fields.shape
    model = HybridModel(state_dim=2, physics="two_tissue", use_neural=False, d_n=0)
    plan = make_decode_plan(model, lambda t: feng_input(feng, t), schedule, dt, tau)
    rates = [Tensor(getattr(fields, n).reshape(-1)) for n in ("k1", "k2", "k3", "k4")]
    try:
        q = decode_frames(rates, None, model, plan)
    except ValueError as e:
        raise ValueError(f"ground-truth solve failed: {e}") from e
    x = combine_frames(q, Tensor(fields.V.reshape(-1, 1)), plan.p_blood)
    out = x.values.reshape(h, w, schedule.n_frames)
    return np.ascontiguousarray(np.moveaxis(out, -1, 0))
