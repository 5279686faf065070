"""Finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Graph, Tensor, backward

__all__ = ["grad_check"]


def grad_check(scalar_function, point, eps: float = 1e-5, num_samples: int | None = None,
               seed: int = 0) -> float:
    """Compare backward() gradients against central finite differences.

    scalar_function takes one Tensor per array in `point` and returns a
    scalar Tensor. Returns the max relative error over all checked
    components, with denominator max(|analytic|, |numeric|, 1e-8). When
    num_samples is given, that many coordinates are drawn at random
    (seeded) instead of sweeping every component.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = [np.asarray(p, dtype=np.float64) for p in point]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    graph = Graph()
    with graph:
        loss = scalar_function(*leaves)
    backward(graph, loss)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]

    coords = [(i, idx) for i, a in enumerate(arrays) for idx in np.ndindex(a.shape)]
    if num_samples is not None and num_samples < len(coords):
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=num_samples, replace=False)
        coords = [coords[j] for j in picked]

    def eval_at(pts):
        out = scalar_function(*[Tensor(p, _validate=False) for p in pts])
        return float(out.values)

    max_rel = 0.0
    for i, idx in coords:
        orig = arrays[i][idx]
        step = eps * max(1.0, abs(orig))
        arrays[i][idx] = orig + step
        f_plus = eval_at(arrays)
        arrays[i][idx] = orig - step
        f_minus = eval_at(arrays)
        arrays[i][idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic[i][idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel
