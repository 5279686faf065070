"""Fully-connected network building blocks on top of the tape engine."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, add, matmul, tanh

__all__ = ["MlpWeights", "mlp_init", "mlp_zero_init", "mlp_apply"]


class MlpWeights:
    """Weights of a dense network: affine layers with tanh between them.

    layers[i] = (W, b) mapping sizes[i] -> sizes[i+1]; W has shape
    [sizes[i], sizes[i+1]] so batched inputs apply as x @ W + b.
    """

    def __init__(self, layers: list[tuple[Tensor, Tensor]]):
        if not layers:
            raise ValueError("MlpWeights needs at least one layer")
        self.layers = layers

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in self.layers:
            out.extend([w, b])
        return out

    def named_tensors(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.layers):
            out.append((f"{prefix}.w{i}", w))
            out.append((f"{prefix}.b{i}", b))
        return out


def mlp_init(sizes: list[int], rng: np.random.Generator, weight_scale: float | None = None,
             out_bias: np.ndarray | None = None) -> MlpWeights:
    """Gaussian init with 1/sqrt(fan_in) scaling; optional fixed output bias."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        s = weight_scale if weight_scale is not None else 1.0 / np.sqrt(max(n_in, 1))
        w = Tensor(rng.normal(0.0, s, size=(n_in, n_out)), requires_grad=True)
        b_vals = np.zeros(n_out)
        if out_bias is not None and i == len(sizes) - 2:
            b_vals = np.asarray(out_bias, dtype=np.float64).copy()
        b = Tensor(b_vals, requires_grad=True)
        layers.append((w, b))
    return MlpWeights(layers)


def mlp_zero_init(sizes: list[int]) -> MlpWeights:
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        layers.append((Tensor(np.zeros((n_in, n_out)), requires_grad=True),
                       Tensor(np.zeros(n_out), requires_grad=True)))
    return MlpWeights(layers)


def mlp_apply(weights: MlpWeights, x) -> Tensor:
    """Run the network on x[..., n_in]: affine + tanh per hidden layer, affine out.

    Differentiable in both the weights and the input.
    """
    h = x if isinstance(x, Tensor) else Tensor(x)
    n_in = weights.layers[0][0].shape[0]
    if h.shape[-1] != n_in:
        raise ValueError(f"mlp input size {h.shape[-1]} != expected {n_in}")
    last = len(weights.layers) - 1
    for i, (w, b) in enumerate(weights.layers):
        h = add(matmul(h, w), b)
        if i != last:
            h = tanh(h)
    return h
