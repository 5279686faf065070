"""Encoding-decoding reconstruction: a learnable ramp-initialized filter
followed by exact-adjoint backprojection, a per-pixel temporal encoder that
infers parametric images, and kinetics decoding back to activity sequences.
A fixed-filter FBP baseline shares the same projector."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore
from .diffcore import MlpWeights, Tensor, mlp_apply, mlp_init
from .diffcore.tensor import _conv1d_same_values
from .kinetics import DecodePlan, HybridModel, combine_frames, decode_frames
from .projector import ProjectorConfig, backproject

__all__ = [
    "ramp_kernel",
    "init_filter",
    "EncoderWeights",
    "init_encoder",
    "ParametricImages",
    "ReconModel",
    "build_recon_model",
    "filtered_backprojection_encode",
    "fbp_baseline",
    "kinetic_encode",
    "decode_activity",
    "reconstruct_batch",
]

# initial output-head biases: softplus(-2.25) ~ 0.1 /min rates, sigmoid(-2.9) ~ 0.05 V
RATE_BIAS_INIT = -2.25
V_BIAS_INIT = -2.9


def ramp_kernel(num_bins: int) -> np.ndarray:
    """Discrete spatial-domain ramp filter, length 2B-1 (unit bin spacing)."""
    n = np.arange(-(num_bins - 1), num_bins)
    kernel = np.zeros(n.size)
    kernel[n == 0] = 0.25
    odd = n % 2 == 1
    kernel[odd] = -1.0 / (np.pi ** 2 * n[odd].astype(np.float64) ** 2)
    return kernel


def init_filter(num_bins: int) -> Tensor:
    return Tensor(ramp_kernel(num_bins), requires_grad=True)


@dataclass
class EncoderWeights:
    """Per-pixel temporal network plus one depthwise 3x3 refinement conv."""

    temporal: MlpWeights
    conv_kernel: Tensor   # [n_planes, 3, 3]
    conv_bias: Tensor     # [n_planes]
    n_rates: int
    d_n: int

    @property
    def n_planes(self) -> int:
        return self.n_rates + self.d_n + 1

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = self.temporal.named_tensors("psi.temporal")
        out.append(("psi.conv_kernel", self.conv_kernel))
        out.append(("psi.conv_bias", self.conv_bias))
        return out


def init_encoder(n_frames: int, n_rates: int, d_n: int, rng: np.random.Generator,
                 hidden: int = 32) -> EncoderWeights:
    n_planes = n_rates + d_n + 1
    out_bias = np.concatenate([np.full(n_rates, RATE_BIAS_INIT),
                               np.zeros(d_n), [V_BIAS_INIT]])
    temporal = mlp_init([n_frames, hidden, n_planes], rng, out_bias=out_bias)
    delta = np.zeros((n_planes, 3, 3))
    delta[:, 1, 1] = 1.0
    return EncoderWeights(temporal=temporal,
                          conv_kernel=Tensor(delta, requires_grad=True),
                          conv_bias=Tensor(np.zeros(n_planes), requires_grad=True),
                          n_rates=n_rates, d_n=d_n)


@dataclass
class ParametricImages:
    """Inferred per-pixel kinetics, flattened over [S, H, W] pixels."""

    rates: list        # n_rates tensors of shape [P], strictly positive
    c_n: Tensor | None  # [P, d_n]
    V: Tensor          # [P], in (0, 1)
    batch_shape: tuple  # (S, H, W)


def filtered_backprojection_encode(sinograms, phi: Tensor,
                                   cfg: ProjectorConfig) -> Tensor:
    """x~ = (pi/A) * G^T(h_phi(y)) per frame; differentiable in phi.

    sinograms is [..., A, B]; the 1-D filter phi runs along bins.
    """
    y = diffcore.as_tensor(sinograms)
    if y.shape[-2:] != (cfg.num_angles, cfg.num_bins):
        raise ValueError(f"sinogram shape {y.shape[-2:]} != config "
                         f"({cfg.num_angles}, {cfg.num_bins})")
    filtered = diffcore.conv1d_same(y, phi)
    bp = diffcore.record("radon_adjoint", filtered, cfg=cfg)
    return diffcore.scale(bp, math.pi / cfg.num_angles)


def fbp_baseline(sinograms: np.ndarray, cfg: ProjectorConfig) -> np.ndarray:
    """Classical FBP: fixed ramp filter, backprojection, nonnegativity clamp."""
    y = np.asarray(sinograms, dtype=np.float64)
    filtered = _conv1d_same_values(y, ramp_kernel(cfg.num_bins))
    img = backproject(filtered, cfg) * (math.pi / cfg.num_angles)
    return np.maximum(img, 0.0)


def kinetic_encode(xt, psi: EncoderWeights) -> ParametricImages:
    """Per-pixel temporal network over each pixel's frame vector, a 3x3
    depthwise refinement, then softplus/identity/sigmoid heads for rates,
    code, and V. Input is [S, T, H, W] (or [T, H, W])."""
    x = diffcore.as_tensor(xt)
    if not np.all(np.isfinite(x.values)):
        raise ValueError("encoder input contains non-finite values")
    if x.ndim == 3:
        x = diffcore.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ValueError("encoder expects [S, T, H, W]")
    s, t, h, w = x.shape
    pixels = diffcore.reshape(diffcore.moveaxis(x, 1, -1), (-1, t))
    feats = mlp_apply(psi.temporal, pixels)                     # [S*H*W, planes]
    planes = diffcore.moveaxis(
        diffcore.reshape(feats, (s, h, w, psi.n_planes)), -1, 1)
    refined = diffcore.conv2d3_depthwise(planes, psi.conv_kernel, psi.conv_bias)
    flat = diffcore.reshape(diffcore.moveaxis(refined, 1, -1), (-1, psi.n_planes))
    rates = []
    for i in range(psi.n_rates):
        col = diffcore.slice_(flat, key=(slice(None), i))
        rates.append(diffcore.softplus(col))
    c_n = None
    if psi.d_n > 0:
        c_n = diffcore.slice_(flat, key=(slice(None),
                                         slice(psi.n_rates, psi.n_rates + psi.d_n)))
    v = diffcore.sigmoid(diffcore.slice_(flat, key=(slice(None), psi.n_planes - 1)))
    return ParametricImages(rates=rates, c_n=c_n, V=v, batch_shape=(s, h, w))


def decode_activity(parametric: ParametricImages, model: HybridModel,
                    plan: DecodePlan, clamp: bool = True) -> Tensor:
    """Hybrid ODE solve plus frame integration for every pixel; returns
    [S, T, H, W] with gradients flowing back into the encoder and filter."""
    s, h, w = parametric.batch_shape
    q = decode_frames(parametric.rates, parametric.c_n, model, plan)
    p = q.shape[0]
    v_col = diffcore.reshape(parametric.V, (p, 1))
    x = combine_frames(q, v_col, plan.p_blood, clamp=clamp)
    return diffcore.moveaxis(diffcore.reshape(x, (s, h, w, plan.n_frames)), -1, 1)


@dataclass
class ReconModel:
    """All learnable state of the pipeline: filter phi, encoder psi, and the
    hybrid kinetics (which owns theta when the variant has a neural term)."""

    variant: str
    hybrid: HybridModel
    phi: Tensor
    psi: EncoderWeights
    encoder_hidden: int
    n_frames: int

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("phi", self.phi)]
        out.extend(self.psi.named_tensors())
        if self.hybrid.use_neural and self.hybrid.theta is not None:
            out.extend(self.hybrid.theta.named_tensors("theta"))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def clone_with(self, tensors: list[Tensor]) -> "ReconModel":
        """Same architecture around externally supplied parameter tensors,
        ordered as named_parameters(). Used by gradient checking."""
        want = len(self.named_parameters())
        if len(tensors) != want:
            raise ValueError(f"expected {want} parameter tensors, got {len(tensors)}")
        it = iter(tensors)
        phi = next(it)
        temporal = MlpWeights([(next(it), next(it))
                               for _ in self.psi.temporal.layers])
        psi = EncoderWeights(temporal=temporal, conv_kernel=next(it),
                             conv_bias=next(it), n_rates=self.psi.n_rates,
                             d_n=self.psi.d_n)
        hybrid = HybridModel(state_dim=self.hybrid.state_dim,
                             physics=self.hybrid.physics,
                             use_neural=self.hybrid.use_neural,
                             d_n=self.hybrid.d_n, hidden=self.hybrid.hidden,
                             include_input_in_nn=self.hybrid.include_input_in_nn)
        if self.hybrid.use_neural and self.hybrid.theta is not None:
            hybrid.theta = MlpWeights([(next(it), next(it))
                                       for _ in self.hybrid.theta.layers])
        return ReconModel(variant=self.variant, hybrid=hybrid, phi=phi, psi=psi,
                          encoder_hidden=self.encoder_hidden,
                          n_frames=self.n_frames)


def build_recon_model(variant: str, physics: str, use_neural: bool, d_n: int,
                      n_frames: int, num_bins: int, seed: int,
                      hidden: tuple[int, int] = (16, 16), encoder_hidden: int = 32,
                      include_input_in_nn: bool = False) -> ReconModel:
    """Seed-deterministic initialization of every learnable tensor."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x48594B45]))
    state_dim = 2 if physics == "two_tissue" else 1
    hybrid = HybridModel(state_dim=state_dim, physics=physics,
                         use_neural=use_neural, d_n=d_n if use_neural else 0,
                         hidden=tuple(hidden),
                         include_input_in_nn=include_input_in_nn)
    if use_neural:
        hybrid.init_theta(rng, weight_scale=0.1)
    psi = init_encoder(n_frames, hybrid.n_rates, hybrid.d_n, rng,
                       hidden=encoder_hidden)
    return ReconModel(variant=variant, hybrid=hybrid,
                      phi=init_filter(num_bins), psi=psi,
                      encoder_hidden=encoder_hidden, n_frames=n_frames)


def encoder_normalizer(measured_counts: np.ndarray, scale_factor: float,
                       cfg: ProjectorConfig) -> float:
    """Per-sequence scale for the encoder input: the peak of the classical
    FBP reconstruction in activity units. Depends only on the data, so the
    normalization stays a constant of the optimization (and coincides with
    the learnable-filter peak at ramp initialization)."""
    rec = fbp_baseline(np.asarray(measured_counts, dtype=np.float64), cfg)
    return max(float(rec.max()) / scale_factor, 1e-12)


def reconstruct_batch(model: ReconModel, y_counts, scale_factors, enc_norms,
                      cfg: ProjectorConfig, plan: DecodePlan):
    """Full encode->decode pass on measured counts y[S, T, A, B].

    Returns (xhat, xtilde) in activity units: xtilde is the filtered
    backprojection divided by each sequence's stored count scale; the
    encoder sees xtilde divided by the fixed per-sequence normalizer.
    """
    y = diffcore.as_tensor(y_counts)
    if y.ndim == 3:
        y = diffcore.reshape(y, (1,) + y.shape)
    s = y.shape[0]
    inv_scale = (1.0 / np.asarray(scale_factors, dtype=np.float64)).reshape(s, 1, 1, 1)
    inv_norm = (1.0 / np.asarray(enc_norms, dtype=np.float64)).reshape(s, 1, 1, 1)
    xt_counts = filtered_backprojection_encode(y, model.phi, cfg)
    xt = diffcore.mul(xt_counts, Tensor(inv_scale))
    enc_in = diffcore.mul(xt, Tensor(inv_norm))
    parametric = kinetic_encode(enc_in, model.psi)
    xhat = decode_activity(parametric, model.hybrid, plan)
    return xhat, xt
