"""Objectives, optimizer, and the training loop for the four kinetics
variants (purely physics, purely neural, global hybrid, and the per-pixel
adaptive hybrid)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore, metrics
from .dataio import DatasetBundle
from .diffcore import Graph, Tensor, backward
from .kinetics import DEFAULT_DECAY_TAU, make_decode_plan
from .phantom import feng_input
from .projector import expected_counts
from .recon import (
    ReconModel,
    build_recon_model,
    encoder_normalizer,
    reconstruct_batch,
)

__all__ = [
    "VARIANTS",
    "ModelSpec",
    "TrainConfig",
    "TrainingDiverged",
    "supervised_loss",
    "unsupervised_loss",
    "Adam",
    "TrainResult",
    "train_run",
    "evaluate_split",
    "variant_ordering_report",
    "format_report_csv",
]

# ablation variants: which kinetics terms exist and whether the neural part
# is conditioned on a per-pixel code
VARIANTS = ("purely-physics", "purely-neural", "global-hybrid", "hyke")


def variant_flags(variant: str, prior: str, d_n: int) -> dict:
    if variant == "purely-physics":
        return {"physics": prior, "use_neural": False, "d_n": 0}
    if variant == "purely-neural":
        return {"physics": "none", "use_neural": True, "d_n": d_n}
    if variant == "global-hybrid":
        return {"physics": prior, "use_neural": True, "d_n": 0}
    if variant == "hyke":
        return {"physics": prior, "use_neural": True, "d_n": d_n}
    raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")


@dataclass
class ModelSpec:
    """Architecture knobs shared by all variants of one experiment."""

    prior: str = "one_tissue"
    d_n: int = 4
    hidden: tuple[int, int] = (16, 16)
    encoder_hidden: int = 32
    # piecewise solver grid for training decodes: fine through the input
    # bolus, coarse over the smooth tail; boundaries stay on the grid
    solver_dt: object = ((3.0, 0.5), (30.0, 3.0), (60.0, 5.0))
    include_input_in_nn: bool = False


@dataclass
class TrainConfig:
    mode: str = "unsupervised"      # or "supervised"
    lam: float = 0.1                # weight of the |xhat - xtilde|^2 term
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 10
    seed: int = 0
    eval_every: int = 5

    def __post_init__(self):
        if self.mode not in ("supervised", "unsupervised"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


class TrainingDiverged(RuntimeError):
    pass


def _mean_sq_diff(a, b) -> Tensor:
    d = diffcore.sub(a, b)
    return diffcore.mean(diffcore.mul(d, d))


def supervised_loss(x, xhat, xtilde, lam: float) -> Tensor:
    """mean|x - xhat|^2 + lambda * mean|xhat - xtilde|^2."""
    x = diffcore.as_tensor(x)
    xhat = diffcore.as_tensor(xhat)
    xtilde = diffcore.as_tensor(xtilde)
    if not (x.shape == xhat.shape == xtilde.shape):
        raise ValueError(f"shape mismatch: {x.shape}, {xhat.shape}, {xtilde.shape}")
    loss = _mean_sq_diff(x, xhat)
    if lam != 0.0:
        loss = diffcore.add(loss, diffcore.scale(_mean_sq_diff(xhat, xtilde), lam))
    return loss


def unsupervised_loss(y_measured, y_expected, xhat, xtilde, lam: float,
                      floor: float = 1e-8) -> Tensor:
    """Mean negative Poisson log-likelihood -(y log ybar - ybar) plus the
    regularizer; ybar is floored inside the log (the gradient uses the
    floored value)."""
    y = diffcore.as_tensor(y_measured)
    ybar = diffcore.as_tensor(y_expected)
    if y.shape != ybar.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {ybar.shape}")
    if np.any(ybar.values < 0):
        raise ValueError("expected counts must be nonnegative")
    ll = diffcore.sub(diffcore.mul(y, diffcore.log_floored(ybar, floor)), ybar)
    loss = diffcore.scale(diffcore.reduce_sum(ll), -1.0 / y.size)
    if lam != 0.0:
        xhat = diffcore.as_tensor(xhat)
        xtilde = diffcore.as_tensor(xtilde)
        if xhat.shape != xtilde.shape:
            raise ValueError(f"shape mismatch: {xhat.shape} vs {xtilde.shape}")
        loss = diffcore.add(loss, diffcore.scale(_mean_sq_diff(xhat, xtilde), lam))
    return loss


class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.values = p.values - self.lr * (self.m[i] / b1c) / (
                np.sqrt(self.v[i] / b2c) + self.eps)


def _stack_split(samples, proj):
    y = np.stack([s.measured.astype(np.float64) for s in samples])
    x = np.stack([s.activity for s in samples])
    scales = np.array([s.scale_factor for s in samples])
    randoms = np.array([s.randoms_level for s in samples])
    for s in samples:
        if s.enc_norm is None:
            s.enc_norm = encoder_normalizer(s.measured, s.scale_factor, proj)
    norms = np.array([s.enc_norm for s in samples])
    return y, x, scales, randoms, norms


def _forward_loss(model, plan, dataset, y, x, scales, randoms, norms,
                  cfg: TrainConfig):
    xhat, xtilde = reconstruct_batch(model, y, scales, norms,
                                     dataset.projector, plan)
    if cfg.mode == "supervised":
        return supervised_loss(x, xhat, xtilde, cfg.lam), xhat
    s = y.shape[0]
    ybar = expected_counts(xhat, dataset.projector,
                           scales.reshape(s, 1, 1, 1),
                           randoms.reshape(s, 1, 1, 1))
    return unsupervised_loss(y, ybar, xhat, xtilde, cfg.lam), xhat


@dataclass
class TrainResult:
    model: ReconModel
    history: list
    best_epoch: int
    best_val_loss: float


def _eval_loss_and_metrics(model, plan, dataset, samples, cfg, chunk: int = 8):
    """Forward pass without recording; per-sample metrics vs ground truth."""
    losses = []
    rows = []
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        y, x, scales, randoms, norms = _stack_split(part, dataset.projector)
        loss, xhat = _forward_loss(model, plan, dataset, y, x, scales, randoms,
                                   norms, cfg)
        losses.append(loss.item() * len(part))
        for i, s in enumerate(part):
            rows.append({
                "name": s.name,
                "mse": float(np.mean((x[i] - xhat.values[i]) ** 2)),
                "psnr": metrics.psnr(x[i], xhat.values[i]),
                "ssim": metrics.ssim(x[i], xhat.values[i]),
            })
    return sum(losses) / len(samples), rows


def train_run(dataset: DatasetBundle, variant: str, cfg: TrainConfig,
              spec: ModelSpec, log=None) -> TrainResult:
    """Adam over (phi, psi, theta); deterministic for (dataset, cfg, seed).

    Keeps the best-validation-loss checkpoint and a per-epoch history of
    losses and validation metrics. Raises TrainingDiverged on non-finite loss.
    """
    flags = variant_flags(variant, spec.prior, spec.d_n)
    model = build_recon_model(variant=variant, n_frames=dataset.schedule.n_frames,
                              num_bins=dataset.projector.num_bins, seed=cfg.seed,
                              hidden=spec.hidden, encoder_hidden=spec.encoder_hidden,
                              include_input_in_nn=spec.include_input_in_nn, **flags)
    plan = make_decode_plan(model.hybrid, lambda t: feng_input(dataset.feng, t),
                            dataset.schedule, spec.solver_dt, dataset.tau)
    train_samples = dataset.split_samples("train")
    val_samples = dataset.split_samples("val") if "val" in dataset.splits else []
    y_all, x_all, sc_all, rn_all, nm_all = _stack_split(train_samples,
                                                        dataset.projector)
    n = len(train_samples)
    opt = Adam(model.parameters(), lr=cfg.lr)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    history = []

    loss0, _ = _eval_loss_and_metrics(model, plan, dataset, train_samples, cfg)
    history.append({"epoch": 0, "split": "train", "loss": loss0,
                    "mse": None, "psnr": None, "ssim": None})
    best_state = [(name, t.values.copy()) for name, t in model.named_parameters()]
    best_val = np.inf
    best_epoch = 0

    def eval_val(epoch):
        nonlocal best_state, best_val, best_epoch
        if not val_samples:
            return
        vloss, vrows = _eval_loss_and_metrics(model, plan, dataset, val_samples, cfg)
        history.append({"epoch": epoch, "split": "val", "loss": vloss,
                        "mse": float(np.mean([r["mse"] for r in vrows])),
                        "psnr": float(np.mean([r["psnr"] for r in vrows])),
                        "ssim": float(np.mean([r["ssim"] for r in vrows]))})
        if vloss < best_val:
            best_val = vloss
            best_epoch = epoch
            best_state = [(name, t.values.copy())
                          for name, t in model.named_parameters()]

    eval_val(0)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            g = Graph()
            with g:
                loss, _ = _forward_loss(model, plan, dataset, y_all[idx],
                                        x_all[idx], sc_all[idx], rn_all[idx],
                                        nm_all[idx], cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            backward(g, loss)
            opt.step()
            epoch_loss += value * idx.size
        history.append({"epoch": epoch, "split": "train", "loss": epoch_loss / n,
                        "mse": None, "psnr": None, "ssim": None})
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            eval_val(epoch)
        if log is not None:
            log(epoch, history[-1])

    if cfg.epochs == 0 or not val_samples:
        best_epoch = cfg.epochs
        best_val = history[-1]["loss"] if history else np.inf
        best_state = [(name, t.values.copy()) for name, t in model.named_parameters()]
    for (name, vals), (_, tensor) in zip(best_state, model.named_parameters()):
        tensor.values = vals
    return TrainResult(model=model, history=history, best_epoch=best_epoch,
                       best_val_loss=float(best_val))


def evaluate_split(model: ReconModel, dataset: DatasetBundle, split: str,
                   solver_dt: float, chunk: int = 8):
    """Reconstruct a split and score it; returns (per-sample rows, recon dict)."""
    plan = make_decode_plan(model.hybrid, lambda t: feng_input(dataset.feng, t),
                            dataset.schedule, solver_dt, dataset.tau)
    samples = dataset.split_samples(split)
    rows = []
    recons = {}
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        y, x, scales, _, norms = _stack_split(part, dataset.projector)
        xhat, _ = reconstruct_batch(model, y, scales, norms, dataset.projector,
                                    plan)
        for i, s in enumerate(part):
            recons[s.name] = xhat.values[i]
            rows.append({"name": s.name,
                         "mse": float(np.mean((x[i] - xhat.values[i]) ** 2)),
                         "psnr": metrics.psnr(x[i], xhat.values[i]),
                         "ssim": metrics.ssim(x[i], xhat.values[i])})
    return rows, recons


def variant_ordering_report(results_per_variant: dict) -> list[dict]:
    """Mean +- std of MSE/PSNR/SSIM per variant over seeds, ranked by PSNR."""
    for v in VARIANTS:
        if v not in results_per_variant or not results_per_variant[v]:
            raise ValueError(f"missing results for variant {v!r}")
    rows = []
    for v in VARIANTS:
        runs = results_per_variant[v]
        row = {"variant": v}
        for key in ("mse", "psnr", "ssim"):
            vals = np.array([r[key] for r in runs], dtype=np.float64)
            row[f"{key}_mean"] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std())
        rows.append(row)
    rows.sort(key=lambda r: -r["psnr_mean"])
    return rows


def format_report_csv(rows: list[dict]) -> str:
    cols = ["variant", "mse_mean", "mse_std", "psnr_mean", "psnr_std",
            "ssim_mean", "ssim_std"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(str(r[c]) for c in cols))
    return "\n".join(lines) + "\n"
