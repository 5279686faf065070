"""State-space tracer kinetics: compartment right-hand sides, the hybrid
physics+neural model, differentiable fixed-step RK4 integration, and frame
integration of solved paths into activity values.

Two equivalent decode routes exist: a generic tape-recorded path built from
primitive ops (integrate + frame_activity, convenient for small instances
and oracles) and a fused compiled op (decode_frames) that batches thousands
of pixels per call for training. Both implement the same unrolled RK4 and
trapezoidal quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore
from ._ode_kernels import ode_quad_backward, ode_quad_forward
from .diffcore import MlpWeights, Tensor, mlp_apply, mlp_init

__all__ = [
    "DEFAULT_DECAY_TAU",
    "ScanSchedule",
    "CompartmentParams",
    "HybridModel",
    "StatePath",
    "one_tissue_rhs",
    "two_tissue_rhs",
    "hybrid_rhs",
    "integrate",
    "quadrature_matrix",
    "frame_activity",
    "combine_frames",
    "DecodePlan",
    "make_decode_plan",
    "decode_frames",
]

# F-18 half-life is 109.77 min; tau is the 1/e decay time
DEFAULT_DECAY_TAU = 109.77 / math.log(2.0)


@dataclass
class ScanSchedule:
    """Frame boundaries in minutes, starting at zero."""

    boundaries: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("schedule needs at least two boundaries")
        if abs(b[0]) > 1e-12:
            raise ValueError("schedule must start at t=0")
        if np.any(np.diff(b) <= 0):
            raise ValueError("boundaries must be strictly increasing")
        self.boundaries = b

    @classmethod
    def default(cls) -> "ScanSchedule":
        """18 frames over 60 min: 3x1 min, 9x3 min, 6x5 min."""
        b = np.concatenate([[0.0], np.arange(1, 4), 3.0 + 3.0 * np.arange(1, 10),
                            30.0 + 5.0 * np.arange(1, 7)])
        return cls(b)

    @property
    def n_frames(self) -> int:
        return self.boundaries.size - 1

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.boundaries)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.boundaries[:-1] + self.boundaries[1:])

    @property
    def t_end(self) -> float:
        return float(self.boundaries[-1])


@dataclass
class CompartmentParams:
    """Rate constants (1/min) and vascular volume fraction of one pixel."""

    k1: float
    k2: float
    k3: float = 0.0
    k4: float = 0.0
    V: float = 0.0

    def __post_init__(self):
        if min(self.k1, self.k2, self.k3, self.k4) < 0:
            raise ValueError("rate constants must be nonnegative")
        if not (0.0 <= self.V <= 1.0):
            raise ValueError("V must lie in [0, 1]")


_PHYSICS_KIND = {"none": 0, "one_tissue": 1, "two_tissue": 2}
_PHYSICS_STATE_DIM = {"one_tissue": 1, "two_tissue": 2}


@dataclass
class HybridModel:
    """Kinetics right-hand side: optional compartment physics plus an optional
    per-pixel neural residual conditioned on an abstract code."""

    state_dim: int = 1
    physics: str = "one_tissue"
    use_neural: bool = True
    d_n: int = 4
    hidden: tuple[int, int] = (16, 16)
    include_input_in_nn: bool = False
    theta: MlpWeights | None = None

    def __post_init__(self):
        if self.physics not in _PHYSICS_KIND:
            raise ValueError(f"unknown physics {self.physics!r}")
        if self.physics in _PHYSICS_STATE_DIM and self.state_dim != _PHYSICS_STATE_DIM[self.physics]:
            raise ValueError(f"{self.physics} physics needs state_dim "
                             f"{_PHYSICS_STATE_DIM[self.physics]}")
        if not self.use_neural and self.d_n != 0:
            raise ValueError("a neural code without a neural term is meaningless")
        if self.theta is not None:
            sizes = self.theta.sizes
            want = [self.nn_input_size, *self.hidden, self.state_dim]
            if sizes != want:
                raise ValueError(f"theta sizes {sizes} != expected {want}")

    @property
    def physics_kind(self) -> int:
        return _PHYSICS_KIND[self.physics]

    @property
    def nn_input_size(self) -> int:
        return self.state_dim + self.d_n + (1 if self.include_input_in_nn else 0)

    @property
    def n_rates(self) -> int:
        return {0: 0, 1: 2, 2: 4}[self.physics_kind]

    def init_theta(self, rng: np.random.Generator, weight_scale: float | None = None):
        self.theta = mlp_init([self.nn_input_size, *self.hidden, self.state_dim],
                              rng, weight_scale=weight_scale)
        return self.theta


@dataclass
class StatePath:
    """Solver grid times and the state tensor at every node."""

    times: np.ndarray
    states: list[Tensor]

    @property
    def state_dim(self) -> int:
        return self.states[0].shape[-1]

    def values(self) -> np.ndarray:
        """[n_nodes, ..., sd] numpy view of the path."""
        return np.stack([s.values for s in self.states], axis=0)


def _as_const(a, like: Tensor) -> Tensor:
    arr = np.broadcast_to(np.asarray(a, dtype=np.float64),
                          like.shape[:-1] + (1,)).copy()
    return Tensor(arr, _validate=False)


def one_tissue_rhs(z, a, k1, k2) -> Tensor:
    """dC_T/dt = -k2*C_T + k1*a for z[..., 1]."""
    z = diffcore.as_tensor(z)
    return diffcore.sub(diffcore.mul(diffcore.as_tensor(k1), diffcore.as_tensor(a)),
                        diffcore.mul(diffcore.as_tensor(k2), z))


def two_tissue_rhs(z, a, k1, k2, k3, k4) -> Tensor:
    """Exchange between free (C_E) and metabolized (C_M) tissue pools,
    z[..., 2] = [C_E, C_M]."""
    z = diffcore.as_tensor(z)
    if z.shape[-1] != 2:
        raise ValueError("two-tissue state must have two components")
    e = diffcore.slice_(z, key=(Ellipsis, slice(0, 1)))
    m = diffcore.slice_(z, key=(Ellipsis, slice(1, 2)))
    k1, k2, k3, k4 = (diffcore.as_tensor(k) for k in (k1, k2, k3, k4))
    drive = diffcore.mul(k1, diffcore.as_tensor(a))
    de = diffcore.add(diffcore.sub(drive, diffcore.mul(diffcore.add(k2, k3), e)),
                      diffcore.mul(k4, m))
    dm = diffcore.sub(diffcore.mul(k3, e), diffcore.mul(k4, m))
    return diffcore.concat([de, dm], axis=-1)


def hybrid_rhs(z, a, c_p, c_n, model: HybridModel) -> Tensor:
    """Physics term (if any) plus the neural residual mlp(concat(z, c_n[, a]))."""
    z = diffcore.as_tensor(z)
    if model.physics == "one_tissue":
        f = one_tissue_rhs(z, a, *c_p)
    elif model.physics == "two_tissue":
        f = two_tissue_rhs(z, a, *c_p)
    else:
        f = None
    if model.use_neural:
        if model.theta is None:
            raise ValueError("model has no neural weights")
        cols = [z]
        if model.d_n > 0:
            cols.append(diffcore.as_tensor(c_n))
        if model.include_input_in_nn:
            cols.append(_as_const(a, z))
        inp = diffcore.concat(cols, axis=-1) if len(cols) > 1 else z
        nn = mlp_apply(model.theta, inp)
        f = nn if f is None else diffcore.add(f, nn)
    if f is None:
        raise ValueError("model disables both physics and the neural term")
    return f


def integrate(rhs, z0, t_end: float, dt: float) -> StatePath:
    """Classical fixed-step RK4 from z0; the path keeps every node Tensor so
    gradients flow through all steps. A trailing partial step is shortened."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = diffcore.as_tensor(z0)
    n_full = int(math.floor(t_end / dt + 1e-9))
    times = [i * dt for i in range(n_full + 1)]
    if t_end - times[-1] > 1e-9 * max(1.0, t_end):
        times.append(t_end)
    states = [z]
    for step in range(len(times) - 1):
        t0, t1 = times[step], times[step + 1]
        h = t1 - t0
        s1 = rhs(z, t0)
        s2 = rhs(diffcore.add(z, diffcore.scale(s1, h / 2.0)), t0 + h / 2.0)
        s3 = rhs(diffcore.add(z, diffcore.scale(s2, h / 2.0)), t0 + h / 2.0)
        s4 = rhs(diffcore.add(z, diffcore.scale(s3, h)), t1)
        incr = diffcore.add(diffcore.add(s1, s4),
                            diffcore.scale(diffcore.add(s2, s3), 2.0))
        z = diffcore.add(z, diffcore.scale(incr, h / 6.0))
        if not np.all(np.isfinite(z.values)):
            raise ValueError(f"non-finite state at solver step {step} (t={t1:g})")
        states.append(z)
    return StatePath(np.asarray(times), states)


def quadrature_matrix(times: np.ndarray, boundaries: np.ndarray,
                      tau: float | None = None) -> np.ndarray:
    """[n_nodes, T] weights turning node samples into duration-normalized,
    decay-weighted trapezoidal frame integrals. Every boundary must be a node."""
    times = np.asarray(times, dtype=np.float64)
    boundaries = np.asarray(boundaries, dtype=np.float64)
    idx = []
    for b in boundaries:
        j = int(np.argmin(np.abs(times - b)))
        if abs(times[j] - b) > 1e-9 * max(1.0, abs(b)):
            raise ValueError(f"schedule boundary t={b:g} is not on the solver grid")
        idx.append(j)
    if tau is None or not np.isfinite(tau):
        decay = np.ones_like(times)
    else:
        decay = np.exp(-times / tau)
    n_frames = boundaries.size - 1
    wq = np.zeros((times.size, n_frames))
    for k in range(n_frames):
        i0, i1 = idx[k], idx[k + 1]
        if i1 <= i0:
            raise ValueError("empty frame on solver grid")
        seg = times[i0:i1 + 1]
        w = np.zeros(seg.size)
        d = np.diff(seg)
        w[:-1] += d / 2.0
        w[1:] += d / 2.0
        wq[i0:i1 + 1, k] = w * decay[i0:i1 + 1] / (boundaries[k + 1] - boundaries[k])
    return wq


def combine_frames(q, v, p_blood: np.ndarray, clamp: bool = True) -> Tensor:
    """x_k = (1 - V) * q_k + V * p_k, clamped at zero by default.

    q is [..., T] tissue quadrature, v broadcasts as [..., 1], p_blood is the
    [T] quadrature of the plasma input under the same decay and schedule.
    """
    v = diffcore.as_tensor(v)
    q = diffcore.as_tensor(q)
    one_minus = diffcore.add_const(diffcore.neg(v), 1.0)
    x = diffcore.add(diffcore.mul(one_minus, q),
                     diffcore.mul(v, Tensor(np.asarray(p_blood, dtype=np.float64))))
    return diffcore.relu(x) if clamp else x


def frame_activity(path: StatePath, cp_nodes: np.ndarray, v, tau,
                   schedule: ScanSchedule, clamp: bool = True) -> Tensor:
    """Frame values from a solved path: trapezoidal quadrature of
    [(1-V)*C_T + V*C_P] * exp(-t/tau) over each frame, duration-normalized."""
    wq = quadrature_matrix(path.times, schedule.boundaries, tau)
    ct_cols = [diffcore.reduce_sum(s, axis=-1, keepdims=True) for s in path.states]
    ct_nodes = diffcore.concat(ct_cols, axis=-1)
    lead = ct_nodes.shape[:-1]
    flat = diffcore.reshape(ct_nodes, (-1, ct_nodes.shape[-1]))
    q = diffcore.reshape(diffcore.matmul(flat, Tensor(wq)), lead + (schedule.n_frames,))
    cp_nodes = np.asarray(cp_nodes, dtype=np.float64)
    if cp_nodes.shape != path.times.shape:
        raise ValueError("need one plasma sample per solver node")
    p_blood = cp_nodes @ wq
    return combine_frames(q, v, p_blood, clamp=clamp)


# ----------------------------------------------------------- fused decode op

# pixels per compiled-kernel call; chunks run on a thread pool (the kernels
# release the GIL) and results merge in fixed chunk order
CHUNK_PIXELS = 4096


def solver_times(t_end: float, dt) -> np.ndarray:
    """Solver grid over [0, t_end]: uniform for a scalar dt, or piecewise
    from [[until, dt], ...] segments (each dt must divide its segment)."""
    if np.isscalar(dt):
        if dt <= 0:
            raise ValueError("dt must be positive")
        n_steps = int(round(t_end / dt))
        if n_steps < 1 or abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
            raise ValueError(f"dt={dt:g} does not evenly divide the span {t_end:g}")
        return np.arange(n_steps + 1) * float(dt)
    times = [0.0]
    for until, seg_dt in dt:
        if seg_dt <= 0 or until <= times[-1]:
            raise ValueError("solver segments must advance with positive dt")
        n = int(round((until - times[-1]) / seg_dt))
        if n < 1 or abs(times[-1] + n * seg_dt - until) > 1e-9 * max(1.0, until):
            raise ValueError(f"dt={seg_dt:g} does not evenly divide the segment "
                             f"({times[-1]:g}, {until:g}]")
        start = times[-1]
        times.extend(start + seg_dt * np.arange(1, n + 1))
    if abs(times[-1] - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError(f"solver segments end at {times[-1]:g}, not {t_end:g}")
    return np.asarray(times)


@dataclass
class DecodePlan:
    """Precomputed constants for the fused batched decode."""

    times: np.ndarray         # solver nodes [n_steps + 1]
    dt_steps: np.ndarray      # per-step widths [n_steps]
    a_stages: np.ndarray      # plasma input at nodes and half-steps
    node_frame: np.ndarray    # [n_nodes, 2] frame index per node (-1 unused)
    node_weight: np.ndarray   # [n_nodes, 2] matching quadrature weights
    p_blood: np.ndarray       # [T]
    n_frames: int
    state_dim: int
    physics_kind: int
    use_nn: bool
    include_a: bool
    d_n: int
    hidden: tuple[int, int]
    nn_input_size: int

    @property
    def n_steps(self) -> int:
        return self.dt_steps.size


def make_decode_plan(model: HybridModel, cp_fn, schedule: ScanSchedule,
                     dt, tau: float | None = DEFAULT_DECAY_TAU) -> DecodePlan:
    """Build the constant tables shared by every pixel of a decode batch."""
    times = solver_times(schedule.t_end, dt)
    stage_times = np.empty(2 * (times.size - 1) + 1)
    stage_times[::2] = times
    stage_times[1::2] = 0.5 * (times[:-1] + times[1:])
    a_stages = np.asarray(cp_fn(stage_times), dtype=np.float64)
    wq = quadrature_matrix(times, schedule.boundaries, tau)
    node_frame = -np.ones((times.size, 2), dtype=np.int64)
    node_weight = np.zeros((times.size, 2))
    for i in range(times.size):
        nz = np.nonzero(wq[i])[0]
        if nz.size > 2:
            raise ValueError("node belongs to more than two frames")
        for which, k in enumerate(nz):
            node_frame[i, which] = k
            node_weight[i, which] = wq[i, k]
    p_blood = a_stages[::2] @ wq
    return DecodePlan(times=times, dt_steps=np.diff(times), a_stages=a_stages,
                      node_frame=node_frame, node_weight=node_weight,
                      p_blood=p_blood, n_frames=schedule.n_frames,
                      state_dim=model.state_dim, physics_kind=model.physics_kind,
                      use_nn=model.use_neural, include_a=model.include_input_in_nn,
                      d_n=model.d_n, hidden=tuple(model.hidden),
                      nn_input_size=model.nn_input_size)


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _pixel_chunks(n: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + CHUNK_PIXELS, n)) for lo in range(0, n, CHUNK_PIXELS)]


def _run_chunks(tasks):
    """Run chunk closures, threaded when it pays off; fixed merge order."""
    if len(tasks) == 1:
        tasks[0]()
        return
    import numba
    workers = min(len(tasks), numba.get_num_threads())
    if workers <= 1:
        for task in tasks:
            task()
        return
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda f: f(), tasks))


_STAGE_DUMMY = np.zeros((1, 1, 1, 1))


def _fw_ode_frames(k1, k2, k3, k4, cn, w1, b1, w2, b2, w3, b3, *, plan: DecodePlan):
    P = k1.shape[0]
    args = (_c(k1), _c(k2), _c(k3), _c(k4), _c(cn),
            _c(w1), _c(b1), _c(w2), _c(b2), _c(w3), _c(b3))
    q = np.zeros((P, plan.n_frames))
    store = diffcore.active_graph() is not None
    chunks = _pixel_chunks(P)
    paths = [None] * len(chunks)
    stage_store = [None] * len(chunks)
    bad = np.full(len(chunks), -1, dtype=np.int64)

    def make_task(ci, lo, hi):
        def task():
            width = hi - lo
            z_path = np.zeros((plan.n_steps + 1, width, plan.state_dim))
            stages = np.zeros((plan.n_steps, 3, width, plan.state_dim)) if store \
                else _STAGE_DUMMY
            part = tuple(a[lo:hi] for a in args[:5]) + args[5:]
            bad[ci] = ode_quad_forward(*part, plan.a_stages, plan.dt_steps,
                                       plan.physics_kind, plan.use_nn,
                                       plan.include_a, plan.node_frame,
                                       plan.node_weight, z_path, stages,
                                       store, q[lo:hi])
            paths[ci] = z_path
            stage_store[ci] = stages
        return task

    _run_chunks([make_task(ci, lo, hi) for ci, (lo, hi) in enumerate(chunks)])
    for ci, (lo, hi) in enumerate(chunks):
        if bad[ci] >= 0:
            step = int(bad[ci])
            nf = np.nonzero(~np.all(np.isfinite(paths[ci][step + 1]), axis=-1))[0]
            raise ValueError(f"non-finite state at solver step {step} "
                             f"(t={plan.times[step + 1]:g}), pixel {lo + nf[0]}")
    return q, (chunks, paths, stage_store)


def _vjp_ode_frames(vals, out, *, _aux, plan: DecodePlan):
    chunks, paths, stage_store = _aux
    k1, k2, k3, k4, cn, w1, b1, w2, b2, w3, b3 = vals
    P = k1.shape[0]
    consts = (_c(w1), _c(b1), _c(w2), _c(b2), _c(w3), _c(b3))
    kvals = (_c(k1), _c(k2), _c(k3), _c(k4), _c(cn))

    def vjp(g):
        g = _c(g)
        gk = [np.zeros(P) for _ in range(4)]
        gcn = np.zeros_like(kvals[4])
        gw_chunks = [[np.zeros_like(w) for w in consts] for _ in chunks]

        def make_task(ci, lo, hi):
            def task():
                part_k = tuple(a[lo:hi] for a in kvals)
                gw = gw_chunks[ci]
                ode_quad_backward(g[lo:hi], paths[ci], stage_store[ci],
                                  *part_k, *consts,
                                  plan.a_stages, plan.dt_steps,
                                  plan.physics_kind, plan.use_nn,
                                  plan.include_a, plan.node_frame,
                                  plan.node_weight,
                                  gk[0][lo:hi], gk[1][lo:hi], gk[2][lo:hi],
                                  gk[3][lo:hi], gcn[lo:hi],
                                  gw[0], gw[1], gw[2], gw[3], gw[4], gw[5])
            return task

        _run_chunks([make_task(ci, lo, hi) for ci, (lo, hi) in enumerate(chunks)])
        gw_total = [np.zeros_like(w) for w in consts]
        for gw in gw_chunks:
            for acc, part in zip(gw_total, gw):
                acc += part
        return (*gk, gcn, *gw_total)

    return vjp


diffcore.register_op("ode_frames", _fw_ode_frames, _vjp_ode_frames)

_DUMMY_2D = np.zeros((1, 1))
_DUMMY_1D = np.zeros(1)


def decode_frames(rates: list, c_n, model: HybridModel, plan: DecodePlan,
                  return_path: bool = False):
    """Fused batched decode: tissue-frame quadrature q[P, T] for P pixels.

    rates is a list of [P] tensors ordered (k1, k2[, k3, k4]) matching the
    model's physics; c_n is [P, d_n] (ignored when d_n == 0). Combine with
    combine_frames(q, V, plan.p_blood) to obtain activities.
    """
    if len(rates) != model.n_rates:
        raise ValueError(f"{model.physics} physics expects {model.n_rates} rate "
                         f"maps, got {len(rates)}")
    if model.physics_kind != plan.physics_kind or model.use_neural != plan.use_nn:
        raise ValueError("plan was built for a different model")
    ref = rates[0] if rates else c_n
    if ref is None:
        raise ValueError("need at least one of rates or a neural code")
    P = diffcore.as_tensor(ref).shape[0]
    zero = Tensor(np.zeros(P), _validate=False)
    ks = list(rates) + [zero] * (4 - len(rates))
    if model.use_neural and model.d_n > 0:
        cn_t = diffcore.as_tensor(c_n)
    else:
        cn_t = Tensor(np.zeros((P, model.d_n)), _validate=False)
    if model.use_neural:
        if model.theta is None:
            raise ValueError("model has no neural weights")
        if len(model.theta.layers) != 3:
            raise ValueError("fused decode expects exactly two hidden layers")
        (w1, b1), (w2, b2), (w3, b3) = model.theta.layers
    else:
        w1, w2, w3 = (Tensor(_DUMMY_2D, _validate=False) for _ in range(3))
        b1, b2, b3 = (Tensor(_DUMMY_1D, _validate=False) for _ in range(3))
    q = diffcore.record("ode_frames", ks[0], ks[1], ks[2], ks[3], cn_t,
                        w1, b1, w2, b2, w3, b3, plan=plan)
    if return_path:
        _, (chunks, paths, _) = _fw_ode_frames(
            ks[0].values, ks[1].values, ks[2].values, ks[3].values, cn_t.values,
            w1.values, b1.values, w2.values, b2.values, w3.values, b3.values,
            plan=plan)
        return q, np.concatenate(paths, axis=1)
    return q
