"""Static optimal-transport Bayes update.

Given joint samples (X^i, Y^i), a potential network f and a map network T are
trained adversarially on the empirical objective

    J(f, T) = mean_i [ f(X^i, Y^i) + 1/2 |T(Xbar^i, Y^i) - Xbar^i|^2
                       - f(T(Xbar^i, Y^i), Y^i) ]

where Xbar is a shuffled copy of X, so (Xbar^i, Y^i) are samples from the
independent coupling.  T descends, f ascends.  The trained map pushes prior
particles to posterior particles: X^i_|y = T(X^i, y).

The quadratic cost is paired with the shuffled copy Xbar by default; pairing
it with the joint X instead is available through ``TrainConfig.cost_pairing``
for comparison (the two estimators differ only in which independent-coupling
sample anchors the displacement penalty).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, concat
from .diffnet import (
    AdamState,
    ArchitectureSpec,
    EnkfBlock,
    NetworkParams,
    _forward_tensor,
    adam_step,
    forward,
    init_params,
    input_gradient,
)
from .ensemble import Ensemble
from .metrics import mmd

__all__ = [
    "PairedBatch",
    "MapPair",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "make_paired_batch",
    "empirical_objective",
    "train",
    "train_full",
    "transport",
    "joint_consistency_mmd",
    "convexity_diagnostic",
    "optimality_gap_estimate",
    "save_map_pair",
    "load_map_pair",
]


class TrainingDivergedError(RuntimeError):
    """Raised when the empirical objective becomes non-finite during training."""

    def __init__(self, message: str, objective_trace=None):
        super().__init__(message)
        self.objective_trace = objective_trace or []


@dataclass
class PairedBatch:
    """Joint pairs (x, y) plus the same y's paired with a shuffled copy of x."""

    xs: np.ndarray
    ys: np.ndarray
    xs_shuffled: np.ndarray
    perm: np.ndarray

    def __post_init__(self):
        if not (len(self.xs) == len(self.ys) == len(self.xs_shuffled) == len(self.perm)):
            raise ValueError("paired batch arrays must have equal lengths")


@dataclass
class MapPair:
    """Trained potential f (scalar output) and transport map T (state output)."""

    f: NetworkParams
    T: NetworkParams

    def __post_init__(self):
        if self.f.spec.output_dim != 1:
            raise ValueError("potential network must have scalar output")
        if self.f.spec.input_dim != self.T.spec.input_dim:
            raise ValueError("f and T must share the (state, observation) input dimension")

    @property
    def state_dim(self) -> int:
        return self.T.spec.output_dim

    @property
    def obs_dim(self) -> int:
        return self.T.spec.input_dim - self.T.spec.output_dim

    def copy(self) -> "MapPair":
        return MapPair(f=self.f.copy(), T=self.T.copy())


@dataclass
class TrainConfig:
    """Budget and step sizes for the gradient ascent-descent loop."""

    outer_iters: int = 400
    inner_steps_per_outer: int = 10
    lr_f: float = 1e-3
    lr_T: float = 1e-3
    batch_size: int = 512
    seed: int = 0
    lr_decay: float = 1.0          # final-lr fraction, applied geometrically over outers
    cost_pairing: str = "shuffled"  # "shuffled": cost vs Xbar; "joint": cost vs X
    checkpoint_every: int = 0
    average_last_frac: float = 0.0  # Polyak-average parameters over this tail of outers
    trace_every: int = 10           # evaluate the objective every k-th outer iteration

    def __post_init__(self):
        if self.outer_iters < 1 or self.inner_steps_per_outer < 1 or self.batch_size < 1:
            raise ValueError("iteration counts and batch size must be positive")
        if self.lr_f <= 0 or self.lr_T <= 0:
            raise ValueError("learning rates must be positive")
        if self.cost_pairing not in ("shuffled", "joint"):
            raise ValueError("cost_pairing must be 'shuffled' or 'joint'")


@dataclass
class TrainResult:
    pair: MapPair
    objective_trace: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _split_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    """Accept (xs, ys) arrays or a list of (x, y) pairs."""
    if isinstance(samples, tuple) and len(samples) == 2:
        xs, ys = samples
    else:
        xs = np.array([np.atleast_1d(s[0]) for s in samples], dtype=np.float64)
        ys = np.array([np.atleast_1d(s[1]) for s in samples], dtype=np.float64)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.asarray(ys, dtype=np.float64)
    if ys.ndim == 1:
        ys = ys[:, None]
    if xs.shape[0] != ys.shape[0]:
        raise ValueError("x and y sample counts differ")
    return xs, ys


def make_paired_batch(samples, rng: np.random.Generator) -> PairedBatch:
    """Pair each y with a uniformly shuffled x (fixed points of the permutation allowed)."""
    xs, ys = _split_samples(samples)
    if xs.shape[0] < 2:
        raise ValueError("need at least 2 samples to shuffle")
    perm = rng.permutation(xs.shape[0])
    return PairedBatch(xs=xs, ys=ys, xs_shuffled=xs[perm], perm=perm)


def empirical_objective(pair: MapPair, batch: PairedBatch,
                        cost_pairing: str = "shuffled") -> float:
    """Empirical max-min objective on a paired batch (plain forward passes)."""
    t_out = forward(pair.T, np.concatenate([batch.xs_shuffled, batch.ys], axis=1))
    f_joint = forward(pair.f, np.concatenate([batch.xs, batch.ys], axis=1))
    f_push = forward(pair.f, np.concatenate([t_out, batch.ys], axis=1))
    anchor = batch.xs_shuffled if cost_pairing == "shuffled" else batch.xs
    cost = 0.5 * np.sum((t_out - anchor) ** 2, axis=1)
    return float(np.mean(f_joint[:, 0] + cost - f_push[:, 0]))


# -- training -----------------------------------------------------------------


def _map_step_grad(f_params: NetworkParams, t_params: NetworkParams,
                   xb: np.ndarray, yb: np.ndarray, xbar: np.ndarray,
                   cost_pairing: str) -> np.ndarray:
    """Gradient of the T-minimized part: mean[cost - f(T(xbar, y), y)]."""
    flat_t = Tensor(t_params.values, requires_grad=True)
    t_out = _forward_tensor(t_params, Tensor(np.concatenate([xbar, yb], axis=1)), flat=flat_t)
    anchor = xbar if cost_pairing == "shuffled" else xb
    cost = (t_out - anchor).square().sum(axis=1).mean() * 0.5
    f_push = _forward_tensor(f_params, concat([t_out, Tensor(yb)], axis=-1))
    (cost - f_push.mean()).backward()
    return flat_t.grad if flat_t.grad is not None else np.zeros_like(t_params.values)


def _potential_step_grad(f_params: NetworkParams, t_params: NetworkParams,
                         xb: np.ndarray, yb: np.ndarray,
                         xbar: np.ndarray) -> np.ndarray:
    """Gradient of the f-maximized part: mean[f(x, y) - f(T(xbar, y), y)]."""
    t_out = forward(t_params, np.concatenate([xbar, yb], axis=1))
    flat_f = Tensor(f_params.values, requires_grad=True)
    f_joint = _forward_tensor(f_params, Tensor(np.concatenate([xb, yb], axis=1)), flat=flat_f)
    f_push = _forward_tensor(f_params, Tensor(np.concatenate([t_out, yb], axis=1)), flat=flat_f)
    (f_joint.mean() - f_push.mean()).backward()
    return flat_f.grad if flat_f.grad is not None else np.zeros_like(f_params.values)


def _whiten_stats(cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shift = cols.mean(axis=0)
    scale = np.maximum(cols.std(axis=0), 1e-6)
    return shift, scale


def _prepare_networks(xs: np.ndarray, ys: np.ndarray, arch_f: ArchitectureSpec,
                      arch_T: ArchitectureSpec, seeds, warm: MapPair | None) -> MapPair:
    """Cold start: frozen state (EnKF block, whitening) estimated from the samples
    and zero-start trainable values.  Warm start: the previous pair is reused
    wholesale (frozen state included) so training resumes from exactly the
    previously learned functions; re-freezing stats against warm weights
    destabilizes the saddle dynamics."""
    if warm is not None:
        if warm.f.spec != arch_f or warm.T.spec != arch_T:
            raise ValueError("warm-start pair has a different architecture")
        return warm.copy()
    block = EnkfBlock.from_batch(xs, ys) if arch_T.has_enkf_block else None
    f_shift, f_scale = _whiten_stats(np.concatenate([xs, ys], axis=1))
    if block is not None:
        t_shift, t_scale = _whiten_stats(np.concatenate([block.apply(xs, ys), ys], axis=1))
    else:
        t_shift, t_scale = f_shift, f_scale
    f_params = init_params(arch_f, int(seeds[0]), input_shift=f_shift, input_scale=f_scale)
    t_params = init_params(arch_T, int(seeds[1]), enkf_block=block,
                           input_shift=t_shift, input_scale=t_scale)
    return MapPair(f=f_params, T=t_params)


def _train_impl(xs: np.ndarray, ys: np.ndarray, arch_f: ArchitectureSpec,
                arch_T: ArchitectureSpec, cfg: TrainConfig,
                warm: MapPair | None, train_potential: bool,
                fixed_f: NetworkParams | None) -> TrainResult:
    n_samples = xs.shape[0]
    if n_samples < cfg.batch_size:
        cfg = replace(cfg, batch_size=n_samples)
    ss = np.random.SeedSequence(cfg.seed)
    init_seeds = ss.generate_state(2)
    rng = np.random.default_rng(ss.spawn(1)[0])

    pair = _prepare_networks(xs, ys, arch_f, arch_T, init_seeds, warm)
    if fixed_f is not None:
        pair = MapPair(f=fixed_f, T=pair.T)
    adam_f = AdamState.fresh(pair.f.values.size, cfg.lr_f)
    adam_t = AdamState.fresh(pair.T.values.size, cfg.lr_T)

    trace, checkpoints = [], []
    f_params, t_params = pair.f, pair.T
    avg_start = cfg.outer_iters - int(np.ceil(cfg.average_last_frac * cfg.outer_iters))
    avg_t = np.zeros_like(t_params.values)
    avg_f = np.zeros_like(f_params.values)
    avg_n = 0

    def minibatch():
        idx = rng.choice(n_samples, size=cfg.batch_size, replace=False) \
            if cfg.batch_size < n_samples else np.arange(n_samples)
        perm = rng.permutation(cfg.batch_size)
        return xs[idx], ys[idx], xs[idx][perm]

    for outer in range(cfg.outer_iters):
        if cfg.lr_decay != 1.0:
            frac = cfg.lr_decay ** (outer / max(cfg.outer_iters - 1, 1))
            adam_t = replace(adam_t, lr=cfg.lr_T * frac)
            adam_f = replace(adam_f, lr=cfg.lr_f * frac)
        for _ in range(cfg.inner_steps_per_outer):
            xb, yb, xbar = minibatch()
            g_t = _map_step_grad(f_params, t_params, xb, yb, xbar, cfg.cost_pairing)
            t_params, adam_t = adam_step(t_params, g_t, adam_t, "descend")
        xb, yb, xbar = minibatch()
        if train_potential:
            g_f = _potential_step_grad(f_params, t_params, xb, yb, xbar)
            f_params, adam_f = adam_step(f_params, g_f, adam_f, "ascend")
        if outer % cfg.trace_every == 0 or outer == cfg.outer_iters - 1:
            j_now = empirical_objective(MapPair(f=f_params, T=t_params),
                                        PairedBatch(xb, yb, xbar, np.arange(len(xb))),
                                        cfg.cost_pairing)
            trace.append(j_now)
            if not np.isfinite(j_now):
                raise TrainingDivergedError(
                    f"objective became non-finite at outer iteration {outer}", trace)
        if cfg.checkpoint_every > 0 and (outer + 1) % cfg.checkpoint_every == 0:
            checkpoints.append(MapPair(f=f_params, T=t_params).copy())
        if cfg.average_last_frac > 0.0 and outer >= avg_start:
            avg_t += t_params.values
            avg_f += f_params.values
            avg_n += 1

    if avg_n > 0:
        t_params = replace(t_params, values=avg_t / avg_n)
        if fixed_f is None:
            f_params = replace(f_params, values=avg_f / avg_n)
    return TrainResult(pair=MapPair(f=f_params, T=t_params), objective_trace=trace,
                       checkpoints=checkpoints)


def train_full(samples, arch_f: ArchitectureSpec, arch_T: ArchitectureSpec,
               cfg: TrainConfig, warm: MapPair | None = None) -> TrainResult:
    """Adversarial training returning the pair plus objective trace and checkpoints.

    Per outer iteration: ``inner_steps_per_outer`` Adam descent steps on T,
    then one ascent step on f, each on a fresh minibatch with a fresh shuffle.
    The EnKF block and input whitening are re-estimated from ``samples`` and
    frozen; a warm start reuses only the trainable values of both networks.
    """
    xs, ys = _split_samples(samples)
    return _train_impl(xs, ys, arch_f, arch_T, cfg, warm,
                       train_potential=True, fixed_f=None)


def train(samples, arch_f: ArchitectureSpec, arch_T: ArchitectureSpec,
          cfg: TrainConfig, warm: MapPair | None = None) -> MapPair:
    """Train the max-min pair; deterministic for a fixed ``cfg.seed``."""
    return train_full(samples, arch_f, arch_T, cfg, warm).pair


def transport(pair: MapPair, ens: Ensemble, y: np.ndarray) -> Ensemble:
    """Push every particle through the trained map at the realized observation."""
    if not ens.is_uniform:
        raise ValueError("transport expects a uniform-weight ensemble")
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    inp = np.concatenate([ens.particles, np.tile(y, (ens.size, 1))], axis=1)
    return Ensemble(forward(pair.T, inp))


def joint_consistency_mmd(pair: MapPair, samples, rng: np.random.Generator) -> float:
    """MMD between pushed-forward independent-coupling pairs and held-out joint pairs.

    The samples are split 50/50: one half is shuffled and transported, the
    other half is the held-out joint reference.
    """
    xs, ys = _split_samples(samples)
    n = xs.shape[0]
    order = rng.permutation(n)
    half = n // 2
    fit, hold = order[:half], order[half:]
    batch = make_paired_batch((xs[fit], ys[fit]), rng)
    t_out = forward(pair.T, np.concatenate([batch.xs_shuffled, batch.ys], axis=1))
    pushed = np.concatenate([t_out, batch.ys], axis=1)
    held = np.concatenate([xs[hold], ys[hold]], axis=1)
    return mmd(pushed, held)


def convexity_diagnostic(pair, samples, probe_count: int = 20,
                         state_dim: int | None = None,
                         fd_step: float = 1e-3) -> tuple[bool, float]:
    """A-posteriori convexity check of x -> 1/2|x|^2 - f(x, y) at probe points.

    Returns ``(is_c_concave, alpha_hat)`` where ``alpha_hat`` is the smallest
    Hessian eigenvalue seen across probes (finite-difference Hessian).
    Accepts a MapPair, a potential NetworkParams, or a plain callable
    ``f(x, y) -> float`` (the latter requires ``state_dim``).
    """
    xs, ys = _split_samples(samples)
    probes = min(probe_count, xs.shape[0])
    if isinstance(pair, MapPair):
        f_params, n = pair.f, pair.state_dim
    elif isinstance(pair, NetworkParams):
        f_params, n = pair, state_dim
        if n is None:
            raise ValueError("state_dim is required with a bare potential network")
    else:
        f_params, n = None, state_dim
        if n is None:
            raise ValueError("state_dim is required with a callable potential")

    def hess_f(x0: np.ndarray, y0: np.ndarray) -> np.ndarray:
        h = fd_step
        out = np.empty((n, n))
        if f_params is not None:
            for j in range(n):
                e = np.zeros(n)
                e[j] = h
                gp = input_gradient(f_params, np.concatenate([x0 + e, y0]))[:n]
                gm = input_gradient(f_params, np.concatenate([x0 - e, y0]))[:n]
                out[:, j] = (gp - gm) / (2.0 * h)
        else:
            for j in range(n):
                for k in range(j, n):
                    ej = np.zeros(n); ej[j] = h
                    ek = np.zeros(n); ek[k] = h
                    val = (pair(x0 + ej + ek, y0) - pair(x0 + ej - ek, y0)
                           - pair(x0 - ej + ek, y0) + pair(x0 - ej - ek, y0))
                    out[j, k] = out[k, j] = val / (4.0 * h * h)
        return 0.5 * (out + out.T)

    alpha_hat = np.inf
    for i in range(probes):
        hess_c = np.eye(n) - hess_f(xs[i, :n] if f_params is None else xs[i], ys[i])
        alpha_hat = min(alpha_hat, float(np.min(np.linalg.eigvalsh(hess_c))))
    return alpha_hat >= 0.0, float(alpha_hat)


def optimality_gap_estimate(pair: MapPair, samples, cfg: TrainConfig) -> float:
    """Finite-budget estimate of the total max-min optimality gap.

    ``min_S J(f, S)`` is replaced by a freshly trained inner minimizer against
    the frozen f, and the max-min value by a freshly trained pair, both with
    the same budget as ``cfg``.  Both substitutions bias the estimate upward;
    it is an estimate, not the exact gap.
    """
    xs, ys = _split_samples(samples)
    eval_batch = make_paired_batch((xs, ys), np.random.default_rng(cfg.seed + 101))
    inner = _train_impl(xs, ys, pair.f.spec, pair.T.spec, replace(cfg, seed=cfg.seed + 1),
                        warm=None, train_potential=False, fixed_f=pair.f)
    fresh = _train_impl(xs, ys, pair.f.spec, pair.T.spec, replace(cfg, seed=cfg.seed + 2),
                        warm=None, train_potential=True, fixed_f=None)
    j_ft = empirical_objective(pair, eval_batch, cfg.cost_pairing)
    j_fs = empirical_objective(MapPair(f=pair.f, T=inner.pair.T), eval_batch, cfg.cost_pairing)
    j_mm = empirical_objective(fresh.pair, eval_batch, cfg.cost_pairing)
    return (j_ft - j_fs) + (j_mm - j_fs)


# -- serialization -------------------------------------------------------------

_MAGIC = b"OTMP"
_VERSION = 1


def _net_header(params: NetworkParams) -> dict:
    spec = params.spec
    return {
        "spec": {
            "input_dim": spec.input_dim, "output_dim": spec.output_dim,
            "hidden_width": spec.hidden_width,
            "num_residual_blocks": spec.num_residual_blocks,
            "activation": spec.activation, "has_enkf_block": spec.has_enkf_block,
        },
        "has_block": params.enkf_block is not None,
    }


def _net_arrays(params: NetworkParams) -> list[np.ndarray]:
    arrays = [params.values, params.input_shift, params.input_scale]
    if params.enkf_block is not None:
        blk = params.enkf_block
        arrays += [blk.gain, blk.obs_map, blk.x_mean, blk.y_mean]
    return arrays


def save_map_pair(pair: MapPair, path) -> None:
    """Versioned binary dump: architecture header + little-endian float64 arrays."""
    header = {"f": _net_header(pair.f), "T": _net_header(pair.T)}
    arrays = _net_arrays(pair.f) + _net_arrays(pair.T)
    header["shapes"] = [list(a.shape) for a in arrays]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_map_pair(path) -> MapPair:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a map-pair file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported map-pair file version {version}")
        header = json.loads(fh.read(hlen).decode())
        arrays = []
        for shape in header["shapes"]:
            count = int(np.prod(shape)) if shape else 1
            arrays.append(np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy())

    def rebuild(net_hdr, arrs):
        spec = ArchitectureSpec(**net_hdr["spec"])
        values, shift, scale = arrs[:3]
        block = None
        if net_hdr["has_block"]:
            block = EnkfBlock(gain=arrs[3], obs_map=arrs[4], x_mean=arrs[5], y_mean=arrs[6])
        return NetworkParams(spec=spec, values=values, enkf_block=block,
                             input_shift=shift, input_scale=scale)

    n_f = 3 + (4 if header["f"]["has_block"] else 0)
    return MapPair(f=rebuild(header["f"], arrays[:n_f]),
                   T=rebuild(header["T"], arrays[n_f:]))
