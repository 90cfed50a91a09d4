"""Recursive filtering driver: one time loop, five Bayes-update engines.

Engines: exact Kalman recursion (linear-Gaussian only), EnKF, SIR, the
trained optimal-transport update (with warm-started training), and the
static-FPF update (scalar observations).  The OT step follows the three-step
scheme: propagate particles, simulate one observation per particle, train the
max-min pair on those pairs, transport all particles with the realized
observation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .classical import (
    GaussianBelief,
    effective_sample_size,
    enkf_update,
    importance_weights,
    kalman_update,
    multinomial_resample,
)
from .diffnet import ArchitectureSpec
from .ensemble import Ensemble
from .fpf import fpf_static_update
from .metrics import MetricReport
from .models import LinearGaussianModel, StateSpaceModel, propagate_ensemble
from .ot_bayes import MapPair, TrainConfig, train, transport

__all__ = ["FilterKind", "FilterConfig", "FilterRun", "ot_filter_step",
           "run_filter", "resample_stage"]

FILTER_KINDS = ("kalman", "enkf", "sir", "ot", "fpf_static")


class FilterKind(str):
    """Engine name; must be one of FILTER_KINDS."""

    def __new__(cls, value: str):
        if value not in FILTER_KINDS:
            raise ValueError(f"unknown filter kind {value!r}; choose from {FILTER_KINDS}")
        return super().__new__(cls, value)


@dataclass
class FilterConfig:
    """Per-run options around the engines.

    ``train`` configures the first OT training; later steps reuse the trained
    pair as a warm start with ``warm_start_frac`` of the outer iterations.
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    arch_width: int = 32
    arch_blocks: int = 2
    arch_activation: str = "tanh"
    warm_start_frac: float = 0.25
    guard_factor: float = 5.0  # warm-step consistency tolerance; 0 disables the guard
    resample_after_update: bool = False
    fpf_substeps: int = 100
    fpf_gain: str = "constant"
    record_ensembles: bool = True


@dataclass
class FilterRun:
    """Ensembles (or Gaussian beliefs) per step plus per-step metric rows."""

    kind: str
    ensembles: list = field(default_factory=list)
    beliefs: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    config: FilterConfig | None = None
    master_seed: int = 0

    def means(self) -> np.ndarray:
        if self.kind == "kalman":
            return np.array([b.mean for b in self.beliefs])
        return np.array([e.mean() for e in self.ensembles])


def resample_stage(ens: Ensemble, rng: np.random.Generator) -> Ensemble:
    """Bootstrap redraw with replacement; decouples particles after transport."""
    if not ens.is_uniform:
        raise ValueError("resample_stage expects uniform weights")
    idx = multinomial_resample(np.full(ens.size, 1.0 / ens.size), rng)
    return Ensemble(ens.particles[idx])


def _pushforward_consistent(pair: MapPair, xs: np.ndarray, ys: np.ndarray,
                            rng: np.random.Generator, factor: float) -> bool:
    """Check (T(xbar, y), y) against held-out joint samples on the training batch.

    A trained pair should push the independent coupling onto the joint; a
    pushforward MMD far above the same-law split MMD marks a failed training.
    """
    from .metrics import mmd as _mmd

    n = xs.shape[0]
    order = rng.permutation(n)
    half = n // 2
    a, b = order[:half], order[half:2 * half]
    perm = rng.permutation(half)
    t_out = transport_points(pair, xs[a][perm], ys[a])
    pushed = np.concatenate([t_out, ys[a]], axis=1)
    joint_a = np.concatenate([xs[a], ys[a]], axis=1)
    joint_b = np.concatenate([xs[b], ys[b]], axis=1)
    null = abs(_mmd(joint_a, joint_b))
    return _mmd(pushed, joint_b) <= factor * max(null, 1e-3)


def transport_points(pair: MapPair, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Apply the map rowwise to matched (x, y) arrays."""
    from .diffnet import forward

    return forward(pair.T, np.concatenate([xs, ys], axis=1))


def ot_filter_step(ens: Ensemble, y_t: np.ndarray, model: StateSpaceModel,
                   cfg: TrainConfig, warm: MapPair | None,
                   rng: np.random.Generator,
                   arch_f: ArchitectureSpec | None = None,
                   arch_T: ArchitectureSpec | None = None,
                   cold_cfg: TrainConfig | None = None,
                   guard_factor: float = 0.0) -> tuple[Ensemble, MapPair]:
    """Propagate, simulate per-particle observations, train, transport.

    With a warm start, a failed pushforward-consistency check triggers one
    cold retraining with ``cold_cfg`` (stale warm pairs destabilize the saddle
    training when the predicted ensemble shifts regime).
    """
    if not ens.is_uniform:
        raise ValueError("ot_filter_step expects uniform weights")
    pred = propagate_ensemble(model, ens, rng)
    y_sim = model.sample_observation(pred.particles, rng)
    if arch_f is None or arch_T is None:
        n, m = model.state_dim, model.obs_dim
        arch_f = arch_f or ArchitectureSpec(n + m, 1, 32, 2, "tanh")
        arch_T = arch_T or ArchitectureSpec(n + m, n, 32, 2, "tanh", has_enkf_block=True)
    pair = train((pred.particles, y_sim), arch_f, arch_T, cfg, warm=warm)
    if warm is not None and guard_factor > 0:
        if not _pushforward_consistent(pair, pred.particles, y_sim, rng, guard_factor):
            pair = train((pred.particles, y_sim), arch_f, arch_T,
                         cold_cfg or cfg, warm=None)
    return transport(pair, pred, y_t), pair


def _fpf_step(ens: Ensemble, y_t: float, model: StateSpaceModel,
              cfg: FilterConfig) -> Ensemble:
    """Static-FPF assimilation of one discrete scalar observation.

    A discrete Gaussian observation y = h(x) + lam w is equivalent to a
    unit-noise observation path with signal h/lam and endpoint y/lam, so the
    update integrates the deterministic path increments (y/lam) ds over
    s in [0, 1].
    """
    if model.obs_dim != 1:
        raise ValueError("the static-FPF engine handles scalar observations only")
    lam = getattr(model, "lam", None) or getattr(model, "obs_noise_std", None)
    if lam is None and hasattr(model, "R"):
        lam = float(np.sqrt(model.R[0, 0]))
    if lam is None:
        raise ValueError("model does not expose a Gaussian observation noise scale")
    if hasattr(model, "obs_mean"):
        h = lambda x: model.obs_mean(x)[:, 0] / lam
    else:
        H = model.H
        h = lambda x: (x @ H.T)[:, 0] / lam
    ds = 1.0 / cfg.fpf_substeps
    increments = np.full(cfg.fpf_substeps, float(y_t) / lam * ds)
    return fpf_static_update(ens, increments, h, ds, gain_method=cfg.fpf_gain)


def run_filter(model: StateSpaceModel, observations: np.ndarray, kind: str,
               N: int, cfg: FilterConfig | None = None, seed: int = 0) -> FilterRun:
    """Run one engine over an observation sequence.

    Deterministic in (model, observations, kind, N, cfg, seed): all randomness
    comes from streams spawned from the seed in a fixed order.
    """
    kind = FilterKind(kind)
    cfg = cfg or FilterConfig()
    observations = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    if observations.shape[0] == 0:
        raise ValueError("observations must be nonempty")
    if kind == "kalman" and not isinstance(model, LinearGaussianModel):
        raise ValueError("the exact Kalman engine needs a LinearGaussianModel")
    if kind == "sir" and not model.has_likelihood:
        raise ValueError("SIR needs a model with an analytic likelihood")

    run = FilterRun(kind=str(kind), config=cfg, master_seed=seed)
    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss.spawn(1)[0])

    if kind == "kalman":
        belief = GaussianBelief(model.prior_mean, model.prior_cov)
        for t, y in enumerate(observations):
            pred_mean = model.A @ belief.mean
            pred_cov = model.A @ belief.cov @ model.A.T + model.Q
            belief = kalman_update(GaussianBelief(pred_mean, pred_cov), model.H, model.R, y)
            run.beliefs.append(belief)
            run.metrics.append(MetricReport(step=t + 1))
        return run

    ens = Ensemble(model.sample_prior(rng, N))
    pair: MapPair | None = None
    n, m = model.state_dim, model.obs_dim
    arch_f = ArchitectureSpec(n + m, 1, cfg.arch_width, cfg.arch_blocks, cfg.arch_activation)
    arch_T = ArchitectureSpec(n + m, n, cfg.arch_width, cfg.arch_blocks,
                              cfg.arch_activation, has_enkf_block=True)

    for t, y in enumerate(observations):
        t0 = time.perf_counter()
        ess = float(N)
        if kind == "ot":
            step_cfg = cfg.train
            cold_cfg = replace(cfg.train, seed=cfg.train.seed + 7919 + t)
            if pair is not None:
                warm_outers = max(1, round(cfg.warm_start_frac * cfg.train.outer_iters))
                step_cfg = replace(cfg.train, outer_iters=warm_outers,
                                   seed=cfg.train.seed + 1 + t)
            ens, pair = ot_filter_step(ens, y, model, step_cfg, pair, rng,
                                       arch_f=arch_f, arch_T=arch_T,
                                       cold_cfg=cold_cfg, guard_factor=cfg.guard_factor)
        else:
            ens = propagate_ensemble(model, ens, rng)
            if kind == "enkf":
                ens = enkf_update(ens, y, model, rng)
            elif kind == "sir":
                w = importance_weights(ens, y, model)
                ess = effective_sample_size(w)
                ens = Ensemble(ens.particles[multinomial_resample(w, rng)])
            elif kind == "fpf_static":
                ens = _fpf_step(ens, y[0], model, cfg)
        if cfg.resample_after_update:
            ens = resample_stage(ens, rng)
        if cfg.record_ensembles:
            run.ensembles.append(ens)
        run.metrics.append(MetricReport(step=t + 1, ess=ess,
                                        wall_clock=time.perf_counter() - t0))
    if not cfg.record_ensembles:
        run.ensembles.append(ens)
    return run
