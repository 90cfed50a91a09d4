"""Dense residual networks with reverse-mode gradients and Adam.

The two architectures used by the transport trainer are a scalar potential
network (plain residual MLP) and a map network that may carry a frozen
"EnKF block": an affine particle update ``x + K(y - yhat(x))`` whose gain and
linearized observation map are estimated once from a particle batch and held
fixed during training.  The trainable residual network receives the block
output (and the observation) and its final projection layer is
zero-initialized, so an untrained map network reproduces the affine update
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .autodiff import Tensor, UnsupportedPrimitiveError, concat

__all__ = [
    "ArchitectureSpec",
    "EnkfBlock",
    "NetworkParams",
    "AdamState",
    "param_count",
    "init_params",
    "forward",
    "gradient",
    "adam_step",
    "input_gradient",
    "input_jacobian",
]

_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ArchitectureSpec:
    """Shape of a residual MLP: input -> width -> blocks -> output."""

    input_dim: int
    output_dim: int
    hidden_width: int = 64
    num_residual_blocks: int = 2
    activation: str = "relu"
    has_enkf_block: bool = False

    def __post_init__(self):
        for name in ("input_dim", "output_dim", "hidden_width", "num_residual_blocks"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer (got {v!r})")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if self.has_enkf_block and self.output_dim >= self.input_dim:
            # block semantics need input = (state, observation) with state = output_dim
            raise ValueError("has_enkf_block requires input_dim = state_dim + obs_dim > output_dim")


@dataclass(frozen=True)
class EnkfBlock:
    """Frozen affine update ``x + K (y - y_mean - H (x - x_mean))``.

    ``gain`` is n x m, ``obs_map`` is the m x n linearization of the
    observation model, both estimated from empirical covariances of a
    particle batch.  Not trainable.
    """

    gain: np.ndarray
    obs_map: np.ndarray
    x_mean: np.ndarray
    y_mean: np.ndarray

    def apply(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        innov = (y - self.y_mean) - (x - self.x_mean) @ self.obs_map.T
        return x + innov @ self.gain.T

    @staticmethod
    def from_batch(xs: np.ndarray, ys: np.ndarray, jitter: float = 1e-9) -> "EnkfBlock":
        """Estimate gain and obs linearization from joint samples (1/(N-1) covariances)."""
        n_samp = xs.shape[0]
        xm, ym = xs.mean(axis=0), ys.mean(axis=0)
        xc, yc = xs - xm, ys - ym
        cxx = xc.T @ xc / (n_samp - 1)
        cxy = xc.T @ yc / (n_samp - 1)
        cyy = yc.T @ yc / (n_samp - 1)
        gain = np.linalg.solve(cyy + jitter * np.eye(cyy.shape[0]), cxy.T).T
        obs_map = np.linalg.solve(cxx + jitter * np.eye(cxx.shape[0]), cxy).T
        return EnkfBlock(gain=gain, obs_map=obs_map, x_mean=xm, y_mean=ym)


@dataclass
class NetworkParams:
    """Flat parameter vector plus the frozen (non-trainable) state of a network.

    ``input_shift``/``input_scale`` whiten the residual network input; they are
    estimated per training call and frozen, like the EnKF block.
    """

    spec: ArchitectureSpec
    values: np.ndarray
    enkf_block: EnkfBlock | None = None
    input_shift: np.ndarray = field(default=None)
    input_scale: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = param_count(self.spec)
        if self.values.shape != (expected,):
            raise ValueError(f"values has length {self.values.shape}, spec implies ({expected},)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite entries")
        if self.spec.has_enkf_block and self.enkf_block is None:
            raise ValueError("spec.has_enkf_block is set but no EnkfBlock was provided")
        if self.input_shift is None:
            self.input_shift = np.zeros(self.spec.input_dim)
        if self.input_scale is None:
            self.input_scale = np.ones(self.spec.input_dim)

    def copy(self) -> "NetworkParams":
        return replace(self, values=self.values.copy())


def _layer_slices(spec: ArchitectureSpec) -> list[tuple[int, int, tuple]]:
    """(start, size, shape) for each weight/bias in the flat vector."""
    w = spec.hidden_width
    shapes = [(spec.input_dim, w), (w,)]
    for _ in range(spec.num_residual_blocks):
        shapes += [(w, w), (w,), (w, w), (w,)]
    shapes += [(w, spec.output_dim), (spec.output_dim,)]
    out, start = [], 0
    for shp in shapes:
        size = int(np.prod(shp))
        out.append((start, size, shp))
        start += size
    return out


def param_count(spec: ArchitectureSpec) -> int:
    start, size, _ = _layer_slices(spec)[-1]
    return start + size


def init_params(spec: ArchitectureSpec, seed: int, enkf_block: EnkfBlock | None = None,
                input_shift: np.ndarray | None = None,
                input_scale: np.ndarray | None = None) -> NetworkParams:
    """Deterministic initialization; the final projection layer is zeroed.

    Hidden weights use fan-in scaling (sqrt(2/fan_in) for relu, sqrt(1/fan_in)
    for tanh).  Zeroing the projection makes an untrained network output zero,
    so a map network with an EnKF block starts exactly at the affine update.
    """
    rng = np.random.default_rng(seed)
    gain = np.sqrt(2.0) if spec.activation == "relu" else 1.0
    values = np.zeros(param_count(spec))
    slices = _layer_slices(spec)
    for start, size, shp in slices[:-2]:
        if len(shp) == 2:  # weight matrix
            values[start:start + size] = (gain / np.sqrt(shp[0])) * rng.standard_normal(size)
    # final (start, size, shape) pairs stay zero: projection weight and bias
    return NetworkParams(spec=spec, values=values, enkf_block=enkf_block,
                         input_shift=input_shift, input_scale=input_scale)


def _net_apply(params: NetworkParams, flat: Tensor, x: Tensor) -> Tensor:
    """Residual MLP forward on a (B, d) tensor given the flat parameter tensor."""
    spec = params.spec
    act = Tensor.relu if spec.activation == "relu" else Tensor.tanh
    views = [flat.narrow(start, size).reshape(shp) for start, size, shp in _layer_slices(spec)]
    z = act(x.affine(views[0], views[1]))
    k = 2
    for _ in range(spec.num_residual_blocks):
        w1, b1, w2, b2 = views[k:k + 4]
        z = z + act(z.affine(w1, b1)).affine(w2, b2)
        k += 4
    return z.affine(views[k], views[k + 1])


def _enkf_apply_tensor(blk: EnkfBlock, xs: Tensor, ys: Tensor) -> Tensor:
    """Fused tape node for x + K (y - y_mean - H (x - x_mean))."""
    innov = (ys.data - blk.y_mean) - (xs.data - blk.x_mean) @ blk.obs_map.T
    out = Tensor(xs.data + innov @ blk.gain.T, _parents=(xs, ys))

    def bwd(g):
        gk = g @ blk.gain
        if xs.requires_grad:
            xs._accumulate(g - gk @ blk.obs_map)
        if ys.requires_grad:
            ys._accumulate(gk)

    out._bwd = bwd if out.requires_grad else None
    return out


def _forward_tensor(params: NetworkParams, x: Tensor,
                    flat: Tensor | None = None) -> Tensor:
    """Full forward (EnKF block + whitening + residual net) on a tape tensor."""
    spec = params.spec
    if flat is None:
        flat = Tensor(params.values)
    if spec.has_enkf_block:
        n = spec.output_dim
        m = spec.input_dim - n
        xs = x.narrow(0, n, axis=-1)
        ys = x.narrow(n, m, axis=-1)
        base = _enkf_apply_tensor(params.enkf_block, xs, ys)
        net_in = concat([base, ys], axis=-1)
    else:
        base = None
        net_in = x
    inv = 1.0 / params.input_scale
    net_in = net_in.scale_shift(inv, -params.input_shift * inv)
    out = _net_apply(params, flat, net_in)
    return out if base is None else out + base


def forward(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a (B, input_dim) batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != params.spec.input_dim:
        raise ValueError(f"input has dim {x.shape[1]}, spec expects {params.spec.input_dim}")
    out = _forward_tensor(params, Tensor(x)).data
    return out[0] if single else out


def gradient(loss_fn: Callable, params: NetworkParams, batch: np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of a scalar loss with respect to the flat parameters.

    ``loss_fn(apply, flat, batch)`` must build a scalar :class:`Tensor` from the
    supported primitives; ``apply(x)`` runs the network (with the EnKF block and
    whitening applied) on a tensor or array ``x``, and ``flat`` is the parameter
    vector as a leaf tensor.
    """
    flat = Tensor(params.values, requires_grad=True)
    batch_t = Tensor(np.atleast_2d(np.asarray(batch, dtype=np.float64)))

    def apply(x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return _forward_tensor(params, x, flat=flat)

    loss = loss_fn(apply, flat, batch_t)
    if not isinstance(loss, Tensor):
        raise UnsupportedPrimitiveError("loss_fn must return a Tensor built from supported primitives")
    loss.backward()
    return np.zeros_like(params.values) if flat.grad is None else flat.grad


def input_gradient(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Gradient of a scalar-output network with respect to its input vector."""
    if params.spec.output_dim != 1:
        raise ValueError("input_gradient requires a scalar-output network")
    xt = Tensor(np.asarray(x, dtype=np.float64)[None, :], requires_grad=True)
    out = _forward_tensor(params, xt).sum()
    out.backward()
    return xt.grad[0]


def input_jacobian(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """(output_dim, input_dim) Jacobian with respect to the input vector."""
    rows = []
    for k in range(params.spec.output_dim):
        xt = Tensor(np.asarray(x, dtype=np.float64)[None, :], requires_grad=True)
        _forward_tensor(params, xt).narrow(k, 1, axis=-1).sum().backward()
        rows.append(xt.grad[0].copy())
    return np.stack(rows)


@dataclass
class AdamState:
    """Adam optimizer state for one flat parameter vector."""

    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def fresh(n_params: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        return AdamState(step=0, first_moment=np.zeros(n_params),
                         second_moment=np.zeros(n_params), lr=lr,
                         beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: NetworkParams, grad: np.ndarray, state: AdamState,
              direction: str = "descend") -> tuple[NetworkParams, AdamState]:
    """One Adam update with bias correction; ``direction="ascend"`` negates the gradient."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ValueError("gradient length does not match parameter vector")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient entry")
    if direction not in ("ascend", "descend"):
        raise ValueError("direction must be 'ascend' or 'descend'")
    g = -grad if direction == "ascend" else grad
    t = state.step + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = replace(state, step=t, first_moment=m, second_moment=v)
    return replace(params, values=new_values), new_state
