"""Finite-width residual networks with explicit forward/backward/SGD rules.

Supports one-layer pre-activation and post-activation blocks and two-layer
pre-activation blocks, a decoupled-backward mode (independent copy of the
initial weights in backpropagation), and the internal-collapse diagnostics
for two-layer blocks together with the depth-aware learning-rate fix.

Weight updates are kept separate from the Gaussian initialization: each
update is a rank-one outer product, accumulated in a WeightDelta. This keeps
the decoupled mode and frozen-weight baselines cheap, and lets wide networks
(n >= 2048) run within desk-scale memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .activations import Activation, get_activation
from .data import LossKind, MSE
from .errors import ConfigError, DimensionMismatch, DomainError, TraceMismatch
from .numerics import Rng

BLOCKS = ("preact_one", "postact_one", "preact_two")

# Compact low-rank updates into a dense base once the rank passes this, but
# only for matrices small enough that a dense copy is cheap.
_COMPACT_RANK = 64
_COMPACT_MAX_ENTRIES = 1 << 22


@dataclass
class NetConfig:
    n: int
    L: int
    d: int
    T: float = 1.0
    alpha_mode: str = "mup"  # "mup" (alpha = 1/sqrt(n)) or "ntk" (alpha = 1)
    block: str = "preact_one"
    activation: Union[str, Activation] = "relu"
    lr_base: float = 0.01
    depth_aware_lr: bool = False
    backward_mode: str = "standard"  # or "decoupled"
    decoupled_freeze_updates: bool = False
    # True = depth-adapted residual scaling (1/sqrt(L) on the branch).
    # False = plain width-wise muP, used to show what the depth scaling buys.
    depth_scaled: bool = True

    def __post_init__(self):
        if self.n < 1 or self.L < 1 or self.d < 1:
            raise ConfigError(f"n, L, d must be >= 1, got {(self.n, self.L, self.d)}")
        if self.T <= 0:
            raise ConfigError(f"time horizon must be positive, got {self.T}", field="T")
        if self.alpha_mode not in ("mup", "ntk"):
            raise ConfigError(f"unknown alpha_mode {self.alpha_mode!r}", field="alpha_mode")
        if self.block not in BLOCKS:
            raise ConfigError(f"unknown block {self.block!r}", field="block")
        if self.backward_mode not in ("standard", "decoupled"):
            raise ConfigError(
                f"unknown backward_mode {self.backward_mode!r}", field="backward_mode"
            )
        if self.depth_aware_lr and self.block != "preact_two":
            raise ConfigError(
                "depth_aware_lr only applies to two-layer blocks",
                field="depth_aware_lr",
            )
        if self.block == "preact_two" and self.T != 1.0:
            raise ConfigError(
                "two-layer blocks fix the time horizon to 1", field="T"
            )

    @property
    def phi(self) -> Activation:
        return get_activation(self.activation)

    @property
    def alpha(self) -> float:
        return 1.0 / np.sqrt(self.n) if self.alpha_mode == "mup" else 1.0

    @property
    def eta(self) -> float:
        """Effective learning rate: eta_c * n under muP, eta_c under NTK."""
        return self.lr_base * self.n if self.alpha_mode == "mup" else self.lr_base

    @property
    def branch_scale(self) -> float:
        """Scale on the residual branch matmul."""
        if self.block == "preact_two":
            return 1.0 / np.sqrt(self.L * self.n)
        if self.block == "postact_one":
            return np.sqrt(self.T / self.L)
        if self.depth_scaled:
            return np.sqrt(self.T / (self.L * self.n))
        return np.sqrt(self.T / self.n)


def _w_matvec(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    # float32 storage keeps wide nets in memory; accumulate back to float64
    if w.dtype == np.float32:
        return (w @ x.astype(np.float32)).astype(np.float64)
    return w @ x


def _w_rmatvec(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    if w.dtype == np.float32:
        return (w.T @ x.astype(np.float32)).astype(np.float64)
    return w.T @ x


class WeightDelta:
    """Cumulative SGD update to one weight matrix, as a sum of outer products."""

    def __init__(self, n_out: int, n_in: int):
        self.n_out = n_out
        self.n_in = n_in
        self.base: Optional[np.ndarray] = None
        self.left: List[np.ndarray] = []
        self.right: List[np.ndarray] = []

    @property
    def rank(self) -> int:
        return len(self.left)

    def is_zero(self) -> bool:
        return self.base is None and not self.left

    def add_outer(self, coef: float, left: np.ndarray, right: np.ndarray) -> None:
        if coef == 0.0:
            return
        self.left.append(coef * np.asarray(left, dtype=np.float64))
        self.right.append(np.asarray(right, dtype=np.float64))
        if (
            self.rank > _COMPACT_RANK
            and self.n_out * self.n_in <= _COMPACT_MAX_ENTRIES
        ):
            self._compact()

    def _compact(self) -> None:
        dense = np.column_stack(self.left) @ np.stack(self.right)
        self.base = dense if self.base is None else self.base + dense
        self.left, self.right = [], []

    def matvec(self, x: np.ndarray) -> np.ndarray:
        out = self.base @ x if self.base is not None else np.zeros(self.n_out)
        for lv, rv in zip(self.left, self.right):
            out = out + lv * float(rv @ x)
        return out

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        out = self.base.T @ x if self.base is not None else np.zeros(self.n_in)
        for lv, rv in zip(self.left, self.right):
            out = out + rv * float(lv @ x)
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_out, self.n_in))
        if self.base is not None:
            out += self.base
        if self.left:
            out += np.column_stack(self.left) @ np.stack(self.right)
        return out


def _apply(w: np.ndarray, dw: WeightDelta, x: np.ndarray) -> np.ndarray:
    out = _w_matvec(w, x)
    return out if dw.is_zero() else out + dw.matvec(x)


def _apply_t(w: np.ndarray, dw: WeightDelta, x: np.ndarray) -> np.ndarray:
    out = _w_rmatvec(w, x)
    return out if dw.is_zero() else out + dw.rmatvec(x)


@dataclass
class NetParams:
    """All trainable state of one network.

    w_init holds the Gaussian initialization per layer (a matrix, or a
    (W1, W2) pair for two-layer blocks) and is never modified after
    init_params; dw holds the cumulative updates. w_tilde holds the
    independent backward copies in decoupled mode.
    """

    U: np.ndarray
    v: np.ndarray
    w_init: list
    dw: list
    w_tilde: Optional[list] = None
    step: int = 0


@dataclass
class ForwardTrace:
    h: np.ndarray  # (L+1, n), residual-stream features h_0..h_L
    f: float
    x: np.ndarray
    step: int
    x_internal: Optional[np.ndarray] = None  # (L, n) block-internal preacts
    preact_in: Optional[np.ndarray] = None  # Ux/sqrt(d) for postact blocks


@dataclass
class BackwardTrace:
    g: np.ndarray  # (L+1, n), scaled gradients d f / d h_ell * sqrt(n)/alpha
    step: int


@dataclass
class StepRecord:
    step: int
    f: float
    loss: float
    h_norms: np.ndarray  # per-layer ||h_ell|| / sqrt(n)
    g_norms: np.ndarray


def init_params(cfg: NetConfig, rng: Rng, store_dtype=np.float64) -> NetParams:
    """All weight entries i.i.d. N(0,1); updates start at zero.

    store_dtype float32 halves the memory of the initialization for wide
    sweeps; arithmetic still accumulates in float64.
    """
    n, d, L = cfg.n, cfg.d, cfg.L

    def draw(rows, cols):
        return rng.standard_normal(rows, cols).astype(store_dtype, copy=False)

    U = rng.standard_normal(n, d)
    two = cfg.block == "preact_two"
    w_init = [(draw(n, n), draw(n, n)) if two else draw(n, n) for _ in range(L)]
    v = rng.standard_normal(n)
    w_tilde = None
    if cfg.backward_mode == "decoupled":
        w_tilde = [
            (draw(n, n), draw(n, n)) if two else draw(n, n) for _ in range(L)
        ]
    dw = [
        (WeightDelta(n, n), WeightDelta(n, n)) if two else WeightDelta(n, n)
        for _ in range(L)
    ]
    return NetParams(U=U, v=v, w_init=w_init, dw=dw, w_tilde=w_tilde)


def forward(params: NetParams, x: np.ndarray, cfg: NetConfig) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.d,):
        raise DimensionMismatch(f"input has shape {x.shape}, expected ({cfg.d},)")
    if params.U.shape != (cfg.n, cfg.d):
        raise DimensionMismatch(
            f"U has shape {params.U.shape}, expected ({cfg.n}, {cfg.d})"
        )
    phi = cfg.phi
    n, L = cfg.n, cfg.L
    scale = cfg.branch_scale

    h = np.empty((L + 1, n))
    x_internal = None
    preact_in = None
    z0 = _w_matvec(params.U, x) / np.sqrt(cfg.d)

    if cfg.block == "preact_one":
        h[0] = z0
        for ell in range(1, L + 1):
            w, dw = params.w_init[ell - 1], params.dw[ell - 1]
            h[ell] = h[ell - 1] + scale * _apply(w, dw, phi(h[ell - 1]))
    elif cfg.block == "postact_one":
        preact_in = z0
        h[0] = phi(z0)
        x_internal = np.empty((L, n))
        for ell in range(1, L + 1):
            w, dw = params.w_init[ell - 1], params.dw[ell - 1]
            z = _apply(w, dw, h[ell - 1]) / np.sqrt(n)
            x_internal[ell - 1] = z
            h[ell] = h[ell - 1] + scale * phi(z)
    else:  # preact_two
        h[0] = z0
        x_internal = np.empty((L, n))
        for ell in range(1, L + 1):
            (w1, w2) = params.w_init[ell - 1]
            (d1, d2) = params.dw[ell - 1]
            z = _apply(w1, d1, h[ell - 1]) / np.sqrt(n)
            x_internal[ell - 1] = z
            h[ell] = h[ell - 1] + scale * _apply(w2, d2, phi(z))

    f = cfg.alpha / np.sqrt(n) * float(params.v @ h[L])
    return ForwardTrace(
        h=h, f=f, x=x, step=params.step, x_internal=x_internal, preact_in=preact_in
    )


def _backward_matrix(params: NetParams, ell: int, cfg: NetConfig):
    """Weight (and delta) used in the backward pass at layer ell (1-based)."""
    if cfg.backward_mode == "decoupled":
        w = params.w_tilde[ell - 1]
        if cfg.decoupled_freeze_updates:
            n = cfg.n
            empty = (
                (WeightDelta(n, n), WeightDelta(n, n))
                if cfg.block == "preact_two"
                else WeightDelta(n, n)
            )
            return w, empty
        return w, params.dw[ell - 1]
    return params.w_init[ell - 1], params.dw[ell - 1]


def backward(params: NetParams, trace: ForwardTrace, cfg: NetConfig) -> BackwardTrace:
    """Scaled gradients g_ell = sqrt(n)/alpha * df/dh_ell, from ell=L down to 0."""
    if trace.step != params.step:
        raise TraceMismatch(
            f"trace from step {trace.step} but params at step {params.step}"
        )
    phi = cfg.phi
    n, L = cfg.n, cfg.L
    scale = cfg.branch_scale

    g = np.empty((L + 1, n))
    g[L] = params.v
    for ell in range(L, 0, -1):
        w, dw = _backward_matrix(params, ell, cfg)
        if cfg.block == "preact_one":
            g[ell - 1] = g[ell] + scale * phi.deriv(trace.h[ell - 1]) * _apply_t(
                w, dw, g[ell]
            )
        elif cfg.block == "postact_one":
            z = trace.x_internal[ell - 1]
            g[ell - 1] = g[ell] + scale / np.sqrt(n) * _apply_t(
                w, dw, phi.deriv(z) * g[ell]
            )
        else:  # preact_two
            (w1, w2), (d1, d2) = w, dw
            inner = phi.deriv(trace.x_internal[ell - 1]) * (
                _apply_t(w2, d2, g[ell])
            )
            g[ell - 1] = g[ell] + scale / np.sqrt(n) * _apply_t(w1, d1, inner)
    return BackwardTrace(g=g, step=params.step)


def output_gradients(
    params: NetParams, trace: ForwardTrace, btrace: BackwardTrace, cfg: NetConfig
):
    """Gradients of the scalar output f w.r.t. every trainable parameter.

    Returns (dU, dv, dW) with dW a per-layer list (pairs for two-layer
    blocks). Used by the SGD step and by finite-difference checks.
    """
    phi = cfg.phi
    n, L, d = cfg.n, cfg.L, cfg.d
    out_scale = cfg.alpha / np.sqrt(n)
    scale = cfg.branch_scale
    h, g = trace.h, btrace.g

    dv = out_scale * h[L]
    if cfg.block == "postact_one":
        g0_in = phi.deriv(trace.preact_in) * g[0]
    else:
        g0_in = g[0]
    dU = out_scale / np.sqrt(d) * np.outer(g0_in, trace.x)

    dW = []
    for ell in range(1, L + 1):
        if cfg.block == "preact_one":
            dW.append((out_scale * scale, g[ell], phi(h[ell - 1])))
        elif cfg.block == "postact_one":
            z = trace.x_internal[ell - 1]
            dW.append(
                (out_scale * scale / np.sqrt(n), phi.deriv(z) * g[ell], h[ell - 1])
            )
        else:
            z = trace.x_internal[ell - 1]
            (w2, d2) = params.w_init[ell - 1][1], params.dw[ell - 1][1]
            a = phi.deriv(z) * _w_rmatvec_with_delta(w2, d2, g[ell], n)
            dW.append(
                (
                    (out_scale * scale, a, h[ell - 1]),
                    (out_scale * scale, g[ell], phi(z)),
                )
            )
    return dU, dv, dW


def _w_rmatvec_with_delta(w, dw, x, n):
    return _apply_t(w, dw, x) / np.sqrt(n)


def _apply_update(
    params: NetParams,
    trace: ForwardTrace,
    btrace: BackwardTrace,
    loss_deriv: float,
    cfg: NetConfig,
) -> None:
    if loss_deriv == 0.0:
        return
    dU, dv, dW = output_gradients(params, trace, btrace, cfg)
    eta = cfg.eta
    params.v -= eta * loss_deriv * dv
    params.U -= eta * loss_deriv * dU
    if cfg.block == "preact_two":
        eta1 = eta * np.sqrt(cfg.L) if cfg.depth_aware_lr else eta
        for ell, ((c1, l1, r1), (c2, l2, r2)) in enumerate(dW):
            params.dw[ell][0].add_outer(-eta1 * loss_deriv * c1, l1, r1)
            params.dw[ell][1].add_outer(-eta * loss_deriv * c2, l2, r2)
    else:
        for ell, (c, lv, rv) in enumerate(dW):
            params.dw[ell].add_outer(-eta * loss_deriv * c, lv, rv)


def sgd_step(
    params: NetParams,
    trace: ForwardTrace,
    btrace: BackwardTrace,
    loss_deriv: float,
    cfg: NetConfig,
) -> NetParams:
    """One single-sample SGD update in place; returns params for chaining."""
    if trace.step != params.step or btrace.step != params.step:
        raise TraceMismatch("traces do not belong to the current step")
    _apply_update(params, trace, btrace, loss_deriv, cfg)
    params.step += 1
    return params


def train(
    params: NetParams,
    cfg: NetConfig,
    sampler,
    steps: int,
    loss_kind: LossKind = MSE,
    batch_size: int = 1,
) -> Tuple[NetParams, List[StepRecord]]:
    """Online SGD; batch_size > 1 averages gradients before one update.

    sampler yields (x, y) pairs. Records output, loss, and per-layer
    feature/gradient norms at every step.
    """
    if steps < 0:
        raise DomainError(f"steps must be >= 0, got {steps}")
    records: List[StepRecord] = []
    sqrt_n = np.sqrt(cfg.n)
    for step in range(steps):
        batch = [next(sampler) for _ in range(batch_size)]
        passes = []
        loss_sum = 0.0
        for x, y in batch:
            trace = forward(params, x, cfg)
            btrace = backward(params, trace, cfg)
            loss, ldash = loss_kind.loss_and_deriv(trace.f, y)
            loss_sum += loss
            passes.append((trace, btrace, ldash))
        for trace, btrace, ldash in passes:
            _apply_update(params, trace, btrace, ldash / batch_size, cfg)
        params.step += 1
        trace, btrace, _ = passes[0]
        records.append(
            StepRecord(
                step=step,
                f=trace.f,
                loss=loss_sum / batch_size,
                h_norms=np.linalg.norm(trace.h, axis=1) / sqrt_n,
                g_norms=np.linalg.norm(btrace.g, axis=1) / sqrt_n,
            )
        )
    return params, records


def collapse_metrics(
    params_now: NetParams,
    params_init: NetParams,
    trace: ForwardTrace,
    cfg: NetConfig,
) -> Tuple[float, float]:
    """Frozen-weight gaps for two-layer blocks.

    x_gap: largest per-layer deviation of the internal representation from
    what the initial first-layer weights would produce on the same stream.
    stream_gap: same comparison for the residual-stream increment rate,
    with the second-layer weights frozen.
    """
    if cfg.block != "preact_two":
        raise ConfigError("collapse metrics are defined for two-layer blocks only")
    phi = cfg.phi
    n, L = cfg.n, cfg.L
    sqrt_n = np.sqrt(n)
    x_gap = 0.0
    stream_gap = 0.0
    for ell in range(1, L + 1):
        h_prev = trace.h[ell - 1]
        x_now = trace.x_internal[ell - 1]
        (w1_0, w2_0) = params_init.w_init[ell - 1]
        x_frozen = _w_matvec(w1_0, h_prev) / sqrt_n
        x_gap = max(x_gap, float(np.linalg.norm(x_now - x_frozen)) / sqrt_n)

        (w2, d2) = params_now.w_init[ell - 1][1], params_now.dw[ell - 1][1]
        rate_now = np.sqrt(L) / sqrt_n * _apply(w2, d2, phi(x_now))
        rate_frozen = np.sqrt(L) / sqrt_n * _w_matvec(w2_0, phi(x_now))
        stream_gap = max(
            stream_gap, float(np.linalg.norm(rate_now - rate_frozen)) / sqrt_n
        )
    return x_gap, stream_gap


def postact_bound(cfg: NetConfig, x: np.ndarray, c1: float, c2: float) -> float:
    """Lower bound on the mean coordinate of h_L in a post-act network.

    c1 * (1 + c1*sqrt(T/(L n)))^L * ||x||/sqrt(d) + c2 * sqrt(T L), for any
    activation whose Gaussian mean dominates c1|x| + c2. For relu,
    c1 = 1/sqrt(2*pi) and c2 = 0.
    """
    if c1 < 0 or c2 < 0:
        raise DomainError("constants must be nonnegative")
    if c1 == 0 and c2 == 0:
        raise DomainError("constants must not both be zero")
    x = np.asarray(x, dtype=np.float64)
    growth = (1.0 + c1 * np.sqrt(cfg.T / (cfg.L * cfg.n))) ** cfg.L
    return float(
        c1 * growth * np.linalg.norm(x) / np.sqrt(cfg.d)
        + c2 * np.sqrt(cfg.T * cfg.L)
    )
