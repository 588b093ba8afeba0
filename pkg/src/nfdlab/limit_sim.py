"""Particle simulator of the infinite-width training limit.

Simulates the coupled forward-backward system that the residual-stream
features h_t and backward variables g_t satisfy as width goes to infinity:
a finite-depth mean-field recursion when the tau^2 forward-backward
correlation term is enabled, and the Euler-Maruyama discretization of the
infinite-depth SDE system when it is disabled.

Training iterations are strictly sequential. Iteration k couples to all
earlier iterations through (a) empirical cross-moments E[phi(h^(i)) phi(h^(k))]
and E[g^(i) g^(k)] entering drifts, and (b) correlated Gaussian increments
sampled conditionally on the realized increments of iterations < k, via the
Schur complement against a frozen noise ledger. Forward and backward ledgers
use disjoint random streams, so gradient increments are independent of the
forward noise by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .activations import Activation, get_activation
from .data import LossKind, MSE
from .errors import ConfigError, FormatError, NotPositiveDefinite, SpdViolation
from .numerics import (
    DEFAULT_JITTER_SCHEDULE,
    Rng,
    cholesky_spd,
    conditional_gaussian_coefficients,
    min_symmetric_eigenvalue,
    split_rng,
)

TRAJ_MAGIC = b"NFDTRAJ1"


@dataclass
class LimitConfig:
    steps_L: int
    particles: int
    T: float = 1.0
    k_max: int = 0
    eta_c: float = 0.0
    activation: str = "relu"
    correction_term: bool = False
    spd_floor: float = -1e-9
    loss: LossKind = MSE

    def __post_init__(self):
        if self.steps_L < 1:
            raise ConfigError(f"steps_L must be >= 1, got {self.steps_L}", field="steps_L")
        if self.particles < 1:
            raise ConfigError(
                f"particles must be >= 1, got {self.particles}", field="particles"
            )
        if self.k_max < 0:
            raise ConfigError(f"k_max must be >= 0, got {self.k_max}", field="k_max")
        if self.T <= 0:
            raise ConfigError(f"T must be positive, got {self.T}", field="T")

    @property
    def tau(self) -> float:
        return self.T / self.steps_L

    @property
    def phi(self) -> Activation:
        return get_activation(self.activation)


@dataclass
class JitterEvent:
    where: str  # "gram" | "forward" | "backward"
    t_idx: Optional[int]
    iteration: Optional[int]
    jitter: float


@dataclass
class CovSeries:
    """Per-iteration noise covariances and their minimum eigenvalues.

    sigma[k][ell-1] is the (k+1)x(k+1) forward covariance at layer ell
    (built from phi(h_{ell-1})); theta[k][ell-1] the backward one (from
    g_ell). *_min hold the matching minimum eigenvalues.
    """

    sigma: List[np.ndarray] = field(default_factory=list)
    theta: List[np.ndarray] = field(default_factory=list)
    sigma_min: List[np.ndarray] = field(default_factory=list)
    theta_min: List[np.ndarray] = field(default_factory=list)


@dataclass
class ParticleEnsemble:
    h: np.ndarray  # (steps_L+1, k_max+1, P)
    g: np.ndarray  # (steps_L+1, k_max+1, P)


@dataclass
class LimitRun:
    cfg: LimitConfig
    ensemble: ParticleEnsemble
    cov: CovSeries
    outputs: np.ndarray  # f-ring values, one per iteration
    loss_derivs: np.ndarray
    jitter_events: List[JitterEvent]
    ledger_fw: np.ndarray  # (steps_L, k_max+1, P) realized forward increments
    ledger_bw: np.ndarray


def _conditional_increments(
    cov_tau: np.ndarray,
    prev: np.ndarray,
    rng: Rng,
    P: int,
    events: List[JitterEvent],
    where: str,
    t_idx: int,
    k: int,
) -> np.ndarray:
    """Sample iteration k's increments given realized increments of 0..k-1.

    cov_tau is the (k+1)x(k+1) target covariance (already scaled by tau);
    prev the (k, P) ledger rows at this layer. The standard normal draw
    happens before factorization so paired runs consume identical noise.
    """
    xi = rng.standard_normal(P)
    eye = np.eye(cov_tau.shape[0])
    for jitter in DEFAULT_JITTER_SCHEDULE:
        try:
            w, std = conditional_gaussian_coefficients(cov_tau + jitter * eye)
        except NotPositiveDefinite:
            continue
        if jitter > 0.0:
            events.append(JitterEvent(where, t_idx, k, jitter))
        mean = w @ prev if w.size else 0.0
        return mean + std * xi
    raise SpdViolation(
        f"{where} increment covariance not SPD at layer {t_idx}, iteration {k}",
        t_idx=t_idx,
        iteration=k,
    )


def simulate_training(
    cfg: LimitConfig, samples: Sequence[Tuple[np.ndarray, float]], rng: Rng
) -> LimitRun:
    """Run iterations k = 0..k_max of the limiting training dynamics.

    Iteration k does one forward-backward pass on sample k, so k_max + 1
    samples are required. Three disjoint streams are derived from rng's
    (seed, stream_id): initial conditions, forward noise, backward noise.
    """
    K_total = cfg.k_max + 1
    if len(samples) < K_total:
        raise ConfigError(
            f"k_max={cfg.k_max} needs {K_total} samples, got {len(samples)}",
            field="k_max",
        )
    L, P, tau, eta = cfg.steps_L, cfg.particles, cfg.tau, cfg.eta_c
    phi = cfg.phi
    X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in samples[:K_total]])
    ys = [float(y) for _, y in samples[:K_total]]
    gram = X @ X.T / X.shape[1]

    base = rng.stream_id << 2
    rng_init = split_rng(rng.seed, base)
    rng_fw = split_rng(rng.seed, base | 1)
    rng_bw = split_rng(rng.seed, base | 2)

    events: List[JitterEvent] = []
    chol, gram_jitter = cholesky_spd(gram)
    if gram_jitter > 0.0:
        events.append(JitterEvent("gram", None, None, gram_jitter))

    # all initial-condition noise up front: shared terminal draw v0 (same for
    # every iteration) and jointly Gaussian h0-hat across iterations
    u0 = rng_init.standard_normal(K_total, P)
    v0 = rng_init.standard_normal(P)
    h0_hat = chol @ u0

    h = np.zeros((L + 1, K_total, P))
    g = np.zeros((L + 1, K_total, P))
    led_f = np.zeros((L, K_total, P))
    led_b = np.zeros((L, K_total, P))
    cov = CovSeries()
    outputs = np.zeros(K_total)
    lders = np.zeros(K_total)

    def check_floor(lmin, where, t_idx, k):
        if lmin < cfg.spd_floor:
            raise SpdViolation(
                f"{where} covariance min eigenvalue {lmin:.3e} below floor "
                f"{cfg.spd_floor:.1e} at layer {t_idx}, iteration {k}",
                t_idx=t_idx,
                iteration=k,
            )

    for K in range(K_total):
        kk = K + 1
        sig_k = np.zeros((L, kk, kk))
        th_k = np.zeros((L, kk, kk))
        sig_min = np.zeros(L)
        th_min = np.zeros(L)

        h[0, K] = h0_hat[K]
        for i in range(K):
            h[0, K] -= eta * lders[i] * gram[i, K] * g[0, i]

        # forward sweep: layer ell = t+1 advances h[t] -> h[t+1]
        for t in range(L):
            feat = phi(h[t, :kk])
            sigma = feat @ feat.T / P
            sig_k[t] = sigma
            sig_min[t] = min_symmetric_eigenvalue(sigma)
            check_floor(sig_min[t], "forward", t + 1, K)
            dw = _conditional_increments(
                sigma * tau, led_f[t, :K], rng_fw, P, events, "forward", t + 1, K
            )
            led_f[t, K] = dw
            drift = np.zeros(P)
            for i in range(K):
                drift -= eta * tau * lders[i] * sigma[i, K] * g[t + 1, i]
            if cfg.correction_term and K > 0 and t >= 1:
                feat_prev = phi(h[t - 1, :kk])
                dphi = phi.deriv(h[t, :kk])
                for i in range(K):
                    a = float(feat_prev[i] @ feat_prev[K]) / P
                    c = float(dphi[i] @ dphi[K]) / P
                    drift -= eta * tau * tau * lders[i] * a * c * g[t + 1, i]
            h[t + 1, K] = h[t, K] + drift + dw

        # terminal condition: shared v0 minus accumulated output-layer updates
        g[L, K] = v0.copy()
        for i in range(K):
            g[L, K] -= eta * lders[i] * h[L, i]

        # backward sweep: g[t] from g[t+1], noise at layer ell = t+1
        for t in range(L - 1, -1, -1):
            gm = g[t + 1, :kk]
            theta = gm @ gm.T / P
            th_k[t] = theta
            th_min[t] = min_symmetric_eigenvalue(theta)
            check_floor(th_min[t], "backward", t + 1, K)
            dwt = _conditional_increments(
                theta * tau, led_b[t, :K], rng_bw, P, events, "backward", t + 1, K
            )
            led_b[t, K] = dwt
            dphi_K = phi.deriv(h[t, K])
            drift = np.zeros(P)
            for i in range(K):
                drift -= eta * tau * lders[i] * theta[i, K] * phi(h[t, i])
            if cfg.correction_term and K > 0 and t + 2 <= L:
                dphi_next = phi.deriv(h[t + 1, :kk])
                for i in range(K):
                    b = float(g[t + 2, i] @ g[t + 2, K]) / P
                    c = float(dphi_next[i] @ dphi_next[K]) / P
                    drift -= eta * tau * tau * lders[i] * b * c * phi(h[t, i])
            g[t, K] = g[t + 1, K] + dphi_K * (drift + dwt)

        outputs[K] = float(np.mean(g[L, K] * h[L, K]))
        lders[K] = cfg.loss.loss_and_deriv(outputs[K], ys[K])[1]
        cov.sigma.append(sig_k)
        cov.theta.append(th_k)
        cov.sigma_min.append(sig_min)
        cov.theta_min.append(th_min)

    return LimitRun(
        cfg=cfg,
        ensemble=ParticleEnsemble(h=h, g=g),
        cov=cov,
        outputs=outputs,
        loss_derivs=lders,
        jitter_events=events,
        ledger_fw=led_f,
        ledger_bw=led_b,
    )


def limit_output(run: LimitRun, k: int) -> float:
    """Network output in the limit after k training iterations."""
    if not 0 <= k <= run.cfg.k_max:
        raise IndexError(f"iteration {k} outside 0..{run.cfg.k_max}")
    return float(run.outputs[k])


def covariance_minima(run: LimitRun):
    """Rows (t, k, lambda_min Sigma, lambda_min Theta) across the whole run."""
    tau = run.cfg.tau
    rows = []
    for k in range(run.cfg.k_max + 1):
        for ell in range(1, run.cfg.steps_L + 1):
            rows.append(
                (
                    ell * tau,
                    k,
                    float(run.cov.sigma_min[k][ell - 1]),
                    float(run.cov.theta_min[k][ell - 1]),
                )
            )
    return rows


def correction_gap(
    cfg: LimitConfig,
    samples: Sequence[Tuple[np.ndarray, float]],
    rng: Rng,
    steps_list: Sequence[int] = (8, 16, 32, 64, 128),
) -> List[Tuple[int, float]]:
    """|f-ring with tau^2 term - without| per depth, with paired noise.

    Both runs at each depth reuse the same (seed, stream_id), and the drift
    toggle consumes no randomness, so the noise ledgers are bit-identical.
    """
    out = []
    for s in steps_list:
        run_on = simulate_training(
            replace(cfg, steps_L=s, correction_term=True),
            samples,
            Rng(rng.seed, rng.stream_id),
        )
        run_off = simulate_training(
            replace(cfg, steps_L=s, correction_term=False),
            samples,
            Rng(rng.seed, rng.stream_id),
        )
        out.append(
            (s, abs(limit_output(run_on, cfg.k_max) - limit_output(run_off, cfg.k_max)))
        )
    return out


def dump_trajectories(run: LimitRun, path) -> None:
    """Binary dump: 32-byte header, then h and g as little-endian float64
    in [time][iteration][particle] order."""
    cfg = run.cfg
    header = TRAJ_MAGIC + struct.pack(
        "<QQQ", cfg.particles, cfg.steps_L, cfg.k_max
    )
    assert len(header) == 32
    with open(path, "wb") as fh:
        fh.write(header)
        run.ensemble.h.astype("<f8", copy=False).tofile(fh)
        run.ensemble.g.astype("<f8", copy=False).tofile(fh)


def load_trajectories(path) -> Tuple[np.ndarray, np.ndarray]:
    """Read a trajectory dump back as (h, g) arrays."""
    with open(path, "rb") as fh:
        header = fh.read(32)
        if len(header) != 32 or header[:8] != TRAJ_MAGIC:
            raise FormatError(f"{path}: bad magic or truncated header")
        P, L, k_max = struct.unpack("<QQQ", header[8:])
        data = np.fromfile(fh, dtype="<f8")
    shape = (L + 1, k_max + 1, P)
    expect = 2 * int(np.prod(shape))
    if data.size != expect:
        raise FormatError(
            f"{path}: expected {expect} float64 values, found {data.size}"
        )
    h = data[: expect // 2].reshape(shape)
    g = data[expect // 2 :].reshape(shape)
    return h, g
