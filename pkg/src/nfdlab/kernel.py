"""Initialization-time kernel machinery.

At initialization the residual stream of every input follows the same
forward SDE, and jointly over an input set the features converge to a
Gaussian process with covariance

    C_T(x, xbar) = <x, xbar>/d + integral_0^T E[phi(h_s) phi(hbar_s)] ds.

nngp_gram estimates C_T by simulating all M inputs coupled through shared
per-step increments (full Cholesky of the empirical M x M covariance each
step). nesting_gap checks that the horizon-t' Gram dominates the horizon-t
Gram using one shared noise ledger, so the comparison is a prefix sum and
carries no independent MC noise. dual_activation gives the quadrature
cross-check E[phi(u) phi(v)] for correlated standard normals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .activations import Activation, get_activation
from .errors import (
    ConfigError,
    DomainError,
    NotPositiveDefinite,
    SpdViolation,
)
from .numerics import (
    Rng,
    bivariate_gauss_expectation,
    cholesky_spd,
    min_symmetric_eigenvalue,
)

# batches for the entrywise standard-error estimate
_SE_BATCHES = 20


@dataclass
class KernelConfig:
    T: float
    steps: int
    particles: int
    activation: str = "relu"

    def __post_init__(self):
        if self.T < 0:
            raise ConfigError(f"T must be >= 0, got {self.T}", field="T")
        if self.steps < 1 or self.particles < _SE_BATCHES:
            raise ConfigError(
                f"need steps >= 1 and particles >= {_SE_BATCHES}, got "
                f"({self.steps}, {self.particles})"
            )

    @property
    def phi(self) -> Activation:
        return get_activation(self.activation)


@dataclass
class GramMatrix:
    values: np.ndarray  # (M, M) symmetric
    se: np.ndarray  # entrywise MC standard error
    T: float
    activation: str
    particles: int
    seed: Optional[int] = None

    @property
    def M(self) -> int:
        return self.values.shape[0]


def _symmetrize(a: np.ndarray) -> np.ndarray:
    """Exact symmetry: keep the upper triangle, mirror it down."""
    return np.triu(a) + np.triu(a, 1).T


def _simulate_gram(cfg: KernelConfig, X: np.ndarray, rng: Rng, checkpoints):
    """Coupled M-dimensional simulation; returns C at each checkpoint step.

    checkpoints is a sorted list of step indices (0..steps); the SE matrix
    returned belongs to the last checkpoint.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ConfigError(f"input set must be M x d, got shape {X.shape}")
    M, d = X.shape
    P, tau, phi = cfg.particles, cfg.T / cfg.steps, cfg.phi

    gram0 = _symmetrize(X @ X.T / d)
    try:
        chol0, _ = cholesky_spd(gram0)
    except NotPositiveDefinite as exc:
        raise SpdViolation(f"input Gram not factorizable: {exc}", t_idx=0) from exc
    H = chol0 @ rng.standard_normal(M, P)

    batch = P // _SE_BATCHES
    C = gram0.copy()
    C_batches = np.broadcast_to(gram0, (_SE_BATCHES, M, M)).copy()
    out = []
    if 0 in checkpoints:
        out.append(C.copy())
    for s in range(1, cfg.steps + 1):
        F = phi(H)
        sigma = _symmetrize(F @ F.T / P)
        C += sigma * tau
        Fb = F[:, : batch * _SE_BATCHES].reshape(M, _SE_BATCHES, batch)
        C_batches += tau * np.einsum("ibp,jbp->bij", Fb, Fb) / batch
        try:
            cholL, _ = cholesky_spd(sigma * tau)
        except NotPositiveDefinite as exc:
            raise SpdViolation(
                f"step covariance not factorizable at step {s}: {exc}", t_idx=s
            ) from exc
        H = H + cholL @ rng.standard_normal(M, P)
        if s in checkpoints:
            out.append(C.copy())
    se = np.std(C_batches, axis=0, ddof=1) / np.sqrt(_SE_BATCHES)
    return out, _symmetrize(se)


def nngp_gram(cfg: KernelConfig, X: np.ndarray, rng: Rng) -> GramMatrix:
    """Monte Carlo estimate of the initialization covariance C_T over X."""
    seed = rng.seed
    if cfg.T == 0:
        X = np.asarray(X, dtype=np.float64)
        g0 = _symmetrize(X @ X.T / X.shape[1])
        return GramMatrix(g0, np.zeros_like(g0), 0.0, cfg.phi.kind, cfg.particles, seed)
    (c_final,), se = _simulate_gram(cfg, X, rng, {cfg.steps})
    return GramMatrix(c_final, se, cfg.T, cfg.phi.kind, cfg.particles, seed)


def spd_min_eig(gram: GramMatrix) -> float:
    return min_symmetric_eigenvalue(gram.values)


def nesting_gap(X, t: float, t_prime: float, cfg: KernelConfig, rng: Rng) -> float:
    """lambda_min(Gram_{t'} - Gram_t) with both Grams from one noise ledger.

    t must land on the horizon-t' time grid.
    """
    if t > t_prime:
        raise DomainError(f"need t <= t_prime, got {t} > {t_prime}")
    if t < 0:
        raise DomainError(f"need t >= 0, got {t}")
    if t == t_prime:
        return 0.0
    run_cfg = KernelConfig(
        T=t_prime, steps=cfg.steps, particles=cfg.particles, activation=cfg.activation
    )
    idx = t / t_prime * cfg.steps
    if abs(idx - round(idx)) > 1e-9:
        raise ConfigError(
            f"t={t} does not fall on the {cfg.steps}-step grid for t'={t_prime}",
            field="steps",
        )
    (c_t, c_tp), _ = _simulate_gram(run_cfg, X, rng, {int(round(idx)), cfg.steps})
    return min_symmetric_eigenvalue(c_tp - c_t)


def dual_activation(rho: float, activation, quadrature_order: int = 200) -> float:
    """phi-hat(rho) = E[phi(u) phi(v)] for standard normals with correlation rho."""
    phi = get_activation(activation)
    return bivariate_gauss_expectation(
        lambda u, v: phi(np.float64(u)) * phi(np.float64(v)), rho, quadrature_order
    )


def kernel_ridge(
    gram: GramMatrix, labels: np.ndarray, lam: float, test_cross: np.ndarray
) -> np.ndarray:
    """Predictions test_cross @ alpha with (Gram + lam*I) alpha = labels."""
    if lam <= 0:
        raise DomainError(f"ridge parameter must be positive, got {lam}")
    labels = np.asarray(labels, dtype=np.float64)
    a = gram.values + lam * np.eye(gram.M)
    cholL, _ = cholesky_spd(a, jitter_schedule=(0.0,))
    alpha = np.linalg.solve(a, labels)
    return np.asarray(test_cross, dtype=np.float64) @ alpha


def export_gram_csv(gram: GramMatrix, path) -> None:
    """CSV with a metadata header line, full round-trip float formatting."""
    with open(path, "w") as fh:
        fh.write(
            f"# nngp T={gram.T} act={gram.activation} P={gram.particles} "
            f"seed={gram.seed}\n"
        )
        for row in gram.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_gram_csv(path) -> GramMatrix:
    """Inverse of export_gram_csv (SE is not serialized; zeros on read)."""
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# nngp "):
            raise ConfigError(f"{path}: missing nngp header line")
        meta = dict(kv.split("=", 1) for kv in header[len("# nngp ") :].split())
        rows = [
            [float(v) for v in line.strip().split(",")] for line in fh if line.strip()
        ]
    values = np.asarray(rows, dtype=np.float64)
    seed = None if meta.get("seed") == "None" else int(meta["seed"])
    return GramMatrix(
        values, np.zeros_like(values), float(meta["T"]), meta["act"],
        int(meta["P"]), seed,
    )
