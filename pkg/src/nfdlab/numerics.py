"""Deterministic random streams and small dense linear algebra.

All samplers are pure functions of (Rng state, arguments): cloning an Rng and
replaying the same calls reproduces identical bytes. Streams are derived
counter-based from (seed, stream_id), so particle i of run seed s always sees
stream (s, i) regardless of how work is scheduled.
"""

from __future__ import annotations

import copy

import numpy as np

from .errors import DimensionMismatch, DomainError, NotPositiveDefinite

# Ascending jitter levels tried before declaring a covariance not SPD.
# Silent regularization would mask genuine degeneracy, so callers get the
# jitter that was actually used.
DEFAULT_JITTER_SCHEDULE = (0.0, 1e-10, 1e-8, 1e-6)

# Schur complements above this (negative) threshold are floating-point noise
# and get clamped to zero; anything below is real degeneracy.
SCHUR_CLAMP_TOL = -1e-12


class Rng:
    """A counter-based random stream identified by (seed, stream_id)."""

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = (self.stream_id << 64) | self.seed
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def clone(self) -> "Rng":
        """Copy of this stream at its current position."""
        other = Rng(self.seed, self.stream_id)
        other._gen.bit_generator.state = copy.deepcopy(
            self._gen.bit_generator.state
        )
        return other

    def standard_normal(self, *shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high=high, size=size)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"


def split_rng(seed: int, stream_id: int) -> Rng:
    """Independent stream derived purely from (seed, stream_id)."""
    return Rng(seed, stream_id)


def sample_std_normal_matrix(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix of i.i.d. N(0,1) entries; advances the stream."""
    if rows < 1 or cols < 1:
        raise DimensionMismatch(f"need rows, cols >= 1, got ({rows}, {cols})")
    return rng.standard_normal(rows, cols)


def _check_symmetric(a: np.ndarray, rtol: float = 1e-12) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    scale = max(float(np.abs(a).max(initial=0.0)), 1.0)
    if float(np.abs(a - a.T).max(initial=0.0)) > rtol * scale:
        raise DimensionMismatch("matrix is not symmetric within tolerance")


def cholesky_spd(a: np.ndarray, jitter_schedule=DEFAULT_JITTER_SCHEDULE):
    """Cholesky factor of a + jitter*I for the smallest jitter that works.

    Returns (L, jitter_used) with L lower triangular and
    L @ L.T == a + jitter*I. Raises NotPositiveDefinite if every jitter in
    the ascending schedule fails; in the training-limit simulator that is
    the signal for a uniform-SPD assumption breach.
    """
    a = np.asarray(a, dtype=np.float64)
    _check_symmetric(a)
    eye = np.eye(a.shape[0])
    for jitter in jitter_schedule:
        try:
            factor = np.linalg.cholesky(a + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        return factor, float(jitter)
    raise NotPositiveDefinite(
        f"cholesky failed for all jitters {tuple(jitter_schedule)}"
    )


def min_symmetric_eigenvalue(a: np.ndarray) -> float:
    """Smallest eigenvalue via full symmetric eigendecomposition."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    return float(np.linalg.eigvalsh(a)[0])


def conditional_gaussian_coefficients(sigma: np.ndarray):
    """Weights and residual std for the last coordinate given the first m.

    For an (m+1) x (m+1) covariance sigma, returns (w, std) such that the
    conditional law of the last coordinate given the first m equals
    N(w . prev, std^2). std^2 is the Schur complement of the leading block;
    slightly negative values (above the clamp tolerance) are rounded to 0.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    _check_symmetric(sigma)
    m = sigma.shape[0] - 1
    if m == 0:
        var = float(sigma[0, 0])
        if var < SCHUR_CLAMP_TOL:
            raise NotPositiveDefinite(f"negative variance {var}")
        return np.zeros(0), float(np.sqrt(max(var, 0.0)))
    s11 = sigma[:m, :m]
    s12 = sigma[:m, m]
    s22 = float(sigma[m, m])
    try:
        w = np.linalg.solve(s11, s12)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"leading block is singular: {exc}") from exc
    schur = s22 - float(s12 @ w)
    if schur < SCHUR_CLAMP_TOL:
        raise NotPositiveDefinite(
            f"negative Schur complement {schur} below clamp tolerance"
        )
    return w, float(np.sqrt(max(schur, 0.0)))


def conditional_gaussian(sigma: np.ndarray, prev: np.ndarray):
    """Conditional mean and std of the last coordinate of N(0, sigma).

    prev holds the realized first m coordinates; sampling
    mean + std * xi with xi ~ N(0,1) extends them to the correct joint law.
    """
    prev = np.asarray(prev, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape[0] != prev.shape[0] + 1:
        raise DimensionMismatch(
            f"sigma is {sigma.shape[0]}x{sigma.shape[0]} but prev has "
            f"length {prev.shape[0]}"
        )
    w, std = conditional_gaussian_coefficients(sigma)
    mean = float(w @ prev) if w.size else 0.0
    return mean, std


def bivariate_gauss_expectation(f, rho: float, quadrature_order: int) -> float:
    """E[f(u, v)] for standard bivariate normal (u, v) with correlation rho.

    Integrates over (u, w) with v = rho*u + sqrt(1-rho^2)*w using nested
    adaptive Gauss-Kronrod panels, each axis split at 0. A fixed tensor
    Gauss-Hermite rule only converges algebraically for activations with a
    kink (relu), so adaptivity is needed to reach 1e-8 absolute error.
    quadrature_order bounds the subdivision limit per axis.
    """
    from scipy import integrate

    if abs(rho) > 1.0:
        raise DomainError(f"|rho| must be <= 1, got {rho}")
    if quadrature_order < 2:
        raise DomainError("quadrature_order must be >= 2")
    limit = max(int(quadrature_order), 50)
    root2pi = np.sqrt(2.0 * np.pi)
    s = np.sqrt(max(1.0 - rho * rho, 0.0))

    if s == 0.0:
        def integrand(u):
            return f(u, np.sign(rho) * u) * np.exp(-0.5 * u * u) / root2pi

        val = sum(
            integrate.quad(integrand, lo, hi, epsabs=1e-11, limit=limit)[0]
            for lo, hi in ((-np.inf, 0.0), (0.0, np.inf))
        )
        return float(val)

    def inner(u):
        def integrand(w):
            return f(u, rho * u + s * w) * np.exp(-0.5 * w * w) / root2pi

        # split where v crosses 0 so kinked activations stay panel-smooth
        w0 = -rho * u / s
        return sum(
            integrate.quad(integrand, lo, hi, epsabs=1e-11, limit=limit)[0]
            for lo, hi in ((-np.inf, w0), (w0, np.inf))
        )

    def outer(u):
        return inner(u) * np.exp(-0.5 * u * u) / root2pi

    val = sum(
        integrate.quad(outer, lo, hi, epsabs=1e-10, limit=limit)[0]
        for lo, hi in ((-np.inf, 0.0), (0.0, np.inf))
    )
    return float(val)
