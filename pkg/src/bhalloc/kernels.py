"""Random-variate samplers and numerical primitives for the Gibbs sampler.

All samplers take an explicit :class:`numpy.random.Generator`; build one
from a ``(seed, stream_id)`` pair with :func:`make_rng` so that independent
chains and window fits never share a stream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import CholeskyError, ParameterError

logger = logging.getLogger(__name__)

JITTER_LADDER = (1e-12, 1e-10, 1e-8)


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by ``(seed, stream_id)``."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.PCG64(seq))


def make_rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    return RngStream(seed, stream_id).generator()


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def cholesky(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of ``a`` with a diagonal jitter ladder.

    Jitter values are relative to the mean absolute diagonal. Raises
    :class:`CholeskyError` with the failing pivot when every rung fails.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ParameterError(f"{what} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise CholeskyError(f"{what} has non-finite entries", pivot=0)
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info == 0:
        return c
    pivot = int(info)
    scale = float(np.mean(np.abs(np.diag(a)))) or 1.0
    eye = np.eye(a.shape[0])
    for eps in JITTER_LADDER:
        c, info = lapack.dpotrf(a + eps * scale * eye, lower=1, clean=1)
        if info == 0:
            logger.warning("cholesky of %s needed jitter %.0e (pivot %d)", what, eps, pivot)
            return c
    raise CholeskyError(f"{what} is not positive definite (failing pivot {pivot})", pivot=pivot)


def spd_inverse(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via its Cholesky factor."""
    lower = cholesky(a, what)
    inv_lower = solve_triangular(lower, np.eye(a.shape[0]), lower=True)
    return inv_lower.T @ inv_lower


def sample_mvn(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw ``mean + L z`` where ``L L' = cov`` and ``z`` is standard normal."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (mean.size, mean.size):
        raise ParameterError(f"cov shape {cov.shape} does not match mean length {mean.size}")
    lower = cholesky(cov, "covariance")
    return mean + lower @ rng.standard_normal(mean.size)


def sample_mvn_precision(
    linear: np.ndarray, precision: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw from N(Q^-1 h, Q^-1) given the canonical parameters ``(h, Q)``.

    Returns ``(draw, mean)``. One Cholesky of ``Q`` serves both the mean solve
    and the noise term, so the covariance is never formed.
    """
    lower = cholesky(precision, "precision")
    y = solve_triangular(lower, linear, lower=True)
    mean = solve_triangular(lower.T, y, lower=False)
    noise = solve_triangular(lower.T, rng.standard_normal(linear.size), lower=False)
    return mean + noise, mean


def sample_inverse_wishart(nu: float, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw from IW(nu, scale), parameterized so that E = scale / (nu - d - 1).

    Bartlett decomposition: with ``scale = L L'`` and ``A`` the lower Bartlett
    factor (chi diagonal, normal below), ``W = L^-T A A' L^-1`` is
    Wishart(nu, scale^-1), so ``W^-1 = M' M`` with ``M = A^-1 L'``.
    """
    scale = np.asarray(scale, dtype=float)
    d = scale.shape[0]
    if not nu > d - 1:
        raise ParameterError(f"inverse-Wishart needs nu > dim - 1, got nu={nu}, dim={d}")
    lower = cholesky(symmetrize(scale), "inverse-Wishart scale")
    bartlett = np.zeros((d, d))
    bartlett[np.diag_indices(d)] = np.sqrt(rng.chisquare(nu - np.arange(d)))
    rows, cols = np.tril_indices(d, -1)
    bartlett[rows, cols] = rng.standard_normal(rows.size)
    m = solve_triangular(bartlett, lower.T, lower=True)
    return symmetrize(m.T @ m)


def inverse_wishart_mean(nu: float, scale: np.ndarray) -> np.ndarray:
    d = scale.shape[0]
    if not nu > d + 1:
        raise ParameterError(f"inverse-Wishart mean needs nu > dim + 1, got nu={nu}, dim={d}")
    return np.asarray(scale, dtype=float) / (nu - d - 1)


def _autocorrelation(x: np.ndarray) -> np.ndarray:
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(x, size)
    acov = np.fft.irfft(spec * np.conjugate(spec), size)[:n] / n
    return acov / acov[0]


def ess(chain: np.ndarray) -> float:
    """Effective sample size of a scalar chain.

    Geyer's initial monotone positive sequence: autocorrelations are summed in
    adjacent pairs until a pair sum turns non-positive, with pair sums forced
    to be non-increasing. Not capped above at ``n`` (antithetic chains can
    exceed it); floored at 1. A constant chain returns ``n``.
    """
    x = np.asarray(chain, dtype=float).ravel()
    n = x.size
    if n < 10:
        raise ParameterError(f"ess needs at least 10 draws, got {n}")
    if not np.all(np.isfinite(x)):
        raise ParameterError("ess input contains non-finite values")
    centered = x - x.mean()
    sd = np.sqrt(np.mean(centered**2))
    if sd == 0.0 or sd <= 1e-14 * max(1.0, np.max(np.abs(x))):
        return float(n)
    rho = _autocorrelation(centered / sd)

    n_pairs = n // 2
    pairs = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    nonpositive = np.flatnonzero(pairs <= 0.0)
    stop = nonpositive[0] if nonpositive.size else n_pairs
    pairs = np.minimum.accumulate(pairs[:stop])
    tau = -1.0 + 2.0 * pairs.sum()
    if tau <= 0.0:
        return float(n)
    return max(1.0, n / tau)
