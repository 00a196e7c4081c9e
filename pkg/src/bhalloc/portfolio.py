"""Mean-variance weights: closed form and the constrained quadratic program.

The constrained problem maximizes ``w'mu - (gamma / 2) w' Sigma w`` subject to
any of: full investment, long only, a per-asset cap, and an L1 turnover cap
``sum |w - w_prev| <= tau``. The turnover ball is the intersection of the
facets ``s'(w - w_prev) <= tau`` over sign vectors ``s``; only the facets cut
by an intermediate solution are ever added, and each inner problem is solved
exactly by the Goldfarb-Idnani dual active-set method.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import quadprog
from scipy.linalg import cho_solve, lapack
from scipy.optimize import linprog

from .errors import InfeasibleError, NumericalError, ParameterError

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-10
MAX_CUTS = 10_000


@dataclass(frozen=True)
class PortfolioConstraints:
    long_only: bool = True
    full_investment: bool = True
    max_weight: float | None = 0.5
    max_turnover: float | None = 0.5
    prev_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.max_turnover is not None and self.max_turnover < 0:
            raise ParameterError(f"max_turnover must be >= 0, got {self.max_turnover}")
        if self.max_weight is not None and self.max_weight <= 0:
            raise ParameterError(f"max_weight must be > 0, got {self.max_weight}")
        if self.prev_weights is not None:
            object.__setattr__(self, "prev_weights", np.asarray(self.prev_weights, dtype=float))

    @classmethod
    def none(cls) -> "PortfolioConstraints":
        return cls(long_only=False, full_investment=False, max_weight=None, max_turnover=None)

    def with_prev(self, prev: np.ndarray | None) -> "PortfolioConstraints":
        return PortfolioConstraints(self.long_only, self.full_investment, self.max_weight, self.max_turnover, prev)

    @property
    def turnover_active(self) -> bool:
        return self.max_turnover is not None and self.prev_weights is not None

    def to_dict(self) -> dict:
        return {
            "long_only": self.long_only,
            "full_investment": self.full_investment,
            "max_weight": self.max_weight,
            "max_turnover": self.max_turnover,
        }


@dataclass(frozen=True)
class WeightVector:
    weights: np.ndarray
    objective_value: float
    n_cuts: int = 0


def utility_exponent(w: np.ndarray, mu: np.ndarray, cov: np.ndarray, gamma: float) -> float:
    return float(w @ mu - 0.5 * gamma * w @ cov @ w)


def _validated(mu, cov, gamma):
    mu = np.asarray(mu, dtype=float).ravel()
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (mu.size, mu.size):
        raise ParameterError(f"cov shape {cov.shape} does not match mu length {mu.size}")
    if not gamma > 0:
        raise ParameterError(f"gamma must be > 0, got {gamma}")
    return mu, 0.5 * (cov + cov.T)


def _factor(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cholesky of ``cov``; a semidefinite matrix gets +1e-10 trace/N jitter."""
    c, info = lapack.dpotrf(cov, lower=1, clean=1)
    if info == 0:
        return cov, c
    jittered = cov + 1e-10 * np.trace(cov) / cov.shape[0] * np.eye(cov.shape[0])
    c, info = lapack.dpotrf(jittered, lower=1, clean=1)
    if info != 0:
        raise NumericalError(f"covariance is not positive semidefinite (pivot {info})")
    logger.warning("covariance is singular; added 1e-10 * trace / N jitter")
    return jittered, c


def weights_unconstrained(mu, cov, gamma: float) -> WeightVector:
    """``w = cov^-1 mu / gamma``, the unconstrained maximizer."""
    mu, cov = _validated(mu, cov, gamma)
    c, info = lapack.dpotrf(cov, lower=1, clean=1)
    if info != 0:
        raise NumericalError(f"covariance is singular or indefinite (pivot {info})")
    w = cho_solve((c, True), mu) / gamma
    return WeightVector(weights=w, objective_value=utility_exponent(w, mu, cov, gamma))


def ew_weights(n: int) -> WeightVector:
    if n < 1:
        raise ParameterError(f"need at least one asset, got {n}")
    return WeightVector(weights=np.full(n, 1.0 / n), objective_value=float("nan"))


def min_turnover(cons: PortfolioConstraints, n: int) -> float:
    """Smallest L1 move from ``prev_weights`` into the non-turnover constraint set."""
    prev = cons.prev_weights
    # variables: w (n), u = |w - prev| bound (n); minimize sum u
    cost = np.concatenate([np.zeros(n), np.ones(n)])
    eye = np.eye(n)
    a_ub = np.block([[eye, -eye], [-eye, -eye]])
    b_ub = np.concatenate([prev, -prev])
    lo = 0.0 if cons.long_only else None
    bounds = [(lo, cons.max_weight) for _ in range(n)] + [(0, None)] * n
    a_eq = np.concatenate([np.ones(n), np.zeros(n)])[None, :] if cons.full_investment else None
    b_eq = [1.0] if cons.full_investment else None
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        raise InfeasibleError("position constraints admit no portfolio", constraint="max_weight")
    return float(res.fun)


def _check_feasible(cons: PortfolioConstraints, n: int) -> None:
    if cons.max_weight is not None and cons.long_only and cons.full_investment and cons.max_weight * n < 1 - 1e-12:
        raise InfeasibleError(
            f"max_weight={cons.max_weight} with {n} assets cannot sum to 1 long-only", constraint="max_weight"
        )
    if cons.turnover_active:
        if cons.prev_weights.shape != (n,):
            raise ParameterError(f"prev_weights must have length {n}")
        need = min_turnover(cons, n)
        if need > cons.max_turnover + 1e-9:
            raise InfeasibleError(
                f"reaching the feasible set needs turnover {need:.6g} > max_turnover={cons.max_turnover}",
                constraint="max_turnover",
            )


def weights_constrained(mu, cov, gamma: float, cons: PortfolioConstraints | None = None) -> WeightVector:
    """Global maximizer of the mean-variance exponent over the constraint set."""
    cons = PortfolioConstraints() if cons is None else cons
    mu, cov = _validated(mu, cov, gamma)
    n = mu.size
    cov, _ = _factor(cov)
    if not (cons.long_only or cons.full_investment or cons.max_weight is not None or cons.turnover_active):
        w = np.linalg.solve(cov, mu) / gamma
        return WeightVector(weights=w, objective_value=utility_exponent(w, mu, cov, gamma))
    _check_feasible(cons, n)
    if cons.max_weight is not None and cons.long_only and cons.full_investment and cons.max_weight * n <= 1 + 1e-12:
        # the cap pins every weight to 1/n; quadprog rejects this degenerate active set
        w = np.full(n, 1.0 / n)
        return WeightVector(weights=w, objective_value=utility_exponent(w, mu, cov, gamma))

    # quadprog: minimize 1/2 x'Gx - a'x subject to C'x >= b, first meq equalities
    cols, rhs = [], []
    meq = 0
    if cons.full_investment:
        cols.append(np.ones(n))
        rhs.append(1.0)
        meq = 1
    if cons.long_only:
        cols.extend(np.eye(n))
        rhs.extend([0.0] * n)
    if cons.max_weight is not None:
        cols.extend(-np.eye(n))
        rhs.extend([-cons.max_weight] * n)
    base_c, base_b = list(cols), list(rhs)
    g = gamma * cov
    cuts: list[np.ndarray] = []
    prev = cons.prev_weights
    while True:
        c_all = np.column_stack(base_c + [-s for s in cuts]) if (base_c or cuts) else np.zeros((n, 0))
        b_all = np.array(base_b + [-cons.max_turnover - s @ prev for s in cuts])
        try:
            if c_all.shape[1]:
                w = quadprog.solve_qp(g, mu, c_all, b_all, meq)[0]
            else:
                w = np.linalg.solve(g, mu)
        except ValueError as exc:
            raise InfeasibleError(f"quadratic program infeasible: {exc}", constraint="max_turnover") from exc
        if not cons.turnover_active:
            break
        move = w - prev
        if np.abs(move).sum() <= cons.max_turnover + FEAS_TOL:
            break
        s = np.sign(move)
        if any(np.array_equal(s, c) for c in cuts) or len(cuts) >= MAX_CUTS:
            raise NumericalError("turnover cutting planes failed to converge")
        cuts.append(s)
    if cons.long_only:
        w = np.maximum(w, 0.0)
    return WeightVector(weights=w, objective_value=utility_exponent(w, mu, cov, gamma), n_cuts=len(cuts))
