"""Shared oracles for the test suite."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linprog

from bhalloc.portfolio import PortfolioConstraints

ACTIVE_TOL = 1e-8


def kkt_residual(w, mu, cov, gamma, cons: PortfolioConstraints) -> float:
    """Smallest L1 stationarity residual over valid multipliers, plus primal infeasibility.

    Stationarity for maximizing ``w'mu - gamma/2 w'cov w`` reads
    ``g = nu 1 - sum lo_i e_i + sum cap_i e_i + theta s`` with ``g`` the
    gradient, ``nu`` free, ``lo, cap, theta >= 0`` nonzero only on active
    constraints and ``s`` a subgradient of ``sum |w - prev|`` (``|s_i| <= 1``
    where ``w_i = prev_i``). The best multipliers are found by linear
    programming, so a zero residual certifies optimality independently of
    the solver under test.
    """
    w, mu = np.asarray(w, float), np.asarray(mu, float)
    n = w.size
    g = mu - gamma * np.asarray(cov, float) @ w
    cols, bounds = [], []
    if cons.full_investment:
        cols.append(np.ones(n))
        bounds.append((None, None))
    if cons.long_only:
        for i in np.flatnonzero(w <= ACTIVE_TOL):
            cols.append(-np.eye(n)[i])
            bounds.append((0, None))
    if cons.max_weight is not None:
        for i in np.flatnonzero(w >= cons.max_weight - ACTIVE_TOL):
            cols.append(np.eye(n)[i])
            bounds.append((0, None))
    theta_col = None
    free_idx = []
    if cons.turnover_active:
        move = w - cons.prev_weights
        if np.abs(move).sum() >= cons.max_turnover - ACTIVE_TOL:
            s = np.where(np.abs(move) > ACTIVE_TOL, np.sign(move), 0.0)
            theta_col = len(cols)
            cols.append(s)
            bounds.append((0, None))
            free_idx = list(np.flatnonzero(np.abs(move) <= ACTIVE_TOL))
            for i in free_idx:
                cols.append(np.eye(n)[i])  # theta * s_i with |s_i| <= 1: |t_i| <= theta
                bounds.append((None, None))
    m = len(cols)
    a = np.column_stack(cols) if cols else np.zeros((n, 0))
    # variables: multipliers (m), residual slacks r+ (n), r- (n); minimize sum r
    c = np.concatenate([np.zeros(m), np.ones(2 * n)])
    a_eq = np.hstack([a, np.eye(n), -np.eye(n)])
    a_ub, b_ub = [], []
    for j, i in enumerate(free_idx):
        col = theta_col + 1 + j
        for sign in (1.0, -1.0):
            row = np.zeros(m + 2 * n)
            row[col] = sign
            row[theta_col] = -1.0
            a_ub.append(row)
            b_ub.append(0.0)
    res = linprog(
        c,
        A_ub=np.array(a_ub) if a_ub else None,
        b_ub=b_ub or None,
        A_eq=a_eq,
        b_eq=g,
        bounds=bounds + [(0, None)] * (2 * n),
        method="highs",
    )
    stationarity = res.fun
    primal = 0.0
    if cons.full_investment:
        primal += abs(w.sum() - 1.0)
    if cons.long_only:
        primal += np.maximum(-w, 0).sum()
    if cons.max_weight is not None:
        primal += np.maximum(w - cons.max_weight, 0).sum()
    if cons.turnover_active:
        primal += max(np.abs(w - cons.prev_weights).sum() - cons.max_turnover, 0.0)
    return float(stationarity + primal)


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, passed: bool, detail: str) -> str:
    """Log one acceptance verdict line and return it."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return line
