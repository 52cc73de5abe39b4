"""Primal active-set solver for strictly convex QPs with linear inequality constraints.

    minimize  0.5 x^T H x + c^T x   subject to  G x <= h
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import linprog


class QPInfeasibleError(ValueError):
    def __init__(self, rows, violation):
        self.rows = list(rows)
        self.violation = float(violation)
        super().__init__(f"constraints infeasible; violated rows {self.rows} "
                         f"(total violation {self.violation:.3g})")


class QPSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class QPResult:
    x: np.ndarray
    active: np.ndarray  # indices of constraints in the final working set
    multipliers: np.ndarray  # one per constraint row, zero when inactive
    iterations: int
    kkt_residual: float


def _feasible_point(G, h, x_pref, tol):
    """Phase 1: minimize total slack, then walk back toward ``x_pref`` while staying feasible."""
    m, n = G.shape
    cost = np.concatenate([np.zeros(n), np.ones(m)])
    A_ub = np.hstack([G, -np.eye(m)])
    bounds = [(None, None)] * n + [(0, None)] * m
    res = linprog(cost, A_ub=A_ub, b_ub=h, bounds=bounds, method="highs")
    if res.status != 0:
        raise QPSolverError(f"phase-1 LP failed: {res.message}")
    x, s = res.x[:n], res.x[n:]
    scale = 1 + np.abs(h)
    if np.any(s > tol * scale):
        raise QPInfeasibleError(np.flatnonzero(s > tol * scale), s.sum())
    # largest step from x toward x_pref that keeps G x <= h
    d = x_pref - x
    Gd = G @ d
    slack = h - G @ x
    pos = Gd > 0
    t = min(1.0, np.min(slack[pos] / Gd[pos])) if np.any(pos) else 1.0
    return x + max(t, 0.0) * d


def solve_qp(H, c, G=None, h=None, x0=None, tol: float = 1e-10, max_iter: int | None = None,
             factor=None) -> QPResult:
    H = np.asarray(H, dtype=float)
    c = np.asarray(c, dtype=float)
    n = c.size
    fac = factor if factor is not None else cho_factor(H)
    x_unc = -cho_solve(fac, c)
    if G is None or len(G) == 0:
        return QPResult(x_unc, np.zeros(0, dtype=int), np.zeros(0), 0, 0.0)
    G = np.atleast_2d(np.asarray(G, dtype=float))
    h = np.asarray(h, dtype=float)
    m = G.shape[0]
    if G.shape[1] != n or h.shape != (m,):
        raise ValueError("constraint dimensions do not match")
    feas_tol = tol * (1 + np.abs(h))
    if np.all(G @ x_unc - h <= feas_tol):
        return QPResult(x_unc, np.zeros(0, dtype=int), np.zeros(m), 0, 0.0)

    if x0 is not None and np.all(G @ x0 - h <= feas_tol):
        x = np.array(x0, dtype=float)
    else:
        x = _feasible_point(G, h, x_unc, 1e-9)
    HiGt = cho_solve(fac, G.T)  # H^-1 G^T, n x m
    W: list[int] = []
    max_iter = max_iter or 50 * (n + m)
    lam = np.zeros(0)
    for it in range(1, max_iter + 1):
        g = H @ x + c
        Hig = cho_solve(fac, g)
        if W:
            A = G[W]
            S = A @ HiGt[:, W]
            lam = -np.linalg.solve(S, A @ Hig)
            p = -(Hig + HiGt[:, W] @ lam)
        else:
            lam = np.zeros(0)
            p = -Hig
        if np.linalg.norm(p) <= tol * (1 + np.linalg.norm(x)):
            if not W or lam.min() >= -tol * (1 + np.abs(lam).max()):
                break
            W.pop(int(np.argmin(lam)))
            continue
        Gp = G @ p
        alpha, block = 1.0, None
        cand = np.setdiff1d(np.flatnonzero(Gp > tol * np.linalg.norm(p)), W)
        if cand.size:
            ratios = (h[cand] - G[cand] @ x) / Gp[cand]
            j = int(np.argmin(ratios))
            if ratios[j] < 1.0:
                alpha, block = max(ratios[j], 0.0), int(cand[j])
        x = x + alpha * p
        if block is not None:
            W.append(block)
    else:
        raise QPSolverError(f"active-set method did not converge in {max_iter} iterations")

    # polish: solve the equality-constrained problem on the final working set exactly
    mult = np.zeros(m)
    if W:
        A = G[W]
        S = A @ HiGt[:, W]
        mu = -np.linalg.solve(S, h[W] - A @ x_unc)
        x = x_unc - HiGt[:, W] @ mu
        mult[W] = mu
    grad = H @ x + c + G.T @ mult
    kkt = max(np.max(np.abs(grad)), np.max(np.maximum(G @ x - h, 0)),
              np.max(np.maximum(-mult, 0)))
    return QPResult(x, np.array(sorted(W), dtype=int), mult, it, float(kkt))
