"""Levenberg-Marquardt for sparse nonlinear least squares.

The Jacobian is built by central finite differences. Columns whose residual
rows do not overlap are perturbed together (greedy colouring of the
sparsity pattern), so a bundle problem needs only a handful of residual
evaluations per Jacobian regardless of the number of points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .errors import NoConvergence


@dataclass(frozen=True)
class LMSettings:
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    max_iterations: int = 100
    rel_cost_tol: float = 1e-12
    grad_tol: float = 1e-12
    min_damping: float = 1e-12
    max_damping: float = 1e16


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    initial_cost: float
    iterations: int
    reason: str
    history: list[float] = field(default_factory=list)
    n_residuals: int = 0


def color_columns(S: sparse.csc_matrix) -> np.ndarray:
    """Greedy colouring: columns sharing a colour touch disjoint residual rows."""
    S = sparse.csc_matrix(S, dtype=bool)
    m, n = S.shape
    colors = np.empty(n, dtype=int)
    used: list[np.ndarray] = []
    for j in range(n):
        rows = S.indices[S.indptr[j] : S.indptr[j + 1]]
        for c, mask in enumerate(used):
            if not mask[rows].any():
                mask[rows] = True
                colors[j] = c
                break
        else:
            mask = np.zeros(m, dtype=bool)
            mask[rows] = True
            used.append(mask)
            colors[j] = len(used) - 1
    return colors


class SparseJacobian:
    """Finite-difference Jacobian operator for a fixed sparsity pattern."""

    def __init__(self, sparsity, typical_scale=None, rel_step: float = 1e-6):
        S = sparse.csc_matrix(sparsity, dtype=bool)
        S.sort_indices()
        self.shape = S.shape
        self.indptr = S.indptr
        self.indices = S.indices
        self.colors = color_columns(S)
        self.n_colors = int(self.colors.max()) + 1 if S.shape[1] else 0
        self.typical = np.ones(S.shape[1]) if typical_scale is None else np.asarray(typical_scale, float)
        self.rel_step = rel_step
        # col index of each stored entry
        self.entry_cols = np.repeat(np.arange(S.shape[1]), np.diff(S.indptr))
        entry_colors = self.colors[self.entry_cols]
        self.groups = [
            (np.flatnonzero(self.colors == c), np.flatnonzero(entry_colors == c)) for c in range(self.n_colors)
        ]

    def __call__(self, fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> sparse.csc_matrix:
        h = self.rel_step * np.maximum(np.abs(x), self.typical)
        data = np.empty(len(self.indices))
        for cols, sel in self.groups:
            xp = x.copy()
            xm = x.copy()
            xp[cols] += h[cols]
            xm[cols] -= h[cols]
            diff = fun(xp) - fun(xm)
            data[sel] = diff[self.indices[sel]] / (2.0 * h[self.entry_cols[sel]])
        return sparse.csc_matrix((data, self.indices, self.indptr), shape=self.shape)


def _solve(A, b, dense: bool) -> np.ndarray:
    if dense:
        try:
            return np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(A, b, rcond=None)[0]
    return splinalg.spsolve(A.tocsc(), b)


def levenberg_marquardt(
    fun: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    sparsity,
    settings: LMSettings = LMSettings(),
    typical_scale=None,
    post_step: Callable[[np.ndarray], np.ndarray] | None = None,
) -> LMResult:
    """Minimise ``0.5 * |fun(x)|^2`` starting from ``x0``.

    The damped normal equations use Marquardt scaling
    ``(J^T J + lambda diag(J^T J)) dx = -J^T r``. A step is accepted only if it
    lowers the cost, so the accepted-cost history is non-increasing.

    ``post_step`` may re-parameterise an accepted iterate along an exact
    gauge direction; it must not change the residuals.
    """
    x = np.array(x0, dtype=float)
    r = fun(x)
    if not np.all(np.isfinite(r)):
        raise NoConvergence("initial residuals are not finite")
    cost = 0.5 * float(r @ r)
    initial_cost = cost
    history = [cost]
    if x.size == 0:
        return LMResult(x, cost, initial_cost, 0, "no parameters", history, len(r))

    jac = SparseJacobian(sparsity, typical_scale)
    dense = x.size <= 1500
    lam = settings.initial_damping
    reason = "max iterations"
    it = 0
    need_jac = True
    while it < settings.max_iterations:
        if need_jac:
            J = jac(fun, x)
            g = J.T @ r
            JtJ = (J.T @ J).tocsc()
            if dense:
                JtJ = JtJ.toarray()
                diag = np.diag(JtJ).copy()
            else:
                diag = JtJ.diagonal()
            diag[diag <= 0] = 1.0
            need_jac = False
        if np.max(np.abs(g)) < settings.grad_tol or cost == 0.0:
            reason = "gradient"
            break
        it += 1
        if dense:
            A = JtJ + lam * np.diag(diag)
        else:
            A = JtJ + sparse.diags(lam * diag)
        step = _solve(A, -g, dense)
        x_new = x + step
        r_new = fun(x_new)
        cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
        if cost_new < cost:
            if post_step is not None:
                x_gauge = post_step(x_new)
                r_gauge = fun(x_gauge)
                cost_gauge = 0.5 * float(r_gauge @ r_gauge)
                if cost_gauge < cost:
                    x_new, r_new, cost_new = x_gauge, r_gauge, cost_gauge
            rel = (cost - cost_new) / cost
            x, r, cost = x_new, r_new, cost_new
            history.append(cost)
            lam = max(lam / settings.damping_down, settings.min_damping)
            need_jac = True
            if rel < settings.rel_cost_tol:
                reason = "relative cost"
                break
        else:
            lam *= settings.damping_up
            if lam > settings.max_damping:
                reason = "damping limit"
                break
    return LMResult(x, cost, initial_cost, it, reason, history, len(r))
