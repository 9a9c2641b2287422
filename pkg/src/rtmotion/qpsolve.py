"""Operator-splitting (ADMM) solver for min p^T Q p s.t. l <= A p <= u, plus
a dense KKT solve used as the equality-only verification oracle.

The iteration follows the standard splitting: factor (P + sigma*I +
A^T diag(rho) A) once, then alternate a linear solve, a relaxed averaging
step, projection of z onto [l, u], and a dual update. Tight rows (l == u) get
a 1000x penalty weight, and the problem is internally equilibrated (cost
scaling + row normalization of A) so the fixed penalty works across the wide
dynamic range the short-segment problems produce. Both transformations leave
the minimizer unchanged and are invisible to callers.

Several independent problems that share Q and A (one per joint of a request)
can be solved as columns of one batch, which amortizes the factorization and
the per-iteration matrix products.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from rtmotion.qpbuild import QpProblem

Array = NDArray[np.float64]

STATUS_SOLVED = "solved"
STATUS_MAX_ITERS = "max_iters"
STATUS_PRIMAL_INFEASIBLE = "primal_infeasible"

_EQUALITY_GAP = 1e-12
_EQUALITY_RHO_SCALE = 1e3
_STALL_RATIO = 0.99
_STALL_CHECKS = 10
_STALL_LEVEL = 1e3


class FactorizationError(RuntimeError):
    """The reduced system could not be factorized (degenerate problem data)."""


@dataclass(frozen=True)
class SolverSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iters: int = 4000
    check_interval: int = 25

    def __post_init__(self):
        if min(self.rho, self.sigma, self.eps_abs, self.eps_rel) <= 0:
            raise ValueError("rho, sigma and tolerances must be positive")
        if not 0.0 < self.alpha < 2.0:
            raise ValueError("relaxation alpha must lie in (0, 2)")
        if self.max_iters <= 0 or self.check_interval <= 0:
            raise ValueError("max_iters and check_interval must be positive")


@dataclass
class Solution:
    p: Array
    status: str
    iterations: int
    solve_time: float
    primal_residual: float
    dual_residual: float


@dataclass
class BatchSolution:
    """Solution columns for problems sharing (Q, A) but not bounds."""

    p: Array  # (n_vars, n_problems)
    status: str
    iterations: int
    solve_time: float
    primal_residuals: Array
    dual_residuals: Array
    converged: NDArray[np.bool_]


def solve_batch(
    q_matrix: Array,
    a_matrix: Array,
    lower: Array,
    upper: Array,
    settings: Optional[SolverSettings] = None,
) -> BatchSolution:
    """ADMM over the columns of lower/upper; all columns share Q and A."""
    settings = settings or SolverSettings()
    start = time.perf_counter()
    n = q_matrix.shape[0]
    m, n_problems = lower.shape

    # equilibration: unit-inf-norm rows of A, cost matrix scaled near unity
    row_norms = np.max(np.abs(a_matrix), axis=1)
    if np.any(row_norms <= 0):
        raise ValueError("A contains an all-zero row")
    e_scale = 1.0 / row_norms
    a_s = a_matrix * e_scale[:, None]
    l_s = lower * e_scale[:, None]
    u_s = upper * e_scale[:, None]
    p_full = 2.0 * q_matrix  # gradient convention for the p^T Q p objective
    cost_scale = 1.0 / max(float(np.max(np.abs(p_full))), 1e-12)
    p_s = p_full * cost_scale

    rho = np.full(m, settings.rho)
    rho[np.all(u_s - l_s <= _EQUALITY_GAP, axis=1)] = settings.rho * _EQUALITY_RHO_SCALE

    reduced = p_s + settings.sigma * np.eye(n) + (a_s.T * rho) @ a_s
    try:
        factor = scipy.linalg.cho_factor(reduced, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise FactorizationError(f"reduced system factorization failed: {exc}") from exc

    x = np.zeros((n, n_problems))
    z = np.zeros((m, n_problems))
    y = np.zeros((m, n_problems))
    rho_col = rho[:, None]
    inv_e = row_norms[:, None]

    status = STATUS_MAX_ITERS
    iterations = settings.max_iters
    prim_res = np.full(n_problems, np.inf)
    dual_res = np.full(n_problems, np.inf)
    converged = np.zeros(n_problems, dtype=bool)
    prev_check = np.inf
    stall = 0

    for iteration in range(1, settings.max_iters + 1):
        rhs = settings.sigma * x + a_s.T @ (rho_col * z - y)
        x_tilde = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
        z_tilde = a_s @ x_tilde
        x = settings.alpha * x_tilde + (1.0 - settings.alpha) * x
        v = settings.alpha * z_tilde + (1.0 - settings.alpha) * z + y / rho_col
        z = np.clip(v, l_s, u_s)
        y = rho_col * (v - z)

        if iteration % settings.check_interval == 0 or iteration == settings.max_iters:
            ax = a_s @ x
            # primal residual in physical row units (undo the row scaling)
            prim_gap = np.abs(ax - z) * inv_e
            prim_res = prim_gap.max(axis=0)
            prim_ref = np.maximum(np.abs(ax) * inv_e, np.abs(z) * inv_e).max(axis=0)
            dual_gap = p_s @ x + a_s.T @ y
            dual_res = np.abs(dual_gap).max(axis=0)
            dual_ref = np.maximum(
                np.abs(p_s @ x).max(axis=0), np.abs(a_s.T @ y).max(axis=0)
            )
            converged = (prim_res <= settings.eps_abs + settings.eps_rel * prim_ref) & (
                dual_res <= settings.eps_abs + settings.eps_rel * dual_ref
            )
            if converged.all():
                status = STATUS_SOLVED
                iterations = iteration
                break
            worst = float(prim_res.max())
            if worst > _STALL_LEVEL * settings.eps_abs and worst > _STALL_RATIO * prev_check:
                stall += 1
                if stall >= _STALL_CHECKS:
                    status = STATUS_PRIMAL_INFEASIBLE
                    iterations = iteration
                    break
            else:
                stall = 0
            prev_check = worst

    return BatchSolution(
        p=x,
        status=status,
        iterations=iterations,
        solve_time=time.perf_counter() - start,
        primal_residuals=prim_res,
        dual_residuals=dual_res,
        converged=converged,
    )


def solve(problem: QpProblem, settings: Optional[SolverSettings] = None) -> Solution:
    """Solve one QpProblem; deterministic for fixed settings."""
    problem.validate()
    batch = solve_batch(
        problem.q_matrix,
        problem.a_matrix,
        problem.lower[:, None],
        problem.upper[:, None],
        settings,
    )
    return Solution(
        p=batch.p[:, 0],
        status=batch.status,
        iterations=batch.iterations,
        solve_time=batch.solve_time,
        primal_residual=float(batch.primal_residuals[0]),
        dual_residual=float(batch.dual_residuals[0]),
    )


def solve_kkt_equality(q_matrix: Array, a_eq: Array, b_eq: Array) -> Array:
    """Exact minimizer of p^T Q p subject to A_eq p = b_eq.

    One dense symmetric-indefinite solve of the stationarity system
    [Q A^T; A 0] [p; lam] = [0; b]. Requires A_eq to have full row rank.
    """
    n = q_matrix.shape[0]
    m = a_eq.shape[0]
    # scale-invariant in p: normalize the cost and the constraint rows so the
    # indefinite solve stays well conditioned at short-segment cost scales
    cost_scale = 1.0 / max(float(np.max(np.abs(q_matrix))), 1e-12)
    row_norms = np.max(np.abs(a_eq), axis=1)
    if np.any(row_norms <= 0):
        raise ValueError("singular KKT matrix (zero constraint row)")
    e_scale = 1.0 / row_norms
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = q_matrix * cost_scale
    kkt[:n, n:] = (a_eq * e_scale[:, None]).T
    kkt[n:, :n] = a_eq * e_scale[:, None]
    rhs = np.concatenate([np.zeros(n), b_eq * e_scale])
    try:
        sol = scipy.linalg.solve(kkt, rhs, assume_a="sym", check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise ValueError(f"singular KKT matrix (rank-deficient constraints): {exc}") from exc
    p = sol[:n]
    residual = np.max(np.abs(a_eq @ p - b_eq)) if m else 0.0
    if not np.isfinite(p).all() or residual > 1e-6 * max(1.0, float(np.max(np.abs(b_eq), initial=0.0))):
        raise ValueError("singular KKT matrix (rank-deficient constraints)")
    return p
