"""Per-joint minimum-jerk QP assembly.

The decision vector stacks the (L+1) polynomial coefficients of the N
segments. The cost is the block-diagonal Gram matrix of sampled
third-derivative basis rows; equalities pin the initial state, the terminal
rest state, waypoint pass-through, and junction continuity; inequalities
bound velocity and acceleration on the same sampling grid as the cost, in
two-sided interval form l <= A p <= u (equality rows are tight intervals).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from rtmotion.poly import basis_row

Array = NDArray[np.float64]

DEFAULT_RIDGE = 1e-9


class QpBuildError(ValueError):
    """Structurally invalid problem (bad inputs or rank-deficient equalities)."""


@dataclass
class QpProblem:
    """min p^T Q p  subject to  lower <= A p <= upper.

    The first n_eq rows of A are equalities (lower == upper). dims carries
    (degree, segment count, durations) so solutions can be mapped back to
    trajectories.
    """

    q_matrix: Array
    a_matrix: Array
    lower: Array
    upper: Array
    n_eq: int
    degree: int
    durations: Array = field(default_factory=lambda: np.zeros(0))

    @property
    def n_vars(self) -> int:
        return self.q_matrix.shape[0]

    @property
    def n_segments(self) -> int:
        return len(self.durations)

    def validate(self) -> None:
        n = self.n_vars
        if self.q_matrix.shape != (n, n):
            raise QpBuildError("Q must be square")
        if np.max(np.abs(self.q_matrix - self.q_matrix.T)) > 0:
            raise QpBuildError("Q must be symmetric")
        if self.a_matrix.shape[1] != n:
            raise QpBuildError("A column count must match Q")
        if self.lower.shape != self.upper.shape or self.lower.shape[0] != self.a_matrix.shape[0]:
            raise QpBuildError("bounds must match A row count")
        if np.any(self.lower > self.upper):
            raise QpBuildError("lower bounds exceed upper bounds")
        if np.any(np.all(self.a_matrix == 0.0, axis=1)):
            raise QpBuildError("A contains an all-zero row")

    def dump_json(self, path: str | Path) -> None:
        """Dense row-major dump for offline inspection and cross-checks."""
        payload = {
            "n_vars": self.n_vars,
            "n_eq": self.n_eq,
            "degree": self.degree,
            "durations": self.durations.tolist(),
            "Q": self.q_matrix.tolist(),
            "A": self.a_matrix.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
        }
        Path(path).write_text(json.dumps(payload))


def segment_samples(duration: float, control_frequency: float) -> Array:
    """Normalized sample times for one segment: max(2, round(f_c * D)) points
    spanning [0, 1] inclusive, so segment endpoints are always sampled."""
    if duration <= 0:
        raise QpBuildError("segment duration must be positive")
    if control_frequency <= 0:
        raise QpBuildError("control frequency must be positive")
    count = max(2, int(round(control_frequency * duration)))
    return np.linspace(0.0, 1.0, count)


def jerk_cost_matrix(degree: int, duration: float, control_frequency: float) -> Array:
    """Gram matrix of sampled third-derivative basis rows, scaled by D**-6.

    Symmetric PSD by construction; the D**-6 factor is the squared chain-rule
    scaling of the jerk under normalized local time.
    """
    samples = segment_samples(duration, control_frequency)
    rows = np.array([basis_row(degree, u, 3) for u in samples])
    q = rows.T @ rows * duration**-6
    return 0.5 * (q + q.T)


def build_equality(
    waypoints: list[tuple[float, float]],
    initial_state: tuple[float, float, float],
    degree: int,
) -> tuple[Array, Array]:
    """Equality rows (A_eq, b_eq) in fixed order.

    Rows: 3 initial-state rows, 3 terminal rows (position = last waypoint,
    velocity = acceleration = 0), then per interior junction one pass-through
    row and three continuity rows, for 4N + 2 rows total. Derivative rows
    carry the same D**-k scaling used at evaluation time.
    """
    if not waypoints:
        raise QpBuildError("waypoints: empty")
    if not np.all(np.isfinite(initial_state)):
        raise QpBuildError("initial state contains non-finite entries")
    positions = np.array([w[0] for w in waypoints], dtype=float)
    durations = np.array([w[1] for w in waypoints], dtype=float)
    if np.any(durations <= 0):
        raise QpBuildError("waypoint durations must be positive")
    n_seg = len(waypoints)
    width = degree + 1
    n_rows = 4 * n_seg + 2
    a_eq = np.zeros((n_rows, width * n_seg))
    b_eq = np.zeros(n_rows)

    def block(i: int) -> slice:
        return slice(i * width, (i + 1) * width)

    row = 0
    for k in range(3):  # initial state of segment 1
        a_eq[row, block(0)] = basis_row(degree, 0.0, k) * durations[0] ** -k
        b_eq[row] = initial_state[k]
        row += 1
    for k in range(3):  # terminal rest at the last waypoint
        a_eq[row, block(n_seg - 1)] = basis_row(degree, 1.0, k) * durations[-1] ** -k
        b_eq[row] = positions[-1] if k == 0 else 0.0
        row += 1
    for i in range(n_seg - 1):  # interior junctions
        a_eq[row, block(i)] = basis_row(degree, 1.0, 0)
        b_eq[row] = positions[i]
        row += 1
        for k in range(3):
            a_eq[row, block(i)] = basis_row(degree, 1.0, k) * durations[i] ** -k
            a_eq[row, block(i + 1)] = -basis_row(degree, 0.0, k) * durations[i + 1] ** -k
            row += 1

    if np.linalg.matrix_rank(a_eq) < n_rows:
        raise QpBuildError(
            f"equality constraints are rank-deficient: {n_rows} rows need "
            f"degree >= 4 and N*(L+1) >= 4N+2 (got N={n_seg}, L={degree})"
        )
    return a_eq, b_eq


def build_inequality(
    degree: int,
    durations,
    control_frequency: float,
    v_max: float,
    a_max: float,
) -> tuple[Array, Array, Array]:
    """Velocity/acceleration interval rows on the cost sampling grid.

    Two rows per sample (velocity then acceleration), segment by segment; the
    two-sided interval form absorbs the absolute values.
    """
    if v_max <= 0 or a_max <= 0:
        raise QpBuildError("velocity and acceleration limits must be positive")
    durations = np.asarray(durations, dtype=float)
    n_seg = len(durations)
    width = degree + 1
    blocks, lowers, uppers = [], [], []
    for i, duration in enumerate(durations):
        for u in segment_samples(duration, control_frequency):
            for k, limit in ((1, v_max), (2, a_max)):
                row = np.zeros(width * n_seg)
                row[i * width : (i + 1) * width] = basis_row(degree, u, k) * duration**-k
                blocks.append(row)
                lowers.append(-limit)
                uppers.append(limit)
    return np.array(blocks), np.array(lowers), np.array(uppers)


def assemble_qp(
    waypoints: list[tuple[float, float]],
    initial_state: tuple[float, float, float],
    degree: int,
    control_frequency: float,
    v_max: float,
    a_max: float,
    ridge: float = DEFAULT_RIDGE,
) -> QpProblem:
    """Full per-joint problem: block-diagonal jerk cost, equality rows stacked
    as tight intervals above the sampled limit rows.

    The tiny diagonal ridge lifts the cubic-and-below nullspace of the jerk
    Gram matrix so downstream factorizations stay stable.
    """
    durations = np.array([w[1] for w in waypoints], dtype=float)
    n_seg = len(waypoints)
    width = degree + 1
    q_matrix = np.zeros((width * n_seg, width * n_seg))
    for i, duration in enumerate(durations):
        sl = slice(i * width, (i + 1) * width)
        q_matrix[sl, sl] = jerk_cost_matrix(degree, duration, control_frequency)
    q_matrix += ridge * np.eye(width * n_seg)

    a_eq, b_eq = build_equality(waypoints, initial_state, degree)
    a_in, l_in, u_in = build_inequality(degree, durations, control_frequency, v_max, a_max)

    problem = QpProblem(
        q_matrix=q_matrix,
        a_matrix=np.vstack([a_eq, a_in]),
        lower=np.concatenate([b_eq, l_in]),
        upper=np.concatenate([b_eq, u_in]),
        n_eq=a_eq.shape[0],
        degree=degree,
        durations=durations,
    )
    problem.validate()
    return problem
