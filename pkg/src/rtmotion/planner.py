"""Low-level motion planner: turns an rt-move-cartesian request into an
evaluable multi-joint trajectory.

Waypoints are resolved to joint space by chaining the IK solver (each solve
seeded from the previous solution, the first from the current position), then
one minimum-jerk QP per joint is assembled on a shared segment-time grid and
solved as a batch. Any IK or QP failure rejects the whole request; a
previously active plan is never touched by a failed replan.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from rtmotion import qpbuild, qpsolve
from rtmotion.chain import ChainConfig, IkConvergenceError, Pose, forward_kinematics, inverse_kinematics
from rtmotion.poly import JointTrajectory, Segment

Array = NDArray[np.float64]

DEFAULT_DEGREE = 5
REQUEST_TYPE = "rt-move-cartesian"

# tighter than the solver defaults: junction/terminal residuals inherit the
# primal tolerance, and the continuity contract is 1e-6
PLANNER_SETTINGS = qpsolve.SolverSettings(eps_abs=1e-8, eps_rel=1e-8, max_iters=20000)


class ValidationError(ValueError):
    """Malformed request content (empty list, bad durations, wrong type)."""


class PlanningError(RuntimeError):
    """Base for runtime planning failures; the whole request is rejected."""

    stage = "plan"


class IkFailure(PlanningError):
    stage = "ik"

    def __init__(self, waypoint_index: int, cause: IkConvergenceError):
        super().__init__(f"IK failed at waypoint {waypoint_index}: {cause}")
        self.waypoint_index = waypoint_index


class QpFailure(PlanningError):
    stage = "qp"

    def __init__(self, joint: int, status: str):
        super().__init__(f"QP for joint {joint} finished with status '{status}'")
        self.joint = joint
        self.status = status


@dataclass(frozen=True)
class CartesianWaypoint:
    """Target end-effector pose plus the time allotted to reach it."""

    pose: Pose
    duration: float

    def __post_init__(self):
        if not self.duration > 0:
            raise ValidationError(f"duration must be positive, got {self.duration}")


@dataclass(frozen=True)
class PlanRequest:
    robot_id: str
    waypoints: tuple[CartesianWaypoint, ...]
    request_id: str
    request_type: str = REQUEST_TYPE

    def __post_init__(self):
        object.__setattr__(self, "waypoints", tuple(self.waypoints))


@dataclass(frozen=True)
class RobotState:
    """Per-joint position/velocity/acceleration snapshot at a timestamp."""

    q: Array
    qd: Array
    qdd: Array
    timestamp: float = 0.0

    def __post_init__(self):
        for name in ("q", "qd", "qdd"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @classmethod
    def rest(cls, q, timestamp: float = 0.0) -> "RobotState":
        q = np.asarray(q, dtype=float)
        return cls(q, np.zeros_like(q), np.zeros_like(q), timestamp)


@dataclass(frozen=True)
class Plan:
    """Solved multi-joint trajectory; all joints share the segment-time grid."""

    chain: ChainConfig
    joints: tuple[JointTrajectory, ...]
    joint_waypoints: Array  # (N, dof) IK results
    epoch: float
    request_id: str
    solve_time: float = 0.0
    build_time: float = 0.0
    iterations: int = 0

    @property
    def total_time(self) -> float:
        return self.joints[0].total_time

    def boundary_times(self) -> list[float]:
        return self.joints[0].boundary_times()

    def state_at(self, local_t: float) -> tuple[Array, Array, Array]:
        cols = [traj.eval(local_t) for traj in self.joints]
        q, qd, qdd = (np.array(c) for c in zip(*cols))
        return q, qd, qdd

    def junction_residuals(self) -> Array:
        """Worst (q, qd, qdd) junction mismatch over all joints."""
        worst = np.zeros(3)
        for traj in self.joints:
            worst = np.maximum(worst, traj.junction_residuals())
        return worst


def load_waypoints(path: str | Path) -> list[CartesianWaypoint]:
    """Read a waypoint list file: JSON array of {pose: [6], duration: s}."""
    raw = json.loads(Path(path).read_text())
    return waypoints_from_payload(raw)


def waypoints_from_payload(items: Sequence[dict]) -> list[CartesianWaypoint]:
    """Build waypoints from the wire payload schema, validating shape."""
    if not isinstance(items, list) or not items:
        raise ValidationError("waypoints: empty")
    out = []
    for i, item in enumerate(items):
        try:
            pose = Pose.from_vector(item["pose"])
            duration = float(item["duration"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"waypoint {i}: {exc}") from exc
        out.append(CartesianWaypoint(pose, duration))
    return out


def _validate_request(request: PlanRequest, chain: ChainConfig) -> None:
    if request.request_type != REQUEST_TYPE:
        raise ValidationError(f"unsupported request type '{request.request_type}'")
    if not request.waypoints:
        raise ValidationError("waypoints: empty")
    min_duration = 2.0 / chain.control_frequency
    for i, wp in enumerate(request.waypoints):
        if wp.duration < min_duration:
            raise ValidationError(
                f"waypoint {i}: duration {wp.duration} below two control ticks "
                f"({min_duration})"
            )


def _solve_joint_waypoints(request: PlanRequest, chain: ChainConfig, q0: Array) -> Array:
    """Chained IK: d_0 is the current position, each solve seeds the next."""
    targets = np.empty((len(request.waypoints), chain.dof))
    seed = q0
    for i, wp in enumerate(request.waypoints):
        try:
            seed = inverse_kinematics(chain, wp.pose, seed)
        except IkConvergenceError as exc:
            raise IkFailure(i, exc) from exc
        targets[i] = seed
    return targets


def plan(
    request: PlanRequest,
    chain: ChainConfig,
    s0: RobotState,
    degree: int = DEFAULT_DEGREE,
    settings: Optional[qpsolve.SolverSettings] = None,
) -> Plan:
    """Plan a request starting from s0; the epoch is s0.timestamp.

    The returned trajectory starts at s0 exactly, passes through the IK image
    of every waypoint at its cumulative time, ends at the final target at
    rest, and respects the velocity/acceleration limits on the control grid.
    """
    _validate_request(request, chain)
    if s0.q.shape != (chain.dof,) or not np.isfinite(s0.q).all():
        raise ValidationError("initial state does not match chain dof")
    settings = settings or PLANNER_SETTINGS

    t_build0 = time.perf_counter()
    q0 = chain.clamp(s0.q)
    joint_targets = _solve_joint_waypoints(request, chain, q0)

    durations = np.array([wp.duration for wp in request.waypoints])
    fc = chain.control_frequency
    n_seg = len(durations)
    width = degree + 1

    # Q and A depend only on degree/durations/grid, so build them once from
    # joint 0 and swap in per-joint bound columns
    shared = qpbuild.assemble_qp(
        [(float(joint_targets[i, 0]), float(durations[i])) for i in range(n_seg)],
        (float(q0[0]), float(s0.qd[0]), float(s0.qdd[0])),
        degree,
        fc,
        float(chain.v_max[0]),
        float(chain.a_max[0]),
    )
    n_rows = shared.a_matrix.shape[0]
    n_in = n_rows - shared.n_eq
    lower = np.empty((n_rows, chain.dof))
    upper = np.empty((n_rows, chain.dof))
    # inequality rows alternate velocity/acceleration per sample (qpbuild order)
    limit_pattern = np.empty((n_in, chain.dof))
    limit_pattern[0::2] = chain.v_max
    limit_pattern[1::2] = chain.a_max
    for j in range(chain.dof):
        _, b_eq = qpbuild.build_equality(
            [(float(joint_targets[i, j]), float(durations[i])) for i in range(n_seg)],
            (float(q0[j]), float(s0.qd[j]), float(s0.qdd[j])),
            degree,
        )
        lower[: shared.n_eq, j] = b_eq
        upper[: shared.n_eq, j] = b_eq
    lower[shared.n_eq :] = -limit_pattern
    upper[shared.n_eq :] = limit_pattern
    build_time = time.perf_counter() - t_build0

    batch = qpsolve.solve_batch(shared.q_matrix, shared.a_matrix, lower, upper, settings)
    if batch.status != qpsolve.STATUS_SOLVED:
        failing = int(np.argmax(~batch.converged)) if not batch.converged.all() else 0
        raise QpFailure(failing, batch.status)

    starts = np.concatenate([[0.0], np.cumsum(durations)[:-1]])
    joints = tuple(
        JointTrajectory(
            [
                Segment(
                    coeffs=batch.p[i * width : (i + 1) * width, j].copy(),
                    start_time=float(starts[i]),
                    duration=float(durations[i]),
                )
                for i in range(n_seg)
            ]
        )
        for j in range(chain.dof)
    )
    return Plan(
        chain=chain,
        joints=joints,
        joint_waypoints=joint_targets,
        epoch=s0.timestamp,
        request_id=request.request_id,
        solve_time=batch.solve_time,
        build_time=build_time,
        iterations=batch.iterations,
    )


def reference_at(plan_: Plan, t: float) -> tuple[RobotState, Pose]:
    """Commanded reference state and its end-effector pose at absolute time t.

    Past the end of the trajectory the terminal position holds with zero
    velocity and acceleration; evaluation is on demand (no precomputation).
    """
    if t < plan_.epoch:
        raise ValueError(f"t={t} precedes plan epoch {plan_.epoch}")
    q, qd, qdd = plan_.state_at(t - plan_.epoch)
    return RobotState(q, qd, qdd, t), forward_kinematics(plan_.chain, q)


def preempt(
    active: Plan,
    t_now: float,
    new_request: PlanRequest,
    chain: ChainConfig,
    degree: int = DEFAULT_DEGREE,
    settings: Optional[qpsolve.SolverSettings] = None,
) -> Plan:
    """Replace the active plan at t_now, replanning from the commanded
    reference (not the measured state) so the command stream stays C2
    continuous regardless of tracking error.

    Raises like plan(); on failure the caller keeps executing the old plan.
    """
    state, _ = reference_at(active, t_now)
    return plan(new_request, chain, state, degree=degree, settings=settings)
