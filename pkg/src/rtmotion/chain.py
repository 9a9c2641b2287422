"""Serial-chain kinematics: forward kinematics, geometric Jacobian, and seeded
damped-least-squares inverse kinematics.

All functions here are pure and operate on immutable inputs, so they are safe
to call from any thread. Orientation is carried everywhere as Z-Y-X intrinsic
Euler angles (roll, pitch, yaw), i.e. R = Rz(yaw) @ Ry(pitch) @ Rx(roll).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.transform import Rotation

Array = NDArray[np.float64]


class IkConvergenceError(RuntimeError):
    """Raised when the IK iteration exhausts max_iters without converging."""

    def __init__(self, message: str, position_error: float, orientation_error: float):
        super().__init__(message)
        self.position_error = position_error
        self.orientation_error = orientation_error


def rpy_to_matrix(roll: float, pitch: float, yaw: float) -> Array:
    """Rotation matrix for Z-Y-X intrinsic Euler angles."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def matrix_to_rpy(rot: Array) -> tuple[float, float, float]:
    """Extract (roll, pitch, yaw) with pitch kept in the (-pi/2, pi/2) branch.

    At the gimbal singularity (|cos(pitch)| ~ 0) roll is fixed to zero and the
    remaining freedom is folded into yaw.
    """
    cos_pitch = math.hypot(rot[0, 0], rot[1, 0])
    pitch = math.atan2(-rot[2, 0], cos_pitch)
    if cos_pitch < 1e-12:
        return 0.0, pitch, math.atan2(-rot[0, 1], rot[1, 1])
    roll = math.atan2(rot[2, 1], rot[2, 2])
    yaw = math.atan2(rot[1, 0], rot[0, 0])
    return roll, pitch, yaw


def make_transform(xyz, rpy) -> Array:
    """Homogeneous 4x4 transform from a translation and Z-Y-X Euler angles."""
    t = np.eye(4)
    t[:3, :3] = rpy_to_matrix(*rpy)
    t[:3, 3] = np.asarray(xyz, dtype=float)
    return t


@dataclass(frozen=True)
class Pose:
    """End-effector pose in the base frame: translation (m) + rpy (rad)."""

    translation: Array
    rpy: Array

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))
        object.__setattr__(self, "rpy", np.asarray(self.rpy, dtype=float))
        if self.translation.shape != (3,) or self.rpy.shape != (3,):
            raise ValueError("Pose expects 3 translation and 3 Euler components")
        if not (np.isfinite(self.translation).all() and np.isfinite(self.rpy).all()):
            raise ValueError("Pose components must be finite")

    @classmethod
    def from_vector(cls, vec) -> "Pose":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (6,):
            raise ValueError(f"pose vector must have 6 entries, got shape {vec.shape}")
        return cls(vec[:3], vec[3:])

    def to_vector(self) -> Array:
        return np.concatenate([self.translation, self.rpy])

    def rotation_matrix(self) -> Array:
        return rpy_to_matrix(*self.rpy)


@dataclass(frozen=True)
class JointSpec:
    """Revolute joint: unit rotation axis plus the fixed transform from the
    parent joint frame to this joint's frame."""

    axis: Array
    offset: Array  # 4x4, applied before the joint rotation

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        norm = np.linalg.norm(axis)
        if not math.isclose(norm, 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"joint axis must be a unit vector, |axis| = {norm}")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))


@dataclass(frozen=True)
class ChainConfig:
    """Robot description consumed by the planner and runtime.

    joint_limits is (dof, 2) [min, max] radians; v_max / a_max are per-joint
    magnitude limits; ee_transform maps the last joint frame to the
    end-effector frame.
    """

    joints: tuple[JointSpec, ...]
    joint_limits: Array
    v_max: Array
    a_max: Array
    control_frequency: float
    ee_transform: Array
    name: str = "robot"

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "joint_limits", np.asarray(self.joint_limits, dtype=float))
        object.__setattr__(self, "v_max", np.asarray(self.v_max, dtype=float))
        object.__setattr__(self, "a_max", np.asarray(self.a_max, dtype=float))
        object.__setattr__(self, "ee_transform", np.asarray(self.ee_transform, dtype=float))
        dof = len(self.joints)
        if dof < 1:
            raise ValueError("chain needs at least one joint")
        if self.joint_limits.shape != (dof, 2):
            raise ValueError(f"joint_limits must be ({dof}, 2)")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ValueError("each joint limit must satisfy min < max")
        if self.v_max.shape != (dof,) or np.any(self.v_max <= 0):
            raise ValueError("v_max must be positive per joint")
        if self.a_max.shape != (dof,) or np.any(self.a_max <= 0):
            raise ValueError("a_max must be positive per joint")
        if self.control_frequency <= 0:
            raise ValueError("control_frequency must be positive")
        for name, rot in [("ee_transform", self.ee_transform[:3, :3])] + [
            (f"joint {i} offset", j.offset[:3, :3]) for i, j in enumerate(self.joints)
        ]:
            if abs(np.linalg.det(rot) - 1.0) > 1e-9 or np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-9:
                raise ValueError(f"{name} rotation is not orthonormal with det +1")

    @property
    def dof(self) -> int:
        return len(self.joints)

    def clamp(self, q: Array) -> Array:
        return np.clip(q, self.joint_limits[:, 0], self.joint_limits[:, 1])

    def mid_position(self) -> Array:
        """Midpoint of the joint limits; the default rest configuration."""
        return 0.5 * (self.joint_limits[:, 0] + self.joint_limits[:, 1])


def load_chain(path: str | Path) -> ChainConfig:
    """Load a chain description from its JSON file format.

    Expected keys: dof, joints (list of {axis, offset: {xyz, rpy}}),
    joint_limits, v_max, a_max, control_frequency, ee_offset ({xyz, rpy}).
    """
    path = Path(path)
    raw = json.loads(path.read_text())
    joints = [
        JointSpec(
            axis=np.asarray(j["axis"], dtype=float),
            offset=make_transform(j["offset"]["xyz"], j["offset"]["rpy"]),
        )
        for j in raw["joints"]
    ]
    if raw.get("dof") is not None and raw["dof"] != len(joints):
        raise ValueError(f"{path}: dof {raw['dof']} does not match {len(joints)} joints")
    ee = raw["ee_offset"]
    return ChainConfig(
        joints=tuple(joints),
        joint_limits=np.asarray(raw["joint_limits"], dtype=float),
        v_max=np.asarray(raw["v_max"], dtype=float),
        a_max=np.asarray(raw["a_max"], dtype=float),
        control_frequency=float(raw["control_frequency"]),
        ee_transform=make_transform(ee["xyz"], ee["rpy"]),
        name=raw.get("name", path.stem),
    )


def _check_q(config: ChainConfig, q) -> Array:
    q = np.asarray(q, dtype=float)
    if q.shape != (config.dof,):
        raise ValueError(f"expected {config.dof} joint values, got shape {q.shape}")
    if not np.isfinite(q).all():
        raise ValueError("joint vector contains non-finite entries")
    return q


def _axis_rotation(axis: Array, angle: float) -> Array:
    return Rotation.from_rotvec(axis * angle).as_matrix()


def fk_transform(config: ChainConfig, q) -> Array:
    """End-effector 4x4 transform in the base frame."""
    q = _check_q(config, q)
    t = np.eye(4)
    for spec, angle in zip(config.joints, q):
        t = t @ spec.offset
        t[:3, :3] = t[:3, :3] @ _axis_rotation(spec.axis, angle)
    return t @ config.ee_transform


def forward_kinematics(config: ChainConfig, q) -> Pose:
    """Compose joint transforms in order and extract the end-effector pose."""
    t = fk_transform(config, q)
    return Pose(t[:3, 3].copy(), np.array(matrix_to_rpy(t[:3, :3])))


def jacobian(config: ChainConfig, q) -> Array:
    """Geometric Jacobian of the end-effector in the base frame.

    Rows 0-2 are linear (m/rad), rows 3-5 angular (rad/rad); column i is the
    contribution of joint i.
    """
    q = _check_q(config, q)
    t = np.eye(4)
    origins = np.empty((config.dof, 3))
    axes = np.empty((config.dof, 3))
    for i, (spec, angle) in enumerate(zip(config.joints, q)):
        t = t @ spec.offset
        origins[i] = t[:3, 3]
        axes[i] = t[:3, :3] @ spec.axis
        t[:3, :3] = t[:3, :3] @ _axis_rotation(spec.axis, angle)
    p_ee = (t @ config.ee_transform)[:3, 3]
    jac = np.empty((6, config.dof))
    jac[:3] = np.cross(axes, p_ee - origins).T
    jac[3:] = axes.T
    return jac


def pose_error(target: Pose, current: Array) -> Array:
    """6-vector (position, rotation-vector) error from a current 4x4 transform.

    The rotation part is the log map of R_target @ R_current^T, which avoids
    Euler wrap artifacts near the representation boundaries.
    """
    pos_err = target.translation - current[:3, 3]
    rot_err = Rotation.from_matrix(target.rotation_matrix() @ current[:3, :3].T).as_rotvec()
    return np.concatenate([pos_err, rot_err])


def inverse_kinematics(
    config: ChainConfig,
    target: Pose,
    seed,
    pos_tol: float = 1e-4,
    ori_tol: float = 1e-3,
    max_iters: int = 200,
    damping: float = 1e-3,
) -> Array:
    """Damped-least-squares IK seeded from a reference configuration.

    The damping factor adapts Levenberg-style (x10 on error increase, /10 on
    decrease) and every iterate is clamped to the joint limits, so the seed
    continuity of consecutive solves is inherited directly from the iteration.
    Raises IkConvergenceError if the target is unreachable within max_iters.
    """
    q = config.clamp(_check_q(config, seed))
    lam = damping
    err = pose_error(target, fk_transform(config, q))
    err_norm = np.linalg.norm(err)
    eye = np.eye(config.dof)
    for _ in range(max_iters):
        pos_err = np.linalg.norm(err[:3])
        ori_err = np.linalg.norm(err[3:])
        if pos_err <= pos_tol and ori_err <= ori_tol:
            return q
        jac = jacobian(config, q)
        step = np.linalg.solve(jac.T @ jac + lam * eye, jac.T @ err)
        q_new = config.clamp(q + step)
        err_new = pose_error(target, fk_transform(config, q_new))
        new_norm = np.linalg.norm(err_new)
        if new_norm < err_norm:
            q, err, err_norm = q_new, err_new, new_norm
            lam = max(lam / 10.0, 1e-10)
        else:
            lam = min(lam * 10.0, 1e8)
    pos_err = float(np.linalg.norm(err[:3]))
    ori_err = float(np.linalg.norm(err[3:]))
    if pos_err <= pos_tol and ori_err <= ori_tol:
        return q
    raise IkConvergenceError(
        f"IK did not converge after {max_iters} iterations "
        f"(position error {pos_err:.3e} m, orientation error {ori_err:.3e} rad)",
        pos_err,
        ori_err,
    )
