"""Execution pipeline against a simulated arm.

A Session owns the atomically swappable active Plan plus the telemetry sink.
Request intake (submit) may block on planning; the tick path never does: it
reads the plan handle once, evaluates the reference, advances the simulated
arm, and appends one record. Scenario scripts drive a session on a logical
clock so the shipped experiment replays are deterministic; the live network
service drives the same session from wall-clock threads.
"""

from __future__ import annotations

import csv
import json
import threading
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from rtmotion import planner
from rtmotion.chain import ChainConfig, Pose, forward_kinematics, load_chain
from rtmotion.planner import Plan, PlanRequest, RobotState

Array = NDArray[np.float64]


class ScenarioError(RuntimeError):
    """Script-level failure: an event did not play out as the script demands."""


@dataclass
class SimArm:
    """Stand-in for the hardware driver plus encoder readback.

    tracking_lag = 0 copies the reference exactly; otherwise each state
    component follows a first-order filter with time constant tracking_lag.
    Optional Gaussian noise is added to the reported encoder positions.
    """

    chain: ChainConfig
    encoder_state: RobotState
    tracking_lag: float = 0.0
    noise_std: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.tracking_lag < 0:
            raise ValueError("tracking lag must be >= 0")
        self._rng = np.random.default_rng(self.noise_seed)

    def advance(self, reference: RobotState, dt: float) -> RobotState:
        if self.tracking_lag == 0.0:
            state = RobotState(reference.q, reference.qd, reference.qdd, reference.timestamp)
        else:
            gain = min(dt / self.tracking_lag, 1.0) if dt > 0 else 0.0
            prev = self.encoder_state
            state = RobotState(
                prev.q + (reference.q - prev.q) * gain,
                prev.qd + (reference.qd - prev.qd) * gain,
                prev.qdd + (reference.qdd - prev.qdd) * gain,
                reference.timestamp,
            )
        if self.noise_std > 0.0:
            state = RobotState(
                state.q + self._rng.normal(0.0, self.noise_std, self.chain.dof),
                state.qd,
                state.qdd,
                state.timestamp,
            )
        self.encoder_state = RobotState(
            self.chain.clamp(state.q), state.qd, state.qdd, state.timestamp
        )
        return self.encoder_state


@dataclass(frozen=True)
class TelemetryRecord:
    t: float
    reference: RobotState
    encoder: RobotState
    ee_pose_ref: Pose
    ee_pose_enc: Pose
    active_request_id: Optional[str]


@dataclass
class RequestRecord:
    request_id: str
    t_submitted: float
    accepted: bool
    reason: Optional[str] = None
    solve_time: float = 0.0
    build_time: float = 0.0
    iterations: int = 0
    preempted_request: Optional[str] = None
    # |new - old| reference mismatch (q, qd, qdd) at the swap instant
    preemption_jump: Optional[tuple[float, float, float]] = None
    junction_residual: Optional[tuple[float, float, float]] = None


class Session:
    """One robot's execution state: plan handle, simulated arm, telemetry."""

    def __init__(
        self,
        chain: ChainConfig,
        initial_q,
        robot_id: str = "sim",
        control_frequency: Optional[float] = None,
        tracking_lag: float = 0.0,
        noise_std: float = 0.0,
        degree: int = planner.DEFAULT_DEGREE,
    ):
        self.chain = chain
        self.robot_id = robot_id
        self.fc = control_frequency or chain.control_frequency
        self.degree = degree
        self._hold = RobotState.rest(chain.clamp(np.asarray(initial_q, dtype=float)))
        self.arm = SimArm(chain, self._hold, tracking_lag=tracking_lag, noise_std=noise_std)
        self.active_plan: Optional[Plan] = None
        self.telemetry: list[TelemetryRecord] = []
        self.requests: list[RequestRecord] = []
        self._last_t: Optional[float] = None
        self._intake_lock = threading.Lock()

    def reference(self, t: float) -> RobotState:
        plan_ = self.active_plan  # read once: swap is atomic
        if plan_ is None:
            return RobotState(self._hold.q, self._hold.qd, self._hold.qdd, t)
        # a wall-clock tick stamped just before a concurrent swap may trail
        # the new epoch by under one period; the plan's initial state equals
        # the old reference there, so evaluating at the epoch stays continuous
        state, _ = planner.reference_at(plan_, max(t, plan_.epoch))
        return state

    def tick(self, t: float) -> TelemetryRecord:
        if self._last_t is not None and t < self._last_t - 1e-12:
            raise RuntimeError(f"clock regression: tick at {t} after {self._last_t}")
        dt = 0.0 if self._last_t is None else t - self._last_t
        plan_ = self.active_plan
        if plan_ is None:
            ref = RobotState(self._hold.q, self._hold.qd, self._hold.qdd, t)
            request_id = None
        else:
            ref, _ = planner.reference_at(plan_, max(t, plan_.epoch))
            ref = RobotState(ref.q, ref.qd, ref.qdd, t)
            request_id = plan_.request_id
        enc = self.arm.advance(ref, dt)
        record = TelemetryRecord(
            t=t,
            reference=ref,
            encoder=enc,
            ee_pose_ref=forward_kinematics(self.chain, ref.q),
            ee_pose_enc=forward_kinematics(self.chain, enc.q),
            active_request_id=request_id,
        )
        self.telemetry.append(record)
        self._last_t = t
        return record

    def submit(self, request: PlanRequest, t_now: float) -> RequestRecord:
        """Plan (idle) or preempt (active) at receipt time t_now.

        A rejected request leaves the active plan untouched. Serialized so
        concurrent clients multiplex onto one intake activity.
        """
        with self._intake_lock:
            old_plan = self.active_plan
            record = RequestRecord(request_id=request.request_id, t_submitted=t_now, accepted=False)
            try:
                if old_plan is None:
                    state = RobotState(self._hold.q, self._hold.qd, self._hold.qdd, t_now)
                    new_plan = planner.plan(request, self.chain, state, degree=self.degree)
                else:
                    # receipt stamps from different connections may interleave
                    # within a planning window; never preempt before the epoch
                    new_plan = planner.preempt(
                        old_plan, max(t_now, old_plan.epoch), request, self.chain, degree=self.degree
                    )
            except (planner.ValidationError, planner.PlanningError) as exc:
                record.reason = f"{getattr(exc, 'stage', 'validation')}: {exc}"
                self.requests.append(record)
                return record
            record.accepted = True
            record.solve_time = new_plan.solve_time
            record.build_time = new_plan.build_time
            record.iterations = new_plan.iterations
            jr = new_plan.junction_residuals()
            record.junction_residual = (float(jr[0]), float(jr[1]), float(jr[2]))
            if old_plan is not None:
                record.preempted_request = old_plan.request_id
                old_state, _ = planner.reference_at(old_plan, t_now)
                q, qd, qdd = new_plan.state_at(0.0)
                record.preemption_jump = (
                    float(np.max(np.abs(q - old_state.q))),
                    float(np.max(np.abs(qd - old_state.qd))),
                    float(np.max(np.abs(qdd - old_state.qdd))),
                )
            self.active_plan = new_plan  # atomic swap
            self.requests.append(record)
            return record


@dataclass
class ScenarioScript:
    """Parsed scenario file plus the expanded, time-sorted event list."""

    name: str
    chain: ChainConfig
    fc: float
    q0: Array
    settle_time: float
    events: list[dict]
    shape: Optional[dict] = None
    teleop: Optional[dict] = None
    chase: Optional[dict] = None
    master_samples: Optional[list[tuple[float, Array]]] = None


def _resource_path(kind: str, name: str) -> Path:
    return Path(str(resources.files("rtmotion").joinpath(f"data/{kind}/{name}")))


def _resolve(base_dir: Path, kind: str, name: str) -> Path:
    candidate = (base_dir / name).resolve()
    if candidate.exists():
        return candidate
    packaged = _resource_path(kind, name)
    if packaged.exists():
        return packaged
    raise FileNotFoundError(f"cannot resolve {kind} file '{name}'")


def _expand_chase(raw: dict, events: list[dict]) -> list[dict]:
    """Turn move_target observations into preempting single-waypoint requests.

    Grasp (stop of the target) triggers when the observed displacement drops
    below the policy epsilon between consecutive update cycles; a final
    request is issued toward the stopped target and a grasp marker recorded.
    Perception and grasping live here in the script, not in the planner.
    """
    policy = raw["chase"]
    duration = float(policy.get("request_duration", 1.5))
    eps = float(policy.get("grasp_epsilon_m", 0.002))
    out = []
    prev_pos = None
    grasped = False
    counter = 0
    for event in events:
        if event["action"] != "move_target":
            out.append(event)
            continue
        if grasped:
            continue
        pose = np.asarray(event["pose"], dtype=float)
        displacement = None if prev_pos is None else float(np.linalg.norm(pose[:3] - prev_pos))
        prev_pos = pose[:3]
        counter += 1
        request = {
            "id": f"chase-{counter}",
            "robot": "sim",
            "type": planner.REQUEST_TYPE,
            "waypoints": [{"pose": pose.tolist(), "duration": duration}],
        }
        out.append({"t": event["t"], "action": "send_request", "request": request})
        if displacement is not None and displacement < eps:
            out.append({"t": event["t"], "action": "marker", "label": "grasp_triggered"})
            grasped = True
    return out


def _expand_teleop(raw: dict, base_dir: Path) -> tuple[list[dict], list[tuple[float, Array]]]:
    """Build sliding-window buffered requests from the recorded master log.

    At each send instant the request carries the buffer_size most recent
    master poses, oldest first, each with the fixed waypoint duration; every
    new window preempts the previous one.
    """
    policy = raw["teleop"]
    log_path = _resolve(base_dir, "scenarios", policy["master_log"])
    buffer_size = int(policy.get("buffer_size", 5))
    wp_duration = float(policy.get("waypoint_duration_s", 0.04))
    samples: list[tuple[float, Array]] = []
    with open(log_path, newline="") as fh:
        for row in csv.DictReader(fh):
            pose = np.array(
                [float(row[k]) for k in ("x", "y", "z", "roll", "pitch", "yaw")]
            )
            samples.append((float(row["timestamp"]), pose))
    events = []
    for k in range(buffer_size - 1, len(samples)):
        window = samples[k - buffer_size + 1 : k + 1]
        request = {
            "id": f"teleop-{k}",
            "robot": "sim",
            "type": planner.REQUEST_TYPE,
            "waypoints": [
                {"pose": pose.tolist(), "duration": wp_duration} for _, pose in window
            ],
        }
        events.append({"t": samples[k][0], "action": "send_request", "request": request})
    return events, samples


def load_scenario(path: str | Path) -> ScenarioScript:
    path = Path(path)
    if not path.exists() and path.parent == Path("."):
        path = _resource_path("scenarios", path.name)
    raw = json.loads(path.read_text())
    base_dir = path.parent
    chain = load_chain(_resolve(base_dir, "chains", raw["chain"]))
    events = list(raw.get("events", []))
    master_samples = None
    if "chase" in raw:
        events = _expand_chase(raw, events)
    if "teleop" in raw:
        teleop_events, master_samples = _expand_teleop(raw, base_dir)
        events = events + teleop_events
    events.sort(key=lambda e: e["t"])
    return ScenarioScript(
        name=raw.get("name", path.stem),
        chain=chain,
        fc=float(raw.get("fc", chain.control_frequency)),
        q0=np.asarray(raw["q0"], dtype=float),
        settle_time=float(raw.get("settle_time", 0.5)),
        events=events,
        shape=raw.get("shape"),
        teleop=raw.get("teleop"),
        chase=raw.get("chase"),
        master_samples=master_samples,
    )


@dataclass
class ScenarioResult:
    script: ScenarioScript
    session: Session
    markers: list[tuple[float, str]]
    summary: dict

    def write_log_csv(self, path: str | Path) -> None:
        dof = self.script.chain.dof
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["t"]
            for j in range(dof):
                header += [f"q{j}", f"qd{j}", f"qdd{j}"]
            header += [f"enc_q{j}" for j in range(dof)]
            header += ["x", "y", "z", "roll", "pitch", "yaw", "request"]
            writer.writerow(header)
            for rec in self.session.telemetry:
                row = [repr(rec.t)]
                for j in range(dof):
                    row += [repr(rec.reference.q[j]), repr(rec.reference.qd[j]), repr(rec.reference.qdd[j])]
                row += [repr(rec.encoder.q[j]) for j in range(dof)]
                row += [repr(v) for v in rec.ee_pose_ref.to_vector()]
                row.append(rec.active_request_id or "")
                writer.writerow(row)

    def write_report(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary, indent=2))


def _segment_distance(point: Array, a: Array, b: Array) -> float:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return float(np.linalg.norm(point - a))
    s = min(max(float((point - a) @ ab) / denom, 0.0), 1.0)
    return float(np.linalg.norm(point - (a + s * ab)))


def _path_deviation(session: Session, script: ScenarioScript, archive: dict[str, Plan]) -> float:
    """Max distance from the reference end-effector path to the chord between
    the bracketing waypoints of whichever plan was active at each tick."""
    deviation = 0.0
    by_id: dict[str, list[TelemetryRecord]] = {}
    for rec in session.telemetry:
        if rec.active_request_id is not None:
            by_id.setdefault(rec.active_request_id, []).append(rec)
    for request_id, records in by_id.items():
        plan_ = archive.get(request_id)
        if plan_ is None:
            continue
        bounds = np.cumsum([seg.duration for seg in plan_.joints[0].segments])
        q_start = np.array([traj.segments[0].eval(traj.segments[0].start_time, 0) for traj in plan_.joints])
        anchors = [forward_kinematics(script.chain, q_start).translation] + [
            forward_kinematics(script.chain, wp).translation for wp in plan_.joint_waypoints
        ]
        for rec in records:
            local = rec.t - plan_.epoch
            if local >= bounds[-1]:
                continue
            idx = int(np.searchsorted(bounds, local, side="right"))
            deviation = max(
                deviation,
                _segment_distance(rec.ee_pose_ref.translation, anchors[idx], anchors[idx + 1]),
            )
    return deviation


def _teleop_delay(session: Session, script: ScenarioScript) -> dict:
    """Median lag between a master pose timestamp and the tick at which the
    commanded end-effector passes closest to it."""
    samples = script.master_samples or []
    positions = np.array([rec.ee_pose_ref.translation for rec in session.telemetry])
    times = np.array([rec.t for rec in session.telemetry])
    if not len(samples) or not len(times):
        return {}
    horizon = times[-1]
    delays = []
    for stamp, pose in samples:
        if stamp < 1.0 or stamp + 0.5 > horizon:
            continue
        dist = np.linalg.norm(positions - pose[:3], axis=1)
        delays.append(float(times[int(np.argmin(dist))] - stamp))
    if not delays:
        return {}
    delays = np.array(delays)
    return {
        "samples": int(delays.size),
        "median_s": float(np.median(delays)),
        "p10_s": float(np.percentile(delays, 10)),
        "p90_s": float(np.percentile(delays, 90)),
    }


def run_scenario(script: ScenarioScript | str | Path) -> ScenarioResult:
    """Execute the scripted request schedule on a simulated clock at fc."""
    if not isinstance(script, ScenarioScript):
        script = load_scenario(script)
    chain = script.chain
    session = Session(chain, script.q0, control_frequency=script.fc)
    archive: dict[str, Plan] = {}
    dt = 1.0 / script.fc
    markers: list[tuple[float, str]] = []

    horizon = script.settle_time
    for event in script.events:
        if event["action"] == "send_request":
            total = sum(w["duration"] for w in event["request"]["waypoints"])
            horizon = max(horizon, event["t"] + total + script.settle_time)
        else:
            horizon = max(horizon, event["t"])
    n_ticks = int(round(horizon * script.fc)) + 1

    pending = sorted(script.events, key=lambda e: e["t"])
    cursor = 0
    for k in range(n_ticks):
        t = k * dt
        while cursor < len(pending) and pending[cursor]["t"] <= t + 1e-9:
            event = pending[cursor]
            cursor += 1
            if event["action"] == "send_request":
                payload = event["request"]
                request = PlanRequest(
                    robot_id=payload.get("robot", session.robot_id),
                    waypoints=tuple(planner.waypoints_from_payload(payload["waypoints"])),
                    request_id=payload["id"],
                    request_type=payload.get("type", planner.REQUEST_TYPE),
                )
                record = session.submit(request, t)
                if not record.accepted:
                    raise ScenarioError(
                        f"scenario '{script.name}': request {request.request_id} at t={t:.3f} "
                        f"rejected ({record.reason})"
                    )
                archive[request.request_id] = session.active_plan
            elif event["action"] == "marker":
                markers.append((t, event["label"]))
            elif event["action"] == "assert":
                _run_assert(event, session, t)
            elif event["action"] == "move_target":
                pass  # consumed by the chase expansion; bare targets are inert
            else:
                raise ScenarioError(f"unknown scenario action '{event['action']}'")
        session.tick(t)

    summary = _summarize(session, script, markers, archive)
    return ScenarioResult(script=script, session=session, markers=markers, summary=summary)


def _run_assert(event: dict, session: Session, t: float) -> None:
    check = event.get("check")
    tol = float(event.get("tol", 1e-6))
    ref = session.reference(t)
    if check == "at_rest":
        worst = max(float(np.max(np.abs(ref.qd))), float(np.max(np.abs(ref.qdd))))
        if worst > tol:
            raise ScenarioError(f"assert at_rest failed at t={t}: residual motion {worst:.2e}")
    elif check == "near_pose":
        target = np.asarray(event["pose"], dtype=float)
        ee = forward_kinematics(session.chain, ref.q).translation
        gap = float(np.linalg.norm(ee - target[:3]))
        if gap > tol:
            raise ScenarioError(f"assert near_pose failed at t={t}: {gap:.4f} m from target")
    else:
        raise ScenarioError(f"unknown assert check '{check}'")


def _summarize(
    session: Session,
    script: ScenarioScript,
    markers: list[tuple[float, str]],
    archive: dict[str, Plan],
) -> dict:
    chain = script.chain
    accepted = [r for r in session.requests if r.accepted]
    preemptions = [r for r in accepted if r.preemption_jump is not None]
    qd = np.array([rec.reference.qd for rec in session.telemetry])
    qdd = np.array([rec.reference.qdd for rec in session.telemetry])
    qs = np.array([rec.reference.q for rec in session.telemetry])
    vel_excess = np.max(np.abs(qd) - chain.v_max, initial=-np.inf)
    acc_excess = np.max(np.abs(qdd) - chain.a_max, initial=-np.inf)
    violations = int(np.sum(np.any(np.abs(qd) > chain.v_max + 1e-6, axis=1) | np.any(np.abs(qdd) > chain.a_max + 1e-6, axis=1)))
    tick_step = np.max(np.abs(np.diff(qs, axis=0)), axis=0) if len(qs) > 1 else np.zeros(chain.dof)
    step_bound = chain.v_max / script.fc * (1.0 + 1e-3)

    def _stack(records, attr):
        vals = [getattr(r, attr) for r in records if getattr(r, attr) is not None]
        return np.array(vals) if vals else np.zeros((0, 3))

    junctions = _stack(accepted, "junction_residual")
    jumps = _stack(preemptions, "preemption_jump")
    final_ref = session.telemetry[-1].reference if session.telemetry else None

    summary = {
        "scenario": script.name,
        "fc": script.fc,
        "ticks": len(session.telemetry),
        "requests_accepted": len(accepted),
        "requests_rejected": len(session.requests) - len(accepted),
        "preemptions": len(preemptions),
        "max_junction_residual": junctions.max(axis=0).tolist() if junctions.size else [0.0, 0.0, 0.0],
        "max_preemption_jump": jumps.max(axis=0).tolist() if jumps.size else [0.0, 0.0, 0.0],
        "limit_violation_ticks": violations,
        "max_velocity_excess": float(vel_excess),
        "max_acceleration_excess": float(acc_excess),
        "max_tick_step_ratio": float(np.max(tick_step / step_bound)) if len(qs) > 1 else 0.0,
        "terminal_velocity": float(np.max(np.abs(final_ref.qd))) if final_ref is not None else 0.0,
        "terminal_acceleration": float(np.max(np.abs(final_ref.qdd))) if final_ref is not None else 0.0,
        "solve_time_median_s": float(np.median([r.solve_time for r in accepted])) if accepted else 0.0,
        "solve_time_max_s": float(np.max([r.solve_time for r in accepted])) if accepted else 0.0,
        "markers": [{"t": t, "label": label} for t, label in markers],
    }
    if script.shape:
        summary["path_deviation_m"] = _path_deviation(session, script, archive)
    if script.teleop:
        summary["pipeline_delay"] = _teleop_delay(session, script)
    return summary
