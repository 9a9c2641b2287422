"""Network service for rt-move-cartesian plus telemetry.

One JSON object per LF-terminated line over a stream socket. Inbound requests:

    {"id": str, "robot": str, "type": "rt-move-cartesian",
     "waypoints": [{"pose": [x, y, z, roll, pitch, yaw], "duration": s}, ...]}

Every inbound line is answered by exactly one ack, in order:

    {"id": str|null, "status": "accepted"|"rejected", "reason": str?}

Telemetry is broadcast to all connected clients at the control frequency:

    {"robot": str, "t": s, "q": [...], "qd": [...], "qdd": [...],
     "pose": [...], "request": str|null}

The transport is deliberately a single ubiquitous text protocol; the planning
layers underneath never see sockets, so further transports can be layered on
without touching them. Slow telemetry consumers are disconnected rather than
allowed to stall the dispatch loop.
"""

from __future__ import annotations

import json
import queue
import socket
import threading
import time
from typing import Optional

import numpy as np

from rtmotion import planner
from rtmotion.chain import ChainConfig
from rtmotion.runtime import Session, TelemetryRecord


def encode_line(message: dict) -> bytes:
    # repr-based float serialization: shortest exact round trip (>= 17 digits
    # where needed), satisfying the 9-significant-digit wire contract
    return (json.dumps(message, allow_nan=False) + "\n").encode("utf-8")


def telemetry_message(robot_id: str, record: TelemetryRecord) -> dict:
    return {
        "robot": robot_id,
        "t": record.t,
        "q": record.reference.q.tolist(),
        "qd": record.reference.qd.tolist(),
        "qdd": record.reference.qdd.tolist(),
        "pose": record.ee_pose_ref.to_vector().tolist(),
        "request": record.active_request_id,
    }


def handle_request_line(sessions: dict[str, Session], line: str, t_now: float) -> dict:
    """Validate one wire line and apply it to the named robot's session.

    Returns the ack; 'accepted' only after IK and the QP both succeeded. A
    rejected request leaves whatever plan is active untouched.
    """
    request_id = None
    try:
        payload = json.loads(line)
        request_id = payload.get("id") if isinstance(payload, dict) else None
    except json.JSONDecodeError as exc:
        return {"id": request_id, "status": "rejected", "reason": f"parse: {exc}"}
    if not isinstance(payload, dict):
        return {"id": None, "status": "rejected", "reason": "parse: expected a JSON object"}

    robot = payload.get("robot")
    session = sessions.get(robot)
    if session is None:
        return {"id": request_id, "status": "rejected", "reason": f"unknown robot '{robot}'"}
    try:
        waypoints = planner.waypoints_from_payload(payload.get("waypoints"))
        request = planner.PlanRequest(
            robot_id=robot,
            waypoints=tuple(waypoints),
            request_id=str(request_id),
            request_type=payload.get("type", ""),
        )
    except planner.ValidationError as exc:
        return {"id": request_id, "status": "rejected", "reason": f"validation: {exc}"}
    record = session.submit(request, t_now)
    if record.accepted:
        return {"id": request_id, "status": "accepted"}
    return {"id": request_id, "status": "rejected", "reason": record.reason}


class _Client:
    """One connection: a reader loop plus a queue-drained writer thread."""

    def __init__(self, server: "RobotServer", conn: socket.socket):
        self.server = server
        self.conn = conn
        self.outbox: queue.Queue[Optional[bytes]] = queue.Queue(maxsize=server.max_queue)
        self.alive = True
        self._writer = threading.Thread(target=self._write_loop, daemon=True)
        self._reader = threading.Thread(target=self._read_loop, daemon=True)

    def start(self):
        self._writer.start()
        self._reader.start()

    def send(self, data: bytes) -> None:
        try:
            self.outbox.put_nowait(data)
        except queue.Full:
            # slow consumer: drop the connection, never the dispatch loop
            self.close()

    def close(self):
        if not self.alive:
            return
        self.alive = False
        try:
            self.outbox.put_nowait(None)
        except queue.Full:
            pass
        try:
            self.conn.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.conn.close()
        self.server._drop(self)

    def _write_loop(self):
        while self.alive:
            data = self.outbox.get()
            if data is None:
                return
            try:
                self.conn.sendall(data)
            except OSError:
                self.close()
                return

    def _read_loop(self):
        buffer = b""
        try:
            while self.alive:
                chunk = self.conn.recv(4096)
                if not chunk:
                    break
                buffer += chunk
                while b"\n" in buffer:
                    line, buffer = buffer.split(b"\n", 1)
                    if not line.strip():
                        continue
                    ack = handle_request_line(
                        self.server.sessions, line.decode("utf-8"), self.server.now()
                    )
                    self.send(encode_line(ack))
        except OSError:
            pass
        finally:
            self.close()


class RobotServer:
    """Live service: wall-clock dispatch, per-connection intake threads.

    The dispatch thread ticks the session at the configured control frequency
    and fans telemetry out to every client; request handling happens on the
    connection threads and swaps the plan handle atomically, so dispatch is
    never blocked by planning.
    """

    def __init__(
        self,
        chain: ChainConfig,
        robot_id: str = "sim",
        host: str = "127.0.0.1",
        port: int = 0,
        initial_q=None,
        max_queue: int = 512,
    ):
        q0 = chain.mid_position() if initial_q is None else np.asarray(initial_q, dtype=float)
        self.session = Session(chain, q0, robot_id=robot_id)
        self.sessions = {robot_id: self.session}
        self.max_queue = max_queue
        self._sock = socket.create_server((host, port))
        self.host, self.port = self._sock.getsockname()[:2]
        self._clients: set[_Client] = set()
        self._clients_lock = threading.Lock()
        self._stop = threading.Event()
        self._t0 = time.monotonic()
        self._threads: list[threading.Thread] = []
        self.jitter_max = 0.0

    def now(self) -> float:
        return time.monotonic() - self._t0

    def start(self):
        self._t0 = time.monotonic()
        accept = threading.Thread(target=self._accept_loop, daemon=True)
        dispatch = threading.Thread(target=self._dispatch_loop, daemon=True)
        self._threads = [accept, dispatch]
        accept.start()
        dispatch.start()

    def stop(self):
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        with self._clients_lock:
            clients = list(self._clients)
        for client in clients:
            client.close()
        for thread in self._threads:
            thread.join(timeout=2.0)

    def _drop(self, client: _Client):
        with self._clients_lock:
            self._clients.discard(client)

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            client = _Client(self, conn)
            with self._clients_lock:
                self._clients.add(client)
            client.start()

    def _dispatch_loop(self):
        period = 1.0 / self.session.fc
        k = 0
        while not self._stop.is_set():
            deadline = self._t0 + k * period
            delay = deadline - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            else:
                self.jitter_max = max(self.jitter_max, -delay)
            record = self.session.tick(self.now())
            data = encode_line(telemetry_message(self.session.robot_id, record))
            with self._clients_lock:
                clients = list(self._clients)
            for client in clients:
                client.send(data)
            k += 1
