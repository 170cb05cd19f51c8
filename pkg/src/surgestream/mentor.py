"""Mentor-side engine: receive and decode frames, rebuild the point cloud,
manage the camera->origin->world->display view chain, run scripted mentor
agents, and emit guidance feedback.

Feedback coordinates are always expressed in the camera frame {C}; the
view transform affects only what the mentor sees, never what is sent.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import codec
from .geometry import (
    CameraIntrinsics,
    DisparityMap,
    PointCloud,
    RigidTransform,
    cloud_from_frame,
    rotation_to_euler,
)
from .transport import (
    FB_NEEDLE,
    FB_POINTER,
    FB_TRAJECTORY,
    MSG_BYE,
    MSG_FRAME,
    ROLE_MENTOR,
    STREAM_SOCKET_BUF,
    FeedbackMessage,
    FramePayload,
    Session,
    TransportError,
    _clamp_mss,
    now_us,
    session_handshake,
)

logger = logging.getLogger(__name__)

__all__ = [
    "ViewState",
    "ScriptError",
    "MentorAgentScript",
    "scripted_pointer_agent",
    "scripted_needle_agent",
    "FpsMeter",
    "SceneFrame",
    "MentorConfig",
    "MentorClient",
    "run_mentor_client",
]


class ViewState:
    """Scene placement (k_o_w plus uniform scale) and viewer pose (k_w_h).

    The scale is kept separate so every chain element stays strictly
    rigid; it is applied to origin-frame coordinates before k_o_w.
    """

    def __init__(
        self,
        k_c_o: RigidTransform = RigidTransform(),
        k_o_w: RigidTransform = RigidTransform(),
        k_w_h: RigidTransform = RigidTransform(),
        scale: float = 1.0,
    ):
        self._lock = threading.Lock()
        self.k_c_o = k_c_o
        self._k_o_w = k_o_w
        self._k_w_h = k_w_h
        self._scale = self._check_scale(scale)
        self._trivial = self._compute_trivial()

    @staticmethod
    def _check_scale(scale: float) -> float:
        if not (scale > 0 and math.isfinite(scale)):
            raise ValueError(f"scale must be positive, got {scale}")
        return float(scale)

    def _compute_trivial(self) -> bool:
        if self._scale != 1.0:
            return False
        return all(
            np.array_equal(k.R, np.eye(3)) and not k.t.any()
            for k in (self.k_c_o, self._k_o_w, self._k_w_h)
        )

    def set_placement(self, k_o_w: RigidTransform, scale: float) -> None:
        with self._lock:
            self._k_o_w = k_o_w
            self._scale = self._check_scale(scale)
            self._trivial = self._compute_trivial()

    def set_viewer(self, k_w_h: RigidTransform) -> None:
        with self._lock:
            self._k_w_h = k_w_h
            self._trivial = self._compute_trivial()

    def get(self) -> Tuple[RigidTransform, RigidTransform, RigidTransform, float]:
        with self._lock:
            return self.k_c_o, self._k_o_w, self._k_w_h, self._scale

    def transform_points(self, xyz: np.ndarray) -> np.ndarray:
        """Camera-frame points -> display-frame points.

        The all-identity chain is the identity map and returns the input
        array as-is (callers treat cloud buffers as read-only).
        """
        with self._lock:
            trivial = self._trivial
        if trivial:
            return xyz
        k_c_o, k_o_w, k_w_h, scale = self.get()
        p_o = k_c_o.apply(xyz)
        p_w = k_o_w.apply(p_o * scale)
        return k_w_h.apply(p_w)


# ---------------------------------------------------------------------------
# Scripted agents
# ---------------------------------------------------------------------------


class ScriptError(ValueError):
    """Malformed mentor script."""


def scripted_pointer_agent(target, based_on_seq: int = 0) -> FeedbackMessage:
    """Pointer feedback at a camera-frame target (z must be positive)."""
    t = np.asarray(target, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(t)) or t[2] <= 0:
        raise ScriptError(f"pointer target must be finite with z > 0, got {t}")
    return FeedbackMessage(m=1, i=FB_POINTER, x=float(t[0]), y=float(t[1]),
                           z=float(t[2]), based_on_seq=based_on_seq)


def scripted_needle_agent(pose: RigidTransform,
                          based_on_seq: int = 0) -> FeedbackMessage:
    """Virtual-needle feedback from a camera-frame SE(3) pose."""
    yaw, pitch, roll = rotation_to_euler(pose.R)
    return FeedbackMessage(m=1, i=FB_NEEDLE, yaw=yaw, pitch=pitch, roll=roll,
                           x=float(pose.t[0]), y=float(pose.t[1]),
                           z=float(pose.t[2]), based_on_seq=based_on_seq)


@dataclass
class MentorAgentScript:
    """Ordered mentor actions replayed against a live session."""

    actions: List[dict] = field(default_factory=list)

    _KINDS = ("point_at", "set_needle", "draw_stroke", "clear", "wait")

    def __post_init__(self):
        for idx, action in enumerate(self.actions):
            kind = action.get("kind")
            if kind not in self._KINDS:
                raise ScriptError(f"action {idx}: unknown kind {kind!r}")
            if kind == "point_at":
                t = action.get("target")
                if t is None or len(t) != 3 or not all(
                    math.isfinite(float(c)) for c in t
                ):
                    raise ScriptError(f"action {idx}: bad point_at target {t!r}")
            elif kind == "set_needle":
                for key in ("yaw", "pitch", "roll"):
                    if not math.isfinite(float(action.get(key, 0.0))):
                        raise ScriptError(f"action {idx}: bad angle {key}")
                pos = action.get("position", (0.0, 0.0, 0.0))
                if len(pos) != 3:
                    raise ScriptError(f"action {idx}: bad needle position")
            elif kind == "draw_stroke":
                pts = action.get("points", [])
                if len(pts) < 2:
                    raise ScriptError(f"action {idx}: stroke needs >= 2 vertices")
                for p in pts:
                    if len(p) != 3 or not all(math.isfinite(float(c)) for c in p):
                        raise ScriptError(f"action {idx}: bad stroke vertex {p!r}")
            elif kind == "wait":
                if float(action.get("ms", -1)) < 0:
                    raise ScriptError(f"action {idx}: wait needs ms >= 0")

    @classmethod
    def from_json(cls, path) -> "MentorAgentScript":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(actions=list(doc.get("actions", [])))


class FpsMeter:
    """Frame counter over wall time."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0
        self._first: Optional[float] = None
        self._last: Optional[float] = None

    def tick(self) -> None:
        now = time.perf_counter()
        with self._lock:
            if self._first is None:
                self._first = now
            self._last = now
            self._count += 1

    @property
    def count(self) -> int:
        with self._lock:
            return self._count

    def fps(self) -> float:
        with self._lock:
            if self._count < 2 or self._last == self._first:
                return 0.0
            return (self._count - 1) / (self._last - self._first)


@dataclass
class SceneFrame:
    """Latest decoded scene as seen by the mentor."""

    seq: int
    capture_timestamp_us: int
    recv_us: int
    rgb: np.ndarray
    disparity: DisparityMap
    ifp: Optional[codec.IfpImage]
    cloud: PointCloud
    cloud_display: np.ndarray
    decode_us: int
    cloud_us: int
    render_us: int
    rgb_payload: bytes
    ifp_payload_len: int


@dataclass
class MentorConfig:
    host: str
    port: int
    script: Optional[MentorAgentScript] = None
    stats_path: Optional[str] = None
    frame_limit: Optional[int] = None
    connect_attempts: int = 3
    backoff: float = 0.3
    handshake_timeout: float = 5.0
    max_payload: int = 32 * 1024 * 1024
    # Called after each processed frame: fn(client, scene_frame).
    on_frame: Optional[Callable] = None


@dataclass
class MentorFrameRow:
    seq: int
    capture_timestamp_us: int
    recv_us: int
    decode_us: int
    cloud_us: int
    render_us: int
    points: int
    payload_bytes: int


class MentorClient:
    """Receives/decodes the stream and emits feedback for one session."""

    def __init__(self, config: MentorConfig):
        self.config = config
        self.view = ViewState()
        self.fps = FpsMeter()
        self.session: Optional[Session] = None
        self.intrinsics: Optional[CameraIntrinsics] = None
        self.prescale = 1.0
        self.skipped = 0
        self.frames_processed = 0
        self.rows: List[MentorFrameRow] = []
        self._latest: Optional[SceneFrame] = None
        self._latest_lock = threading.Lock()
        self._latest_event = threading.Event()
        self._stroke_counter = 0
        self._stop = threading.Event()
        self._recv_thread: Optional[threading.Thread] = None
        self._script_thread: Optional[threading.Thread] = None

    # -- connection -----------------------------------------------------------

    def connect(self) -> None:
        cfg = self.config
        last_exc: Optional[Exception] = None
        for attempt in range(cfg.connect_attempts):
            try:
                sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                # Must be set before connect: a shallow receive window keeps
                # undecoded frames from queueing up in the kernel, and the
                # clamped MSS keeps that window several segments wide.
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF,
                                STREAM_SOCKET_BUF)
                _clamp_mss(sock)
                sock.settimeout(cfg.handshake_timeout)
                sock.connect((cfg.host, cfg.port))
                self.session = session_handshake(
                    sock, ROLE_MENTOR, timeout=cfg.handshake_timeout,
                    max_payload=cfg.max_payload,
                )
                self.intrinsics = self.session.intrinsics
                self.prescale = self.session.peer_hello.disparity_prescale
                return
            except (OSError, TransportError) as exc:
                last_exc = exc
                logger.warning("connect attempt %d failed: %s", attempt + 1, exc)
                time.sleep(cfg.backoff * (2**attempt))
        raise ConnectionError(f"could not reach operation side: {last_exc}")

    def start(self) -> None:
        if self.session is None:
            self.connect()
        self._recv_thread = threading.Thread(target=self._recv_loop,
                                             name="mentor-recv", daemon=True)
        self._recv_thread.start()
        if self.config.script is not None:
            self._script_thread = threading.Thread(target=self._run_script,
                                                   name="mentor-script",
                                                   daemon=True)
            self._script_thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._latest_event.set()
        if self.session is not None:
            self.session.send_bye()
            self.session.close()
        for t in (self._recv_thread, self._script_thread):
            if t is not None and t is not threading.current_thread():
                t.join(timeout=5.0)
        if self.config.stats_path is not None:
            self.write_stats(self.config.stats_path)

    def join(self, timeout: Optional[float] = None) -> None:
        if self._recv_thread is not None:
            self._recv_thread.join(timeout)

    # -- receiving ------------------------------------------------------------

    def latest(self) -> Optional[SceneFrame]:
        with self._latest_lock:
            return self._latest

    def wait_for_frame(self, timeout: float = 5.0) -> Optional[SceneFrame]:
        self._latest_event.wait(timeout)
        self._latest_event.clear()
        return self.latest()

    def _recv_loop(self) -> None:
        cfg = self.config
        while not self._stop.is_set():
            try:
                msg = self.session.recv()
            except TransportError:
                break
            if msg.msg_type == MSG_BYE:
                break
            if msg.msg_type != MSG_FRAME:
                continue
            recv_us = now_us()
            try:
                scene = self._process_frame(msg.seq, msg.payload, recv_us)
            except (TransportError, codec.CodecError, ValueError) as exc:
                self.skipped += 1
                logger.warning("frame %d skipped: %s", msg.seq, exc)
                continue
            self.frames_processed += 1
            self.fps.tick()
            with self._latest_lock:
                self._latest = scene
            self._latest_event.set()
            if cfg.on_frame is not None:
                cfg.on_frame(self, scene)
            if (cfg.frame_limit is not None
                    and self.frames_processed >= cfg.frame_limit):
                break
        self._stop.set()
        self._latest_event.set()

    def _process_frame(self, seq: int, payload: bytes, recv_us: int) -> SceneFrame:
        frame = FramePayload.unpack(payload)

        t0 = now_us()
        rgb, ifp = codec.decode_frame(
            codec.EncodedFrame(rgb_payload=frame.rgb, ifp_payload=frame.ifp,
                               quality=0)
        )
        disp = codec.merge_ifp(ifp, prescale=self.prescale)
        decode_us = now_us() - t0

        t0 = now_us()
        cloud = cloud_from_frame(self.intrinsics, disp, rgb)
        cloud_us = now_us() - t0

        t0 = now_us()
        display = self.view.transform_points(cloud.xyz)
        render_us = now_us() - t0

        row = MentorFrameRow(seq=seq,
                             capture_timestamp_us=frame.capture_timestamp_us,
                             recv_us=recv_us, decode_us=decode_us,
                             cloud_us=cloud_us, render_us=render_us,
                             points=len(cloud),
                             payload_bytes=len(frame.rgb) + len(frame.ifp))
        self.rows.append(row)
        return SceneFrame(
            seq=seq,
            capture_timestamp_us=frame.capture_timestamp_us,
            recv_us=recv_us,
            rgb=rgb,
            disparity=disp,
            ifp=ifp,
            cloud=cloud,
            cloud_display=display,
            decode_us=decode_us,
            cloud_us=cloud_us,
            render_us=render_us,
            rgb_payload=frame.rgb,
            ifp_payload_len=len(frame.ifp),
        )

    # -- feedback -------------------------------------------------------------

    def _based_on(self) -> int:
        latest = self.latest()
        return latest.seq if latest is not None else 0

    def send_pointer(self, target) -> FeedbackMessage:
        fb = scripted_pointer_agent(target, based_on_seq=self._based_on())
        self.session.send_feedback(fb)
        return fb

    def send_needle(self, pose: RigidTransform) -> FeedbackMessage:
        fb = scripted_needle_agent(pose, based_on_seq=self._based_on())
        self.session.send_feedback(fb)
        return fb

    def send_stroke(self, points) -> List[FeedbackMessage]:
        """One trajectory-vertex message per point, sharing a stroke id."""
        pts = [np.asarray(p, dtype=np.float64).reshape(3) for p in points]
        if len(pts) < 2:
            raise ScriptError("stroke needs >= 2 vertices")
        self._stroke_counter = (self._stroke_counter + 1) & 0xFFFF
        stroke_id = self._stroke_counter
        out = []
        based = self._based_on()
        for p in pts:
            fb = FeedbackMessage(m=1, i=FB_TRAJECTORY, stroke_id=stroke_id,
                                 x=float(p[0]), y=float(p[1]), z=float(p[2]),
                                 based_on_seq=based)
            self.session.send_feedback(fb)
            out.append(fb)
        return out

    def send_clear(self) -> FeedbackMessage:
        fb = FeedbackMessage(m=0, based_on_seq=self._based_on())
        self.session.send_feedback(fb)
        return fb

    def send_ui_feedback(self, fb: FeedbackMessage) -> FeedbackMessage:
        """Forward an externally built (already validated) feedback record."""
        if fb.based_on_seq == 0:
            fb = FeedbackMessage(m=fb.m, i=fb.i, stroke_id=fb.stroke_id,
                                 yaw=fb.yaw, pitch=fb.pitch, roll=fb.roll,
                                 x=fb.x, y=fb.y, z=fb.z,
                                 based_on_seq=self._based_on())
        self.session.send_feedback(fb)
        return fb

    def _run_script(self) -> None:
        try:
            for action in self.config.script.actions:
                if self._stop.is_set():
                    return
                kind = action["kind"]
                if kind == "wait":
                    time.sleep(float(action["ms"]) / 1000.0)
                elif kind == "point_at":
                    self.send_pointer(action["target"])
                elif kind == "set_needle":
                    from .geometry import euler_to_rotation

                    pose = RigidTransform(
                        R=euler_to_rotation(float(action.get("yaw", 0.0)),
                                            float(action.get("pitch", 0.0)),
                                            float(action.get("roll", 0.0))),
                        t=np.asarray(action.get("position", (0, 0, 0)),
                                     dtype=np.float64),
                    )
                    self.send_needle(pose)
                elif kind == "draw_stroke":
                    self.send_stroke(action["points"])
                elif kind == "clear":
                    self.send_clear()
        except (TransportError, ScriptError) as exc:
            logger.warning("script aborted: %s", exc)

    # -- stats ----------------------------------------------------------------

    def write_stats(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["seq", "capture_timestamp_us", "recv_us", "decode_us",
                        "cloud_us", "render_us", "points", "payload_bytes"])
            for r in self.rows:
                w.writerow([r.seq, r.capture_timestamp_us, r.recv_us,
                            r.decode_us, r.cloud_us, r.render_us, r.points,
                            r.payload_bytes])


def run_mentor_client(config: MentorConfig) -> int:
    """Connect, stream until the peer says BYE (or frame_limit), shut down."""
    client = MentorClient(config)
    try:
        client.connect()
    except ConnectionError as exc:
        logger.error("%s", exc)
        return 1
    client.start()
    client.join()
    client.stop()
    return 0
