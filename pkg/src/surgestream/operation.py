"""Trainee-side service: stereo source -> disparity -> encode -> stream,
plus guidance overlay rendering onto the console video (the auxiliary
console display is emulated as an annotated PNG sequence).

Pipeline stages run concurrently: the frame loop never blocks on a slow
or absent mentor (frames hand off through a newest-wins slot), and
feedback is applied to the next frame rendered after receipt.
"""

from __future__ import annotations

import csv
import logging
import os
import socket
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from . import codec
from .geometry import (
    CameraIntrinsics,
    DisparityMap,
    RigidTransform,
    euler_to_rotation,
    project_point,
)
from .stereo import SceneSpec, block_match_disparity, gen_synthetic_scene
from .transport import (
    DEFAULT_MAX_PAYLOAD,
    FB_NEEDLE,
    FB_POINTER,
    FB_TRAJECTORY,
    MSG_BYE,
    MSG_FEEDBACK,
    ROLE_OPERATION,
    FeedbackMessage,
    FramePayload,
    LatestSlot,
    Session,
    TransportError,
    now_us,
    open_listener,
    session_handshake,
)

logger = logging.getLogger(__name__)

__all__ = [
    "GuidanceState",
    "NeedleModel",
    "OverlayItem",
    "compute_overlay",
    "rasterize_overlay",
    "render_overlay",
    "FrameSource",
    "SyntheticSource",
    "ImageDirSource",
    "OperationConfig",
    "OperationService",
    "run_operation_service",
    "CROSSHAIR_SIZE",
    "CROSSHAIR_COLOR",
    "NEEDLE_COLOR",
    "TRAJECTORY_COLOR",
]

# Fixed marker styles so image-diff tests are deterministic.
CROSSHAIR_SIZE = 11  # total extent in pixels
CROSSHAIR_COLOR = (255, 220, 0)
NEEDLE_COLOR = (0, 200, 255)
NEEDLE_WIDTH = 2
TRAJECTORY_COLOR = (0, 255, 0)
TRAJECTORY_WIDTH = 2


@dataclass(frozen=True)
class NeedleModel:
    """Semicircular virtual needle in its local frame (z = 0 plane)."""

    radius: float = 0.01
    segments: int = 16

    def vertices(self) -> np.ndarray:
        theta = np.linspace(0.0, np.pi, self.segments + 1)
        return np.stack(
            [self.radius * np.cos(theta), self.radius * np.sin(theta),
             np.zeros_like(theta)],
            axis=1,
        )


DEFAULT_NEEDLE = NeedleModel()


class GuidanceState:
    """Mentor guidance applied to the console view.

    Mutated by exactly one feedback receiver; renderers read via
    snapshot(). A clear message (m=0) wipes everything. `generation`
    increments on every applied feedback, which lets the benchmark tie
    an overlay back to the feedback that produced it.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.pointer: Optional[np.ndarray] = None
        self.needle_pose: Optional[RigidTransform] = None
        self.strokes: Dict[int, List[np.ndarray]] = {}
        self.last_update_us = 0
        self.generation = 0

    def apply_feedback(self, fb: FeedbackMessage) -> None:
        with self._lock:
            self.generation += 1
            self.last_update_us = now_us()
            if fb.m == 0:
                self.pointer = None
                self.needle_pose = None
                self.strokes = {}
                return
            pos = np.array([fb.x, fb.y, fb.z])
            if fb.i == FB_POINTER:
                self.pointer = pos
            elif fb.i == FB_NEEDLE:
                self.needle_pose = RigidTransform(
                    R=euler_to_rotation(fb.yaw, fb.pitch, fb.roll), t=pos
                )
            elif fb.i == FB_TRAJECTORY:
                self.strokes.setdefault(fb.stroke_id, []).append(pos)

    def snapshot(self) -> "GuidanceSnapshot":
        with self._lock:
            return GuidanceSnapshot(
                pointer=None if self.pointer is None else self.pointer.copy(),
                needle_pose=self.needle_pose,
                strokes={k: list(v) for k, v in self.strokes.items()},
                generation=self.generation,
            )


@dataclass(frozen=True)
class GuidanceSnapshot:
    pointer: Optional[np.ndarray]
    needle_pose: Optional[RigidTransform]
    strokes: Dict[int, List[np.ndarray]]
    generation: int


@dataclass(frozen=True)
class OverlayItem:
    kind: str  # "crosshair" | "needle" | "stroke"
    points: Tuple[Tuple[float, float], ...]


def _project_polyline(intr, pts) -> Tuple[Tuple[float, float], ...]:
    out = []
    for p in pts:
        if p[2] <= 0:  # behind the camera: skipped
            continue
        out.append(project_point(intr, p))
    return tuple(out)


def compute_overlay(
    snap: GuidanceSnapshot,
    intr: CameraIntrinsics,
    needle: NeedleModel = DEFAULT_NEEDLE,
) -> List[OverlayItem]:
    """Project guidance into image space. Pure; rasterization is separate."""
    items: List[OverlayItem] = []
    if snap.pointer is not None and snap.pointer[2] > 0:
        items.append(
            OverlayItem("crosshair", (project_point(intr, snap.pointer),))
        )
    if snap.needle_pose is not None:
        verts = snap.needle_pose.apply(needle.vertices())
        pts = _project_polyline(intr, verts)
        if len(pts) >= 2:
            items.append(OverlayItem("needle", pts))
    for stroke_id in sorted(snap.strokes):
        pts = _project_polyline(intr, snap.strokes[stroke_id])
        if len(pts) >= 2:
            items.append(OverlayItem("stroke", pts))
    return items


def rasterize_overlay(frame: np.ndarray, items: List[OverlayItem]) -> np.ndarray:
    """Draw overlay items onto a copy of the frame (out-of-frame clipped)."""
    if not items:
        return frame.copy()
    img = Image.fromarray(np.ascontiguousarray(frame, dtype=np.uint8), "RGB")
    draw = ImageDraw.Draw(img)
    arm = CROSSHAIR_SIZE // 2
    for item in items:
        if item.kind == "crosshair":
            u = int(round(item.points[0][0]))
            v = int(round(item.points[0][1]))
            draw.line([(u - arm, v), (u + arm, v)], fill=CROSSHAIR_COLOR, width=1)
            draw.line([(u, v - arm), (u, v + arm)], fill=CROSSHAIR_COLOR, width=1)
        elif item.kind == "needle":
            draw.line([(p[0], p[1]) for p in item.points],
                      fill=NEEDLE_COLOR, width=NEEDLE_WIDTH)
        elif item.kind == "stroke":
            draw.line([(p[0], p[1]) for p in item.points],
                      fill=TRAJECTORY_COLOR, width=TRAJECTORY_WIDTH)
    return np.asarray(img)


def render_overlay(
    frame: np.ndarray,
    state: Union[GuidanceState, GuidanceSnapshot],
    intr: CameraIntrinsics,
    needle: NeedleModel = DEFAULT_NEEDLE,
) -> np.ndarray:
    """Annotate a console frame with the current guidance (pure)."""
    snap = state.snapshot() if isinstance(state, GuidanceState) else state
    return rasterize_overlay(frame, compute_overlay(snap, intr, needle))


# ---------------------------------------------------------------------------
# Frame sources
# ---------------------------------------------------------------------------


@dataclass
class SourceFrame:
    left: np.ndarray
    right: Optional[np.ndarray] = None
    gt: Optional[DisparityMap] = None


class FrameSource:
    """Iterable of SourceFrame; len() bounds the run when finite."""

    def frames(self):
        raise NotImplementedError

    def __len__(self) -> int:
        raise NotImplementedError


class SyntheticSource(FrameSource):
    """Static synthetic scene replayed for a fixed number of frames."""

    def __init__(self, spec: SceneSpec, count: int = 100):
        self.spec = spec
        self.count = count
        self._pair = gen_synthetic_scene(spec)

    @property
    def pair(self):
        return self._pair

    def frames(self):
        for _ in range(self.count):
            yield SourceFrame(left=self._pair.left, right=self._pair.right,
                              gt=self._pair.gt)

    def __len__(self) -> int:
        return self.count


class ImageDirSource(FrameSource):
    """Image-sequence directory source.

    Expects left_*.png; disparity comes from matching disp_*.pfm files
    when present, otherwise from block matching against right_*.png.
    Frames larger than the calibration are downsampled by area averaging.
    """

    def __init__(self, path, calib: CameraIntrinsics, d_max: int = 64,
                 window: int = 9):
        self.path = Path(path)
        self.calib = calib
        self.d_max = d_max
        self.window = window
        self.lefts = sorted(self.path.glob("left_*.png"))
        if not self.lefts:
            raise FileNotFoundError(f"no left_*.png frames in {self.path}")

    def _load(self, p: Path) -> np.ndarray:
        img = Image.open(p).convert("RGB")
        if img.size != (self.calib.width, self.calib.height):
            img = img.resize((self.calib.width, self.calib.height), Image.BOX)
        return np.asarray(img)

    def frames(self):
        for left_path in self.lefts:
            stem = left_path.stem.replace("left_", "", 1)
            pfm = self.path / f"disp_{stem}.pfm"
            right_path = self.path / f"right_{stem}.png"
            left = self._load(left_path)
            if pfm.exists():
                yield SourceFrame(left=left, gt=codec.read_pfm(pfm))
            elif right_path.exists():
                yield SourceFrame(left=left, right=self._load(right_path))
            else:
                raise FileNotFoundError(
                    f"frame {stem}: need disp_{stem}.pfm or right_{stem}.png"
                )

    def __len__(self) -> int:
        return len(self.lefts)


# ---------------------------------------------------------------------------
# Service
# ---------------------------------------------------------------------------


@dataclass
class OperationConfig:
    calib: CameraIntrinsics
    source: FrameSource
    listen_host: str = "127.0.0.1"
    listen_port: int = 0
    quality: Union[int, str] = 90
    out_dir: Optional[Path] = None
    stats_path: Optional[Path] = None
    fps: float = 30.0  # 0 disables pacing (run at full speed)
    disparity_prescale: float = 1.0
    stereo_output: bool = False
    record_overlay: bool = False
    d_max: int = 64
    window: int = 9
    max_payload: int = DEFAULT_MAX_PAYLOAD
    # Test seam: mutate encoded payloads immediately before each send
    # (after newest-wins dropping), e.g. to inject corruption.
    # Receives (frame_index, rgb, ifp) -> (rgb, ifp).
    frame_mutator: Optional[Callable] = None


@dataclass
class FrameRecord:
    index: int
    seq: int = 0
    capture_us: int = 0
    disparity_us: int = 0
    encode_us: int = 0
    send_us: int = 0
    send_done_us: int = 0
    feedback_rtt_us: int = 0


@dataclass
class GuidanceEvent:
    generation: int
    based_on_seq: int
    kind: int
    m: int
    feedback_sent_us: int  # sender (mentor) monotonic clock
    recv_us: int


@dataclass
class OverlayRecord:
    index: int
    generation: int
    done_us: int
    overlay_us: int
    items: List[OverlayItem] = field(default_factory=list)


class OperationStats:
    def __init__(self):
        self.lock = threading.Lock()
        self.frames: Dict[int, FrameRecord] = {}
        self.seq_to_index: Dict[int, int] = {}
        self.guidance_events: List[GuidanceEvent] = []
        self.overlay_records: List[OverlayRecord] = []
        self.frames_rendered = 0
        self.frames_sent = 0
        self.frames_dropped = 0
        self.feedback_received = 0
        self.protocol_errors = 0

    def rows(self) -> List[FrameRecord]:
        with self.lock:
            return [self.frames[i] for i in sorted(self.frames)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["seq", "capture_us", "disparity_us", "encode_us",
                        "send_us", "feedback_rtt_us"])
            for rec in self.rows():
                w.writerow([rec.seq, rec.capture_us, rec.disparity_us,
                            rec.encode_us, rec.send_us, rec.feedback_rtt_us])


class OperationService:
    """Streams frames to one mentor and renders guidance onto the console."""

    def __init__(self, config: OperationConfig):
        self.config = config
        self.state = GuidanceState()
        self.stats = OperationStats()
        self.needle = DEFAULT_NEEDLE
        self._listener: Optional[socket.socket] = None
        self._session: Optional[Session] = None
        self._session_lock = threading.Lock()
        self._slot: Optional[LatestSlot] = None
        self._stop = threading.Event()
        self._threads: List[threading.Thread] = []
        self._pipeline_done = threading.Event()
        if config.out_dir is not None:
            os.makedirs(config.out_dir, exist_ok=True)

    # -- lifecycle ----------------------------------------------------------

    @property
    def bound_port(self) -> int:
        assert self._listener is not None
        return self._listener.getsockname()[1]

    def start(self) -> None:
        self._listener = open_listener(self.config.listen_host,
                                       self.config.listen_port)
        self._listener.settimeout(0.25)  # keeps the accept loop stoppable
        self._spawn(self._accept_loop, "op-accept")
        self._spawn(self._pipeline, "op-pipeline")

    def run(self) -> int:
        """Blocking variant: start, stream the whole source, shut down."""
        self.start()
        self._pipeline_done.wait()
        self.stop()
        return 0

    def stop(self) -> None:
        self._stop.set()
        if self._slot is not None:
            self._slot.close()
        with self._session_lock:
            session = self._session
        if session is not None:
            session.send_bye()
            session.close()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(timeout=5.0)
        if self.config.stats_path is not None:
            self.stats.write_csv(self.config.stats_path)

    def wait_done(self, timeout: Optional[float] = None) -> bool:
        return self._pipeline_done.wait(timeout)

    def _spawn(self, fn, name) -> None:
        t = threading.Thread(target=fn, name=name, daemon=True)
        t.start()
        self._threads.append(t)

    # -- connection handling --------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return  # listener closed
            try:
                session = session_handshake(
                    conn, ROLE_OPERATION, intrinsics=self.config.calib,
                    disparity_prescale=self.config.disparity_prescale,
                    max_payload=self.config.max_payload,
                )
            except TransportError as exc:
                logger.warning("handshake with %s failed: %s", addr, exc)
                conn.close()
                continue
            logger.info("mentor connected from %s", addr)
            slot = LatestSlot()
            with self._session_lock:
                self._session = session
                self._slot = slot
            sender = threading.Thread(target=self._send_loop,
                                      args=(session, slot),
                                      name="op-send", daemon=True)
            receiver = threading.Thread(target=self._feedback_loop,
                                        args=(session,),
                                        name="op-recv", daemon=True)
            sender.start()
            receiver.start()
            self._threads.extend([sender, receiver])
            receiver.join()  # one mentor at a time
            slot.close()
            sender.join()
            with self._session_lock:
                if self._session is session:
                    self._session = None
                    self._slot = None
            session.close()

    def _send_loop(self, session: Session, slot: LatestSlot) -> None:
        while True:
            job = slot.take(timeout=0.2)
            if job is None:
                if slot.closed:
                    return
                continue  # poll timeout; check for shutdown again
            index, payload, capture_us = job
            if self.config.frame_mutator is not None:
                rgb, ifp = self.config.frame_mutator(index, payload.rgb,
                                                     payload.ifp)
                payload = replace(payload, rgb=rgb, ifp=ifp)
            t0 = now_us()
            try:
                seq, _ = session.send_frame(payload)
            except TransportError as exc:
                logger.warning("send failed: %s", exc)
                return
            done = now_us()
            with self.stats.lock:
                self.stats.frames_sent += 1
                self.stats.frames_dropped = slot.dropped
                rec = self.stats.frames.get(index)
                if rec is not None:
                    rec.seq = seq
                    rec.send_us = done - t0
                    rec.send_done_us = done
                    self.stats.seq_to_index[seq] = index

    def _feedback_loop(self, session: Session) -> None:
        while not self._stop.is_set():
            try:
                msg = session.recv()
            except TransportError:
                return
            if msg.msg_type == MSG_BYE:
                return
            if msg.msg_type != MSG_FEEDBACK:
                with self.stats.lock:
                    self.stats.protocol_errors += 1
                continue
            try:
                fb = FeedbackMessage.unpack(msg.payload)
            except TransportError:
                with self.stats.lock:
                    self.stats.protocol_errors += 1
                continue
            recv_us = now_us()
            self.state.apply_feedback(fb)
            with self.stats.lock:
                self.stats.feedback_received += 1
                self.stats.guidance_events.append(
                    GuidanceEvent(
                        generation=self.state.generation,
                        based_on_seq=fb.based_on_seq,
                        kind=fb.i,
                        m=fb.m,
                        feedback_sent_us=msg.timestamp_us,
                        recv_us=recv_us,
                    )
                )
                idx = self.stats.seq_to_index.get(fb.based_on_seq)
                if idx is not None:
                    rec = self.stats.frames.get(idx)
                    if rec is not None and rec.send_done_us and not rec.feedback_rtt_us:
                        rec.feedback_rtt_us = recv_us - rec.send_done_us

    # -- frame pipeline -------------------------------------------------------

    def _compute_disparity(self, frame: SourceFrame) -> DisparityMap:
        if frame.gt is not None:
            return frame.gt
        if frame.right is not None:
            return block_match_disparity(frame.left, frame.right,
                                         window=self.config.window,
                                         d_max=self.config.d_max)
        raise ValueError("source frame carries neither ground truth nor a right image")

    def _pipeline(self) -> None:
        cfg = self.config
        interval = 1.0 / cfg.fps if cfg.fps > 0 else 0.0
        next_deadline = time.monotonic()
        try:
            for index, frame in enumerate(cfg.source.frames()):
                if self._stop.is_set():
                    break
                capture_us = now_us()

                t0 = now_us()
                disp = self._compute_disparity(frame)
                disparity_us = now_us() - t0

                t0 = now_us()
                ifp = codec.split_ifp(disp, prescale=cfg.disparity_prescale)
                enc = codec.encode_frame(frame.left, ifp, cfg.quality)
                encode_us = now_us() - t0

                rec = FrameRecord(index=index, capture_us=capture_us,
                                  disparity_us=disparity_us,
                                  encode_us=encode_us)
                with self.stats.lock:
                    self.stats.frames[index] = rec

                with self._session_lock:
                    slot = self._slot
                displaced = False
                if slot is not None:
                    payload = FramePayload(
                        capture_timestamp_us=capture_us,
                        disparity_stage_us=disparity_us,
                        encode_stage_us=encode_us,
                        rgb=enc.rgb_payload,
                        ifp=enc.ifp_payload,
                    )
                    displaced = slot.put((index, payload, capture_us))

                self._render_console(index, frame.left)

                if interval > 0:
                    next_deadline += interval
                    delay = next_deadline - time.monotonic()
                    if delay > 0:
                        time.sleep(delay)
                    else:
                        next_deadline = time.monotonic()
                elif displaced:
                    # Unpaced and ahead of the sender: yield briefly so the
                    # consumer side is not starved of CPU.
                    time.sleep(0.002)
        finally:
            self._pipeline_done.set()

    def _render_console(self, index: int, left: np.ndarray) -> None:
        cfg = self.config
        t0 = now_us()
        snap = self.state.snapshot()
        items = compute_overlay(snap, cfg.calib, self.needle)
        annotated = rasterize_overlay(left, items)
        done_us = now_us()
        if cfg.record_overlay:
            with self.stats.lock:
                self.stats.overlay_records.append(
                    OverlayRecord(index=index, generation=snap.generation,
                                  done_us=done_us, overlay_us=done_us - t0,
                                  items=items)
                )
        if cfg.out_dir is not None:
            if cfg.stereo_output:
                out = np.concatenate([annotated, left], axis=1)
            else:
                out = annotated
            Image.fromarray(out).save(
                Path(cfg.out_dir) / f"frame_{index:06d}.png"
            )
        with self.stats.lock:
            self.stats.frames_rendered += 1


def run_operation_service(config: OperationConfig) -> int:
    """Run the service to source exhaustion; returns process exit status."""
    service = OperationService(config)
    try:
        service.run()
    except OSError as exc:
        logger.error("operation service failed: %s", exc)
        return 1
    return 0
