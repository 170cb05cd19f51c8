"""Bit-exact TCP wire protocol: handshake, frame streaming (operation ->
mentor) and feedback streaming (mentor -> operation).

Wire layout, all integers little-endian:

    magic "SRM1" (4) | msg_type (1) | seq u64 | timestamp_us u64 |
    payload_len u32 | payload

Message types: 0x01 HELLO, 0x02 FRAME, 0x03 FEEDBACK, 0x04 BYE.
seq is strictly increasing per direction per session; timestamps are
sender-monotonic microseconds. Frames queue newest-wins on the sending
side so a slow peer never grows latency unboundedly.
"""

from __future__ import annotations

import math
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Tuple

from .geometry import CameraIntrinsics

__all__ = [
    "MAGIC",
    "PROTOCOL_VERSION",
    "DEFAULT_PORT",
    "DEFAULT_MAX_PAYLOAD",
    "MSG_HELLO",
    "MSG_FRAME",
    "MSG_FEEDBACK",
    "MSG_BYE",
    "ROLE_OPERATION",
    "ROLE_MENTOR",
    "TransportError",
    "ProtocolError",
    "OversizeError",
    "IncompleteError",
    "ConnectionClosed",
    "HandshakeError",
    "HandshakeTimeout",
    "WireMessage",
    "HelloPayload",
    "FramePayload",
    "FeedbackMessage",
    "encode_message",
    "write_message",
    "read_message",
    "session_handshake",
    "Session",
    "LatestSlot",
    "open_listener",
    "now_us",
]

MAGIC = b"SRM1"
PROTOCOL_VERSION = 1
DEFAULT_PORT = 7421
DEFAULT_MAX_PAYLOAD = 32 * 1024 * 1024
HANDSHAKE_TIMEOUT = 5.0

# Keep kernel queues shallow (about one frame in flight): deep socket
# buffers would turn TCP into a latency-unbounded FIFO and defeat the
# newest-wins frame dropping. The kernel doubles the requested value.
# Small windows trade long-haul throughput for bounded loopback latency.
STREAM_SOCKET_BUF = 32 * 1024

# Loopback MSS is ~64 KiB, bigger than the shallow window above, which
# degenerates into silly-window stalls quantized by delayed ACKs. Clamp
# segments so the window always spans several of them.
STREAM_MSS = 8 * 1024


def _clamp_mss(sock: socket.socket) -> None:
    try:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_MAXSEG, STREAM_MSS)
    except OSError:
        pass

MSG_HELLO = 0x01
MSG_FRAME = 0x02
MSG_FEEDBACK = 0x03
MSG_BYE = 0x04
_VALID_TYPES = frozenset((MSG_HELLO, MSG_FRAME, MSG_FEEDBACK, MSG_BYE))

ROLE_OPERATION = 0
ROLE_MENTOR = 1

_HEADER = struct.Struct("<4sBQQI")  # magic, type, seq, timestamp_us, payload_len
HEADER_SIZE = _HEADER.size  # 25

_HELLO = struct.Struct("<HBHHfffff")  # version, role, w, h, f, b, cx, cy, prescale
_FRAME_HEAD = struct.Struct("<QII")  # capture_us, disparity_stage_us, encode_stage_us
_U32 = struct.Struct("<I")
_FEEDBACK = struct.Struct("<BBHffffffQ")  # m, i, stroke, ypr, xyz, based_on_seq


def now_us() -> int:
    """Monotonic microseconds (sender-local clock)."""
    return time.monotonic_ns() // 1000


class TransportError(Exception):
    """Base class for wire/session failures."""


class ProtocolError(TransportError):
    """Malformed message (bad magic, type, or payload structure)."""


class OversizeError(TransportError):
    """Declared payload exceeds the configured maximum."""


class IncompleteError(TransportError):
    """Stream ended in the middle of a message."""


class ConnectionClosed(TransportError):
    """Peer closed cleanly at a message boundary."""


class HandshakeError(TransportError):
    """HELLO exchange failed (version, role, or protocol violation)."""


class HandshakeTimeout(HandshakeError):
    """No valid HELLO within the handshake deadline."""


@dataclass(frozen=True)
class WireMessage:
    msg_type: int
    seq: int
    timestamp_us: int
    payload: bytes = b""


def encode_message(msg: WireMessage) -> bytes:
    if msg.msg_type not in _VALID_TYPES:
        raise ProtocolError(f"unknown message type {msg.msg_type:#x}")
    return (
        _HEADER.pack(MAGIC, msg.msg_type, msg.seq, msg.timestamp_us,
                     len(msg.payload))
        + msg.payload
    )


def write_message(msg: WireMessage, sink) -> int:
    """Serialize msg to a writable byte sink; returns bytes written."""
    data = encode_message(msg)
    try:
        sink.write(data)
    except TransportError:
        raise
    except Exception as exc:
        raise TransportError(f"stream write failed: {exc}") from exc
    return len(data)


def _read_exact(source, n: int, *, at_boundary: bool) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = source.read(remaining)
        if not chunk:
            if at_boundary and remaining == n:
                raise ConnectionClosed("stream closed at message boundary")
            raise IncompleteError(f"stream truncated ({n - remaining}/{n} bytes)")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_message(source, max_payload: int = DEFAULT_MAX_PAYLOAD) -> WireMessage:
    """Read one validated message; never reads past the declared payload.

    Raises ProtocolError on bad magic/type, OversizeError before reading
    any payload larger than max_payload, IncompleteError on truncation,
    ConnectionClosed on a clean EOF at a message boundary.
    """
    header = _read_exact(source, HEADER_SIZE, at_boundary=True)
    magic, msg_type, seq, timestamp_us, payload_len = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if msg_type not in _VALID_TYPES:
        raise ProtocolError(f"unknown message type {msg_type:#x}")
    if payload_len > max_payload:
        raise OversizeError(f"payload {payload_len} exceeds max {max_payload}")
    payload = _read_exact(source, payload_len, at_boundary=False) if payload_len else b""
    return WireMessage(msg_type=msg_type, seq=seq, timestamp_us=timestamp_us,
                       payload=payload)


# ---------------------------------------------------------------------------
# Payload codecs
# ---------------------------------------------------------------------------


def _f32(value: float) -> float:
    """Quantize to the exact value the 32-bit wire float will carry."""
    return struct.unpack("<f", struct.pack("<f", value))[0]


@dataclass(frozen=True)
class HelloPayload:
    version: int
    role: int
    width: int = 0
    height: int = 0
    f: float = 0.0
    b: float = 0.0
    cx: float = 0.0
    cy: float = 0.0
    disparity_prescale: float = 1.0

    def __post_init__(self):
        for name in ("f", "b", "cx", "cy", "disparity_prescale"):
            object.__setattr__(self, name, _f32(getattr(self, name)))

    def pack(self) -> bytes:
        return _HELLO.pack(self.version, self.role, self.width, self.height,
                           self.f, self.b, self.cx, self.cy,
                           self.disparity_prescale)

    @classmethod
    def unpack(cls, payload: bytes) -> "HelloPayload":
        if len(payload) != _HELLO.size:
            raise ProtocolError(f"HELLO payload must be {_HELLO.size} bytes, "
                                f"got {len(payload)}")
        version, role, w, h, f, b, cx, cy, prescale = _HELLO.unpack(payload)
        if role not in (ROLE_OPERATION, ROLE_MENTOR):
            raise ProtocolError(f"unknown role {role}")
        return cls(version, role, w, h, f, b, cx, cy, prescale)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(f=self.f, b=self.b, cx=self.cx, cy=self.cy,
                                width=self.width, height=self.height)


@dataclass(frozen=True)
class FramePayload:
    capture_timestamp_us: int
    disparity_stage_us: int
    encode_stage_us: int
    rgb: bytes
    ifp: bytes

    def pack(self) -> bytes:
        return b"".join(
            (
                _FRAME_HEAD.pack(self.capture_timestamp_us,
                                 self.disparity_stage_us, self.encode_stage_us),
                _U32.pack(len(self.rgb)),
                self.rgb,
                _U32.pack(len(self.ifp)),
                self.ifp,
            )
        )

    @classmethod
    def unpack(cls, payload: bytes) -> "FramePayload":
        head = _FRAME_HEAD.size
        if len(payload) < head + 8:
            raise ProtocolError("FRAME payload too short")
        capture, disp_us, enc_us = _FRAME_HEAD.unpack_from(payload, 0)
        off = head
        (rgb_len,) = _U32.unpack_from(payload, off)
        off += 4
        if off + rgb_len + 4 > len(payload):
            raise ProtocolError("FRAME rgb length inconsistent")
        rgb = payload[off : off + rgb_len]
        off += rgb_len
        (ifp_len,) = _U32.unpack_from(payload, off)
        off += 4
        if off + ifp_len != len(payload):
            raise ProtocolError("FRAME ifp length inconsistent")
        ifp = payload[off : off + ifp_len]
        return cls(capture, disp_us, enc_us, rgb, ifp)


FB_POINTER = 0
FB_NEEDLE = 1
FB_TRAJECTORY = 2


@dataclass(frozen=True)
class FeedbackMessage:
    """Mentor guidance record; pose is always in the camera frame {C}."""

    m: int
    i: int = FB_POINTER
    stroke_id: int = 0
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    based_on_seq: int = 0

    def __post_init__(self):
        if self.m not in (0, 1):
            raise ProtocolError(f"feedback m must be 0 or 1, got {self.m}")
        if self.i not in (FB_POINTER, FB_NEEDLE, FB_TRAJECTORY):
            raise ProtocolError(f"unknown guidance kind {self.i}")
        for name in ("yaw", "pitch", "roll", "x", "y", "z"):
            object.__setattr__(self, name, _f32(getattr(self, name)))
        pose = (self.yaw, self.pitch, self.roll, self.x, self.y, self.z)
        if not all(math.isfinite(v) for v in pose):
            raise ProtocolError("feedback pose fields must be finite")
        if self.m == 0 and any(v != 0.0 for v in pose):
            raise ProtocolError("clear feedback (m=0) must carry a zero pose")

    def pack(self) -> bytes:
        return _FEEDBACK.pack(self.m, self.i, self.stroke_id, self.yaw,
                              self.pitch, self.roll, self.x, self.y, self.z,
                              self.based_on_seq)

    @classmethod
    def unpack(cls, payload: bytes) -> "FeedbackMessage":
        if len(payload) != _FEEDBACK.size:
            raise ProtocolError(f"FEEDBACK payload must be {_FEEDBACK.size} "
                                f"bytes, got {len(payload)}")
        return cls(*_FEEDBACK.unpack(payload))


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------


class Session:
    """One established connection; one sender and one receiver direction.

    Sending is internally locked (single logical sender per direction);
    receiving must be driven by a single consumer. Stale sequence numbers
    on the receive path are dropped and counted, never delivered.
    """

    def __init__(self, sock: socket.socket, role: int,
                 peer_hello: HelloPayload, send_seq: int, last_recv_seq: int,
                 rtt_us: int, max_payload: int = DEFAULT_MAX_PAYLOAD,
                 rfile=None):
        self._sock = sock
        # Reuse the handshake's buffered reader: a fresh one would lose any
        # bytes the old buffer read ahead.
        self._rfile = rfile if rfile is not None else sock.makefile("rb")
        self._wlock = threading.Lock()
        self._send_seq = send_seq
        self._last_recv_seq = last_recv_seq
        self.role = role
        self.peer_hello = peer_hello
        self.rtt_us = rtt_us
        self.max_payload = max_payload
        self.stale_dropped = 0
        self._closed = False

    @property
    def intrinsics(self) -> Optional[CameraIntrinsics]:
        """Operation-side calibration (mentor sessions adopt it on handshake)."""
        if self.peer_hello.role == ROLE_OPERATION:
            return self.peer_hello.intrinsics()
        return None

    def _send(self, msg_type: int, payload: bytes) -> Tuple[int, int]:
        with self._wlock:
            if self._closed:
                raise ConnectionClosed("session closed")
            seq = self._send_seq
            self._send_seq += 1
            data = encode_message(
                WireMessage(msg_type, seq, now_us(), payload)
            )
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise TransportError(f"send failed: {exc}") from exc
            return seq, len(data)

    def send_frame(self, frame: FramePayload) -> Tuple[int, int]:
        return self._send(MSG_FRAME, frame.pack())

    def send_feedback(self, fb: FeedbackMessage) -> Tuple[int, int]:
        return self._send(MSG_FEEDBACK, fb.pack())

    def send_bye(self) -> None:
        try:
            self._send(MSG_BYE, b"")
        except TransportError:
            pass

    def recv(self) -> WireMessage:
        """Next fresh message (stale seq dropped and counted).

        Blocking; close() from another thread unblocks it with
        ConnectionClosed/TransportError.
        """
        while True:
            try:
                msg = read_message(self._rfile, self.max_payload)
            except TransportError:
                raise
            except (OSError, ValueError) as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if msg.seq <= self._last_recv_seq:
                self.stale_dropped += 1
                continue
            self._last_recv_seq = msg.seq
            return msg

    def close(self) -> None:
        with self._wlock:
            if self._closed:
                return
            self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._rfile.close()
        except OSError:
            pass
        self._sock.close()


def session_handshake(
    conn: socket.socket,
    role: int,
    intrinsics: Optional[CameraIntrinsics] = None,
    disparity_prescale: float = 1.0,
    timeout: float = HANDSHAKE_TIMEOUT,
    version: int = PROTOCOL_VERSION,
    max_payload: int = DEFAULT_MAX_PAYLOAD,
) -> Session:
    """Exchange HELLOs on a fresh connection and build a Session.

    Both sides write first, then read, so the exchange cannot deadlock.
    The mentor side adopts the operation side's intrinsics. Raises
    HandshakeError on version/role mismatch, HandshakeTimeout when no
    HELLO arrives within `timeout` seconds.
    """
    try:
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        if role == ROLE_OPERATION:
            # Frame direction: shallow send queue -> sendall self-clocks
            # against the mentor's consumption rate.
            conn.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF,
                            STREAM_SOCKET_BUF)
    except OSError:
        pass  # tuning is best-effort

    if role == ROLE_OPERATION:
        if intrinsics is None:
            raise HandshakeError("operation handshake requires intrinsics")
        hello = HelloPayload(
            version=version, role=role, width=intrinsics.width,
            height=intrinsics.height, f=intrinsics.f, b=intrinsics.b,
            cx=intrinsics.cx, cy=intrinsics.cy,
            disparity_prescale=disparity_prescale,
        )
    else:
        hello = HelloPayload(version=version, role=role,
                             disparity_prescale=disparity_prescale)

    conn.settimeout(timeout)
    rfile = conn.makefile("rb")
    t0 = now_us()
    try:
        conn.sendall(encode_message(WireMessage(MSG_HELLO, 0, t0, hello.pack())))
        msg = read_message(rfile)
    except socket.timeout as exc:
        raise HandshakeTimeout(f"no HELLO within {timeout}s") from exc
    except (ConnectionClosed, IncompleteError) as exc:
        raise HandshakeError(f"connection lost during handshake: {exc}") from exc
    except OSError as exc:
        raise HandshakeError(f"handshake I/O failed: {exc}") from exc
    rtt_us = now_us() - t0

    if msg.msg_type != MSG_HELLO:
        raise HandshakeError(f"expected HELLO, got type {msg.msg_type:#x}")
    peer = HelloPayload.unpack(msg.payload)
    if peer.version != version:
        raise HandshakeError(
            f"version mismatch: local {version}, peer {peer.version}"
        )
    if peer.role == role:
        raise HandshakeError(f"role collision: both sides claim role {role}")
    if peer.role == ROLE_OPERATION:
        peer.intrinsics()  # validates the adopted calibration
    conn.settimeout(None)
    return Session(conn, role, peer, send_seq=1, last_recv_seq=msg.seq,
                   rtt_us=rtt_us, max_payload=max_payload, rfile=rfile)


def open_listener(host: str, port: int) -> socket.socket:
    """Bound, listening TCP socket (port 0 picks an ephemeral port)."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    _clamp_mss(sock)  # inherited by accepted connections via the SYN-ACK
    sock.bind((host, port))
    sock.listen(1)
    return sock


class LatestSlot:
    """Depth-1 hand-off queue with newest-wins replacement.

    put() replaces any unsent item (counted in `dropped`); take() blocks
    until an item arrives or the slot is closed.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._item = None
        self._has_item = False
        self._closed = False
        self.dropped = 0

    def put(self, item) -> bool:
        """Store item; returns True if an unsent item was displaced."""
        with self._cond:
            if self._closed:
                return False
            displaced = self._has_item
            if displaced:
                self.dropped += 1
            self._item = item
            self._has_item = True
            self._cond.notify()
            return displaced

    def take(self, timeout: Optional[float] = None):
        with self._cond:
            if not self._has_item:
                self._cond.wait_for(lambda: self._has_item or self._closed,
                                    timeout)
            if not self._has_item:
                return None
            item = self._item
            self._item = None
            self._has_item = False
            return item

    @property
    def closed(self) -> bool:
        with self._cond:
            return self._closed

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
