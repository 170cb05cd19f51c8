"""WebSocket gateway bridging the mentor engine to the browser console.

Frame pushes are binary (little-endian):

    magic "SGF1" (4) | seq u64 | capture_timestamp_us u64 |
    width u16 | height u16 | disp_codec u8 |
    rgb_len u32 | rgb payload (JPEG or PNG) |
    disp_len u32 | disparity payload

The disparity payload is the 8.8 fixed-point quantization (value = d*256,
0 = invalid) of the per-pixel raster, u16 little-endian row-major:
raw when disp_codec = 0, zlib-deflated when disp_codec = 1 (the
default; smooth rasters shrink ~10x, which is what keeps 640x512
pushes above 10 Hz). Browsers decode JPEG through color management,
which would corrupt integer/fraction channel semantics, so the gateway
re-quantizes instead of forwarding the IFP payload.

Feedback arrives as JSON text messages mirroring the wire record:

    {"m": 0|1, "i": 0|1|2, "stroke_id": int, "yaw": rad, "pitch": rad,
     "roll": rad, "x": m, "y": m, "z": m}

Invalid documents get {"type": "error", ...} replies; the connection
stays open. Valid ones are forwarded to the operation side and answered
with {"type": "ack", "seq": n}.
"""

from __future__ import annotations

import asyncio
import logging
import math
import struct
import threading
import zlib
from typing import Optional

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from pydantic import BaseModel, ValidationError, field_validator, model_validator

from .geometry import DisparityMap
from .mentor import MentorClient, SceneFrame
from .transport import FeedbackMessage, TransportError

logger = logging.getLogger(__name__)

__all__ = [
    "GATEWAY_MAGIC",
    "UiFeedback",
    "encode_gateway_frame",
    "parse_gateway_frame",
    "quantize_disparity_u16",
    "create_gateway_app",
    "GatewayServer",
]

GATEWAY_MAGIC = b"SGF1"
_HEAD = struct.Struct("<4sQQHHB")
_U32 = struct.Struct("<I")
_PUSH_POLL_S = 0.004

DISP_RAW = 0
DISP_ZLIB = 1


class UiFeedback(BaseModel):
    """JSON mirror of the wire feedback record, schema-validated."""

    m: int
    i: int = 0
    stroke_id: int = 0
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    @field_validator("m")
    @classmethod
    def _check_m(cls, v):
        if v not in (0, 1):
            raise ValueError("m must be 0 or 1")
        return v

    @field_validator("i")
    @classmethod
    def _check_i(cls, v):
        if v not in (0, 1, 2):
            raise ValueError("i must be 0, 1, or 2")
        return v

    @field_validator("stroke_id")
    @classmethod
    def _check_stroke(cls, v):
        if not 0 <= v <= 0xFFFF:
            raise ValueError("stroke_id must fit u16")
        return v

    @field_validator("yaw", "pitch", "roll", "x", "y", "z")
    @classmethod
    def _check_finite(cls, v):
        if not math.isfinite(v):
            raise ValueError("pose fields must be finite")
        return v

    @model_validator(mode="after")
    def _check_clear(self):
        pose = (self.yaw, self.pitch, self.roll, self.x, self.y, self.z)
        if self.m == 0 and any(c != 0.0 for c in pose):
            raise ValueError("clear (m=0) must carry a zero pose")
        return self

    def to_message(self) -> FeedbackMessage:
        return FeedbackMessage(m=self.m, i=self.i, stroke_id=self.stroke_id,
                               yaw=self.yaw, pitch=self.pitch, roll=self.roll,
                               x=self.x, y=self.y, z=self.z)


def quantize_disparity_u16(disp: DisparityMap) -> np.ndarray:
    """8.8 fixed-point disparity raster; invalid pixels become 0."""
    q = np.rint(disp.values.astype(np.float64) * 256.0)
    q = np.where(disp.valid, np.clip(q, 1, 0xFFFF), 0.0)
    return q.astype(np.uint16)


def _scene_raster_u16(scene: SceneFrame) -> np.ndarray:
    """Fast path: recover the 8.8 raster straight from the IFP channels.

    Equals quantize_disparity_u16(scene.disparity) exactly; the merge
    already was q/256, so no float round trip is needed per push.
    """
    if scene.ifp is None:
        return quantize_disparity_u16(scene.disparity)
    return (scene.ifp.i.astype(np.uint16) << 8) | scene.ifp.f.astype(np.uint16)


def encode_gateway_frame(scene: SceneFrame, disp_codec: int = DISP_ZLIB) -> bytes:
    disp16 = _scene_raster_u16(scene)
    h, w = disp16.shape
    raster = disp16.astype("<u2").tobytes()
    if disp_codec == DISP_ZLIB:
        payload = zlib.compress(raster, 1)
    elif disp_codec == DISP_RAW:
        payload = raster
    else:
        raise ValueError(f"unknown disparity codec {disp_codec}")
    return b"".join(
        (
            _HEAD.pack(GATEWAY_MAGIC, scene.seq, scene.capture_timestamp_us,
                       w, h, disp_codec),
            _U32.pack(len(scene.rgb_payload)),
            scene.rgb_payload,
            _U32.pack(len(payload)),
            payload,
        )
    )


def parse_gateway_frame(data: bytes) -> dict:
    """Inverse of encode_gateway_frame (used by tests and tooling)."""
    if len(data) < _HEAD.size + 8:
        raise ValueError("gateway frame too short")
    magic, seq, capture_us, w, h, disp_codec = _HEAD.unpack_from(data, 0)
    if magic != GATEWAY_MAGIC:
        raise ValueError(f"bad gateway magic {magic!r}")
    off = _HEAD.size
    (rgb_len,) = _U32.unpack_from(data, off)
    off += 4
    if off + rgb_len + 4 > len(data):
        raise ValueError("rgb length inconsistent")
    rgb = data[off : off + rgb_len]
    off += rgb_len
    (disp_len,) = _U32.unpack_from(data, off)
    off += 4
    if off + disp_len != len(data):
        raise ValueError("disparity length inconsistent")
    raster = data[off:]
    if disp_codec == DISP_ZLIB:
        try:
            raster = zlib.decompress(raster)
        except zlib.error as exc:
            raise ValueError(f"disparity stream corrupt: {exc}") from exc
    elif disp_codec != DISP_RAW:
        raise ValueError(f"unknown disparity codec {disp_codec}")
    if len(raster) != w * h * 2:
        raise ValueError("disparity raster size mismatch")
    disp = np.frombuffer(raster, dtype="<u2").reshape(h, w)
    return {"seq": seq, "capture_timestamp_us": capture_us, "width": w,
            "height": h, "rgb_payload": rgb, "disparity_u16": disp}


def create_gateway_app(client: MentorClient) -> FastAPI:
    app = FastAPI(title="surgestream mentor gateway")

    @app.get("/healthz")
    def healthz():
        latest = client.latest()
        return {
            "connected": client.session is not None,
            "frames": client.frames_processed,
            "skipped": client.skipped,
            "fps": client.fps.fps(),
            "latest_seq": latest.seq if latest else None,
        }

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        intr = client.intrinsics
        await ws.send_json(
            {
                "type": "hello",
                "version": 1,
                "width": intr.width if intr else 0,
                "height": intr.height if intr else 0,
                "f": intr.f if intr else 0.0,
                "b": intr.b if intr else 0.0,
                "cx": intr.cx if intr else 0.0,
                "cy": intr.cy if intr else 0.0,
                "disparity_prescale": client.prescale,
            }
        )

        async def push_frames():
            last_seq = -1
            while True:
                scene = client.latest()
                if scene is not None and scene.seq != last_seq:
                    last_seq = scene.seq
                    await ws.send_bytes(encode_gateway_frame(scene))
                else:
                    await asyncio.sleep(_PUSH_POLL_S)

        async def read_feedback():
            while True:
                text = await ws.receive_text()
                try:
                    fb = UiFeedback.model_validate_json(text)
                except ValidationError as exc:
                    detail = "; ".join(
                        f"{'.'.join(str(p) for p in e['loc']) or 'document'}: "
                        f"{e['msg']}"
                        for e in exc.errors()
                    )
                    await ws.send_json({"type": "error", "detail": detail})
                    continue
                try:
                    sent = client.send_ui_feedback(fb.to_message())
                except (TransportError, AttributeError) as exc:
                    await ws.send_json(
                        {"type": "error", "detail": f"session unavailable: {exc}"}
                    )
                    continue
                await ws.send_json(
                    {"type": "ack", "based_on_seq": sent.based_on_seq}
                )

        pusher = asyncio.create_task(push_frames())
        try:
            await read_feedback()
        except WebSocketDisconnect:
            pass
        except RuntimeError:
            pass  # receive after disconnect
        finally:
            pusher.cancel()

    return app


class GatewayServer:
    """Uvicorn server hosting the gateway app on a background thread."""

    def __init__(self, client: MentorClient, host: str = "127.0.0.1",
                 port: int = 0):
        import uvicorn

        self.app = create_gateway_app(client)
        self._config = uvicorn.Config(self.app, host=host, port=port,
                                      log_level="warning")
        self._server = uvicorn.Server(self._config)
        self._thread: Optional[threading.Thread] = None

    @property
    def port(self) -> int:
        servers = getattr(self._server, "servers", None)
        if servers:
            return servers[0].sockets[0].getsockname()[1]
        return self._config.port

    def start(self, timeout: float = 10.0) -> None:
        self._thread = threading.Thread(target=self._server.run,
                                        name="gateway", daemon=True)
        self._thread.start()
        deadline = timeout
        import time as _time

        waited = 0.0
        while not self._server.started and waited < deadline:
            _time.sleep(0.02)
            waited += 0.02
        if not self._server.started:
            raise RuntimeError("gateway failed to start")

    def stop(self) -> None:
        self._server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout=5.0)
