"""Gateway tests: feedback schema validation, binary frame push layout,
and the live WebSocket bridge over a loopback session.
"""

import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from surgestream.gateway import (
    UiFeedback,
    create_gateway_app,
    encode_gateway_frame,
    parse_gateway_frame,
    quantize_disparity_u16,
)
from surgestream.geometry import DisparityMap
from surgestream.mentor import MentorClient, MentorConfig, SceneFrame
from surgestream.operation import OperationConfig, OperationService, SyntheticSource

# ---------------------------------------------------------------------------
# Schema validation
# ---------------------------------------------------------------------------


def test_ui_feedback_accepts_valid_pointer():
    fb = UiFeedback.model_validate(
        {"m": 1, "i": 0, "x": 0.02, "y": 0.02, "z": 0.1}
    )
    msg = fb.to_message()
    assert msg.m == 1 and msg.i == 0
    assert msg.z == pytest.approx(0.1)


@pytest.mark.parametrize(
    "doc",
    [
        {},  # missing m
        {"m": 2},
        {"m": 1, "i": 9},
        {"m": 1, "i": 0, "stroke_id": 70000},
        {"m": 1, "i": 0, "x": float("inf")},
        {"m": 0, "z": 0.5},  # clear with nonzero pose
        {"m": 1, "i": 0, "x": "abc"},
    ],
)
def test_ui_feedback_rejects_invalid(doc):
    with pytest.raises(Exception):
        UiFeedback.model_validate(doc)


# ---------------------------------------------------------------------------
# Binary frame layout
# ---------------------------------------------------------------------------


def _scene_frame(rng) -> SceneFrame:
    h, w = 24, 32
    values = rng.uniform(1.0, 200.0, size=(h, w)).astype(np.float32)
    valid = rng.random((h, w)) > 0.1
    disp = DisparityMap(values, valid)
    return SceneFrame(
        seq=42,
        capture_timestamp_us=123456789,
        recv_us=1,
        rgb=np.zeros((h, w, 3), dtype=np.uint8),
        disparity=disp,
        ifp=None,
        cloud=None,
        cloud_display=None,
        decode_us=0,
        cloud_us=0,
        render_us=0,
        rgb_payload=b"\xff\xd8fakejpeg",
        ifp_payload_len=0,
    )


def test_gateway_frame_round_trip(rng):
    scene = _scene_frame(rng)
    data = encode_gateway_frame(scene)
    parsed = parse_gateway_frame(data)
    assert parsed["seq"] == 42
    assert parsed["capture_timestamp_us"] == 123456789
    assert (parsed["width"], parsed["height"]) == (32, 24)
    assert parsed["rgb_payload"] == b"\xff\xd8fakejpeg"
    expected = quantize_disparity_u16(scene.disparity)
    np.testing.assert_array_equal(parsed["disparity_u16"], expected)


def test_gateway_frame_rejects_corrupt(rng):
    data = encode_gateway_frame(_scene_frame(rng))
    with pytest.raises(ValueError):
        parse_gateway_frame(data[:10])
    with pytest.raises(ValueError):
        parse_gateway_frame(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        parse_gateway_frame(data + b"junk")


def test_quantize_disparity_u16():
    values = np.array([[1.5, 0.0, 255.99609375]], dtype=np.float32)
    dm = DisparityMap(values)
    q = quantize_disparity_u16(dm)
    assert q[0, 0] == 384  # 1.5 * 256
    assert q[0, 1] == 0  # invalid sentinel
    assert q[0, 2] == 65535
    # 8.8 fixed point is exactly the IFP quantization.
    assert q.dtype == np.uint16


def test_ifp_fast_raster_matches_quantization(rng, small_pair):
    # The push raster recovered from IFP channels must equal the float
    # re-quantization of the merged disparity bit for bit.
    from surgestream import codec
    from surgestream.gateway import _scene_raster_u16

    ifp = codec.split_ifp(small_pair.gt)
    merged = codec.merge_ifp(ifp)
    scene = _scene_frame(rng)
    scene.disparity = merged
    scene.ifp = ifp
    fast = _scene_raster_u16(scene)
    scene.ifp = None
    slow = _scene_raster_u16(scene)
    np.testing.assert_array_equal(fast, slow)


# ---------------------------------------------------------------------------
# Live bridge
# ---------------------------------------------------------------------------


@pytest.fixture()
def live_gateway(small_spec):
    op = OperationService(
        OperationConfig(
            calib=small_spec.intrinsics,
            source=SyntheticSource(small_spec, count=100_000),
            fps=30.0,
            quality=90,
            record_overlay=True,
        )
    )
    op.start()
    client = MentorClient(MentorConfig(host="127.0.0.1", port=op.bound_port))
    client.connect()
    client.start()
    app = create_gateway_app(client)
    yield op, client, app
    client.stop()
    op.stop()


def test_gateway_hello_frames_and_feedback(live_gateway, small_spec):
    op, client, app = live_gateway
    with TestClient(app) as tc:
        with tc.websocket_connect("/ws") as ws:
            hello = ws.receive_json()
            assert hello["type"] == "hello"
            assert hello["width"] == small_spec.intrinsics.width
            assert hello["f"] == pytest.approx(small_spec.intrinsics.f)

            frame = parse_gateway_frame(ws.receive_bytes())
            assert frame["width"] == small_spec.intrinsics.width
            assert frame["seq"] > 0

            # Valid pointer feedback -> ack and operation-side state.
            ws.send_text(json.dumps({"m": 1, "i": 0, "x": 0.01, "y": 0.0,
                                     "z": 0.2}))
            reply = None
            for _ in range(20):  # frames may interleave with the ack
                msg = ws.receive()
                if "text" in msg:
                    reply = json.loads(msg["text"])
                    break
            assert reply is not None and reply["type"] == "ack"
            deadline = time.time() + 5
            while op.stats.feedback_received == 0 and time.time() < deadline:
                time.sleep(0.01)
            snap = op.state.snapshot()
            assert snap.pointer is not None
            np.testing.assert_allclose(snap.pointer, [0.01, 0.0, 0.2],
                                       atol=1e-7)


def test_gateway_rejects_malformed_keeps_alive(live_gateway):
    op, client, app = live_gateway
    with TestClient(app) as tc:
        with tc.websocket_connect("/ws") as ws:
            ws.receive_json()  # hello

            def next_text():
                for _ in range(50):
                    msg = ws.receive()
                    if "text" in msg:
                        return json.loads(msg["text"])
                raise AssertionError("no text reply")

            ws.send_text("this is not json")
            assert next_text()["type"] == "error"
            ws.send_text(json.dumps({"m": 5}))
            assert next_text()["type"] == "error"
            # Connection still alive: a valid message gets through.
            ws.send_text(json.dumps({"m": 0}))
            assert next_text()["type"] == "ack"


def test_gateway_push_rate_at_least_10hz(live_gateway):
    _, _, app = live_gateway
    with TestClient(app) as tc:
        with tc.websocket_connect("/ws") as ws:
            ws.receive_json()
            seqs = []
            t0 = time.perf_counter()
            while time.perf_counter() - t0 < 1.5:
                msg = ws.receive()
                if "bytes" in msg:
                    seqs.append(parse_gateway_frame(msg["bytes"])["seq"])
            elapsed = time.perf_counter() - t0
            rate = len(seqs) / elapsed
            assert rate >= 10.0, f"push rate {rate:.1f} Hz below 10 Hz"
            assert seqs == sorted(seqs)  # pushed in order, newest only


def test_healthz_reports_state(live_gateway):
    _, client, app = live_gateway
    with TestClient(app) as tc:
        body = tc.get("/healthz").json()
        assert body["connected"] is True
        assert body["skipped"] == 0
