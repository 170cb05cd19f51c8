"""Codec tests: IFP quantization, JPEG/PNG payload round trips, size
budgets, PFM interchange, and hostile-input behavior.

The quality-90 disparity-error threshold below was fixed by an oracle run
of encode/decode on the reference frame (measured mean |dd| ~ 0.004 px);
the assert uses a 5x margin as the regression bound.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surgestream import codec
from surgestream.codec import (
    DecodeError,
    DisparityRangeError,
    EncodeError,
    EncodedFrame,
    IfpImage,
    decode_frame,
    encode_frame,
    merge_ifp,
    raw_baseline_bytes,
    read_pfm,
    split_ifp,
    write_pfm,
)
from surgestream.geometry import DisparityMap

# ---------------------------------------------------------------------------
# split / merge quantization
# ---------------------------------------------------------------------------


def _single(d):
    return DisparityMap(np.array([[d]], dtype=np.float32))


def test_split_examples():
    ifp = split_ifp(_single(12.75))
    assert (ifp.i[0, 0], ifp.f[0, 0]) == (12, 192)


def test_split_carry_rule():
    ifp = split_ifp(_single(12.999))
    assert (ifp.i[0, 0], ifp.f[0, 0]) == (13, 0)


def test_split_out_of_range():
    with pytest.raises(DisparityRangeError):
        split_ifp(_single(300.0))
    with pytest.raises(DisparityRangeError):
        split_ifp(_single(255.999))  # carry lands on 256


def test_split_invalid_pixels_become_sentinel():
    values = np.array([[12.5, 0.0]], dtype=np.float32)
    ifp = split_ifp(DisparityMap(values))
    assert (ifp.i[0, 1], ifp.f[0, 1]) == (0, 0)
    assert np.all(ifp.p == 0)


def test_merge_examples():
    ifp = IfpImage(
        i=np.array([[12, 0]], dtype=np.uint8),
        f=np.array([[192, 0]], dtype=np.uint8),
        p=np.zeros((1, 2), dtype=np.uint8),
    )
    dm = merge_ifp(ifp)
    assert dm.values[0, 0] == pytest.approx(12.75)
    assert not dm.valid[0, 1]


def test_quantization_bound_sweep(rng):
    d = rng.uniform(0.0, 255.5, size=200_000).astype(np.float32)
    d = d[d > 0]
    dm = DisparityMap(d.reshape(1, -1))
    merged = merge_ifp(split_ifp(dm))
    err = np.abs(merged.values[0] - dm.values[0])
    assert float(err.max()) <= 1.0 / 512.0 + 1e-12


@settings(max_examples=300, deadline=None)
@given(st.floats(min_value=1e-5, max_value=255.49))
def test_quantization_bound_property(d):
    merged = merge_ifp(split_ifp(_single(d)))
    assert abs(float(merged.values[0, 0]) - np.float32(d)) <= 1.0 / 512.0 + 1e-12


def test_prescale_round_trip():
    # Disparities beyond 256 become representable through the session
    # prescale announced in the handshake.
    values = np.array([[400.0, 510.0]], dtype=np.float32)
    dm = DisparityMap(values)
    with pytest.raises(DisparityRangeError):
        split_ifp(dm)
    ifp = split_ifp(dm, prescale=0.5)
    back = merge_ifp(ifp, prescale=0.5)
    np.testing.assert_allclose(back.values, values, atol=2.0 / 512.0)


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def frame(reference_pair):
    ifp = split_ifp(reference_pair.gt)
    return reference_pair.left, ifp, reference_pair.gt


def test_lossless_round_trip_bit_exact(frame):
    rgb, ifp, _ = frame
    enc = encode_frame(rgb, ifp, "lossless")
    rgb2, ifp2 = decode_frame(enc)
    np.testing.assert_array_equal(rgb2, rgb)
    np.testing.assert_array_equal(ifp2.i, ifp.i)
    np.testing.assert_array_equal(ifp2.f, ifp.f)
    np.testing.assert_array_equal(ifp2.p, ifp.p)


def test_lossless_end_to_end_reproduces_quantized_disparity(frame):
    _, ifp, gt = frame
    enc = encode_frame(frame[0], ifp, "lossless")
    _, ifp2 = decode_frame(enc)
    merged = merge_ifp(ifp2)
    expected = merge_ifp(ifp)
    np.testing.assert_array_equal(merged.values, expected.values)
    np.testing.assert_array_equal(merged.valid, expected.valid)


def test_reference_frame_size_budget(frame):
    rgb, ifp, _ = frame
    enc = encode_frame(rgb, ifp, 90)
    total = len(enc.rgb_payload) + len(enc.ifp_payload)
    raw = raw_baseline_bytes(640, 512)
    assert raw == 1_310_720
    assert total <= 163_840, f"payload {total} exceeds the budget"
    assert total * 8 <= raw, f"compression ratio below 8x ({raw / total:.2f})"


def test_payload_size_monotonic_in_quality(frame):
    rgb, ifp, _ = frame
    sizes = []
    for quality in (95, 75, 50, 25):
        enc = encode_frame(rgb, ifp, quality)
        sizes.append(len(enc.rgb_payload) + len(enc.ifp_payload))
    assert sizes == sorted(sizes, reverse=True) or all(
        a >= b for a, b in zip(sizes, sizes[1:])
    )


def test_quality90_disparity_error_threshold(frame):
    rgb, ifp, gt = frame
    enc = encode_frame(rgb, ifp, 90)
    _, ifp2 = decode_frame(enc)
    merged = merge_ifp(ifp2)
    err = np.abs(merged.values[gt.valid] - gt.values[gt.valid])
    assert float(err.mean()) <= 0.02  # oracle-run regression bound


def test_decode_dimension_mismatch():
    a = np.zeros((8, 8, 3), dtype=np.uint8)
    b_ifp = IfpImage(
        i=np.zeros((8, 9), dtype=np.uint8),
        f=np.zeros((8, 9), dtype=np.uint8),
        p=np.zeros((8, 9), dtype=np.uint8),
    )
    enc_a = encode_frame(a, IfpImage(i=a[..., 0], f=a[..., 1], p=a[..., 2]),
                         "lossless")
    enc_b = encode_frame(np.zeros((8, 9, 3), dtype=np.uint8), b_ifp, "lossless")
    mixed = EncodedFrame(rgb_payload=enc_a.rgb_payload,
                         ifp_payload=enc_b.ifp_payload, quality="lossless")
    with pytest.raises(DecodeError):
        decode_frame(mixed)


def test_truncated_payload_is_error_not_crash(frame):
    rgb, ifp, _ = frame
    for quality in (90, "lossless"):
        enc = encode_frame(rgb, ifp, quality)
        cut = EncodedFrame(rgb_payload=enc.rgb_payload[:-1],
                           ifp_payload=enc.ifp_payload, quality=quality)
        with pytest.raises(DecodeError):
            decode_frame(cut)


def test_decode_arbitrary_bytes_never_crash(rng):
    for _ in range(500):
        blob = rng.bytes(int(rng.integers(0, 200)))
        enc = EncodedFrame(rgb_payload=blob, ifp_payload=blob, quality=90)
        with pytest.raises(DecodeError):
            decode_frame(enc)


def test_encode_zero_size_is_error():
    empty = np.zeros((0, 0, 3), dtype=np.uint8)
    ifp = IfpImage(i=np.zeros((0, 0), dtype=np.uint8),
                   f=np.zeros((0, 0), dtype=np.uint8),
                   p=np.zeros((0, 0), dtype=np.uint8))
    with pytest.raises(EncodeError):
        encode_frame(empty, ifp, 90)


def test_encode_bad_quality():
    rgb = np.zeros((4, 4, 3), dtype=np.uint8)
    ifp = IfpImage(i=rgb[..., 0], f=rgb[..., 1], p=rgb[..., 2])
    with pytest.raises(EncodeError):
        encode_frame(rgb, ifp, 0)


# ---------------------------------------------------------------------------
# PFM interchange
# ---------------------------------------------------------------------------


def test_pfm_round_trip(tmp_path, small_pair):
    path = tmp_path / "gt.pfm"
    write_pfm(path, small_pair.gt)
    back = read_pfm(path)
    np.testing.assert_array_equal(back.valid, small_pair.gt.valid)
    np.testing.assert_allclose(back.values[back.valid],
                               small_pair.gt.values[small_pair.gt.valid],
                               atol=0)


def test_pfm_invalid_pixels_round_trip(tmp_path):
    values = np.array([[1.5, 0.0], [3.25, 2.0]], dtype=np.float32)
    valid = np.array([[True, False], [False, True]])
    dm = DisparityMap(values, valid)
    path = tmp_path / "masked.pfm"
    write_pfm(path, dm)
    back = read_pfm(path)
    np.testing.assert_array_equal(back.valid, dm.valid)
    assert back.values[0, 0] == 1.5 and back.values[1, 1] == 2.0


def test_pfm_rejects_garbage(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"PF\n2 2\n-1.0\n" + b"\x00" * 5)
    with pytest.raises(DecodeError):
        read_pfm(path)
