"""Hot per-pixel kernels with two interchangeable backends.

A compiled Cython extension (surgestream._native) is preferred when it
imported cleanly; otherwise the vectorized NumPy fallback below is used.
Both backends implement the exact same arithmetic and are checked for
equality in the test suite. Set SURGESTREAM_PURE=1 to force the fallback.
"""

from __future__ import annotations

import os
import time

import numpy as np

__all__ = [
    "active_backend",
    "block_match",
    "build_cloud",
    "benchmark_backends",
]

_SAD_BIG = np.int32(2**28)  # sentinel for candidates outside the valid domain

try:
    from . import _native  # type: ignore[attr-defined]
except ImportError:  # pragma: no cover - depends on build environment
    _native = None

_FORCE_PURE = os.environ.get("SURGESTREAM_PURE", "") not in ("", "0")


def active_backend() -> str:
    """Name of the backend serving block_match/build_cloud."""
    return "numpy" if (_native is None or _FORCE_PURE) else "native"


# ---------------------------------------------------------------------------
# NumPy fallback implementations
# ---------------------------------------------------------------------------


def _box_sum(img: np.ndarray, window: int) -> np.ndarray:
    """Window-sum of a 2-D int32 array at every fully-interior center."""
    integral = np.zeros((img.shape[0] + 1, img.shape[1] + 1), dtype=np.int64)
    np.cumsum(img, axis=0, out=integral[1:, 1:])
    np.cumsum(integral[1:, 1:], axis=1, out=integral[1:, 1:])
    w = window
    out = (
        integral[w:, w:]
        - integral[:-w, w:]
        - integral[w:, :-w]
        + integral[:-w, :-w]
    )
    return out.astype(np.int32)


def _block_match_numpy(
    left: np.ndarray,
    right: np.ndarray,
    window: int,
    d_max: int,
    ratio: float,
):
    h, w = left.shape
    half = window // 2
    li = left.astype(np.int32)
    ri = right.astype(np.int32)

    n_d = d_max + 1
    volume = np.full((n_d, h, w), _SAD_BIG, dtype=np.int32)
    for d in range(n_d):
        if w - d < window:
            break
        absdiff = np.abs(li[:, d:] - ri[:, : w - d])
        box = _box_sum(absdiff, window)
        volume[d, half : h - half, d + half : w - half] = box

    best_d = np.argmin(volume, axis=0).astype(np.int32)
    flat = volume.reshape(n_d, -1)
    cols = np.arange(flat.shape[1])
    best = flat[best_d.ravel(), cols].reshape(h, w)

    # Second-best SAD excluding the immediate neighbors of the winner; those
    # share the subpixel minimum and would defeat the ambiguity ratio test.
    masked = volume.copy()
    d_index = np.arange(n_d, dtype=np.int32).reshape(n_d, 1, 1)
    masked[np.abs(d_index - best_d[None, :, :]) <= 1] = _SAD_BIG
    second = masked.min(axis=0)

    has_pixel = best < _SAD_BIG
    # Strict inequality: perfectly flat cost surfaces count as ambiguous.
    unambiguous = second.astype(np.float64) > ratio * best.astype(np.float64)
    unambiguous &= second < _SAD_BIG

    # Parabolic refinement around interior winners.
    up = np.clip(best_d + 1, 0, n_d - 1)
    dn = np.clip(best_d - 1, 0, n_d - 1)
    s_up = flat[up.ravel(), cols].reshape(h, w).astype(np.float64)
    s_dn = flat[dn.ravel(), cols].reshape(h, w).astype(np.float64)
    denom = s_dn - 2.0 * best.astype(np.float64) + s_up
    interior = (best_d > 0) & (best_d < n_d - 1) & (s_up < _SAD_BIG) & (s_dn < _SAD_BIG)
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = 0.5 * (s_dn - s_up) / denom
    offset = np.where(interior & (denom > 0), offset, 0.0)
    offset = np.clip(offset, -0.5, 0.5)

    disp = best_d.astype(np.float32) + offset.astype(np.float32)
    valid = has_pixel & unambiguous & (best_d > 0)
    disp = np.where(valid, disp, np.float32(0.0))
    return disp, valid


def _build_cloud_numpy(values, valid, rgb, f, b, cx, cy):
    ys, xs = np.nonzero(valid)
    d = values[ys, xs].astype(np.float64)
    z = f * b / d
    x = z * (xs - cx) / f
    y = z * (ys - cy) / f
    xyz = np.stack([x, y, z], axis=1)
    colors = rgb[ys, xs]
    return xyz, np.ascontiguousarray(colors)


# ---------------------------------------------------------------------------
# Public dispatchers
# ---------------------------------------------------------------------------


def block_match(
    left: np.ndarray,
    right: np.ndarray,
    window: int,
    d_max: int,
    ratio: float = 1.05,
):
    """Window SAD disparity with subpixel refinement and an ambiguity test.

    left/right are uint8 grayscale images of equal shape. Returns
    (disparity float32, valid bool) for the left image; invalid pixels
    (borders, ambiguous texture, zero-disparity winners) carry 0.
    """
    left = np.ascontiguousarray(left, dtype=np.uint8)
    right = np.ascontiguousarray(right, dtype=np.uint8)
    if left.shape != right.shape or left.ndim != 2:
        raise ValueError(f"image shapes differ: {left.shape} vs {right.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if not (0 < d_max < 256):
        raise ValueError(f"d_max must be in (0, 256), got {d_max}")
    if _native is not None and not _FORCE_PURE:
        return _native.block_match(left, right, window, d_max, ratio)
    return _block_match_numpy(left, right, window, d_max, ratio)


def build_cloud(values, valid, rgb, f, b, cx, cy):
    """Gather valid disparity pixels into (xyz float64, rgb uint8) arrays."""
    values = np.ascontiguousarray(values, dtype=np.float32)
    valid = np.ascontiguousarray(valid, dtype=bool)
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if _native is not None and not _FORCE_PURE:
        return _native.build_cloud(
            values, valid.view(np.uint8), rgb, float(f), float(b), float(cx), float(cy)
        )
    return _build_cloud_numpy(values, valid, rgb, f, b, cx, cy)


def benchmark_backends(
    width: int = 320,
    height: int = 240,
    window: int = 7,
    d_max: int = 48,
    repeat: int = 3,
    seed: int = 11,
) -> dict:
    """Time both backends on the same random inputs.

    Returns a dict with per-kernel timings in milliseconds (best of
    `repeat`) for whichever backends are available.
    """
    rng = np.random.default_rng(seed)
    left = rng.integers(0, 256, size=(height, width), dtype=np.uint8)
    shift = 9
    right = np.roll(left, -shift, axis=1)
    values = rng.uniform(1.0, 64.0, size=(height, width)).astype(np.float32)
    valid = rng.random((height, width)) > 0.05
    rgb = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)

    def time_call(fn, *args):
        best = float("inf")
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn(*args)
            best = min(best, time.perf_counter() - t0)
        return best * 1e3

    results = {
        "width": width,
        "height": height,
        "window": window,
        "d_max": d_max,
        "backends": {},
    }
    results["backends"]["numpy"] = {
        "block_match_ms": time_call(
            _block_match_numpy, left, right, window, d_max, 1.05
        ),
        "build_cloud_ms": time_call(
            _build_cloud_numpy, values, valid, rgb, 500.0, 0.005, width / 2, height / 2
        ),
    }
    if _native is not None:
        results["backends"]["native"] = {
            "block_match_ms": time_call(
                _native.block_match, left, right, window, d_max, 1.05
            ),
            "build_cloud_ms": time_call(
                _native.build_cloud,
                values,
                valid.view(np.uint8),
                rgb,
                500.0,
                0.005,
                width / 2,
                height / 2,
            ),
        }
    return results
