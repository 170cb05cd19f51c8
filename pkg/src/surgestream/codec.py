"""Disparity compression: float disparity -> integer/fraction/placeholder
channels -> JPEG, paired with the JPEG-coded RGB frame, and the inverse.

The disparity map is quantized to 1/256-pixel steps and packed into a
3-channel image (I = integer part, F = fraction * 256, P = zeros) so a
stock image codec can carry it. Streaming uses baseline JPEG; a lossless
mode (PNG containers, same frame structure) exists for regression tests.
The IFP payload is written without chroma subsampling and without the
RGB->YCbCr transform: both would smear the F channel.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from PIL import Image

from .geometry import DisparityMap

__all__ = [
    "CodecError",
    "DisparityRangeError",
    "EncodeError",
    "DecodeError",
    "IfpImage",
    "EncodedFrame",
    "split_ifp",
    "merge_ifp",
    "encode_frame",
    "decode_frame",
    "write_pfm",
    "read_pfm",
    "raw_baseline_bytes",
    "LOSSLESS",
]

LOSSLESS = "lossless"

_JPEG_MAGIC = b"\xff\xd8"
_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class CodecError(Exception):
    """Base class for codec failures."""


class DisparityRangeError(CodecError):
    """A valid disparity does not fit the 8.8 fixed-point range."""


class EncodeError(CodecError):
    """Image payload could not be produced."""


class DecodeError(CodecError):
    """Payload is truncated, corrupt, or structurally inconsistent."""


@dataclass
class IfpImage:
    """Integer/fraction/placeholder packing of a disparity map."""

    i: np.ndarray  # (H, W) uint8, integer part
    f: np.ndarray  # (H, W) uint8, fractional part * 256
    p: np.ndarray  # (H, W) uint8, placeholder (zero before compression)

    def __post_init__(self):
        if not (self.i.shape == self.f.shape == self.p.shape):
            raise CodecError("IFP channel shapes differ")

    @property
    def width(self) -> int:
        return self.i.shape[1]

    @property
    def height(self) -> int:
        return self.i.shape[0]

    def to_array(self) -> np.ndarray:
        return np.dstack([self.i, self.f, self.p])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "IfpImage":
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise CodecError(f"IFP image must be HxWx3, got {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        return cls(i=arr[..., 0].copy(), f=arr[..., 1].copy(), p=arr[..., 2].copy())


@dataclass
class EncodedFrame:
    """Compressed RGB + IFP payload pair with capture metadata."""

    rgb_payload: bytes
    ifp_payload: bytes
    quality: Union[int, str]
    capture_timestamp_us: int = 0
    sequence: int = 0


def split_ifp(disp: DisparityMap, prescale: float = 1.0) -> IfpImage:
    """Quantize disparity to 8.8 fixed point and pack it into IFP channels.

    I = floor(d), F = round(frac(d) * 256) with carry into I when the
    rounding hits 256. Invalid pixels become the (I=0, F=0) sentinel.
    Raises DisparityRangeError when a valid (pre-scaled) disparity lands
    at or above 256 after the carry.
    """
    scaled = disp.values.astype(np.float64) * float(prescale)
    q = np.rint(scaled * 256.0).astype(np.int64)
    q[~disp.valid] = 0
    if disp.valid.any() and bool((q >= 65536).any()):
        worst = float(scaled[disp.valid].max())
        raise DisparityRangeError(
            f"disparity {worst:.3f} >= 256 after carry; "
            "use a session prescale instead of clamping"
        )
    i = (q >> 8).astype(np.uint8)
    f = (q & 0xFF).astype(np.uint8)
    return IfpImage(i=i, f=f, p=np.zeros_like(i))


def merge_ifp(ifp: IfpImage, prescale: float = 1.0) -> DisparityMap:
    """Inverse of split_ifp: d = I + F/256 (un-prescaled); (0, 0) is invalid."""
    q = ifp.i.astype(np.int32) * 256 + ifp.f.astype(np.int32)
    values = q.astype(np.float32) / np.float32(256.0 * prescale)
    valid = q != 0
    return DisparityMap(values, valid)


def _encode_image(img: Image.Image, quality, ifp: bool) -> bytes:
    buf = io.BytesIO()
    try:
        if quality == LOSSLESS:
            # Stored deflate blocks: the lossless path is a test/regression
            # mode where throughput matters far more than payload size.
            img.save(buf, format="PNG", compress_level=0)
        else:
            q = int(quality)
            if not 1 <= q <= 100:
                raise EncodeError(f"JPEG quality must be 1..100, got {quality!r}")
            if ifp:
                img.save(buf, format="JPEG", quality=q, subsampling=0, keep_rgb=True)
            else:
                img.save(buf, format="JPEG", quality=q)
    except EncodeError:
        raise
    except Exception as exc:
        raise EncodeError(f"image encode failed: {exc}") from exc
    return buf.getvalue()


def encode_frame(
    rgb: np.ndarray,
    ifp: IfpImage,
    quality: Union[int, str] = 90,
    capture_timestamp_us: int = 0,
    sequence: int = 0,
) -> EncodedFrame:
    """Encode the RGB frame and its IFP image as two independent payloads."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise EncodeError(f"rgb must be HxWx3, got shape {rgb.shape}")
    if rgb.shape[0] == 0 or rgb.shape[1] == 0:
        raise EncodeError("zero-size image")
    if rgb.shape[:2] != (ifp.height, ifp.width):
        raise EncodeError(
            f"rgb {rgb.shape[:2]} and IFP {(ifp.height, ifp.width)} dimensions differ"
        )
    rgb_payload = _encode_image(
        Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB"),
        quality,
        ifp=False,
    )
    ifp_payload = _encode_image(
        Image.fromarray(ifp.to_array(), "RGB"), quality, ifp=True
    )
    return EncodedFrame(
        rgb_payload=rgb_payload,
        ifp_payload=ifp_payload,
        quality=quality,
        capture_timestamp_us=capture_timestamp_us,
        sequence=sequence,
    )


def _verify_png(payload: bytes) -> None:
    """Strict PNG container check: chunk CRCs and the full zlib stream.

    Stock decoders inflate only as many rows as they need and skip IDAT
    CRCs, so corruption can slip through; the lossless path is used for
    regression and resilience accounting and must detect every flip.
    """
    import zlib

    if len(payload) < 8 + 12:
        raise DecodeError("PNG truncated")
    pos = 8
    idat = []
    saw_end = False
    while pos + 12 <= len(payload):
        (length,) = np.frombuffer(payload[pos : pos + 4], dtype=">u4")
        ctype = payload[pos + 4 : pos + 8]
        data_end = pos + 8 + int(length)
        if data_end + 4 > len(payload):
            raise DecodeError("PNG chunk length inconsistent")
        data = payload[pos + 8 : data_end]
        (crc,) = np.frombuffer(payload[data_end : data_end + 4], dtype=">u4")
        if zlib.crc32(ctype + data) != int(crc):
            raise DecodeError(f"PNG chunk {ctype!r} CRC mismatch")
        if ctype == b"IDAT":
            idat.append(data)
        pos = data_end + 4
        if ctype == b"IEND":
            saw_end = True
            break
    if not saw_end or pos != len(payload):
        raise DecodeError("PNG structure invalid")
    try:
        zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise DecodeError(f"PNG raster stream corrupt: {exc}") from exc


def _decode_image(payload: bytes) -> np.ndarray:
    if not payload:
        raise DecodeError("empty payload")
    if payload.startswith(_PNG_MAGIC):
        _verify_png(payload)
    elif not payload.startswith(_JPEG_MAGIC):
        raise DecodeError("payload is neither JPEG nor PNG")
    try:
        with Image.open(io.BytesIO(payload)) as img:
            img.load()
            arr = np.asarray(img.convert("RGB"))
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError(f"image decode failed: {exc}") from exc
    return arr


def decode_frame(enc: EncodedFrame) -> Tuple[np.ndarray, IfpImage]:
    """Decode both payloads; dimensions must agree.

    The P channel is carried through as-is (it may be nonzero after lossy
    compression) and is ignored by merge_ifp.
    """
    rgb = _decode_image(enc.rgb_payload)
    ifp_arr = _decode_image(enc.ifp_payload)
    if rgb.shape != ifp_arr.shape:
        raise DecodeError(
            f"payload dimensions differ: rgb {rgb.shape} vs ifp {ifp_arr.shape}"
        )
    return rgb, IfpImage.from_array(ifp_arr)


def raw_baseline_bytes(width: int, height: int) -> int:
    """Flattened RGB-D baseline: 3 color bytes + 1 disparity byte per pixel."""
    return width * height * 4


# ---------------------------------------------------------------------------
# PFM ground-truth interchange (little-endian single-channel float)
# ---------------------------------------------------------------------------


def write_pfm(path, disp: DisparityMap) -> None:
    """Write disparity as grayscale PFM; invalid pixels become +inf."""
    values = np.where(disp.valid, disp.values, np.float32(np.inf))
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{disp.width} {disp.height}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale: little-endian
        # PFM rasters are stored bottom row first.
        fh.write(np.ascontiguousarray(values[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> DisparityMap:
    """Read a grayscale PFM; non-finite and non-positive pixels are invalid."""
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"Pf":
            raise DecodeError(f"not a grayscale PFM (header {header!r})")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise DecodeError("malformed PFM dimensions line")
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = fh.read(width * height * 4)
        if len(data) != width * height * 4:
            raise DecodeError("truncated PFM raster")
    values = np.frombuffer(data, dtype=dtype).reshape(height, width)[::-1]
    return DisparityMap(values.astype(np.float32))
