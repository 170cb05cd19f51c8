"""Pinhole/stereo camera math: disparity <-> 3D projection, SE(3) transforms
and frame chains, Euler-angle conversions for guidance poses.

Conventions used throughout the package:
  * camera frame: x right, y down, z forward (points in front have z > 0)
  * disparity d (pixels) relates to depth by z = f * b / d
  * Euler angles are intrinsic Z(yaw)-Y(pitch)-X(roll), radians
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

__all__ = [
    "GeometryError",
    "InvalidDisparityError",
    "BehindCameraError",
    "DegeneratePoseWarning",
    "CameraIntrinsics",
    "DisparityMap",
    "RigidTransform",
    "FrameChain",
    "PointCloud",
    "MIN_VALID_DISPARITY",
    "disparity_to_point",
    "cloud_from_frame",
    "project_point",
    "compose",
    "apply_chain",
    "euler_to_rotation",
    "rotation_to_euler",
]

# Disparities at or below this are treated as invalid (unbounded depth guard).
MIN_VALID_DISPARITY = 1e-6

_ORTHO_TOL = 1e-6


class GeometryError(ValueError):
    """Invalid geometric input."""


class InvalidDisparityError(GeometryError):
    """Disparity is non-positive or non-finite."""


class BehindCameraError(GeometryError):
    """Point has z <= 0 and cannot be projected."""


class DegeneratePoseWarning(UserWarning):
    """Euler extraction hit gimbal lock; roll was canonicalized to zero."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Rectified pinhole camera with a horizontal stereo baseline.

    f is the focal length in pixels, b the baseline in meters, (cx, cy)
    the principal point in pixels.
    """

    f: float
    b: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.f > 0 and math.isfinite(self.f)):
            raise GeometryError(f"focal length must be positive, got {self.f}")
        if not (self.b > 0 and math.isfinite(self.b)):
            raise GeometryError(f"baseline must be positive, got {self.b}")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"bad image size {self.width}x{self.height}")
        if not (0 <= self.cx < self.width):
            raise GeometryError(f"cx={self.cx} outside [0, {self.width})")
        if not (0 <= self.cy < self.height):
            raise GeometryError(f"cy={self.cy} outside [0, {self.height})")

    @classmethod
    def from_json(cls, path) -> "CameraIntrinsics":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "CameraIntrinsics":
        return cls(
            f=float(doc["f"]),
            b=float(doc["b"]),
            cx=float(doc["cx"]),
            cy=float(doc["cy"]),
            width=int(doc["width"]),
            height=int(doc["height"]),
        )

    def to_dict(self) -> dict:
        return {
            "f": self.f,
            "b": self.b,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def scaled_to(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics for the same camera after resampling to width x height.

        f, cx, cy scale proportionally (f follows the horizontal factor);
        the baseline is a physical length and does not change.
        """
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            f=self.f * sx,
            b=self.b,
            cx=self.cx * sx,
            cy=self.cy * sy,
            width=width,
            height=height,
        )


class DisparityMap:
    """Per-pixel float disparity for the left image plus a validity mask.

    Valid pixels hold finite disparity > MIN_VALID_DISPARITY; everything
    else is masked out and carries a value of 0.
    """

    __slots__ = ("values", "valid")

    def __init__(self, values: np.ndarray, valid: np.ndarray | None = None):
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 2:
            raise GeometryError(f"disparity map must be 2-D, got shape {values.shape}")
        finite_pos = np.isfinite(values) & (values > MIN_VALID_DISPARITY)
        if valid is None:
            valid = finite_pos
        else:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != values.shape:
                raise GeometryError("validity mask shape does not match values")
            valid = valid & finite_pos
        self.values = np.where(valid, values, np.float32(0.0))
        self.valid = valid

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: 3x3 rotation R and translation t (meters)."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=_ORTHO_TOL):
            raise GeometryError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise GeometryError("rotation matrix determinant is not +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"homogeneous matrix must be 4x4, got {m.shape}")
        return cls(R=m[:3, :3], t=m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def inverse(self) -> "RigidTransform":
        return RigidTransform(R=self.R.T, t=-(self.R.T @ self.t))

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform a point (3,) or an (N, 3) array of points."""
        p = np.asarray(p, dtype=np.float64)
        if p.ndim == 1:
            return self.R @ p + self.t
        return p @ self.R.T + self.t


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a∘b: applying the result equals applying b, then a."""
    return RigidTransform(R=a.R @ b.R, t=a.R @ b.t + a.t)


@dataclass(frozen=True)
class FrameChain:
    """Camera {C} -> render origin {O} -> world {W} -> display {H} chain."""

    k_c_o: RigidTransform = field(default_factory=RigidTransform)
    k_o_w: RigidTransform = field(default_factory=RigidTransform)
    k_w_h: RigidTransform = field(default_factory=RigidTransform)

    def combined(self) -> RigidTransform:
        return compose(self.k_w_h, compose(self.k_o_w, self.k_c_o))


def apply_chain(chain: FrameChain, p: np.ndarray) -> np.ndarray:
    """Express a camera-frame point in the display frame {H}."""
    return chain.combined().apply(p)


@dataclass
class PointCloud:
    """Colored 3-D points with the coordinate frame they are expressed in."""

    xyz: np.ndarray  # (N, 3) float64, meters
    rgb: np.ndarray  # (N, 3) uint8
    frame: str = "C"

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.rgb = np.asarray(self.rgb, dtype=np.uint8).reshape(-1, 3)
        if len(self.xyz) != len(self.rgb):
            raise GeometryError("xyz and rgb lengths differ")

    def __len__(self) -> int:
        return len(self.xyz)


def disparity_to_point(
    intr: CameraIntrinsics, u: float, v: float, d: float
) -> np.ndarray:
    """Project pixel (u, v) with disparity d to a camera-frame 3-D point.

    z = f*b/d, x = z*(u - cx)/f, y = z*(v - cy)/f.
    """
    if not (math.isfinite(d) and d > MIN_VALID_DISPARITY):
        raise InvalidDisparityError(f"invalid disparity {d!r}")
    z = intr.f * intr.b / d
    x = z * (u - intr.cx) / intr.f
    y = z * (v - intr.cy) / intr.f
    return np.array([x, y, z])


def project_point(intr: CameraIntrinsics, p: np.ndarray) -> Tuple[float, float]:
    """Project a camera-frame point to pixel coordinates (u, v)."""
    x, y, z = (float(c) for c in np.asarray(p, dtype=np.float64).reshape(3))
    if z <= 0:
        raise BehindCameraError(f"point has z={z} <= 0")
    return (x * intr.f / z + intr.cx, y * intr.f / z + intr.cy)


def cloud_from_frame(
    intr: CameraIntrinsics, disp: DisparityMap, rgb: np.ndarray
) -> PointCloud:
    """Build a colored point cloud from a disparity map and its RGB frame.

    One point per valid disparity pixel; masked pixels are skipped.
    """
    rgb = np.asarray(rgb)
    if rgb.shape[:2] != (disp.height, disp.width) or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise GeometryError(
            f"rgb shape {rgb.shape} does not match disparity "
            f"{disp.height}x{disp.width}"
        )
    from . import kernels  # local import: kernels pulls in the compiled core

    xyz, colors = kernels.build_cloud(
        disp.values, disp.valid, np.ascontiguousarray(rgb, dtype=np.uint8),
        intr.f, intr.b, intr.cx, intr.cy,
    )
    return PointCloud(xyz=xyz, rgb=colors, frame="C")


def euler_to_rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation matrix for intrinsic Z(yaw)-Y(pitch)-X(roll) angles."""
    for name, a in (("yaw", yaw), ("pitch", pitch), ("roll", roll)):
        if not math.isfinite(a):
            raise GeometryError(f"{name} angle is not finite: {a!r}")
    cz, sz = math.cos(yaw), math.sin(yaw)
    cy, sy = math.cos(pitch), math.sin(pitch)
    cx, sx = math.cos(roll), math.sin(roll)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rz @ ry @ rx


_GIMBAL_EPS = 1e-6


def rotation_to_euler(R: np.ndarray) -> Tuple[float, float, float]:
    """Extract (yaw, pitch, roll) for the intrinsic Z-Y-X convention.

    Near pitch = ±pi/2 the yaw/roll split is degenerate; roll is then
    canonicalized to 0 and a DegeneratePoseWarning is emitted.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise GeometryError(f"rotation must be 3x3, got {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-5):
        raise GeometryError("rotation matrix is not orthonormal")
    sy = -float(R[2, 0])
    sy = min(1.0, max(-1.0, sy))
    pitch = math.asin(sy)
    if abs(abs(pitch) - math.pi / 2) < _GIMBAL_EPS:
        warnings.warn(
            "pitch at gimbal lock; returning canonical roll=0",
            DegeneratePoseWarning,
            stacklevel=2,
        )
        # With cos(pitch)=0 only yaw -/+ roll is observable; put it all in yaw.
        yaw = math.atan2(-R[0, 1], R[1, 1])
        return (yaw, pitch, 0.0)
    yaw = math.atan2(R[1, 0], R[0, 0])
    roll = math.atan2(R[2, 1], R[2, 2])
    return (yaw, pitch, roll)
