"""Pluggable disparity sources and a synthetic stereo scene generator.

The generator ray-casts simple primitives (tilted planes, spheres, axis
aligned boxes) from both eyes of a rectified stereo rig. Albedo is a
world-anchored procedural texture, so left and right images are exact
point samples of the same continuous scene and the analytic depth maps
are the ground truth for every accuracy test downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import CameraIntrinsics, DisparityMap, GeometryError

__all__ = [
    "SceneSpecError",
    "Plane",
    "Sphere",
    "Box",
    "SceneSpec",
    "StereoPair",
    "gen_synthetic_scene",
    "block_match_disparity",
    "warp_consistency_stats",
    "peg_scene_spec",
    "reference_scene_spec",
    "AMBIGUITY_RATIO",
]

# Second-best/best SAD threshold below which a match is declared ambiguous.
AMBIGUITY_RATIO = 1.05

_MAX_DISPARITY = 256.0


class SceneSpecError(ValueError):
    """Scene description violates its invariants."""


@dataclass(frozen=True)
class Plane:
    """Depth graph z = z0 + sx*x + sy*y (camera frame), infinite extent."""

    z0: float
    sx: float = 0.0
    sy: float = 0.0
    albedo: Tuple[int, int, int] = (180, 150, 140)

    def kind(self) -> str:
        return "plane"


@dataclass(frozen=True)
class Sphere:
    center: Tuple[float, float, float]
    radius: float
    albedo: Tuple[int, int, int] = (90, 170, 90)
    name: Optional[str] = None

    def kind(self) -> str:
        return "sphere"

    def closest_point(self) -> np.ndarray:
        """Surface point nearest the camera origin (visible by radial ray)."""
        c = np.asarray(self.center, dtype=np.float64)
        n = np.linalg.norm(c)
        return c * (1.0 - self.radius / n)


@dataclass(frozen=True)
class Box:
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    albedo: Tuple[int, int, int] = (150, 110, 190)
    name: Optional[str] = None

    def kind(self) -> str:
        return "box"


@dataclass
class SceneSpec:
    """Primitive list plus camera and texture parameters."""

    intrinsics: CameraIntrinsics
    primitives: List[object] = field(default_factory=list)
    seed: int = 7
    noise_amplitude: float = 0.35
    noise_cell: float = 0.004  # texture lattice pitch, meters
    targets: Dict[str, Tuple[float, float, float]] = field(default_factory=dict)

    def named_targets(self) -> Dict[str, np.ndarray]:
        out = {k: np.asarray(v, dtype=np.float64) for k, v in self.targets.items()}
        for prim in self.primitives:
            if isinstance(prim, Sphere) and prim.name:
                out.setdefault(prim.name, prim.closest_point())
        return out

    def to_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            d = {"kind": p.kind(), "albedo": list(p.albedo)}
            if isinstance(p, Plane):
                d.update(z0=p.z0, sx=p.sx, sy=p.sy)
            elif isinstance(p, Sphere):
                d.update(center=list(p.center), radius=p.radius, name=p.name)
            elif isinstance(p, Box):
                d.update(center=list(p.center), size=list(p.size), name=p.name)
            prims.append(d)
        return {
            "intrinsics": self.intrinsics.to_dict(),
            "seed": self.seed,
            "noise_amplitude": self.noise_amplitude,
            "noise_cell": self.noise_cell,
            "primitives": prims,
            "targets": {k: list(v) for k, v in self.targets.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        prims: List[object] = []
        for d in doc.get("primitives", []):
            kind = d.get("kind")
            albedo = tuple(d.get("albedo", (128, 128, 128)))
            if kind == "plane":
                prims.append(
                    Plane(z0=d["z0"], sx=d.get("sx", 0.0), sy=d.get("sy", 0.0),
                          albedo=albedo)
                )
            elif kind == "sphere":
                prims.append(
                    Sphere(center=tuple(d["center"]), radius=d["radius"],
                           albedo=albedo, name=d.get("name"))
                )
            elif kind == "box":
                prims.append(
                    Box(center=tuple(d["center"]), size=tuple(d["size"]),
                        albedo=albedo, name=d.get("name"))
                )
            else:
                raise SceneSpecError(f"unknown primitive kind {kind!r}")
        return cls(
            intrinsics=CameraIntrinsics.from_dict(doc["intrinsics"]),
            primitives=prims,
            seed=int(doc.get("seed", 7)),
            noise_amplitude=float(doc.get("noise_amplitude", 0.35)),
            noise_cell=float(doc.get("noise_cell", 0.004)),
            targets={k: tuple(v) for k, v in doc.get("targets", {}).items()},
        )

    @classmethod
    def from_json(cls, path) -> "SceneSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


@dataclass
class StereoPair:
    """Rectified color pair plus the analytic left-image disparity."""

    left: np.ndarray  # (H, W, 3) uint8
    right: np.ndarray  # (H, W, 3) uint8
    gt: DisparityMap  # left-image ground truth
    right_gt: DisparityMap  # right-image ground truth (occlusion checks)


# ---------------------------------------------------------------------------
# Procedural texture
# ---------------------------------------------------------------------------


def _value_noise(x: np.ndarray, y: np.ndarray, seed: int, cell: float) -> np.ndarray:
    """Smooth lattice noise in [-1, 1], a pure function of world (x, y)."""

    def lattice(ix, iy, salt):
        # Deterministic integer hash -> [0, 1); wrapping uint64 arithmetic.
        bias = np.uint64((seed * 1442695040888963407 + salt) & 0xFFFFFFFFFFFFFFFF)
        h = (
            ix.astype(np.uint64) * np.uint64(374761393)
            + iy.astype(np.uint64) * np.uint64(668265263)
            + bias
        )
        h = (h ^ (h >> np.uint64(13))) * np.uint64(1274126177)
        h = h ^ (h >> np.uint64(16))
        return (h & np.uint64(0xFFFFFF)).astype(np.float64) / float(0x1000000)

    total = np.zeros_like(x)
    amp = 1.0
    freq = 1.0
    for octave in range(2):
        gx = x * freq / cell
        gy = y * freq / cell
        ix = np.floor(gx).astype(np.int64)
        iy = np.floor(gy).astype(np.int64)
        fx = gx - ix
        fy = gy - iy
        sx = fx * fx * (3.0 - 2.0 * fx)
        sy = fy * fy * (3.0 - 2.0 * fy)
        n00 = lattice(ix, iy, octave)
        n10 = lattice(ix + 1, iy, octave)
        n01 = lattice(ix, iy + 1, octave)
        n11 = lattice(ix + 1, iy + 1, octave)
        top = n00 + sx * (n10 - n00)
        bot = n01 + sx * (n11 - n01)
        total += amp * (top + sy * (bot - top))
        amp *= 0.5
        freq *= 2.0
    return (total / 1.5) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


def _cast(
    spec: SceneSpec, origin_x: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-cast one eye. Returns (rgb uint8, z float64, hit bool)."""
    intr = spec.intrinsics
    h, w = intr.height, intr.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    dx = (us - intr.cx) / intr.f
    dy = (vs - intr.cy) / intr.f
    # Ray: P(tz) = (origin_x, 0, 0) + tz * (dx, dy, 1); tz is camera depth.
    best_z = np.full((h, w), np.inf)
    albedo = np.zeros((h, w, 3), dtype=np.float64)

    def consider(tz: np.ndarray, color: Tuple[int, int, int]):
        nonlocal best_z
        closer = np.isfinite(tz) & (tz > 1e-9) & (tz < best_z)
        best_z = np.where(closer, tz, best_z)
        for c in range(3):
            albedo[..., c] = np.where(closer, float(color[c]), albedo[..., c])

    for prim in spec.primitives:
        if isinstance(prim, Plane):
            denom = 1.0 - prim.sx * dx - prim.sy * dy
            numer = prim.z0 + prim.sx * origin_x
            with np.errstate(divide="ignore", invalid="ignore"):
                tz = np.where(np.abs(denom) > 1e-12, numer / denom, np.inf)
            consider(tz, prim.albedo)
        elif isinstance(prim, Sphere):
            cx_, cy_, cz_ = prim.center
            ox = origin_x - cx_
            a = dx * dx + dy * dy + 1.0
            bq = ox * dx + (-cy_) * dy + (-cz_)
            cq = ox * ox + cy_ * cy_ + cz_ * cz_ - prim.radius**2
            disc = bq * bq - a * cq
            with np.errstate(invalid="ignore"):
                root = np.sqrt(np.where(disc >= 0, disc, np.nan))
            tz = (-bq - root) / a
            tz = np.where(disc >= 0, tz, np.inf)
            consider(tz, prim.albedo)
        elif isinstance(prim, Box):
            cx_, cy_, cz_ = prim.center
            hx, hy, hz = (s / 2.0 for s in prim.size)
            t_near = np.full((h, w), -np.inf)
            t_far = np.full((h, w), np.inf)
            for (o, dcomp, cc, hh) in (
                (origin_x, dx, cx_, hx),
                (0.0, dy, cy_, hy),
                (0.0, np.ones_like(dx), cz_, hz),
            ):
                lo = cc - hh - o
                hi = cc + hh - o
                with np.errstate(divide="ignore", invalid="ignore"):
                    t1 = np.where(np.abs(dcomp) > 1e-12, lo / dcomp, np.inf)
                    t2 = np.where(np.abs(dcomp) > 1e-12, hi / dcomp, np.inf)
                    # Degenerate axis: ray parallel to slab; inside iff
                    # origin component within bounds.
                    parallel = np.abs(dcomp) <= 1e-12
                    inside = (o >= cc - hh) & (o <= cc + hh)
                t_lo = np.minimum(t1, t2)
                t_hi = np.maximum(t1, t2)
                t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), t_lo)
                t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), t_hi)
                t_near = np.maximum(t_near, t_lo)
                t_far = np.minimum(t_far, t_hi)
            tz = np.where((t_near <= t_far) & (t_near > 0), t_near, np.inf)
            consider(tz, prim.albedo)
        else:
            raise SceneSpecError(f"unsupported primitive {type(prim).__name__}")

    hit = np.isfinite(best_z)
    z = np.where(hit, best_z, 0.0)
    px = origin_x + z * dx
    py = z * dy
    shade = 1.0 + spec.noise_amplitude * _value_noise(
        px, py, spec.seed, spec.noise_cell
    )
    rgb = np.clip(albedo * shade[..., None], 0, 255).astype(np.uint8)
    rgb[~hit] = 0
    return rgb, best_z, hit


def gen_synthetic_scene(spec: SceneSpec) -> StereoPair:
    """Render both eyes and the analytic disparity maps.

    Deterministic for a fixed spec (including seed). Raises SceneSpecError
    if any hit would induce disparity outside (0, 256).
    """
    intr = spec.intrinsics
    if not spec.primitives:
        raise SceneSpecError("scene has no primitives")
    left_rgb, left_z, left_hit = _cast(spec, origin_x=0.0)
    right_rgb, right_z, right_hit = _cast(spec, origin_x=intr.b)

    fb = intr.f * intr.b
    for z, hit in ((left_z, left_hit), (right_z, right_hit)):
        if hit.any():
            if float(z[hit].min()) <= fb / _MAX_DISPARITY:
                raise SceneSpecError(
                    "scene induces disparity >= 256; move primitives farther away"
                )

    def to_disparity(z, hit):
        with np.errstate(divide="ignore"):
            d = np.where(hit, fb / np.where(hit, z, 1.0), 0.0)
        return DisparityMap(d.astype(np.float32), hit)

    return StereoPair(
        left=left_rgb,
        right=right_rgb,
        gt=to_disparity(left_z, left_hit),
        right_gt=to_disparity(right_z, right_hit),
    )


# ---------------------------------------------------------------------------
# Consistency scan and the classical matcher
# ---------------------------------------------------------------------------


def warp_consistency_stats(pair: StereoPair, occlusion_tol: float = 1.0) -> dict:
    """Photometric check: sample the right image at (u - d, v) per left pixel.

    Pixels whose surface point is occluded or out of bounds in the right
    view are excluded. Returns mean/p99 absolute intensity differences.
    """
    h, w = pair.gt.values.shape
    us = np.arange(w, dtype=np.float64)[None, :].repeat(h, axis=0)
    vs = np.arange(h)[:, None].repeat(w, axis=1)
    d = pair.gt.values.astype(np.float64)
    ur = us - d
    checkable = pair.gt.valid & (ur >= 0) & (ur <= w - 1)

    # Occlusion: the right camera must see (approximately) the same surface.
    ur_round = np.clip(np.round(ur).astype(np.int64), 0, w - 1)
    d_right = pair.right_gt.values[vs.astype(np.int64), ur_round]
    checkable &= pair.right_gt.valid[vs.astype(np.int64), ur_round]
    checkable &= np.abs(d_right - d) <= occlusion_tol

    u0 = np.floor(ur).astype(np.int64)
    u1 = np.clip(u0 + 1, 0, w - 1)
    u0 = np.clip(u0, 0, w - 1)
    frac = (ur - u0)[..., None]
    right = pair.right.astype(np.float64)
    rows = vs.astype(np.int64)
    sampled = right[rows, u0] * (1.0 - frac) + right[rows, u1] * frac
    diff = np.abs(sampled - pair.left.astype(np.float64)).mean(axis=2)
    diffs = diff[checkable]
    if diffs.size == 0:
        return {"checked": 0, "mean_abs": 0.0, "p99_abs": 0.0}
    return {
        "checked": int(diffs.size),
        "mean_abs": float(diffs.mean()),
        "p99_abs": float(np.percentile(diffs, 99)),
    }


def block_match_disparity(
    left: np.ndarray,
    right: np.ndarray,
    window: int = 9,
    d_max: int = 64,
    ratio: float = AMBIGUITY_RATIO,
) -> DisparityMap:
    """Classical SAD block matcher (the stand-in disparity estimator).

    Accepts color or grayscale rectified images of equal size; color is
    reduced to luma first. See kernels.block_match for the algorithm.
    """
    from . import kernels

    left = np.asarray(left)
    right = np.asarray(right)
    if left.shape != right.shape:
        raise GeometryError(f"image shapes differ: {left.shape} vs {right.shape}")

    def to_gray(img):
        if img.ndim == 2:
            return img.astype(np.uint8)
        lum = (
            0.299 * img[..., 0].astype(np.float64)
            + 0.587 * img[..., 1].astype(np.float64)
            + 0.114 * img[..., 2].astype(np.float64)
        )
        return np.clip(np.round(lum), 0, 255).astype(np.uint8)

    disp, valid = kernels.block_match(to_gray(left), to_gray(right), window,
                                      d_max, ratio)
    return DisparityMap(disp, valid)


# ---------------------------------------------------------------------------
# Canonical scenes
# ---------------------------------------------------------------------------


def peg_scene_spec(width: int = 640, height: int = 512, seed: int = 7) -> SceneSpec:
    """Peg-transfer style scene: tilted base plane plus two spherical pegs.

    Sphere names become named targets (their closest points to the camera),
    used by the re-projection accuracy protocol.
    """
    base = CameraIntrinsics(f=800.0, b=0.005, cx=320.0, cy=256.0,
                            width=640, height=512)
    intr = base.scaled_to(width, height)
    return SceneSpec(
        intrinsics=intr,
        primitives=[
            Plane(z0=0.50, sx=0.04, sy=-0.06, albedo=(185, 152, 140)),
            Sphere(center=(-0.028, 0.018, 0.430), radius=0.012,
                   albedo=(96, 168, 96), name="peg_start"),
            Sphere(center=(0.034, -0.014, 0.455), radius=0.012,
                   albedo=(170, 96, 96), name="peg_end"),
            Box(center=(0.0, 0.042, 0.470), size=(0.030, 0.012, 0.016),
                albedo=(140, 120, 190)),
        ],
        seed=seed,
    )


def reference_scene_spec() -> SceneSpec:
    """The fixed 640x512 frame used for compression-size regression checks."""
    return peg_scene_spec(width=640, height=512, seed=7)
