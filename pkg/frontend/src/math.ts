/**
 * Camera math and minimal matrix helpers, framework-independent so the
 * picking/projection logic is unit-testable without WebGL.
 *
 * Camera frame {C}: x right, y down, z forward; disparity d relates to
 * depth by z = f * b / d. Matrices are column-major Float32Array(16),
 * matching WebGL conventions.
 */

import type { ParsedFrame } from "./protocol.js";

export interface Intrinsics {
  f: number;
  b: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
  disparityPrescale: number;
}

export type Vec3 = [number, number, number];
export type Mat4 = Float32Array;

export function disparityToPoint(
  intr: Intrinsics,
  u: number,
  v: number,
  d: number,
): Vec3 {
  const z = (intr.f * intr.b) / d;
  return [(z * (u - intr.cx)) / intr.f, (z * (v - intr.cy)) / intr.f, z];
}

export function projectPoint(intr: Intrinsics, p: readonly number[]): [number, number] {
  if (p[2] <= 0) {
    throw new Error("point behind camera");
  }
  return [(p[0] * intr.f) / p[2] + intr.cx, (p[1] * intr.f) / p[2] + intr.cy];
}

export interface CloudBuffers {
  /** Camera-frame positions, xyz interleaved. */
  positions: Float32Array;
  /** Source pixel index (v * width + u) per point, for color lookup. */
  pixelIndices: Uint32Array;
  count: number;
}

/** One point per valid disparity pixel (u16 == 0 marks invalid). */
export function buildCloud(frame: ParsedFrame, intr: Intrinsics): CloudBuffers {
  const { width, height, disparityU16 } = frame;
  let count = 0;
  for (let i = 0; i < disparityU16.length; i++) {
    if (disparityU16[i] !== 0) count++;
  }
  const positions = new Float32Array(count * 3);
  const pixelIndices = new Uint32Array(count);
  const scale = 1.0 / (256.0 * intr.disparityPrescale);
  let k = 0;
  for (let v = 0; v < height; v++) {
    for (let u = 0; u < width; u++) {
      const idx = v * width + u;
      const q = disparityU16[idx];
      if (q === 0) continue;
      const d = q * scale;
      const z = (intr.f * intr.b) / d;
      positions[k * 3] = (z * (u - intr.cx)) / intr.f;
      positions[k * 3 + 1] = (z * (v - intr.cy)) / intr.f;
      positions[k * 3 + 2] = z;
      pixelIndices[k] = idx;
      k++;
    }
  }
  return { positions, pixelIndices, count };
}

// ---------------------------------------------------------------------------
// Matrices (column-major)
// ---------------------------------------------------------------------------

export function mat4Identity(): Mat4 {
  const m = new Float32Array(16);
  m[0] = m[5] = m[10] = m[15] = 1;
  return m;
}

export function mat4Multiply(a: Mat4, b: Mat4): Mat4 {
  const out = new Float32Array(16);
  for (let col = 0; col < 4; col++) {
    for (let row = 0; row < 4; row++) {
      let sum = 0;
      for (let k = 0; k < 4; k++) {
        sum += a[k * 4 + row] * b[col * 4 + k];
      }
      out[col * 4 + row] = sum;
    }
  }
  return out;
}

export function mat4Perspective(
  fovYRad: number,
  aspect: number,
  near: number,
  far: number,
): Mat4 {
  const f = 1.0 / Math.tan(fovYRad / 2);
  const m = new Float32Array(16);
  m[0] = f / aspect;
  m[5] = f;
  m[10] = (far + near) / (near - far);
  m[11] = -1;
  m[14] = (2 * far * near) / (near - far);
  return m;
}

export function mat4LookAt(eye: Vec3, target: Vec3, up: Vec3): Mat4 {
  const zAxis = normalize(sub(eye, target));
  const xAxis = normalize(cross(up, zAxis));
  const yAxis = cross(zAxis, xAxis);
  const m = new Float32Array(16);
  m[0] = xAxis[0]; m[1] = yAxis[0]; m[2] = zAxis[0];
  m[4] = xAxis[1]; m[5] = yAxis[1]; m[6] = zAxis[1];
  m[8] = xAxis[2]; m[9] = yAxis[2]; m[10] = zAxis[2];
  m[12] = -dot(xAxis, eye);
  m[13] = -dot(yAxis, eye);
  m[14] = -dot(zAxis, eye);
  m[15] = 1;
  return m;
}

export function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

export function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

export function dot(a: Vec3, b: Vec3): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

export function normalize(v: Vec3): Vec3 {
  const n = Math.hypot(v[0], v[1], v[2]);
  return [v[0] / n, v[1] / n, v[2] / n];
}

/**
 * Project a point through a view-projection matrix to screen pixels.
 * Returns null when the point is behind the camera or outside clip space.
 */
export function projectToScreen(
  vp: Mat4,
  p: readonly number[],
  screenWidth: number,
  screenHeight: number,
): [number, number] | null {
  const x = vp[0] * p[0] + vp[4] * p[1] + vp[8] * p[2] + vp[12];
  const y = vp[1] * p[0] + vp[5] * p[1] + vp[9] * p[2] + vp[13];
  const w = vp[3] * p[0] + vp[7] * p[1] + vp[11] * p[2] + vp[15];
  if (w <= 1e-9) return null;
  const ndcX = x / w;
  const ndcY = y / w;
  if (ndcX < -1.2 || ndcX > 1.2 || ndcY < -1.2 || ndcY > 1.2) return null;
  return [
    ((ndcX + 1) / 2) * screenWidth,
    ((1 - ndcY) / 2) * screenHeight,
  ];
}

/** Intrinsic Z(yaw)-Y(pitch)-X(roll) rotation applied to a vector. */
export function rotateZYX(
  yaw: number,
  pitch: number,
  roll: number,
  v: Vec3,
): Vec3 {
  const [cz, sz] = [Math.cos(yaw), Math.sin(yaw)];
  const [cy, sy] = [Math.cos(pitch), Math.sin(pitch)];
  const [cx, sx] = [Math.cos(roll), Math.sin(roll)];
  // Rows of Rz(yaw) * Ry(pitch) * Rx(roll).
  const r00 = cz * cy;
  const r01 = cz * sy * sx - sz * cx;
  const r02 = cz * sy * cx + sz * sx;
  const r10 = sz * cy;
  const r11 = sz * sy * sx + cz * cx;
  const r12 = sz * sy * cx - cz * sx;
  const r20 = -sy;
  const r21 = cy * sx;
  const r22 = cy * cx;
  return [
    r00 * v[0] + r01 * v[1] + r02 * v[2],
    r10 * v[0] + r11 * v[1] + r12 * v[2],
    r20 * v[0] + r21 * v[1] + r22 * v[2],
  ];
}
