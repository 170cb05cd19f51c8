/**
 * Camera math tests, anchored to the same reference values the backend
 * uses (f=500, b=0.005, cx=320, cy=256; pixel (420,356) at disparity 25
 * backprojects to (0.02, 0.02, 0.1) meters).
 */

import { describe, expect, it } from "vitest";

import {
  buildCloud,
  disparityToPoint,
  mat4LookAt,
  mat4Multiply,
  mat4Perspective,
  projectPoint,
  projectToScreen,
  rotateZYX,
  type Intrinsics,
} from "../src/math.js";
import type { ParsedFrame } from "../src/protocol.js";

const INTR: Intrinsics = {
  f: 500, b: 0.005, cx: 320, cy: 256, width: 640, height: 512,
  disparityPrescale: 1,
};

describe("pinhole math", () => {
  it("matches the reference backprojection", () => {
    const p = disparityToPoint(INTR, 420, 356, 25);
    expect(p[0]).toBeCloseTo(0.02, 12);
    expect(p[1]).toBeCloseTo(0.02, 12);
    expect(p[2]).toBeCloseTo(0.1, 12);
  });

  it("projection inverts backprojection", () => {
    for (const [u, v, d] of [[10.5, 20.25, 3.5], [320, 256, 8], [600, 40, 100]]) {
      const [u2, v2] = projectPoint(INTR, disparityToPoint(INTR, u, v, d));
      expect(u2).toBeCloseTo(u, 6);
      expect(v2).toBeCloseTo(v, 6);
    }
  });

  it("rejects points behind the camera", () => {
    expect(() => projectPoint(INTR, [0, 0, -1])).toThrow();
  });
});

describe("buildCloud", () => {
  const frame: ParsedFrame = {
    seq: 1,
    captureTimestampUs: 0,
    width: 3,
    height: 2,
    rgbPayload: new Uint8Array(),
    // 8.8 fixed point: 2048 -> d=8, 0 -> invalid, 2560 -> d=10.
    disparityU16: new Uint16Array([2048, 0, 2560, 0, 0, 2048]),
  };
  const intr: Intrinsics = { ...INTR, width: 3, height: 2 };

  it("skips invalid pixels and keeps pixel indices", () => {
    const cloud = buildCloud(frame, intr);
    expect(cloud.count).toBe(3);
    expect(Array.from(cloud.pixelIndices)).toEqual([0, 2, 5]);
  });

  it("positions honor z = f*b/d", () => {
    const cloud = buildCloud(frame, intr);
    expect(cloud.positions[2]).toBeCloseTo((500 * 0.005) / 8, 6);
    expect(cloud.positions[5]).toBeCloseTo((500 * 0.005) / 10, 6);
  });

  it("applies the session prescale on the way out", () => {
    const cloud = buildCloud(frame, { ...intr, disparityPrescale: 0.5 });
    // raster 2048 -> q/256 = 8 -> un-prescaled d = 16.
    expect(cloud.positions[2]).toBeCloseTo((500 * 0.005) / 16, 6);
  });
});

describe("view projection", () => {
  it("centers a point on the optical axis", () => {
    const vp = mat4Multiply(
      mat4Perspective(Math.PI / 3, 1.0, 0.01, 10),
      mat4LookAt([0, 0, 0], [0, 0, 1], [0, -1, 0]),
    );
    const screen = projectToScreen(vp, [0, 0, 0.5], 800, 800);
    expect(screen).not.toBeNull();
    expect(screen![0]).toBeCloseTo(400, 3);
    expect(screen![1]).toBeCloseTo(400, 3);
  });

  it("culls points behind the viewer", () => {
    const vp = mat4Multiply(
      mat4Perspective(Math.PI / 3, 1.0, 0.01, 10),
      mat4LookAt([0, 0, 0], [0, 0, 1], [0, -1, 0]),
    );
    expect(projectToScreen(vp, [0, 0, -0.5], 800, 800)).toBeNull();
  });
});

describe("rotateZYX", () => {
  it("yaw quarter turn maps x to y", () => {
    const out = rotateZYX(Math.PI / 2, 0, 0, [1, 0, 0]);
    expect(out[0]).toBeCloseTo(0, 9);
    expect(out[1]).toBeCloseTo(1, 9);
    expect(out[2]).toBeCloseTo(0, 9);
  });
});
