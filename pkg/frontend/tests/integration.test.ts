/**
 * End-to-end console test against a real loopback stack (operation
 * service + mentor engine + gateway), driven through the same pure
 * modules the browser UI uses: parse the binary push, build the cloud,
 * pick the peg at its on-screen position, send pointer feedback, and
 * verify the crosshair lands on the operation console within budget.
 */

import { spawn, type ChildProcessWithoutNullStreams } from "node:child_process";
import { createInterface } from "node:readline";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import WebSocket from "ws";

import { GatewayClient } from "../src/client.js";
import {
  buildCloud,
  mat4LookAt,
  mat4Multiply,
  mat4Perspective,
  projectToScreen,
  type Intrinsics,
  type Vec3,
} from "../src/math.js";
import { pickNearestScreen } from "../src/pick.js";
import { clearFeedback, pointerFeedback, type ParsedFrame } from "../src/protocol.js";

interface FixtureInfo {
  ws: string;
  width: number;
  height: number;
  targets: Record<string, { point: number[]; pixel: number[] }>;
}

interface OverlayLine {
  generation: number;
  markers: number[][];
}

const SCREEN_W = 1024;
const SCREEN_H = 768;

let fixture: ChildProcessWithoutNullStreams | null = null;
let info: FixtureInfo | null = null;
const overlays: OverlayLine[] = [];

beforeAll(async () => {
  const script = fileURLToPath(
    new URL("../scripts/loopback_gateway.py", import.meta.url),
  );
  fixture = spawn("python3", [script], { stdio: ["pipe", "pipe", "pipe"] });
  const lines = createInterface({ input: fixture.stdout });
  info = await new Promise<FixtureInfo>((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error("fixture timeout")), 30000);
    lines.on("line", (line) => {
      if (line.startsWith("READY ")) {
        clearTimeout(timer);
        resolve(JSON.parse(line.slice(6)) as FixtureInfo);
      } else if (line.startsWith("OVERLAY ")) {
        overlays.push(JSON.parse(line.slice(8)) as OverlayLine);
      }
    });
    fixture!.on("exit", (code) => reject(new Error(`fixture exited ${code}`)));
  });
}, 60000);

afterAll(() => {
  fixture?.stdin.end();
  setTimeout(() => fixture?.kill(), 2000).unref();
});

function connectClient(): Promise<{
  client: GatewayClient;
  intr: Intrinsics;
  firstFrame: ParsedFrame;
}> {
  return new Promise((resolve, reject) => {
    let intr: Intrinsics | null = null;
    const timer = setTimeout(() => reject(new Error("no frame")), 15000);
    const client = new GatewayClient(
      info!.ws,
      {
        onHello: (hello) => {
          intr = {
            f: hello.f,
            b: hello.b,
            cx: hello.cx,
            cy: hello.cy,
            width: hello.width,
            height: hello.height,
            disparityPrescale: hello.disparity_prescale,
          };
        },
        onFrame: (frame) => {
          if (intr !== null) {
            clearTimeout(timer);
            resolve({ client, intr, firstFrame: frame });
          }
        },
      },
      (url) => new WebSocket(url) as never,
    );
    client.connect();
  });
}

async function waitForOverlay(
  predicate: (o: OverlayLine) => boolean,
  timeoutMs: number,
): Promise<OverlayLine> {
  const deadline = Date.now() + timeoutMs;
  let cursor = overlays.length;
  while (Date.now() < deadline) {
    while (cursor < overlays.length) {
      const entry = overlays[cursor++];
      if (predicate(entry)) return entry;
    }
    await new Promise((r) => setTimeout(r, 5));
  }
  throw new Error(`no overlay within ${timeoutMs} ms`);
}

describe("mentor console end to end", () => {
  it("streams the cloud, points at the peg, and clears", async () => {
    const { client, intr, firstFrame } = await connectClient();
    try {
      // The streamed cloud is present and dense.
      const cloud = buildCloud(firstFrame, intr);
      expect(cloud.count).toBeGreaterThan(100_000);

      // Place the virtual viewer at the streaming camera and click where
      // the peg appears on screen (its projected pixel under this view).
      const vp = mat4Multiply(
        mat4Perspective(Math.PI / 3, SCREEN_W / SCREEN_H, 0.01, 10),
        mat4LookAt([0, 0, 0], [0, 0, 0.45], [0, -1, 0]),
      );
      const target = info!.targets.peg_start;
      const screen = projectToScreen(vp, target.point as Vec3, SCREEN_W, SCREEN_H);
      expect(screen).not.toBeNull();
      const hit = pickNearestScreen(
        cloud.positions, cloud.count, vp, SCREEN_W, SCREEN_H,
        screen![0], screen![1],
      );
      expect(hit).not.toBeNull();

      // Closed loop: feedback -> operation console crosshair.
      const t0 = Date.now();
      client.sendFeedback(pointerFeedback(hit!.point));
      const overlay = await waitForOverlay((o) => o.markers.length > 0, 5000);
      const elapsed = Date.now() - t0;
      const [mu, mv] = overlay.markers[0];
      const [gu, gv] = target.pixel;
      const errPx = Math.hypot(mu - gu, mv - gv);
      expect(errPx).toBeLessThanOrEqual(2.0);
      expect(elapsed).toBeLessThanOrEqual(500);

      // Clear wipes the overlay on a following frame.
      client.sendFeedback(clearFeedback());
      const cleared = await waitForOverlay(
        (o) => o.generation > overlay.generation && o.markers.length === 0,
        5000,
      );
      expect(cleared.markers).toEqual([]);
    } finally {
      client.close();
    }
  }, 60000);

  it("sustains at least 10 Hz frame intake at 640x512", async () => {
    const { client } = await connectClient();
    try {
      const start = client.framesReceived;
      const t0 = Date.now();
      await new Promise((r) => setTimeout(r, 2000));
      const received = client.framesReceived - start;
      const rate = received / ((Date.now() - t0) / 1000);
      expect(rate).toBeGreaterThanOrEqual(10);
    } finally {
      client.close();
    }
  }, 60000);
});
