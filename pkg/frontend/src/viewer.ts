/**
 * Three.js viewer: renders the streamed cloud as a point set, maps
 * orbit/pan/zoom (the scene-placement transform) onto the camera, and
 * hosts the mentor tools (pointer, virtual needle, trajectory, clear).
 *
 * Received scene data is never mutated by view manipulation; the cloud
 * buffers stay in the camera frame {C} and only the Three camera moves.
 */

import * as THREE from "three";
import { OrbitControls } from "three/examples/jsm/controls/OrbitControls.js";

import type { GatewayClient } from "./client.js";
import type { CloudBuffers, Intrinsics, Vec3 } from "./math.js";
import { buildCloud, rotateZYX } from "./math.js";
import type { ParsedFrame, UiFeedback } from "./protocol.js";
import {
  clearFeedback,
  needleFeedback,
  pointerFeedback,
  strokeFeedback,
} from "./protocol.js";
import { PICK_RADIUS_PX, pickNearestScreen } from "./pick.js";

export type Tool = "pointer" | "needle" | "trajectory" | "clear";

interface Hud {
  fps: HTMLElement;
  latency: HTMLElement;
  points: HTMLElement;
  state: HTMLElement;
  tool: HTMLElement;
  drops: HTMLElement;
}

const NEEDLE_RADIUS_M = 0.01;
const NEEDLE_SEGMENTS = 16;

export class Viewer {
  private readonly renderer: THREE.WebGLRenderer;
  private readonly scene = new THREE.Scene();
  private readonly camera: THREE.PerspectiveCamera;
  private readonly controls: OrbitControls;
  private readonly hud: Hud;
  private readonly client: GatewayClient;

  private intrinsics: Intrinsics | null = null;
  private cloud: CloudBuffers | null = null;
  private points: THREE.Points | null = null;
  private geometry: THREE.BufferGeometry | null = null;
  private lastFrame: ParsedFrame | null = null;

  private tool: Tool = "pointer";
  private strokeCounter = 0;
  private strokeVertices: Vec3[] = [];
  private needlePose = { yaw: 0, pitch: 0, roll: 0, position: [0, 0, 0.3] as Vec3 };
  private needleLine: THREE.Line | null = null;

  private frameTimes: number[] = [];

  constructor(canvas: HTMLCanvasElement, client: GatewayClient, hud: Hud) {
    this.client = client;
    this.hud = hud;
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: false });
    this.renderer.setSize(canvas.clientWidth, canvas.clientHeight, false);
    this.camera = new THREE.PerspectiveCamera(
      55,
      canvas.clientWidth / canvas.clientHeight,
      0.001,
      10,
    );
    // {C} has y down and z forward; Three cameras look down -z with y up,
    // so flip the scene group rather than every point.
    this.scene.scale.set(1, -1, -1);
    this.camera.position.set(0, 0, -0.05);
    this.controls = new OrbitControls(this.camera, canvas);
    this.controls.target.set(0, 0, 0.45);
    canvas.addEventListener("pointerdown", (ev) => this.onPointerDown(ev));
    window.addEventListener("keydown", (ev) => this.onKeyDown(ev));
  }

  setIntrinsics(intr: Intrinsics): void {
    this.intrinsics = intr;
  }

  setTool(tool: Tool): void {
    this.tool = tool;
    this.hud.tool.textContent = tool;
    if (tool === "clear") {
      this.client.sendFeedback(clearFeedback());
      this.strokeVertices = [];
    }
  }

  /** Render loop driven by requestAnimationFrame from main. */
  tick(): void {
    const frame = this.client.takeLatest();
    if (frame !== null && this.intrinsics !== null) {
      this.lastFrame = frame;
      this.cloud = buildCloud(frame, this.intrinsics);
      this.uploadCloud(frame, this.cloud);
      this.hud.points.textContent = String(this.cloud.count);
      this.hud.latency.textContent = `seq ${frame.seq}`;
      this.frameTimes.push(performance.now());
      if (this.frameTimes.length > 30) this.frameTimes.shift();
      if (this.frameTimes.length >= 2) {
        const span =
          this.frameTimes[this.frameTimes.length - 1] - this.frameTimes[0];
        const fps = ((this.frameTimes.length - 1) / span) * 1000;
        this.hud.fps.textContent = fps.toFixed(1);
      }
      this.hud.drops.textContent = String(this.client.droppedFrames);
    }
    this.controls.update();
    this.renderer.render(this.scene, this.camera);
  }

  private uploadCloud(frame: ParsedFrame, cloud: CloudBuffers): void {
    if (this.geometry === null || this.points === null) {
      this.geometry = new THREE.BufferGeometry();
      const material = new THREE.PointsMaterial({
        size: 0.0015,
        vertexColors: true,
      });
      this.points = new THREE.Points(this.geometry, material);
      this.scene.add(this.points);
    }
    this.geometry.setAttribute(
      "position",
      new THREE.BufferAttribute(cloud.positions, 3),
    );
    const colors = new Float32Array(cloud.count * 3).fill(0.7);
    this.geometry.setAttribute("color", new THREE.BufferAttribute(colors, 3));
    this.geometry.computeBoundingSphere();
    void this.paintColors(frame, cloud, colors);
  }

  /** Decode the RGB payload off the main path and color the points. */
  private async paintColors(
    frame: ParsedFrame,
    cloud: CloudBuffers,
    colors: Float32Array,
  ): Promise<void> {
    try {
      const blob = new Blob([frame.rgbPayload.buffer as ArrayBuffer]);
      const bitmap = await createImageBitmap(blob);
      const canvas = new OffscreenCanvas(frame.width, frame.height);
      const ctx = canvas.getContext("2d");
      if (ctx === null) return;
      ctx.drawImage(bitmap, 0, 0);
      const data = ctx.getImageData(0, 0, frame.width, frame.height).data;
      for (let k = 0; k < cloud.count; k++) {
        const px = cloud.pixelIndices[k] * 4;
        colors[k * 3] = data[px] / 255;
        colors[k * 3 + 1] = data[px + 1] / 255;
        colors[k * 3 + 2] = data[px + 2] / 255;
      }
      if (this.geometry !== null && this.lastFrame === frame) {
        (this.geometry.getAttribute("color") as THREE.BufferAttribute).needsUpdate =
          true;
      }
    } catch {
      // Leave the fallback gray; the next frame will try again.
    }
  }

  private viewProjection(): Float32Array {
    this.camera.updateMatrixWorld();
    const vp = new THREE.Matrix4()
      .multiplyMatrices(this.camera.projectionMatrix, this.camera.matrixWorldInverse)
      .multiply(this.scene.matrixWorld);
    return new Float32Array(vp.elements);
  }

  private onPointerDown(ev: PointerEvent): void {
    if (ev.button !== 0 || this.cloud === null) return;
    if (this.tool !== "pointer" && this.tool !== "trajectory") return;
    if (!ev.shiftKey) return; // plain drag orbits; shift-click picks
    const canvas = this.renderer.domElement;
    const rect = canvas.getBoundingClientRect();
    const x = ((ev.clientX - rect.left) / rect.width) * canvas.width;
    const y = ((ev.clientY - rect.top) / rect.height) * canvas.height;
    const hit = pickNearestScreen(
      this.cloud.positions,
      this.cloud.count,
      this.viewProjection(),
      canvas.width,
      canvas.height,
      x,
      y,
      PICK_RADIUS_PX,
    );
    if (hit === null) {
      this.hud.state.textContent = "no point under cursor";
      return;
    }
    if (this.tool === "pointer") {
      this.send(pointerFeedback(hit.point));
    } else {
      this.strokeVertices.push(hit.point);
      if (ev.detail >= 2 && this.strokeVertices.length >= 2) {
        this.strokeCounter = (this.strokeCounter + 1) & 0xffff;
        for (const vertex of this.strokeVertices) {
          this.send(strokeFeedback(this.strokeCounter, vertex));
        }
        this.strokeVertices = [];
      }
    }
  }

  private onKeyDown(ev: KeyboardEvent): void {
    if (this.tool !== "needle") return;
    const pose = this.needlePose;
    const step = ev.shiftKey ? 0.1 : 0.02;
    const move = ev.shiftKey ? 0.01 : 0.002;
    switch (ev.key) {
      case "q": pose.yaw += step; break;
      case "e": pose.yaw -= step; break;
      case "w": pose.pitch += step; break;
      case "s": pose.pitch -= step; break;
      case "a": pose.roll += step; break;
      case "d": pose.roll -= step; break;
      case "ArrowLeft": pose.position[0] -= move; break;
      case "ArrowRight": pose.position[0] += move; break;
      case "ArrowUp": pose.position[1] -= move; break;
      case "ArrowDown": pose.position[1] += move; break;
      case "PageUp": pose.position[2] += move; break;
      case "PageDown": pose.position[2] -= move; break;
      case "Enter":
        this.send(
          needleFeedback(pose.yaw, pose.pitch, pose.roll, pose.position),
        );
        return;
      default:
        return;
    }
    this.updateNeedleWidget();
  }

  private updateNeedleWidget(): void {
    const pts: THREE.Vector3[] = [];
    for (let s = 0; s <= NEEDLE_SEGMENTS; s++) {
      const theta = (Math.PI * s) / NEEDLE_SEGMENTS;
      const local: Vec3 = [
        NEEDLE_RADIUS_M * Math.cos(theta),
        NEEDLE_RADIUS_M * Math.sin(theta),
        0,
      ];
      const { yaw, pitch, roll, position } = this.needlePose;
      const world = rotateZYX(yaw, pitch, roll, local);
      pts.push(
        new THREE.Vector3(
          world[0] + position[0],
          world[1] + position[1],
          world[2] + position[2],
        ),
      );
    }
    if (this.needleLine === null) {
      const material = new THREE.LineBasicMaterial({ color: 0x00c8ff });
      this.needleLine = new THREE.Line(
        new THREE.BufferGeometry().setFromPoints(pts),
        material,
      );
      this.scene.add(this.needleLine);
    } else {
      this.needleLine.geometry.setFromPoints(pts);
    }
  }

  private send(fb: UiFeedback): void {
    try {
      this.client.sendFeedback(fb);
      this.hud.state.textContent = "sent";
    } catch (err) {
      this.hud.state.textContent = `send failed: ${String(err)}`;
    }
  }
}
