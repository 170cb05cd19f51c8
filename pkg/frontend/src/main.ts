/**
 * Console bootstrap: connect to the gateway, wire the viewer and toolbar.
 * The gateway URL comes from ?ws=... (default ws://<host>:8765/ws).
 */

import { GatewayClient } from "./client.js";
import { Viewer, type Tool } from "./viewer.js";

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node;
}

function gatewayUrl(): string {
  const params = new URLSearchParams(window.location.search);
  return params.get("ws") ?? `ws://${window.location.hostname}:8765/ws`;
}

function start(): void {
  const canvas = el("view") as HTMLCanvasElement;
  canvas.width = canvas.clientWidth;
  canvas.height = canvas.clientHeight;

  const hud = {
    fps: el("hud-fps"),
    latency: el("hud-latency"),
    points: el("hud-points"),
    state: el("hud-state"),
    tool: el("hud-tool"),
    drops: el("hud-drops"),
  };

  const client = new GatewayClient(gatewayUrl(), {
    onHello: (hello) => {
      viewer.setIntrinsics({
        f: hello.f,
        b: hello.b,
        cx: hello.cx,
        cy: hello.cy,
        width: hello.width,
        height: hello.height,
        disparityPrescale: hello.disparity_prescale,
      });
      hud.state.textContent = `connected (${hello.width}x${hello.height})`;
    },
    onErrorReply: (detail) => {
      hud.state.textContent = `rejected: ${detail}`;
    },
    onState: (state) => {
      el("banner").style.display = state === "connected" ? "none" : "block";
      el("banner").textContent =
        state === "reconnecting" ? "connection lost - reconnecting" : state;
    },
  });
  const viewer = new Viewer(canvas, client, hud);

  for (const tool of ["pointer", "needle", "trajectory", "clear"] as Tool[]) {
    el(`tool-${tool}`).addEventListener("click", () => viewer.setTool(tool));
  }

  client.connect();
  const loop = () => {
    viewer.tick();
    requestAnimationFrame(loop);
  };
  requestAnimationFrame(loop);
}

start();
