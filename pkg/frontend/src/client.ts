/**
 * Gateway WebSocket client: latest-frame slot decoupled from the render
 * loop, drop counting, reconnect with backoff, and validated feedback.
 *
 * The WebSocket constructor is injected so the same client runs in the
 * browser and under node-based tests.
 */

import type { ParsedFrame, ServerText, UiFeedback } from "./protocol.js";
import {
  parseGatewayFrame,
  parseServerText,
  serializeFeedback,
} from "./protocol.js";

type WebSocketLike = {
  binaryType: string;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  send(data: string): void;
  close(): void;
};

export type WebSocketFactory = (url: string) => WebSocketLike;

export type ConnectionState = "connecting" | "connected" | "reconnecting" | "closed";

export interface ClientEvents {
  onHello?: (hello: Extract<ServerText, { type: "hello" }>) => void;
  onFrame?: (frame: ParsedFrame) => void;
  onAck?: (basedOnSeq: number) => void;
  onErrorReply?: (detail: string) => void;
  onState?: (state: ConnectionState) => void;
}

export class GatewayClient {
  readonly url: string;
  droppedFrames = 0;
  framesReceived = 0;
  private latest: ParsedFrame | null = null;
  private latestConsumed = true;
  private ws: WebSocketLike | null = null;
  private closed = false;
  private reconnectDelayMs = 250;
  private readonly factory: WebSocketFactory;
  private readonly events: ClientEvents;

  constructor(url: string, events: ClientEvents = {}, factory?: WebSocketFactory) {
    this.url = url;
    this.events = events;
    this.factory =
      factory ??
      ((u: string) => new (globalThis as never as { WebSocket: new (url: string) => WebSocketLike }).WebSocket(u));
  }

  connect(): void {
    this.events.onState?.("connecting");
    this.open();
  }

  private open(): void {
    const ws = this.factory(this.url);
    ws.binaryType = "arraybuffer";
    ws.onopen = () => {
      this.reconnectDelayMs = 250;
      this.events.onState?.("connected");
    };
    ws.onmessage = (ev) => this.handleMessage(ev.data);
    ws.onclose = () => {
      if (this.closed) return;
      this.events.onState?.("reconnecting");
      setTimeout(() => {
        if (!this.closed) this.open();
      }, this.reconnectDelayMs);
      this.reconnectDelayMs = Math.min(this.reconnectDelayMs * 2, 5000);
    };
    ws.onerror = () => {
      /* onclose follows */
    };
    this.ws = ws;
  }

  private pendingBinary: ArrayBuffer | null = null;
  private parsing = false;

  private handleMessage(data: unknown): void {
    if (typeof data === "string") {
      // Control messages are tiny and synchronous; handle in order.
      const msg = parseServerText(data);
      if (msg.type === "hello") this.events.onHello?.(msg);
      else if (msg.type === "ack") this.events.onAck?.(msg.based_on_seq);
      else this.events.onErrorReply?.(msg.detail);
      return;
    }
    let buffer: ArrayBuffer;
    if (data instanceof ArrayBuffer) {
      buffer = data;
    } else if (ArrayBuffer.isView(data as ArrayBufferView)) {
      const view = data as ArrayBufferView;
      buffer = view.buffer.slice(
        view.byteOffset,
        view.byteOffset + view.byteLength,
      ) as ArrayBuffer;
    } else {
      return;
    }
    // Intake is counted at arrival; decoding never blocks the stream.
    // If a frame is still being decoded, the queued one is replaced
    // newest-wins and the visible drop counter ticks.
    this.framesReceived++;
    if (this.pendingBinary !== null) {
      this.droppedFrames++;
    }
    this.pendingBinary = buffer;
    void this.drainBinary();
  }

  private async drainBinary(): Promise<void> {
    if (this.parsing) return;
    this.parsing = true;
    try {
      while (this.pendingBinary !== null) {
        const buffer = this.pendingBinary;
        this.pendingBinary = null;
        try {
          const frame = await parseGatewayFrame(buffer);
          if (!this.latestConsumed && this.latest !== null) {
            this.droppedFrames++; // render loop never saw the old one
          }
          this.latest = frame;
          this.latestConsumed = false;
          this.events.onFrame?.(frame);
        } catch {
          // Malformed push: drop it, keep the stream alive.
        }
      }
    } finally {
      this.parsing = false;
    }
  }

  /** Latest unconsumed frame, or null; marks it consumed. */
  takeLatest(): ParsedFrame | null {
    if (this.latestConsumed) return null;
    this.latestConsumed = true;
    return this.latest;
  }

  peekLatest(): ParsedFrame | null {
    return this.latest;
  }

  sendFeedback(fb: UiFeedback): void {
    if (this.ws === null) throw new Error("not connected");
    this.ws.send(serializeFeedback(fb));
  }

  close(): void {
    this.closed = true;
    this.events.onState?.("closed");
    this.ws?.close();
  }
}
