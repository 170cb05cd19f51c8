/**
 * Gateway wire protocol: binary frame pushes and JSON feedback.
 *
 * Binary frame layout (little-endian), mirroring the gateway:
 *
 *   magic "SGF1" (4) | seq u64 | capture_timestamp_us u64 |
 *   width u16 | height u16 | disp_codec u8 | rgb_len u32 | rgb payload |
 *   disp_len u32 | disparity payload
 *
 * The disparity payload is a u16-per-pixel raster (8.8 fixed point,
 * 0 = invalid), raw when disp_codec is 0 and zlib-deflated when 1.
 *
 * Feedback documents are validated against the same schema the gateway
 * enforces, so a structurally invalid message can never leave the UI.
 */

import { z } from "zod";

export const GATEWAY_MAGIC = 0x31464753; // "SGF1" read as LE u32
export const DISP_RAW = 0;
export const DISP_ZLIB = 1;

export interface ParsedFrame {
  seq: number;
  captureTimestampUs: number;
  width: number;
  height: number;
  rgbPayload: Uint8Array;
  /** 8.8 fixed-point disparity per pixel, row-major; 0 marks invalid. */
  disparityU16: Uint16Array;
}

export class ProtocolError extends Error {}

async function inflate(data: Uint8Array): Promise<Uint8Array<ArrayBuffer>> {
  const stream = new Blob([data.buffer as ArrayBuffer])
    .stream()
    .pipeThrough(new DecompressionStream("deflate"));
  const chunks: Uint8Array[] = [];
  const reader = stream.getReader();
  for (;;) {
    const { done, value } = await reader.read();
    if (done) break;
    chunks.push(value);
  }
  const total = chunks.reduce((n, c) => n + c.length, 0);
  const out = new Uint8Array(total);
  let off = 0;
  for (const chunk of chunks) {
    out.set(chunk, off);
    off += chunk.length;
  }
  return out;
}

export async function parseGatewayFrame(
  buffer: ArrayBuffer,
): Promise<ParsedFrame> {
  const view = new DataView(buffer);
  const headSize = 4 + 8 + 8 + 2 + 2 + 1;
  if (buffer.byteLength < headSize + 8) {
    throw new ProtocolError("gateway frame too short");
  }
  if (view.getUint32(0, true) !== GATEWAY_MAGIC) {
    throw new ProtocolError("bad gateway magic");
  }
  const seq = Number(view.getBigUint64(4, true));
  const captureTimestampUs = Number(view.getBigUint64(12, true));
  const width = view.getUint16(20, true);
  const height = view.getUint16(22, true);
  const dispCodec = view.getUint8(24);
  let off = headSize;
  const rgbLen = view.getUint32(off, true);
  off += 4;
  if (off + rgbLen + 4 > buffer.byteLength) {
    throw new ProtocolError("rgb length inconsistent");
  }
  const rgbPayload = new Uint8Array(buffer, off, rgbLen).slice();
  off += rgbLen;
  const dispLen = view.getUint32(off, true);
  off += 4;
  if (off + dispLen !== buffer.byteLength) {
    throw new ProtocolError("disparity length inconsistent");
  }
  let raster = new Uint8Array(buffer, off, dispLen).slice();
  if (dispCodec === DISP_ZLIB) {
    try {
      raster = await inflate(raster);
    } catch (err) {
      throw new ProtocolError(`disparity stream corrupt: ${String(err)}`);
    }
  } else if (dispCodec !== DISP_RAW) {
    throw new ProtocolError(`unknown disparity codec ${dispCodec}`);
  }
  if (raster.length !== width * height * 2) {
    throw new ProtocolError("disparity raster size mismatch");
  }
  const disparityU16 = new Uint16Array(raster.buffer, 0, width * height);
  return { seq, captureTimestampUs, width, height, rgbPayload, disparityU16 };
}

// ---------------------------------------------------------------------------
// JSON messages
// ---------------------------------------------------------------------------

export const HelloSchema = z.object({
  type: z.literal("hello"),
  version: z.number(),
  width: z.number().int().nonnegative(),
  height: z.number().int().nonnegative(),
  f: z.number(),
  b: z.number(),
  cx: z.number(),
  cy: z.number(),
  disparity_prescale: z.number().positive(),
});
export type GatewayHello = z.infer<typeof HelloSchema>;

export const AckSchema = z.object({
  type: z.literal("ack"),
  based_on_seq: z.number().int().nonnegative(),
});

export const ErrorReplySchema = z.object({
  type: z.literal("error"),
  detail: z.string(),
});

export const ServerTextSchema = z.discriminatedUnion("type", [
  HelloSchema,
  AckSchema,
  ErrorReplySchema,
]);
export type ServerText = z.infer<typeof ServerTextSchema>;

export function parseServerText(text: string): ServerText {
  return ServerTextSchema.parse(JSON.parse(text));
}

const finite = z.number().refine(Number.isFinite, "must be finite");

export const UiFeedbackSchema = z
  .object({
    m: z.union([z.literal(0), z.literal(1)]),
    i: z.union([z.literal(0), z.literal(1), z.literal(2)]).default(0),
    stroke_id: z.number().int().min(0).max(0xffff).default(0),
    yaw: finite.default(0),
    pitch: finite.default(0),
    roll: finite.default(0),
    x: finite.default(0),
    y: finite.default(0),
    z: finite.default(0),
  })
  .refine(
    (fb) =>
      fb.m === 1 ||
      (fb.yaw === 0 && fb.pitch === 0 && fb.roll === 0 &&
        fb.x === 0 && fb.y === 0 && fb.z === 0),
    { message: "clear (m=0) must carry a zero pose" },
  );
export type UiFeedback = z.infer<typeof UiFeedbackSchema>;

export function pointerFeedback(point: readonly number[]): UiFeedback {
  return UiFeedbackSchema.parse({
    m: 1,
    i: 0,
    x: point[0],
    y: point[1],
    z: point[2],
  });
}

export function needleFeedback(
  yaw: number,
  pitch: number,
  roll: number,
  position: readonly number[],
): UiFeedback {
  return UiFeedbackSchema.parse({
    m: 1,
    i: 1,
    yaw,
    pitch,
    roll,
    x: position[0],
    y: position[1],
    z: position[2],
  });
}

export function strokeFeedback(
  strokeId: number,
  vertex: readonly number[],
): UiFeedback {
  return UiFeedbackSchema.parse({
    m: 1,
    i: 2,
    stroke_id: strokeId,
    x: vertex[0],
    y: vertex[1],
    z: vertex[2],
  });
}

export function clearFeedback(): UiFeedback {
  return UiFeedbackSchema.parse({ m: 0 });
}

export function serializeFeedback(fb: UiFeedback): string {
  return JSON.stringify(UiFeedbackSchema.parse(fb));
}
