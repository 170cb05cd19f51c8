/**
 * Binary frame parser and feedback schema tests. The reference frame
 * bytes are constructed independently with a DataView, mirroring the
 * documented little-endian layout.
 */

import { describe, expect, it } from "vitest";

import {
  ProtocolError,
  UiFeedbackSchema,
  clearFeedback,
  needleFeedback,
  parseGatewayFrame,
  parseServerText,
  pointerFeedback,
  serializeFeedback,
  strokeFeedback,
} from "../src/protocol.js";

async function deflate(data: Uint8Array): Promise<Uint8Array> {
  const stream = new Blob([data.buffer as ArrayBuffer])
    .stream()
    .pipeThrough(new CompressionStream("deflate"));
  return new Uint8Array(await new Response(stream).arrayBuffer());
}

async function buildFrame(
  seq: number,
  captureUs: number,
  width: number,
  height: number,
  rgb: Uint8Array,
  disparity: Uint16Array,
  codec: number = 0,
): Promise<ArrayBuffer> {
  const raw = new Uint8Array(disparity.length * 2);
  const rawView = new DataView(raw.buffer);
  for (let i = 0; i < disparity.length; i++) {
    rawView.setUint16(i * 2, disparity[i], true);
  }
  const payload = codec === 1 ? await deflate(raw) : raw;
  const headSize = 25;
  const total = headSize + 4 + rgb.length + 4 + payload.length;
  const buf = new ArrayBuffer(total);
  const view = new DataView(buf);
  view.setUint8(0, 0x53); // S
  view.setUint8(1, 0x47); // G
  view.setUint8(2, 0x46); // F
  view.setUint8(3, 0x31); // 1
  view.setBigUint64(4, BigInt(seq), true);
  view.setBigUint64(12, BigInt(captureUs), true);
  view.setUint16(20, width, true);
  view.setUint16(22, height, true);
  view.setUint8(24, codec);
  let off = headSize;
  view.setUint32(off, rgb.length, true);
  off += 4;
  new Uint8Array(buf, off, rgb.length).set(rgb);
  off += rgb.length;
  view.setUint32(off, payload.length, true);
  off += 4;
  new Uint8Array(buf, off, payload.length).set(payload);
  return buf;
}

describe("parseGatewayFrame", () => {
  const rgb = new Uint8Array([0xff, 0xd8, 1, 2, 3]);
  const disparity = new Uint16Array([0, 256, 2048, 65535, 0, 384]);

  it("round-trips an independently built raw frame", async () => {
    const frame = await parseGatewayFrame(
      await buildFrame(7, 123456789, 3, 2, rgb, disparity),
    );
    expect(frame.seq).toBe(7);
    expect(frame.captureTimestampUs).toBe(123456789);
    expect(frame.width).toBe(3);
    expect(frame.height).toBe(2);
    expect(Array.from(frame.rgbPayload)).toEqual([0xff, 0xd8, 1, 2, 3]);
    expect(Array.from(frame.disparityU16)).toEqual([0, 256, 2048, 65535, 0, 384]);
  });

  it("round-trips a zlib-deflated frame", async () => {
    const frame = await parseGatewayFrame(
      await buildFrame(9, 55, 3, 2, rgb, disparity, 1),
    );
    expect(frame.seq).toBe(9);
    expect(Array.from(frame.disparityU16)).toEqual([0, 256, 2048, 65535, 0, 384]);
  });

  it("rejects bad magic", async () => {
    const buf = await buildFrame(1, 0, 3, 2, rgb, disparity);
    new Uint8Array(buf)[0] = 0x58;
    await expect(parseGatewayFrame(buf)).rejects.toThrow(ProtocolError);
  });

  it("rejects truncation and trailing bytes", async () => {
    const buf = await buildFrame(1, 0, 3, 2, rgb, disparity);
    await expect(parseGatewayFrame(buf.slice(0, 10))).rejects.toThrow(
      ProtocolError,
    );
    await expect(
      parseGatewayFrame(buf.slice(0, buf.byteLength - 1)),
    ).rejects.toThrow(ProtocolError);
    const longer = new Uint8Array(buf.byteLength + 1);
    longer.set(new Uint8Array(buf));
    await expect(parseGatewayFrame(longer.buffer)).rejects.toThrow(
      ProtocolError,
    );
  });

  it("rejects a disparity raster that does not match the dimensions", async () => {
    const buf = await buildFrame(1, 0, 4, 2, rgb, disparity); // 4*2 != 6
    await expect(parseGatewayFrame(buf)).rejects.toThrow(ProtocolError);
  });

  it("rejects an unknown disparity codec", async () => {
    const buf = await buildFrame(1, 0, 3, 2, rgb, disparity);
    new Uint8Array(buf)[24] = 9;
    await expect(parseGatewayFrame(buf)).rejects.toThrow(ProtocolError);
  });
});

describe("feedback schema", () => {
  it("builds valid pointer/needle/stroke/clear documents", () => {
    expect(pointerFeedback([0.02, 0.02, 0.1])).toMatchObject({
      m: 1,
      i: 0,
      x: 0.02,
      z: 0.1,
    });
    expect(needleFeedback(0.5, 0, 0, [0, 0, 0.2])).toMatchObject({
      m: 1,
      i: 1,
      yaw: 0.5,
    });
    expect(strokeFeedback(9, [0, 0, 0.2])).toMatchObject({
      m: 1,
      i: 2,
      stroke_id: 9,
    });
    expect(clearFeedback()).toMatchObject({ m: 0, x: 0, yaw: 0 });
  });

  it.each([
    [{}],
    [{ m: 2 }],
    [{ m: 1, i: 9 }],
    [{ m: 1, i: 0, stroke_id: 70000 }],
    [{ m: 1, i: 0, x: Number.POSITIVE_INFINITY }],
    [{ m: 0, z: 0.5 }],
  ])("rejects invalid document %j", (doc) => {
    expect(() => UiFeedbackSchema.parse(doc)).toThrow();
  });

  it("serializes to the gateway JSON shape", () => {
    const doc = JSON.parse(serializeFeedback(pointerFeedback([1, 2, 3])));
    expect(doc).toEqual({
      m: 1, i: 0, stroke_id: 0, yaw: 0, pitch: 0, roll: 0, x: 1, y: 2, z: 3,
    });
  });
});

describe("server text messages", () => {
  it("parses hello, ack and error replies", () => {
    const hello = parseServerText(
      JSON.stringify({
        type: "hello", version: 1, width: 640, height: 512,
        f: 800, b: 0.005, cx: 320, cy: 256, disparity_prescale: 1,
      }),
    );
    expect(hello.type).toBe("hello");
    expect(parseServerText('{"type":"ack","based_on_seq":5}').type).toBe("ack");
    expect(parseServerText('{"type":"error","detail":"x"}').type).toBe("error");
    expect(() => parseServerText('{"type":"nope"}')).toThrow();
  });
});
