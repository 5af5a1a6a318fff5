// Reader/writer for the WSTN tensor container: magic "WSTN", version u32,
// tensor count u32; per tensor a u16 name length, the UTF-8 name, a u8
// rank, u32 dims, then the row-major float32 payload. Little-endian.

import * as fs from "node:fs";

const MAGIC = "WSTN";
const VERSION = 1;

export interface Tensor {
  dims: number[];
  data: Float32Array;
}

export class TensorFormatError extends Error {}

export function readTensors(path: string): Map<string, Tensor> {
  const buf = fs.readFileSync(path);
  let off = 0;
  const need = (n: number, what: string) => {
    if (off + n > buf.length) {
      throw new TensorFormatError(`${path}: truncated while reading ${what}`);
    }
  };
  need(12, "header");
  if (buf.toString("ascii", 0, 4) !== MAGIC) {
    throw new TensorFormatError(`${path}: bad magic, not a tensor container`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== VERSION) {
    throw new TensorFormatError(`${path}: unsupported version ${version}`);
  }
  const count = buf.readUInt32LE(8);
  off = 12;
  const out = new Map<string, Tensor>();
  for (let i = 0; i < count; i++) {
    need(2, "name length");
    const nameLen = buf.readUInt16LE(off);
    off += 2;
    need(nameLen, "name");
    const name = buf.toString("utf8", off, off + nameLen);
    off += nameLen;
    need(1, "rank");
    const rank = buf.readUInt8(off);
    off += 1;
    const dims: number[] = [];
    need(4 * rank, `dims of ${name}`);
    for (let d = 0; d < rank; d++) {
      dims.push(buf.readUInt32LE(off));
      off += 4;
    }
    const items = dims.reduce((a, b) => a * b, 1);
    need(4 * items, `payload of ${name}`);
    // copy to a fresh buffer: the source offset may not be 4-byte aligned
    const bytes = new Uint8Array(buf.subarray(off, off + 4 * items));
    off += 4 * items;
    out.set(name, { dims, data: new Float32Array(bytes.buffer) });
  }
  return out;
}

export function writeTensors(
  path: string,
  tensors: Map<string, Tensor> | Record<string, Tensor>,
): void {
  const entries =
    tensors instanceof Map ? [...tensors.entries()] : Object.entries(tensors);
  const chunks: Buffer[] = [];
  const header = Buffer.alloc(12);
  header.write(MAGIC, 0, "ascii");
  header.writeUInt32LE(VERSION, 4);
  header.writeUInt32LE(entries.length, 8);
  chunks.push(header);
  for (const [name, tensor] of entries) {
    const nameBytes = Buffer.from(name, "utf8");
    const meta = Buffer.alloc(2 + nameBytes.length + 1 + 4 * tensor.dims.length);
    let off = 0;
    meta.writeUInt16LE(nameBytes.length, off);
    off += 2;
    nameBytes.copy(meta, off);
    off += nameBytes.length;
    meta.writeUInt8(tensor.dims.length, off);
    off += 1;
    for (const dim of tensor.dims) {
      meta.writeUInt32LE(dim, off);
      off += 4;
    }
    chunks.push(meta);
    chunks.push(
      Buffer.from(tensor.data.buffer, tensor.data.byteOffset,
                  tensor.data.byteLength),
    );
  }
  fs.writeFileSync(path, Buffer.concat(chunks));
}
