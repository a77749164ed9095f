/**
 * IFAB feature file writer/reader, byte-compatible with the attribution engine.
 *
 * Layout (little-endian):
 *   header, 24 bytes: magic "IFAB", u32 version (1), u32 dim, u64 count, u32 flags
 *   records: u32 class_id, u32 family_id, dim * f32
 */

import * as fs from 'node:fs';

export const IFAB_MAGIC = 'IFAB';
export const IFAB_VERSION = 1;
export const HEADER_BYTES = 24;

export interface FeatureRecord {
  classId: number;
  familyId: number;
  feature: Float32Array;
}

export function writeFeatures(path: string, dim: number, records: FeatureRecord[]): void {
  const recordBytes = 8 + 4 * dim;
  const buf = Buffer.alloc(HEADER_BYTES + recordBytes * records.length);
  buf.write(IFAB_MAGIC, 0, 'ascii');
  buf.writeUInt32LE(IFAB_VERSION, 4);
  buf.writeUInt32LE(dim, 8);
  buf.writeBigUInt64LE(BigInt(records.length), 12);
  buf.writeUInt32LE(0, 20);
  let off = HEADER_BYTES;
  for (const rec of records) {
    if (rec.feature.length !== dim) {
      throw new Error(`feature width ${rec.feature.length} does not match dim ${dim}`);
    }
    buf.writeUInt32LE(rec.classId, off);
    buf.writeUInt32LE(rec.familyId, off + 4);
    for (let i = 0; i < dim; i++) {
      buf.writeFloatLE(rec.feature[i], off + 8 + 4 * i);
    }
    off += recordBytes;
  }
  fs.writeFileSync(path, buf);
}

export function readFeatures(path: string): { dim: number; records: FeatureRecord[] } {
  const buf = fs.readFileSync(path);
  if (buf.length < HEADER_BYTES) {
    throw new Error(`truncated feature file: ${buf.length} bytes`);
  }
  if (buf.toString('ascii', 0, 4) !== IFAB_MAGIC) {
    throw new Error('bad magic');
  }
  const version = buf.readUInt32LE(4);
  if (version !== IFAB_VERSION) {
    throw new Error(`unsupported version ${version}`);
  }
  const dim = buf.readUInt32LE(8);
  const count = Number(buf.readBigUInt64LE(12));
  const recordBytes = 8 + 4 * dim;
  if (buf.length !== HEADER_BYTES + recordBytes * count) {
    throw new Error(`size mismatch: ${buf.length} bytes for ${count} records of dim ${dim}`);
  }
  const records: FeatureRecord[] = [];
  let off = HEADER_BYTES;
  for (let r = 0; r < count; r++) {
    const feature = new Float32Array(dim);
    for (let i = 0; i < dim; i++) {
      feature[i] = buf.readFloatLE(off + 8 + 4 * i);
    }
    records.push({
      classId: buf.readUInt32LE(off),
      familyId: buf.readUInt32LE(off + 4),
      feature,
    });
    off += recordBytes;
  }
  return { dim, records };
}
