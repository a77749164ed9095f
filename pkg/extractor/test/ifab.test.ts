import * as fs from 'node:fs';
import * as os from 'node:os';
import * as path from 'node:path';

import { describe, expect, it } from 'vitest';

import { HEADER_BYTES, readFeatures, writeFeatures } from '../src/ifab.js';

function tmpFile(name: string): string {
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), 'ifab-'));
  return path.join(dir, name);
}

describe('ifab format', () => {
  it('writes a 24-byte header for zero records', () => {
    const p = tmpFile('empty.ifab');
    writeFeatures(p, 5, []);
    expect(fs.statSync(p).size).toBe(HEADER_BYTES);
  });

  it('sizes files as header plus count * (8 + 4 * dim)', () => {
    const p = tmpFile('one.ifab');
    writeFeatures(p, 4, [{ classId: 0, familyId: 0, feature: new Float32Array(4) }]);
    expect(fs.statSync(p).size).toBe(24 + 8 + 16);
  });

  it('round-trips records exactly', () => {
    const p = tmpFile('rt.ifab');
    const feature = Float32Array.from([1.5, -0.25, 3.75]);
    writeFeatures(p, 3, [
      { classId: 7, familyId: 2, feature },
      { classId: 1, familyId: 0, feature: Float32Array.from([0, 0.5, -9]) },
    ]);
    const back = readFeatures(p);
    expect(back.dim).toBe(3);
    expect(back.records).toHaveLength(2);
    expect(back.records[0].classId).toBe(7);
    expect(back.records[0].familyId).toBe(2);
    expect([...back.records[0].feature]).toEqual([1.5, -0.25, 3.75]);
  });

  it('rejects width mismatches', () => {
    const p = tmpFile('bad.ifab');
    expect(() =>
      writeFeatures(p, 4, [{ classId: 0, familyId: 0, feature: new Float32Array(3) }]),
    ).toThrow(/width/);
  });

  it('rejects truncated files', () => {
    const p = tmpFile('trunc.ifab');
    writeFeatures(p, 2, [{ classId: 0, familyId: 0, feature: new Float32Array(2) }]);
    const data = fs.readFileSync(p);
    fs.writeFileSync(p, data.subarray(0, data.length - 3));
    expect(() => readFeatures(p)).toThrow(/mismatch|truncated/);
  });
});
