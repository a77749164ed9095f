/**
 * Frozen image encoders.
 *
 * The built-in encoder mirrors the shape of a patch-16 vision transformer
 * stem: the image is cut into 16x16 patches, patches are pooled with fixed
 * position weights, projected through a frozen random matrix, squashed and
 * L2-normalized.  All weights derive from a seeded PRNG, so the encoder is
 * deterministic across processes and machines; swap in a real pretrained
 * model by registering another Encoder with the same interface.
 */

import { RgbImage } from './image.js';

export interface Encoder {
  id: string;
  width: number;
  inputSize: number;
  encode(img: RgbImage): Float32Array;
}

/** mulberry32: tiny deterministic PRNG, good enough for frozen weights. */
function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function gaussians(n: number, rand: () => number): Float64Array {
  const out = new Float64Array(n);
  for (let i = 0; i < n; i += 2) {
    const u = Math.max(rand(), 1e-12);
    const v = rand();
    const r = Math.sqrt(-2 * Math.log(u));
    out[i] = r * Math.cos(2 * Math.PI * v);
    if (i + 1 < n) {
      out[i + 1] = r * Math.sin(2 * Math.PI * v);
    }
  }
  return out;
}

class PatchProjectionEncoder implements Encoder {
  readonly id: string;
  readonly width: number;
  readonly inputSize: number;
  private readonly patch = 16;
  private readonly projection: Float64Array; // (patchDim, width)
  private readonly positionWeights: Float64Array;

  constructor(width: number, inputSize = 256, seed = 0x1f2e3d4c) {
    this.id = `patch16-proj-${width}`;
    this.width = width;
    this.inputSize = inputSize;
    const patchDim = this.patch * this.patch * 3;
    const rand = mulberry32(seed ^ width);
    const scale = 1 / Math.sqrt(patchDim);
    this.projection = gaussians(patchDim * width, rand);
    for (let i = 0; i < this.projection.length; i++) {
      this.projection[i] *= scale;
    }
    const grid = inputSize / this.patch;
    this.positionWeights = new Float64Array(grid * grid);
    for (let i = 0; i < grid * grid; i++) {
      this.positionWeights[i] = 0.5 + rand();
    }
  }

  encode(img: RgbImage): Float32Array {
    if (img.width !== this.inputSize || img.height !== this.inputSize) {
      throw new Error(`encoder expects ${this.inputSize}x${this.inputSize} input`);
    }
    const grid = this.inputSize / this.patch;
    const patchDim = this.patch * this.patch * 3;
    const pooled = new Float64Array(patchDim);
    let weightSum = 0;
    for (let gy = 0; gy < grid; gy++) {
      for (let gx = 0; gx < grid; gx++) {
        const w = this.positionWeights[gy * grid + gx];
        weightSum += w;
        let k = 0;
        for (let py = 0; py < this.patch; py++) {
          const row = (gy * this.patch + py) * this.inputSize + gx * this.patch;
          for (let px = 0; px < this.patch; px++) {
            const base = (row + px) * 3;
            // pixel channels scaled to [-1, 1]
            pooled[k++] += w * (img.data[base] / 127.5 - 1);
            pooled[k++] += w * (img.data[base + 1] / 127.5 - 1);
            pooled[k++] += w * (img.data[base + 2] / 127.5 - 1);
          }
        }
      }
    }
    for (let i = 0; i < patchDim; i++) {
      pooled[i] /= weightSum;
    }

    const out = new Float64Array(this.width);
    for (let i = 0; i < patchDim; i++) {
      const x = pooled[i];
      if (x === 0) continue;
      const rowOff = i * this.width;
      for (let j = 0; j < this.width; j++) {
        out[j] += x * this.projection[rowOff + j];
      }
    }
    let norm = 0;
    for (let j = 0; j < this.width; j++) {
      out[j] = Math.tanh(out[j] * 8);
      norm += out[j] * out[j];
    }
    norm = Math.sqrt(norm) || 1;
    const f32 = new Float32Array(this.width);
    for (let j = 0; j < this.width; j++) {
      f32[j] = out[j] / norm;
    }
    return f32;
  }
}

const REGISTRY = new Map<string, () => Encoder>([
  ['patch16-proj-512', () => new PatchProjectionEncoder(512)],
  ['patch16-proj-256', () => new PatchProjectionEncoder(256)],
]);

export function getEncoder(id: string): Encoder {
  const make = REGISTRY.get(id);
  if (!make) {
    throw new Error(`unknown encoder ${id}; known: ${[...REGISTRY.keys()].join(', ')}`);
  }
  return make();
}

export function registerEncoder(id: string, make: () => Encoder): void {
  REGISTRY.set(id, make);
}
