/** PNG/JPEG decoding and bilinear resizing to a square RGB buffer. */

import jpeg from 'jpeg-js';
import { PNG } from 'pngjs';

export interface RgbImage {
  width: number;
  height: number;
  /** Row-major RGB, 3 floats per pixel in [0, 255]. */
  data: Float64Array;
}

export class DecodeError extends Error {}

export function decodeImage(buf: Buffer, filename: string): RgbImage {
  const lower = filename.toLowerCase();
  try {
    if (lower.endsWith('.png')) {
      const png = PNG.sync.read(buf);
      return fromRgba(png.data, png.width, png.height);
    }
    if (lower.endsWith('.jpg') || lower.endsWith('.jpeg')) {
      const img = jpeg.decode(buf, { useTArray: true, maxMemoryUsageInMB: 64 });
      return fromRgba(img.data, img.width, img.height);
    }
  } catch (e) {
    throw new DecodeError(`cannot decode ${filename}: ${(e as Error).message}`);
  }
  throw new DecodeError(`unsupported image type: ${filename}`);
}

function fromRgba(rgba: Uint8Array | Buffer, width: number, height: number): RgbImage {
  const data = new Float64Array(width * height * 3);
  for (let p = 0; p < width * height; p++) {
    data[p * 3] = rgba[p * 4];
    data[p * 3 + 1] = rgba[p * 4 + 1];
    data[p * 3 + 2] = rgba[p * 4 + 2];
  }
  return { width, height, data };
}

export function resizeBilinear(img: RgbImage, size: number): RgbImage {
  if (img.width === size && img.height === size) {
    return img;
  }
  const out = new Float64Array(size * size * 3);
  const sx = img.width / size;
  const sy = img.height / size;
  for (let y = 0; y < size; y++) {
    const fy = Math.min((y + 0.5) * sy - 0.5, img.height - 1);
    const y0 = Math.max(Math.floor(fy), 0);
    const y1 = Math.min(y0 + 1, img.height - 1);
    const wy = fy - y0;
    for (let x = 0; x < size; x++) {
      const fx = Math.min((x + 0.5) * sx - 0.5, img.width - 1);
      const x0 = Math.max(Math.floor(fx), 0);
      const x1 = Math.min(x0 + 1, img.width - 1);
      const wx = fx - x0;
      for (let c = 0; c < 3; c++) {
        const v00 = img.data[(y0 * img.width + x0) * 3 + c];
        const v01 = img.data[(y0 * img.width + x1) * 3 + c];
        const v10 = img.data[(y1 * img.width + x0) * 3 + c];
        const v11 = img.data[(y1 * img.width + x1) * 3 + c];
        const top = v00 + (v01 - v00) * wx;
        const bot = v10 + (v11 - v10) * wx;
        out[(y * size + x) * 3 + c] = top + (bot - top) * wy;
      }
    }
  }
  return { width: size, height: size, data: out };
}
