/**
 * Extraction job runner: encode tagged image directories into IFAB feature
 * files plus a manifest the attribution engine loads directly.
 */

import * as fs from 'node:fs';
import * as path from 'node:path';

import { Encoder, getEncoder } from './encoder.js';
import { writeFeatures } from './ifab.js';
import { DecodeError, decodeImage, resizeBilinear } from './image.js';

export type Role = 'real' | 'generator' | 'unseen_holdout';

export interface JobClass {
  name: string;
  family: string;
  release_date: string;
  role: Role;
  train_dir?: string;
  test_dir: string;
  calib_dir?: string;
}

export interface ExtractionJob {
  encoder?: string;
  resize?: number;
  batch_size?: number;
  classes: JobClass[];
}

export interface ExtractionResult {
  manifestPath: string;
  dim: number;
  encoded: number;
  skipped: string[];
}

const IMAGE_EXTENSIONS = new Set(['.png', '.jpg', '.jpeg']);

export function loadJob(specPath: string): ExtractionJob {
  const job = JSON.parse(fs.readFileSync(specPath, 'utf-8')) as ExtractionJob;
  if (!Array.isArray(job.classes) || job.classes.length === 0) {
    throw new Error('job spec needs a non-empty classes list');
  }
  for (const cls of job.classes) {
    for (const key of ['name', 'family', 'release_date', 'role'] as const) {
      if (!cls[key]) {
        throw new Error(`job class is missing ${key}`);
      }
    }
    if (!cls.test_dir) {
      throw new Error(`class ${cls.name}: test_dir is required`);
    }
  }
  return job;
}

function listImages(dir: string): string[] {
  return fs
    .readdirSync(dir)
    .filter((f) => IMAGE_EXTENSIONS.has(path.extname(f).toLowerCase()))
    .sort()
    .map((f) => path.join(dir, f));
}

function encodeDirectory(
  dir: string,
  encoder: Encoder,
  resize: number,
  classId: number,
  familyId: number,
  skipped: string[],
  log: (msg: string) => void,
): { classId: number; familyId: number; feature: Float32Array }[] {
  const records = [];
  for (const file of listImages(dir)) {
    let feature: Float32Array;
    try {
      const img = decodeImage(fs.readFileSync(file), file);
      feature = encoder.encode(resizeBilinear(img, resize));
    } catch (e) {
      if (e instanceof DecodeError) {
        skipped.push(file);
        log(`skip ${file}: ${e.message}`);
        continue;
      }
      throw e;
    }
    records.push({ classId, familyId, feature });
  }
  return records;
}

export function runExtraction(
  job: ExtractionJob,
  outDir: string,
  log: (msg: string) => void = console.error,
): ExtractionResult {
  const encoder = getEncoder(job.encoder ?? 'patch16-proj-512');
  const resize = job.resize ?? encoder.inputSize;
  if (resize !== encoder.inputSize) {
    throw new Error(`encoder ${encoder.id} expects ${encoder.inputSize}px input, got resize=${resize}`);
  }
  fs.mkdirSync(outDir, { recursive: true });

  const familyIds = new Map<string, number>();
  for (const cls of job.classes) {
    if (!familyIds.has(cls.family)) {
      familyIds.set(cls.family, familyIds.size);
    }
  }

  const skipped: string[] = [];
  let encoded = 0;
  const manifestClasses: Record<string, string>[] = [];
  job.classes.forEach((cls, classId) => {
    const familyId = familyIds.get(cls.family)!;
    const entry: Record<string, string> = {
      name: cls.name,
      family: cls.family,
      release_date: cls.release_date,
      role: cls.role,
    };
    const splits: [string, string | undefined][] = [
      ['train', cls.train_dir],
      ['test', cls.test_dir],
      ['calib', cls.calib_dir],
    ];
    for (const [split, dir] of splits) {
      if (!dir) continue;
      const records = encodeDirectory(dir, encoder, resize, classId, familyId, skipped, log);
      if (records.length === 0) {
        throw new Error(`class ${cls.name}: no decodable images in ${dir}`);
      }
      const fname = `${cls.name}.${split}.ifab`;
      writeFeatures(path.join(outDir, fname), encoder.width, records);
      entry[split] = fname;
      encoded += records.length;
    }
    manifestClasses.push(entry);
  });

  const manifest = {
    classes: manifestClasses,
    metadata: { encoder: encoder.id, dim: encoder.width, resize },
  };
  const manifestPath = path.join(outDir, 'manifest.json');
  fs.writeFileSync(manifestPath, JSON.stringify(manifest, null, 1) + '\n');
  return { manifestPath, dim: encoder.width, encoded, skipped };
}
