#!/usr/bin/env node
import yargs from 'yargs';
import { hideBin } from 'yargs/helpers';

import { loadJob, runExtraction } from './extract.js';

async function main() {
  const argv = await yargs(hideBin(process.argv))
    .command('extract', 'encode image directories into IFAB feature files', (y) =>
      y
        .option('spec', { type: 'string', demandOption: true, describe: 'job spec JSON' })
        .option('out', { type: 'string', demandOption: true, describe: 'output directory' })
        .option('encoder', { type: 'string', describe: 'override the encoder id' }),
    )
    .demandCommand(1)
    .strict()
    .parse();

  const job = loadJob(argv.spec as string);
  if (argv.encoder) {
    job.encoder = argv.encoder as string;
  }
  const result = runExtraction(job, argv.out as string);
  console.log(
    `encoded ${result.encoded} images at dim ${result.dim}` +
      (result.skipped.length ? `, skipped ${result.skipped.length}` : ''),
  );
  console.log(`manifest: ${result.manifestPath}`);
}

main().catch((e) => {
  console.error(e instanceof Error ? e.message : e);
  process.exit(1);
});
