#!/usr/bin/env node
/** Command-line front end mirroring ExportSpec. */

import { parseArgs } from 'util'

import { DEFAULT_SPEC, runExport } from './export.js'

const HELP = `embed-export: write image features as an EMB1 dataset

  --dataset <mnist|idx>   dataset layout (default mnist)
  --data-dir <dir>        directory holding the IDX files (required)
  --images-file <name>    images file name (dataset=idx)
  --labels-file <name>    labels file name (dataset=idx)
  --model <name>          fixed-conv-v1 (default) or raw-pixels
  --layer <tag>           conv1 | conv2 | penultimate (default)
  --out <file>            output EMB1 path (required)
  --batch-size <n>        inference batch size (default 256)
  --device <tag>          tfjs backend (default cpu)
  --limit <n>             export only the first n samples
`

export async function main(argv: string[]): Promise<number> {
  let values
  try {
    values = parseArgs({
      args: argv,
      options: {
        dataset: { type: 'string', default: DEFAULT_SPEC.dataset },
        'data-dir': { type: 'string' },
        'images-file': { type: 'string' },
        'labels-file': { type: 'string' },
        model: { type: 'string', default: DEFAULT_SPEC.model },
        layer: { type: 'string', default: DEFAULT_SPEC.layer },
        out: { type: 'string' },
        'batch-size': { type: 'string', default: String(DEFAULT_SPEC.batchSize) },
        device: { type: 'string', default: DEFAULT_SPEC.device },
        limit: { type: 'string' },
        help: { type: 'boolean', default: false },
      },
    }).values
  } catch (error) {
    console.error((error as Error).message)
    return 2
  }
  if (values.help) {
    console.log(HELP)
    return 0
  }
  if (!values['data-dir'] || !values.out) {
    console.error('--data-dir and --out are required (see --help)')
    return 2
  }

  const spec = {
    dataset: values.dataset!,
    dataDir: values['data-dir'],
    imagesFile: values['images-file'],
    labelsFile: values['labels-file'],
    model: values.model!,
    layer: values.layer,
    out: values.out,
    batchSize: Number(values['batch-size']),
    device: values.device!,
    limit: values.limit ? Number(values.limit) : undefined,
  }
  console.log('export spec:')
  console.log(JSON.stringify(spec, Object.keys(spec).sort(), 2))

  try {
    const result = await runExport(spec)
    console.log(
      `wrote ${result.n} samples (${result.d}-d, ${result.numClasses} classes) to ${result.path}`,
    )
    return 0
  } catch (error) {
    console.error((error as Error).message)
    return 1
  }
}

const invokedDirectly =
  process.argv[1] && import.meta.url.endsWith(process.argv[1].split('/').pop()!)
if (invokedDirectly) {
  main(process.argv.slice(2)).then(code => {
    process.exitCode = code
  })
}
