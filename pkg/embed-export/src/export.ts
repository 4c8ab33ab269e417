/**
 * Export pipeline: image dataset -> fixed-model features -> EMB1 file.
 *
 * Exported rows keep the dataset's canonical sample order, and all three
 * label arrays equal the dataset labels: corruption is the cleanup engine's
 * job, never the exporter's.
 */

import * as tf from '@tensorflow/tfjs'
import { join } from 'path'
import { existsSync } from 'fs'

import { writeEmb1 } from './emb1.js'
import { readImageSet, ImageSet } from './idx.js'
import { buildExtractor } from './model.js'

export interface ExportSpec {
  /** 'mnist' (standard IDX file names under dataDir) or 'idx' (explicit paths) */
  dataset: string
  dataDir: string
  imagesFile?: string
  labelsFile?: string
  model: string
  layer?: string
  out: string
  batchSize: number
  device: string
  /** cap on exported rows, for smoke runs */
  limit?: number
}

export const DEFAULT_SPEC = {
  dataset: 'mnist',
  model: 'fixed-conv-v1',
  layer: 'penultimate',
  batchSize: 256,
  device: 'cpu',
} as const

const MNIST_FILES = {
  images: ['train-images-idx3-ubyte', 'train-images.idx3-ubyte'],
  labels: ['train-labels-idx1-ubyte', 'train-labels.idx1-ubyte'],
}

function findFile(dir: string, candidates: string[]): string {
  for (const name of candidates) {
    for (const suffix of ['', '.gz']) {
      const path = join(dir, name + suffix)
      if (existsSync(path)) return path
    }
  }
  throw new Error(`none of ${candidates.join(', ')}[.gz] found under ${dir}`)
}

export function loadImages(spec: ExportSpec): ImageSet {
  if (spec.dataset === 'mnist') {
    return readImageSet(
      findFile(spec.dataDir, MNIST_FILES.images),
      findFile(spec.dataDir, MNIST_FILES.labels),
    )
  }
  if (spec.dataset === 'idx') {
    if (!spec.imagesFile || !spec.labelsFile) {
      throw new Error("dataset 'idx' needs imagesFile and labelsFile")
    }
    return readImageSet(join(spec.dataDir, spec.imagesFile), join(spec.dataDir, spec.labelsFile))
  }
  throw new Error(`unknown dataset ${JSON.stringify(spec.dataset)}; known: mnist, idx`)
}

export interface ExportResult {
  n: number
  d: number
  numClasses: number
  path: string
}

export async function runExport(spec: ExportSpec): Promise<ExportResult> {
  await tf.setBackend(spec.device === 'cpu' ? 'cpu' : spec.device)

  const images = loadImages(spec)
  const n = spec.limit ? Math.min(spec.limit, images.n) : images.n
  const labels = images.labels.slice(0, n)
  const numClasses = Math.max(2, 1 + labels.reduce((a, b) => Math.max(a, b), 0))

  const extractor = buildExtractor({
    model: spec.model,
    layer: spec.layer,
    height: images.height,
    width: images.width,
  })

  const pixelsPerImage = images.height * images.width
  const features = new Float32Array(n * extractor.outputDim)
  for (let start = 0; start < n; start += spec.batchSize) {
    const count = Math.min(spec.batchSize, n - start)
    const batchPixels = new Float32Array(count * pixelsPerImage)
    const base = start * pixelsPerImage
    for (let i = 0; i < batchPixels.length; i++) {
      batchPixels[i] = images.pixels[base + i] / 255
    }
    const batch = tf.tensor4d(batchPixels, [count, images.height, images.width, 1])
    const out = extractor.extract(batch)
    features.set(await out.data<'float32'>(), start * extractor.outputDim)
    batch.dispose()
    out.dispose()
  }

  writeEmb1(spec.out, {
    n,
    d: extractor.outputDim,
    numClasses,
    data: features,
    noisyLabels: labels,
    currentLabels: labels,
    trueLabels: labels,
  })
  return { n, d: extractor.outputDim, numClasses, path: spec.out }
}
