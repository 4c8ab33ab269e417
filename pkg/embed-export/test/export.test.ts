import { describe, expect, test } from 'vitest'
import { execFileSync } from 'child_process'
import { createHash } from 'crypto'
import { existsSync, mkdtempSync, readFileSync, writeFileSync } from 'fs'
import { tmpdir } from 'os'
import { join } from 'path'

import { readEmb1 } from '../src/emb1.js'
import { encodeIdx } from '../src/idx.js'
import { ExportSpec, runExport } from '../src/export.js'

const HEIGHT = 8
const WIDTH = 8

/** Deterministic little PRNG so fixtures are stable across runs. */
function lcg(seed: number) {
  let state = seed >>> 0
  return () => {
    state = (state * 1664525 + 1013904223) >>> 0
    return state / 2 ** 32
  }
}

/**
 * Two visually distinct classes: vertical stripes (class 0) and horizontal
 * stripes (class 1), with per-pixel jitter. Labels interleave so exports must
 * preserve sample order to pass.
 */
function writeStripeFixture(dir: string, n: number) {
  const rand = lcg(7)
  const pixels = new Uint8Array(n * HEIGHT * WIDTH)
  const labels = new Uint8Array(n)
  for (let i = 0; i < n; i++) {
    const label = i % 2
    labels[i] = label
    for (let r = 0; r < HEIGHT; r++) {
      for (let c = 0; c < WIDTH; c++) {
        const stripe = label === 0 ? c % 2 : r % 2
        const base = stripe ? 220 : 30
        pixels[i * HEIGHT * WIDTH + r * WIDTH + c] = Math.min(
          255,
          Math.max(0, Math.round(base + 40 * (rand() - 0.5))),
        )
      }
    }
  }
  writeFileSync(join(dir, 'imgs.idx3-ubyte'), encodeIdx([n, HEIGHT, WIDTH], pixels))
  writeFileSync(join(dir, 'labs.idx1-ubyte'), encodeIdx([n], labels))
}

function stripeSpec(dir: string, out: string, overrides: Partial<ExportSpec> = {}): ExportSpec {
  return {
    dataset: 'idx',
    dataDir: dir,
    imagesFile: 'imgs.idx3-ubyte',
    labelsFile: 'labs.idx1-ubyte',
    model: 'fixed-conv-v1',
    layer: 'penultimate',
    out,
    batchSize: 32,
    device: 'cpu',
    ...overrides,
  }
}

function sha256(path: string) {
  return createHash('sha256').update(readFileSync(path)).digest('hex')
}

function haveCommand(cmd: string, args: string[]) {
  try {
    execFileSync(cmd, args, { stdio: 'ignore' })
    return true
  } catch {
    return false
  }
}

const havePrimary = haveCommand('knnclean', ['--help'])

describe('export pipeline', () => {
  test('synthetic export: shape, order, clean labels', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'exp-'))
    writeStripeFixture(dir, 40)
    const out = join(dir, 'features.emb1')
    const result = await runExport(stripeSpec(dir, out))
    expect(result.n).toBe(40)
    expect(result.d).toBe(32) // last conv block width
    expect(result.numClasses).toBe(2)

    const ds = readEmb1(out)
    expect(Array.from(ds.trueLabels!)).toEqual(
      Array.from({ length: 40 }, (_, i) => i % 2), // canonical order kept
    )
    expect(ds.noisyLabels).toEqual(ds.currentLabels)
    expect(ds.noisyLabels).toEqual(ds.trueLabels)
  }, 120_000)

  test('re-export is byte-identical', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'exp-'))
    writeStripeFixture(dir, 16)
    const a = join(dir, 'a.emb1')
    const b = join(dir, 'b.emb1')
    await runExport(stripeSpec(dir, a))
    await runExport(stripeSpec(dir, b))
    expect(sha256(a)).toBe(sha256(b))
  }, 120_000)

  test('features separate the classes', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'exp-'))
    writeStripeFixture(dir, 40)
    const out = join(dir, 'features.emb1')
    await runExport(stripeSpec(dir, out))
    const ds = readEmb1(out)

    // 1-nearest-neighbor consistency on the exported features
    let agree = 0
    for (let i = 0; i < ds.n; i++) {
      let best = -1
      let bestDist = Infinity
      for (let j = 0; j < ds.n; j++) {
        if (j === i) continue
        let dist = 0
        for (let c = 0; c < ds.d; c++) {
          const diff = ds.data[i * ds.d + c] - ds.data[j * ds.d + c]
          dist += diff * diff
        }
        if (dist < bestDist) {
          bestDist = dist
          best = j
        }
      }
      if (ds.trueLabels![best] === ds.trueLabels![i]) agree++
    }
    expect(agree / ds.n).toBeGreaterThanOrEqual(0.95)
  }, 120_000)

  test('raw-pixels model exports flattened images', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'exp-'))
    writeStripeFixture(dir, 8)
    const out = join(dir, 'raw.emb1')
    const result = await runExport(stripeSpec(dir, out, { model: 'raw-pixels' }))
    expect(result.d).toBe(HEIGHT * WIDTH)
  }, 120_000)

  test('limit caps the row count', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'exp-'))
    writeStripeFixture(dir, 40)
    const out = join(dir, 'few.emb1')
    const result = await runExport(stripeSpec(dir, out, { limit: 10 }))
    expect(result.n).toBe(10)
  }, 120_000)

  test('unknown layer tag fails', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'exp-'))
    writeStripeFixture(dir, 4)
    await expect(
      runExport(stripeSpec(dir, join(dir, 'x.emb1'), { layer: 'logits' })),
    ).rejects.toThrow(/layer tag/)
  }, 120_000)
})

describe.skipIf(!havePrimary)('integration with the cleanup engine', () => {
  test('exported file loads in the engine with matching header', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'exp-'))
    writeStripeFixture(dir, 40)
    const out = join(dir, 'features.emb1')
    await runExport(stripeSpec(dir, out))
    const info = JSON.parse(
      execFileSync('knnclean', ['inspect', '--in', out], { encoding: 'utf8' }),
    )
    expect(info.n).toBe(40)
    expect(info.d).toBe(32)
    expect(info.num_classes).toBe(2)
    expect(info.true_labels_present).toBe(true)
    expect(info.noisy_vs_true_error).toBe(0)
  }, 120_000)

  test('engine save/load round-trips the file byte-identically', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'exp-'))
    writeStripeFixture(dir, 16)
    const out = join(dir, 'features.emb1')
    await runExport(stripeSpec(dir, out))
    const copy = join(dir, 'copy.emb1')
    execFileSync('python3', [
      '-c',
      'import sys; from knnclean.data import load_dataset, save_dataset; ' +
        'save_dataset(load_dataset(sys.argv[1]), sys.argv[2])',
      out,
      copy,
    ])
    expect(sha256(copy)).toBe(sha256(out))
  }, 120_000)

  test('cleanup pipeline recovers labels on exported features', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'exp-'))
    writeStripeFixture(dir, 80)
    const out = join(dir, 'features.emb1')
    await runExport(stripeSpec(dir, out))

    const noisy = join(dir, 'noisy.emb1')
    execFileSync('knnclean', [
      'corrupt', '--in', out, '--out', noisy, '--kind', 'symmetric',
      '--level', '0.4', '--seed', '3',
    ])
    const config = join(dir, 'config.json')
    writeFileSync(
      config,
      JSON.stringify({
        episodes: 2, epochs_per_episode: 20, k: 10, batch_size: 16, seed: 1,
        classifier: { hidden_sizes: [16] },
      }),
    )
    const reportDir = join(dir, 'report')
    execFileSync('knnclean', [
      'run', '--config', config, '--train', noisy, '--report-dir', reportDir,
    ])
    const summary = JSON.parse(readFileSync(join(reportDir, 'summary.json'), 'utf8'))
    expect(summary.final.recovery_rate).toBeGreaterThanOrEqual(0.85)
  }, 180_000)
})

const mnistDir = process.env.MNIST_DIR ?? ''
const haveMnist =
  mnistDir !== '' &&
  ['', '.gz'].some(s => existsSync(join(mnistDir, `train-images-idx3-ubyte${s}`)))

describe.skipIf(!haveMnist || !havePrimary)('mnist export (needs MNIST_DIR)', () => {
  // Offline environments cannot fetch MNIST; point MNIST_DIR at a directory
  // holding the standard IDX files to run the full-scale check.
  test('60k export feeds the cleanup pipeline', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'mnist-'))
    const out = join(dir, 'mnist.emb1')
    const result = await runExport({
      dataset: 'mnist', dataDir: mnistDir, model: 'fixed-conv-v1',
      layer: 'penultimate', out, batchSize: 256, device: 'cpu',
    })
    expect(result.n).toBe(60000)
    expect(result.numClasses).toBe(10)

    const info = JSON.parse(
      execFileSync('knnclean', ['inspect', '--in', out], { encoding: 'utf8' }),
    )
    expect(info.n).toBe(60000)

    const noisy = join(dir, 'noisy.emb1')
    execFileSync('knnclean', [
      'corrupt', '--in', out, '--out', noisy, '--kind', 'symmetric',
      '--level', '0.4', '--seed', '3',
    ])
    const config = join(dir, 'config.json')
    writeFileSync(config, JSON.stringify({ episodes: 3, epochs_per_episode: 30, seed: 1 }))
    const reportDir = join(dir, 'report')
    execFileSync('knnclean', [
      'run', '--config', config, '--train', noisy, '--report-dir', reportDir,
    ])
    const summary = JSON.parse(readFileSync(join(reportDir, 'summary.json'), 'utf8'))
    expect(summary.final.recovery_rate).toBeGreaterThanOrEqual(0.85)
  }, 3_600_000)
})
