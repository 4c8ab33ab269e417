/**
 * EMB1 dataset files: the binary format the cleanup engine consumes.
 *
 * Layout (little-endian, no padding):
 *   "EMB1" | version u32 = 1 | n u32 | d u32 | C u32 | flags u32
 *   float32 data, n x d row-major
 *   noisy_labels u32 x n | current_labels u32 x n | true_labels u32 x n (flags bit0)
 */

import { writeFileSync, readFileSync } from 'fs'

export const EMB1_MAGIC = 'EMB1'
export const EMB1_VERSION = 1
export const FLAG_TRUE_LABELS = 0x1

const HEADER_BYTES = 24

export interface Emb1Dataset {
  n: number
  d: number
  numClasses: number
  /** n x d row-major feature matrix */
  data: Float32Array
  noisyLabels: Uint32Array
  currentLabels: Uint32Array
  trueLabels?: Uint32Array
}

function checkLabels(labels: Uint32Array, n: number, numClasses: number, name: string) {
  if (labels.length !== n) {
    throw new Error(`${name} must have length ${n}, got ${labels.length}`)
  }
  for (let i = 0; i < n; i++) {
    if (labels[i] >= numClasses) {
      throw new Error(`label out of range: ${name}[${i}] = ${labels[i]} >= ${numClasses}`)
    }
  }
}

export function encodeEmb1(dataset: Emb1Dataset): Buffer {
  const { n, d, numClasses, data, noisyLabels, currentLabels, trueLabels } = dataset
  if (n < 1 || d < 1) throw new Error(`dataset must be at least 1x1, got ${n}x${d}`)
  if (numClasses < 2) throw new Error(`numClasses must be >= 2, got ${numClasses}`)
  if (data.length !== n * d) {
    throw new Error(`data must have ${n * d} values, got ${data.length}`)
  }
  for (let i = 0; i < data.length; i++) {
    if (!Number.isFinite(data[i])) {
      throw new Error(`non-finite value at row ${Math.floor(i / d)}, column ${i % d}`)
    }
  }
  checkLabels(noisyLabels, n, numClasses, 'noisyLabels')
  checkLabels(currentLabels, n, numClasses, 'currentLabels')
  if (trueLabels) checkLabels(trueLabels, n, numClasses, 'trueLabels')

  const flags = trueLabels ? FLAG_TRUE_LABELS : 0
  const total = HEADER_BYTES + 4 * n * d + 4 * n * (trueLabels ? 3 : 2)
  const buf = Buffer.alloc(total)
  buf.write(EMB1_MAGIC, 0, 'ascii')
  buf.writeUInt32LE(EMB1_VERSION, 4)
  buf.writeUInt32LE(n, 8)
  buf.writeUInt32LE(d, 12)
  buf.writeUInt32LE(numClasses, 16)
  buf.writeUInt32LE(flags, 20)

  let offset = HEADER_BYTES
  for (let i = 0; i < data.length; i++, offset += 4) buf.writeFloatLE(data[i], offset)
  for (const labels of [noisyLabels, currentLabels, trueLabels]) {
    if (!labels) continue
    for (let i = 0; i < n; i++, offset += 4) buf.writeUInt32LE(labels[i], offset)
  }
  return buf
}

export function writeEmb1(path: string, dataset: Emb1Dataset) {
  writeFileSync(path, encodeEmb1(dataset))
}

export function decodeEmb1(buf: Buffer): Emb1Dataset {
  if (buf.length < HEADER_BYTES) {
    throw new Error(`truncated header: ${buf.length} bytes, need ${HEADER_BYTES}`)
  }
  if (buf.toString('ascii', 0, 4) !== EMB1_MAGIC) {
    throw new Error(`bad magic ${JSON.stringify(buf.toString('ascii', 0, 4))}`)
  }
  const version = buf.readUInt32LE(4)
  if (version !== EMB1_VERSION) throw new Error(`unsupported version ${version}`)
  const n = buf.readUInt32LE(8)
  const d = buf.readUInt32LE(12)
  const numClasses = buf.readUInt32LE(16)
  const flags = buf.readUInt32LE(20)
  const hasTrue = (flags & FLAG_TRUE_LABELS) !== 0
  const expected = HEADER_BYTES + 4 * n * d + 4 * n * (hasTrue ? 3 : 2)
  if (buf.length !== expected) {
    throw new Error(`file is ${buf.length} bytes, expected ${expected}`)
  }

  const data = new Float32Array(n * d)
  let offset = HEADER_BYTES
  for (let i = 0; i < data.length; i++, offset += 4) data[i] = buf.readFloatLE(offset)
  const readLabels = () => {
    const labels = new Uint32Array(n)
    for (let i = 0; i < n; i++, offset += 4) labels[i] = buf.readUInt32LE(offset)
    return labels
  }
  const noisyLabels = readLabels()
  const currentLabels = readLabels()
  const trueLabels = hasTrue ? readLabels() : undefined
  return { n, d, numClasses, data, noisyLabels, currentLabels, trueLabels }
}

export function readEmb1(path: string): Emb1Dataset {
  return decodeEmb1(readFileSync(path))
}
