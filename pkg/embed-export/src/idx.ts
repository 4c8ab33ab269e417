/**
 * IDX file parsing (the MNIST distribution format).
 *
 * Header: 2 zero bytes | dtype byte | ndims byte | ndims x u32 big-endian dims,
 * then the payload in row-major order. Only the u8 dtype (0x08) is needed
 * here. Files ending in .gz are inflated transparently.
 */

import { readFileSync } from 'fs'
import { gunzipSync } from 'zlib'

export interface IdxArray {
  dims: number[]
  data: Uint8Array
}

export function decodeIdx(raw: Buffer): IdxArray {
  if (raw.length < 4 || raw[0] !== 0 || raw[1] !== 0) {
    throw new Error('not an IDX file: bad magic')
  }
  const dtype = raw[2]
  if (dtype !== 0x08) {
    throw new Error(`unsupported IDX dtype 0x${dtype.toString(16)}, expected u8 (0x08)`)
  }
  const ndims = raw[3]
  const headerBytes = 4 + 4 * ndims
  if (raw.length < headerBytes) throw new Error('truncated IDX header')
  const dims: number[] = []
  for (let i = 0; i < ndims; i++) dims.push(raw.readUInt32BE(4 + 4 * i))
  const count = dims.reduce((a, b) => a * b, 1)
  if (raw.length !== headerBytes + count) {
    throw new Error(`IDX payload is ${raw.length - headerBytes} bytes, expected ${count}`)
  }
  return { dims, data: new Uint8Array(raw.subarray(headerBytes)) }
}

export function readIdx(path: string): IdxArray {
  let raw = readFileSync(path)
  if (path.endsWith('.gz')) raw = gunzipSync(raw)
  return decodeIdx(raw)
}

export interface ImageSet {
  n: number
  height: number
  width: number
  /** n x height x width pixels, u8 */
  pixels: Uint8Array
  labels: Uint32Array
}

/** Load an images + labels IDX pair, preserving the file's sample order. */
export function readImageSet(imagesPath: string, labelsPath: string): ImageSet {
  const images = readIdx(imagesPath)
  const labels = readIdx(labelsPath)
  if (images.dims.length !== 3) {
    throw new Error(`images file must be 3-d (n, rows, cols), got ${images.dims.length}-d`)
  }
  if (labels.dims.length !== 1) {
    throw new Error(`labels file must be 1-d, got ${labels.dims.length}-d`)
  }
  const [n, height, width] = images.dims
  if (labels.dims[0] !== n) {
    throw new Error(`label count ${labels.dims[0]} does not match image count ${n}`)
  }
  return { n, height, width, pixels: images.data, labels: Uint32Array.from(labels.data) }
}

export function encodeIdx(dims: number[], data: Uint8Array): Buffer {
  const header = Buffer.alloc(4 + 4 * dims.length)
  header[2] = 0x08
  header[3] = dims.length
  dims.forEach((dim, i) => header.writeUInt32BE(dim, 4 + 4 * i))
  return Buffer.concat([header, Buffer.from(data)])
}
