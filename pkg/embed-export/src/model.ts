/**
 * Fixed feature-extraction models.
 *
 * Features come from a frozen model rather than anything co-trained: weights
 * are generated once from seeded initializers, so the same spec always yields
 * the same features. The exported representation is the activation of a
 * tagged layer; "penultimate" is the pooled output of the last conv block,
 * the layer just before the classification head.
 */

import * as tf from '@tensorflow/tfjs'

export const MODEL_NAMES = ['fixed-conv-v1', 'raw-pixels'] as const
export type ModelName = (typeof MODEL_NAMES)[number]

export const LAYER_TAGS = ['conv1', 'conv2', 'penultimate'] as const

export interface FeatureExtractor {
  name: string
  layer: string
  /** feature width d */
  outputDim: number
  /** pixels in [0,1], shape (batch, height, width, 1) -> (batch, d) */
  extract(batch: tf.Tensor4D): tf.Tensor2D
}

const FIXED_SEED = 20240901 // frozen: changing it changes every exported file

function buildConvStack(height: number, width: number) {
  const input = tf.input({ shape: [height, width, 1] })
  let x = tf.layers
    .conv2d({
      filters: 16,
      kernelSize: 3,
      padding: 'same',
      activation: 'relu',
      kernelInitializer: tf.initializers.glorotUniform({ seed: FIXED_SEED }),
      biasInitializer: 'zeros',
      name: 'conv1',
    })
    .apply(input) as tf.SymbolicTensor
  x = tf.layers.maxPooling2d({ poolSize: 2, name: 'pool1' }).apply(x) as tf.SymbolicTensor
  x = tf.layers
    .conv2d({
      filters: 32,
      kernelSize: 3,
      padding: 'same',
      activation: 'relu',
      kernelInitializer: tf.initializers.glorotUniform({ seed: FIXED_SEED + 1 }),
      biasInitializer: 'zeros',
      name: 'conv2',
    })
    .apply(x) as tf.SymbolicTensor
  x = tf.layers.maxPooling2d({ poolSize: 2, name: 'pool2' }).apply(x) as tf.SymbolicTensor
  const penultimate = tf.layers
    .globalAveragePooling2d({ name: 'penultimate' })
    .apply(x) as tf.SymbolicTensor
  return { input, penultimate }
}

export function buildExtractor(options: {
  model: string
  layer?: string
  height: number
  width: number
}): FeatureExtractor {
  const { model, height, width } = options
  const layer = options.layer ?? 'penultimate'

  if (model === 'raw-pixels') {
    const dim = height * width
    return {
      name: model,
      layer: 'input',
      outputDim: dim,
      extract: batch => batch.reshape([batch.shape[0], dim]) as tf.Tensor2D,
    }
  }

  if (model !== 'fixed-conv-v1') {
    throw new Error(`unknown model ${JSON.stringify(model)}; known: ${MODEL_NAMES.join(', ')}`)
  }
  if (!(LAYER_TAGS as readonly string[]).includes(layer)) {
    throw new Error(`layer tag ${JSON.stringify(layer)} not found; known: ${LAYER_TAGS.join(', ')}`)
  }

  const { input, penultimate } = buildConvStack(height, width)
  const full = tf.model({ inputs: input, outputs: penultimate })
  const tagged = layer === 'penultimate' ? penultimate : (full.getLayer(layer).output as tf.SymbolicTensor)
  // spatial conv activations are average-pooled so d equals the layer width
  const needsPooling = tagged.shape.length === 4
  const extractor = tf.model({ inputs: input, outputs: tagged })
  const outputDim = tagged.shape[tagged.shape.length - 1] as number

  return {
    name: model,
    layer,
    outputDim,
    extract: batch =>
      tf.tidy(() => {
        let out = extractor.predict(batch) as tf.Tensor
        if (needsPooling) out = tf.mean(out, [1, 2])
        return out as tf.Tensor2D
      }),
  }
}
