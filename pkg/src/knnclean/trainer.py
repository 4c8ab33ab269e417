"""Small feed-forward classifier trained on embedding vectors.

Plain-numpy MLP with ReLU hidden layers and a softmax head. The loss machinery
covers cross entropy, reverse cross entropy (clipped log-0 form), their
weighted combination, and the two-label convex blend used while labels are
being corrected. Training also tracks each sample's per-epoch normalized loss,
which downstream reference selection ranks on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import EmbeddingSet

CE = "ce"
SL = "sl"

_PROB_FLOOR = 1e-12  # keeps -log finite when a probability underflows


class NumericError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass
class Classifier:
    """MLP parameters. layer_sizes = (input, hidden..., output).

    embedding_layer indexes the activation used as the sample's deep feature:
    0 is the raw input, i >= 1 the output of hidden layer i. Defaults to the
    last hidden layer.
    """

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    embedding_layer: int

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def param_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "Classifier":
        return Classifier(self.layer_sizes, [w.copy() for w in self.weights],
                          [b.copy() for b in self.biases], self.embedding_layer)


@dataclass(frozen=True)
class LossConfig:
    """Loss selection: plain cross entropy or the symmetric ce + rce blend.

    rce_clip replaces log 0 in the reverse term, so rce reduces to
    -rce_clip * (1 - p_label). gamma is the default weight on the original
    noisy labels in the two-label blend; call sites may override it.
    """

    kind: str = SL
    sl_alpha: float = 1.0
    sl_beta: float = 1.0
    rce_clip: float = -4.0
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in (CE, SL):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.sl_alpha < 0 or self.sl_beta < 0:
            raise ValueError("sl_alpha and sl_beta must be >= 0")
        if not self.rce_clip < 0:
            raise ValueError(f"rce_clip must be negative, got {self.rce_clip}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma out of range: {self.gamma} not in [0, 1]")


@dataclass(frozen=True)
class OptimizerParams:
    """Adam with decoupled weight decay and milestone step decay.

    lr_milestones of None derives the halfway / three-quarter pattern from the
    epoch count.
    """

    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_milestones: tuple[int, ...] | None = None
    lr_decay: float = 0.1


@dataclass
class LossLedger:
    """Per-sample normalized loss accumulated over one episode's epochs."""

    cumulative: np.ndarray = field(default_factory=lambda: np.zeros(0))


def default_milestones(epochs: int) -> tuple[int, ...]:
    return (epochs // 2, (3 * epochs) // 4)


def init_classifier(layer_sizes, seed: int, embedding_layer: int | None = None) -> Classifier:
    """Fresh model: fan-in-scaled uniform weights, zero biases, seeded."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ValueError(f"need at least input and output layers, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ValueError(f"layer sizes must be >= 1, got {sizes}")
    if embedding_layer is None:
        embedding_layer = len(sizes) - 2
    if not 0 <= embedding_layer <= len(sizes) - 2:
        raise ValueError(
            f"embedding_layer must be in [0, {len(sizes) - 2}], got {embedding_layer}")

    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Classifier(sizes, weights, biases, embedding_layer)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def forward_batch(model: Classifier, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Probabilities and the per-layer activation list (index 0 = input)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != model.input_dim:
        raise ValueError(f"input shape {a.shape} does not match input_dim {model.input_dim}")
    acts = [a]
    last = len(model.weights) - 1
    for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = a @ w + b
        if layer < last:
            np.maximum(a, 0.0, out=a)
        acts.append(a)
    return _softmax(acts[-1]), acts


def forward(model: Classifier, x) -> tuple[np.ndarray, np.ndarray]:
    """Single-vector forward pass: (class probabilities, deep embedding)."""
    probs, acts = forward_batch(model, np.asarray(x, dtype=np.float64)[None, :])
    return probs[0], acts[model.embedding_layer][0]


def loss_ce(probs, label: int) -> float:
    return float(-np.log(max(np.asarray(probs)[label], _PROB_FLOOR)))


def loss_rce(probs, label: int, clip: float = -4.0) -> float:
    """Reverse cross entropy with log 0 replaced by `clip` (negative)."""
    return float(-clip * (1.0 - np.asarray(probs)[label]))


def loss_sl(probs, label: int, config: LossConfig = LossConfig()) -> float:
    return config.sl_alpha * loss_ce(probs, label) + \
        config.sl_beta * loss_rce(probs, label, config.rce_clip)


def _base_loss_vec(probs: np.ndarray, labels: np.ndarray, config: LossConfig) -> np.ndarray:
    p = probs[np.arange(len(labels)), labels]
    ce = -np.log(np.maximum(p, _PROB_FLOOR))
    if config.kind == CE:
        return ce
    return config.sl_alpha * ce + config.sl_beta * (-config.rce_clip) * (1.0 - p)


def _grad_logits(probs: np.ndarray, labels: np.ndarray, config: LossConfig) -> np.ndarray:
    """d(base loss)/d(logits), one row per sample."""
    m = len(labels)
    onehot = np.zeros_like(probs)
    onehot[np.arange(m), labels] = 1.0
    if config.kind == CE:
        return probs - onehot
    p = probs[np.arange(m), labels][:, None]
    return config.sl_alpha * (probs - onehot) + \
        config.sl_beta * config.rce_clip * p * (onehot - probs)


def hybrid_loss(model: Classifier, x, y_hat: int, y_tilde: int,
                gamma: float | None = None, config: LossConfig = LossConfig()) -> float:
    """(1 - gamma) * J(corrected label) + gamma * J(original noisy label)."""
    if gamma is None:
        gamma = config.gamma
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma out of range: {gamma} not in [0, 1]")
    probs, _ = forward(model, x)
    labels = np.array([y_hat, y_tilde])
    j = _base_loss_vec(np.vstack([probs, probs]), labels, config)
    return float((1.0 - gamma) * j[0] + gamma * j[1])


def _backward(model: Classifier, acts: list[np.ndarray],
              g_logits: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    grads_w: list[np.ndarray] = [None] * len(model.weights)  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * len(model.biases)  # type: ignore[list-item]
    delta = g_logits
    for layer in reversed(range(len(model.weights))):
        grads_w[layer] = acts[layer].T @ delta
        grads_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ model.weights[layer].T) * (acts[layer] > 0.0)
    return grads_w, grads_b


def train_episode(model: Classifier, dataset, gamma: float, epochs: int,
                  batch_size: int, optimizer: OptimizerParams = OptimizerParams(),
                  loss: LossConfig = LossConfig(), seed: int = 0,
                  epoch_callback=None) -> tuple[Classifier, LossLedger]:
    """One training episode over shuffled mini-batches.

    The objective per sample blends the base loss on the current label
    (weight 1 - gamma) and on the original noisy label (weight gamma). The
    ledger accumulates, per epoch, each sample's base loss on its current
    label divided by that epoch's dataset-mean loss, so every epoch
    contributes at the same scale regardless of absolute loss magnitude.

    Deterministic for fixed (model, inputs, seed); trains in place and
    returns the same model object. `epoch_callback(model, epoch_index,
    cumulative_loss)` fires after each epoch for mid-episode snapshots.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma out of range: {gamma} not in [0, 1]")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")

    x = dataset.embeddings.data
    y_hat = dataset.current_labels.astype(np.int64)
    y_tilde = dataset.noisy_labels.astype(np.int64)
    n = x.shape[0]
    milestones = optimizer.lr_milestones
    if milestones is None:
        milestones = default_milestones(epochs)

    m_state = [np.zeros_like(w) for w in model.weights] + [np.zeros_like(b) for b in model.biases]
    v_state = [np.zeros_like(p) for p in m_state]
    params = model.weights + model.biases
    step = 0
    ledger = np.zeros(n)

    for epoch in range(epochs):
        lr = optimizer.learning_rate * optimizer.lr_decay ** sum(
            epoch >= m for m in milestones)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        epoch_loss = np.empty(n)
        for start in range(0, n, batch_size):
            batch = perm[start:start + batch_size]
            probs, acts = forward_batch(model, x[batch])
            epoch_loss[batch] = _base_loss_vec(probs, y_hat[batch], loss)
            g = (1.0 - gamma) * _grad_logits(probs, y_hat[batch], loss)
            if gamma > 0.0:
                g += gamma * _grad_logits(probs, y_tilde[batch], loss)
            g /= len(batch)
            grads_w, grads_b = _backward(model, acts, g)

            step += 1
            bias1 = 1.0 - optimizer.beta1 ** step
            bias2 = 1.0 - optimizer.beta2 ** step
            for p, g_p, m_p, v_p in zip(params, grads_w + grads_b, m_state, v_state):
                m_p *= optimizer.beta1
                m_p += (1.0 - optimizer.beta1) * g_p
                v_p *= optimizer.beta2
                v_p += (1.0 - optimizer.beta2) * g_p ** 2
                p -= lr * ((m_p / bias1) / (np.sqrt(v_p / bias2) + optimizer.eps)
                           + optimizer.weight_decay * p)

        mean = epoch_loss.mean()
        if not np.isfinite(mean):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        if mean > 0.0:
            ledger += epoch_loss / mean
        if epoch_callback is not None:
            epoch_callback(model, epoch, ledger)

    return model, LossLedger(cumulative=ledger)


def gradient_check(model: Classifier, x, label: int, config: LossConfig = LossConfig(),
                   noisy_label: int | None = None, gamma: float | None = None,
                   h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative above a 1e-3 magnitude floor, so near-zero components compare at
    the finite-difference noise scale instead of blowing up.
    """
    x = np.asarray(x, dtype=np.float64)[None, :]
    if noisy_label is None:
        noisy_label = label
        gamma = 0.0
    elif gamma is None:
        gamma = config.gamma

    def objective() -> float:
        probs, _ = forward_batch(model, x)
        j = _base_loss_vec(np.vstack([probs, probs]),
                           np.array([label, noisy_label]), config)
        return float((1.0 - gamma) * j[0] + gamma * j[1])

    probs, acts = forward_batch(model, x)
    g = (1.0 - gamma) * _grad_logits(probs, np.array([label]), config)
    g += gamma * _grad_logits(probs, np.array([noisy_label]), config)
    grads_w, grads_b = _backward(model, acts, g)
    analytic = grads_w + grads_b

    worst = 0.0
    for p, g_a in zip(model.weights + model.biases, analytic):
        flat = p.reshape(-1)
        ga_flat = g_a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = objective()
            flat[i] = orig - h
            lo = objective()
            flat[i] = orig
            g_n = (hi - lo) / (2.0 * h)
            denom = max(abs(ga_flat[i]), abs(g_n), 1e-3)
            worst = max(worst, abs(ga_flat[i] - g_n) / denom)
    return worst


def analytic_gradient_norm(model: Classifier, x, label: int,
                           config: LossConfig = LossConfig()) -> float:
    """Max-norm of the analytic gradient at a point (zero-gradient checks)."""
    probs, acts = forward_batch(model, np.asarray(x, dtype=np.float64)[None, :])
    grads_w, grads_b = _backward(model, acts, _grad_logits(probs, np.array([label]), config))
    return max(float(np.abs(g).max()) for g in grads_w + grads_b)


def embed_all(model: Classifier, dataset) -> EmbeddingSet:
    """Embedding-layer activations for every row, aligned with the dataset."""
    source = getattr(dataset, "embeddings", dataset)
    _, acts = forward_batch(model, source.data)
    return EmbeddingSet(acts[model.embedding_layer])


def head_accuracy(model: Classifier, x: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax class matches the given labels."""
    probs, _ = forward_batch(model, x)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))
