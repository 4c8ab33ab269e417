"""Synthetic label-corruption models and error-rate measurement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"

# Class-confusion maps mimicking annotation mistakes between similar classes.
# cifar10 uses the canonical ordering airplane=0 ... truck=9:
# truck->automobile, bird->airplane, cat<->dog, deer->horse.
BUILTIN_TRANSITIONS: dict[str, dict[int, int]] = {
    "mnist": {7: 1, 2: 7, 5: 6, 6: 5, 3: 8},
    "cifar10": {9: 1, 2: 0, 3: 5, 5: 3, 4: 7},
}


@dataclass(frozen=True)
class NoiseSpec:
    """Corruption model: kind, level, class transitions (asymmetric only), seed."""

    kind: str
    level: float
    transitions: dict[int, int] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in (SYMMETRIC, ASYMMETRIC):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.level <= 1.0:
            raise ValueError(f"level out of range: {self.level} not in [0, 1]")
        if self.kind == SYMMETRIC and self.transitions:
            raise ValueError("symmetric noise takes no transition map")
        if self.kind == ASYMMETRIC:
            _validate_transitions(self.transitions)


def _validate_transitions(transitions: dict[int, int]) -> None:
    if not transitions:
        raise ValueError("asymmetric noise requires a transition map")
    for src, dst in transitions.items():
        if src == dst:
            raise ValueError(f"transition target equals source class {src}")
        if src < 0 or dst < 0:
            raise ValueError(f"negative class id in transition {src}:{dst}")


def _per_sample_uniforms(seed: int, n: int) -> np.ndarray:
    # Counter-based stream: draw i is a pure function of (seed, i), so the
    # outcome at a position is independent of batching or iteration order.
    return Generator(Philox(key=np.uint64(seed))).random((n, 2))


def inject_symmetric(labels, num_classes: int, level: float, seed: int) -> np.ndarray:
    """Flip each label with probability `level` to one of the other classes,
    uniformly at random. Pure function of (labels, num_classes, level, seed)."""
    labels = np.asarray(labels)
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if labels.size and labels.max() >= num_classes:
        raise ValueError("label >= num_classes")
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"level out of range: {level} not in [0, 1]")

    u = _per_sample_uniforms(seed, labels.shape[0])
    flip = u[:, 0] < level
    # Index into the C-1 alternatives, skipping the sample's own class.
    alt = (u[:, 1] * (num_classes - 1)).astype(np.int64)
    target = alt + (alt >= labels.astype(np.int64))
    return np.where(flip, target, labels).astype(np.uint32)


def inject_asymmetric(labels, transitions: dict[int, int], level: float,
                      seed: int) -> np.ndarray:
    """Flip labels along fixed class transitions with probability `level`;
    classes outside the map are untouched."""
    labels = np.asarray(labels)
    _validate_transitions(transitions)
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"level out of range: {level} not in [0, 1]")

    u = _per_sample_uniforms(seed, labels.shape[0])
    flip = u[:, 0] < level
    out = labels.astype(np.int64)
    for src, dst in transitions.items():
        out[(labels == src) & flip] = dst
    return out.astype(np.uint32)


def inject(labels, num_classes: int, spec: NoiseSpec) -> np.ndarray:
    """Apply a NoiseSpec to a label array."""
    if spec.kind == SYMMETRIC:
        return inject_symmetric(labels, num_classes, spec.level, spec.seed)
    return inject_asymmetric(labels, spec.transitions, spec.level, spec.seed)


def builtin_transitions(name: str) -> dict[int, int]:
    """Named transition maps for the common benchmark class confusions."""
    try:
        return dict(BUILTIN_TRANSITIONS[name])
    except KeyError:
        raise ValueError(f"unknown transition set {name!r}") from None


def parse_transitions(value) -> dict[int, int]:
    """Parse a transition map from config input.

    Accepts a builtin name ("mnist"), a "src:dst,src:dst" string, a list of
    "src:dst" strings, or an already-built int map.
    """
    if isinstance(value, dict):
        transitions = {int(k): int(v) for k, v in value.items()}
    elif isinstance(value, str):
        if value in BUILTIN_TRANSITIONS:
            return builtin_transitions(value)
        transitions = {}
        for pair in value.split(","):
            src, _, dst = pair.partition(":")
            if not dst:
                raise ValueError(f"bad transition {pair!r}, expected 'source:target'")
            transitions[int(src)] = int(dst)
    else:
        transitions = {}
        for pair in value:
            src, _, dst = str(pair).partition(":")
            if not dst:
                raise ValueError(f"bad transition {pair!r}, expected 'source:target'")
            transitions[int(src)] = int(dst)
    _validate_transitions(transitions)
    return transitions


def label_error_rate(labels_a, labels_b) -> float:
    """Fraction of positions where the two label arrays disagree."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(a != b))
