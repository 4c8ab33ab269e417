"""Dataset data model, the EMB1 binary file format, and synthetic cluster generation."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"
FORMAT_VERSION = 1
FLAG_TRUE_LABELS = 0x1

_HEADER = struct.Struct("<4s5I")  # magic | version | n | d | C | flags


class DataFormatError(ValueError):
    """Malformed EMB1 file or invariant-violating dataset."""


class EmbeddingSet:
    """Immutable n x d matrix of finite feature vectors.

    Rows are C-contiguous float64 views; file storage is float32 (see
    `save_dataset`), so sets loaded from disk hold float32-exact values.
    """

    def __init__(self, data) -> None:
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise DataFormatError(f"embedding data must be 2-d, got {arr.ndim}-d")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataFormatError(f"embedding matrix must be at least 1x1, got {arr.shape}")
        if not np.isfinite(arr).all():
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise DataFormatError(
                f"non-finite value at row {bad // arr.shape[1]}, column {bad % arr.shape[1]}"
            )
        arr.setflags(write=False)
        self._data = arr

    @property
    def n(self) -> int:
        return self._data.shape[0]

    @property
    def d(self) -> int:
        return self._data.shape[1]

    @property
    def data(self) -> np.ndarray:
        return self._data

    def row(self, i: int) -> np.ndarray:
        return self._data[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, EmbeddingSet) and np.array_equal(self._data, other._data)

    def __repr__(self) -> str:
        return f"EmbeddingSet(n={self.n}, d={self.d})"


def _as_labels(values, n: int, num_classes: int, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise DataFormatError(f"{name} must be a length-{n} array, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise DataFormatError(f"{name} must be integer class ids, got dtype {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        bad = int(np.flatnonzero((arr < 0) | (arr >= num_classes))[0])
        raise DataFormatError(
            f"label out of range: {name}[{bad}] = {int(arr[bad])}, num_classes = {num_classes}"
        )
    out = arr.astype(np.uint32)
    out.setflags(write=False)
    return out


class LabeledDataset:
    """An EmbeddingSet plus parallel true / noisy / current label arrays.

    true_labels may be absent; nothing except recovery metrics needs them.
    Label arrays are immutable; corrections build fresh arrays.
    """

    def __init__(self, embeddings: EmbeddingSet, noisy_labels, current_labels,
                 true_labels=None, num_classes: int = 2) -> None:
        if not isinstance(embeddings, EmbeddingSet):
            embeddings = EmbeddingSet(embeddings)
        if num_classes < 2:
            raise DataFormatError(f"num_classes must be >= 2, got {num_classes}")
        n = embeddings.n
        self.embeddings = embeddings
        self.num_classes = int(num_classes)
        self.noisy_labels = _as_labels(noisy_labels, n, num_classes, "noisy_labels")
        self.current_labels = _as_labels(current_labels, n, num_classes, "current_labels")
        self.true_labels = (
            None if true_labels is None else _as_labels(true_labels, n, num_classes, "true_labels")
        )

    @property
    def n(self) -> int:
        return self.embeddings.n

    @property
    def d(self) -> int:
        return self.embeddings.d

    def with_labels(self, noisy_labels=None, current_labels=None,
                    true_labels="keep") -> "LabeledDataset":
        """Copy of this dataset with some label arrays replaced."""
        return LabeledDataset(
            self.embeddings,
            self.noisy_labels if noisy_labels is None else noisy_labels,
            self.current_labels if current_labels is None else current_labels,
            self.true_labels if isinstance(true_labels, str) else true_labels,
            self.num_classes,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return False
        if (self.true_labels is None) != (other.true_labels is None):
            return False
        return (
            self.embeddings == other.embeddings
            and self.num_classes == other.num_classes
            and np.array_equal(self.noisy_labels, other.noisy_labels)
            and np.array_equal(self.current_labels, other.current_labels)
            and (self.true_labels is None or np.array_equal(self.true_labels, other.true_labels))
        )

    def __repr__(self) -> str:
        truth = "with" if self.true_labels is not None else "without"
        return (f"LabeledDataset(n={self.n}, d={self.d}, num_classes={self.num_classes}, "
                f"{truth} true labels)")


def save_dataset(dataset: LabeledDataset, path) -> None:
    """Write a dataset as an EMB1 file; `load_dataset` inverts it exactly.

    Layout (little-endian, no padding): "EMB1" | version u32 | n u32 | d u32 |
    C u32 | flags u32 | n*d float32 row-major | noisy u32*n | current u32*n |
    true u32*n iff flags bit0.
    """
    flags = FLAG_TRUE_LABELS if dataset.true_labels is not None else 0
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, dataset.n, dataset.d, dataset.num_classes, flags),
        np.ascontiguousarray(dataset.embeddings.data, dtype="<f4").tobytes(),
        dataset.noisy_labels.astype("<u4").tobytes(),
        dataset.current_labels.astype("<u4").tobytes(),
    ]
    if dataset.true_labels is not None:
        parts.append(dataset.true_labels.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def _labels_from_bytes(raw: bytes, offset: int, n: int, num_classes: int,
                       name: str) -> np.ndarray:
    arr = np.frombuffer(raw, dtype="<u4", count=n, offset=offset)
    if arr.size and arr.max() >= num_classes:
        bad = int(np.flatnonzero(arr >= num_classes)[0])
        raise DataFormatError(
            f"label out of range: {name}[{bad}] = {int(arr[bad])} >= num_classes {num_classes} "
            f"(byte offset {offset + 4 * bad})"
        )
    return arr


def load_dataset(path) -> LabeledDataset:
    """Read an EMB1 file, validating structure and invariants.

    Errors report the byte offset of the offending field.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(
            f"truncated header: file is {len(raw)} bytes, need {_HEADER.size} (byte offset 0)"
        )
    magic, version, n, d, num_classes, flags = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {MAGIC!r} (byte offset 0)")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported format version {version} (byte offset 4)")
    if n < 1 or d < 1:
        raise DataFormatError(f"invalid shape n={n}, d={d} (byte offset 8)")
    if num_classes < 2:
        raise DataFormatError(f"num_classes must be >= 2, got {num_classes} (byte offset 16)")
    if flags & ~FLAG_TRUE_LABELS:
        raise DataFormatError(f"unknown flag bits 0x{flags:x} (byte offset 20)")

    has_true = bool(flags & FLAG_TRUE_LABELS)
    data_off = _HEADER.size
    labels_off = data_off + 4 * n * d
    expected = labels_off + 4 * n * (3 if has_true else 2)
    if len(raw) < expected:
        raise DataFormatError(
            f"truncated payload: file is {len(raw)} bytes, need {expected} "
            f"(byte offset {len(raw)})"
        )
    if len(raw) > expected:
        raise DataFormatError(
            f"trailing bytes: file is {len(raw)} bytes, expected {expected} "
            f"(byte offset {expected})"
        )

    data = np.frombuffer(raw, dtype="<f4", count=n * d, offset=data_off)
    if not np.isfinite(data).all():
        bad = int(np.flatnonzero(~np.isfinite(data))[0])
        raise DataFormatError(
            f"non-finite scalar at row {bad // d}, column {bad % d} "
            f"(byte offset {data_off + 4 * bad})"
        )
    noisy = _labels_from_bytes(raw, labels_off, n, num_classes, "noisy_labels")
    current = _labels_from_bytes(raw, labels_off + 4 * n, n, num_classes, "current_labels")
    true = (
        _labels_from_bytes(raw, labels_off + 8 * n, n, num_classes, "true_labels")
        if has_true else None
    )
    return LabeledDataset(EmbeddingSet(data.reshape(n, d)), noisy, current, true, num_classes)


def synth_gaussian(num_classes: int, per_class: int, dim: int, separation: float,
                   seed: int) -> LabeledDataset:
    """Separable synthetic clusters: unit-variance isotropic Gaussians whose
    centers are mutually at distance >= separation.

    Centers are random unit directions scaled by a radius that grows until
    rejection sampling succeeds, so the construction works for any
    (num_classes, dim). All three label arrays equal the generating class.
    Values are rounded through float32 so saved files are byte-exact.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if not separation > 0:
        raise ValueError(f"separation must be > 0, got {separation}")

    rng = np.random.default_rng(seed)
    if dim == 1:
        centers = (separation * np.arange(num_classes, dtype=np.float64))[:, None]
    else:
        centers_list: list[np.ndarray] = []
        radius = float(separation)
        failures = 0
        while len(centers_list) < num_classes:
            u = rng.standard_normal(dim)
            u /= np.linalg.norm(u)
            cand = radius * u
            if all(np.linalg.norm(cand - c) >= separation for c in centers_list):
                centers_list.append(cand)
                failures = 0
            else:
                failures += 1
                if failures >= 200:  # sphere too crowded; give the centers more room
                    radius *= 1.5
                    failures = 0
        centers = np.array(centers_list)

    blocks = [centers[c] + rng.standard_normal((per_class, dim)) for c in range(num_classes)]
    data = np.vstack(blocks).astype(np.float32)
    labels = np.repeat(np.arange(num_classes, dtype=np.uint32), per_class)
    return LabeledDataset(EmbeddingSet(data), labels, labels, labels, num_classes)


def normalize_rows(embeddings: EmbeddingSet) -> EmbeddingSet:
    """Scale every row to unit L2 norm; directions are preserved."""
    norms = np.linalg.norm(embeddings.data, axis=1)
    if (norms == 0.0).any():
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"cannot normalize all-zero row {bad}")
    return EmbeddingSet(embeddings.data / norms[:, None])
