"""Exact k-nearest-neighbor search and neighbor-vote label inference.

Search is brute force with blocked distance computation: desk-scale reference
sets make exactness affordable and keep the test oracle trivial. Distances are
accumulated in float64 regardless of input precision so orderings are stable
near ties; exact ties are broken by ascending reference index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import EmbeddingSet

logger = logging.getLogger(__name__)

L2 = "l2"
COSINE = "cosine"
METRICS = (L2, COSINE)

HARD_MAJORITY = "hard_majority"
DISTANCE_WEIGHTED = "distance_weighted"
SOFT = "soft"
SCHEMES = (HARD_MAJORITY, DISTANCE_WEIGHTED, SOFT)

NEAREST_NEIGHBOR_WINS = "nearest_neighbor_wins"
LOWEST_CLASS_ID = "lowest_class_id"
TIE_RULES = (NEAREST_NEIGHBOR_WINS, LOWEST_CLASS_ID)

# Cap on per-block distance-matrix entries (~64 MB of float64 at 8M).
_BLOCK_ELEMS = 8_000_000


@dataclass(frozen=True)
class Neighbor:
    index: int
    distance: float


@dataclass(frozen=True)
class VoteConfig:
    scheme: str = HARD_MAJORITY
    tie_rule: str = NEAREST_NEIGHBOR_WINS
    epsilon: float = 1e-8  # weight = 1 / (distance + epsilon)

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown vote scheme {self.scheme!r}")
        if self.tie_rule not in TIE_RULES:
            raise ValueError(f"unknown tie rule {self.tie_rule!r}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


def distance(a, b, metric: str = L2) -> float:
    """Pairwise distance between two vectors under the given metric."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if metric == L2:
        return float(np.sqrt(np.sum((a - b) ** 2)))
    if metric == COSINE:
        na = np.linalg.norm(a)
        nb = np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise ValueError("cosine distance undefined for all-zero vector")
        return float(1.0 - np.dot(a, b) / (na * nb))
    raise ValueError(f"unknown metric {metric!r}")


def _pairwise_block(queries: np.ndarray, reference: np.ndarray, metric: str,
                    ref_cache: np.ndarray | None = None) -> np.ndarray:
    """Distance matrix (m x n) in float64.

    For L2 the squared-norm expansion feeds one GEMM; tiny negative residues
    from cancellation are clamped before the sqrt. `ref_cache` carries the
    per-metric reference precomputation (see _ref_cache) across blocks.
    """
    if metric == L2:
        ref_sq = ref_cache if ref_cache is not None else \
            np.einsum("ij,ij->i", reference, reference)
        q_sq = np.einsum("ij,ij->i", queries, queries)
        d2 = q_sq[:, None] + ref_sq[None, :] - 2.0 * (queries @ reference.T)
        np.maximum(d2, 0.0, out=d2)
        return np.sqrt(d2, out=d2)
    if metric == COSINE:
        q_norm = np.linalg.norm(queries, axis=1)
        r_norm = ref_cache if ref_cache is not None else \
            np.linalg.norm(reference, axis=1)
        if (q_norm == 0.0).any() or (r_norm == 0.0).any():
            raise ValueError("cosine distance undefined for all-zero vector")
        return 1.0 - (queries / q_norm[:, None]) @ (reference / r_norm[:, None]).T
    raise ValueError(f"unknown metric {metric!r}")


def _ref_cache(reference: np.ndarray, metric: str) -> np.ndarray:
    if metric == L2:
        return np.einsum("ij,ij->i", reference, reference)
    return np.linalg.norm(reference, axis=1)


def _topk_rows(dist: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row k smallest entries ordered by (distance, column index).

    argpartition narrows each row to k candidates; rows with extra entries
    tied at the k-th value are redone exactly so the index tie-break holds.
    """
    m, n = dist.shape
    if k >= n:
        idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
        return idx, np.take_along_axis(dist, idx, axis=1)

    part = np.argpartition(dist, k - 1, axis=1)[:, :k]
    part.sort(axis=1)  # ascending index, so the stable sort breaks ties by index
    vals = np.take_along_axis(dist, part, axis=1)
    order = np.argsort(vals, axis=1, kind="stable")
    idx = np.take_along_axis(part, order, axis=1)
    vals = np.take_along_axis(vals, order, axis=1)

    # A tie across the selection boundary makes argpartition's candidate set
    # index-arbitrary; redo those rows over the full candidate list.
    boundary = vals[:, -1]
    tied_rows = np.flatnonzero((dist <= boundary[:, None]).sum(axis=1) > k)
    for r in tied_rows:
        cand = np.flatnonzero(dist[r] <= boundary[r])
        order_r = np.lexsort((cand, dist[r, cand]))[:k]
        idx[r] = cand[order_r]
        vals[r] = dist[r, idx[r]]
    return idx, vals


def _refine_l2(reference: np.ndarray, queries: np.ndarray,
               idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact L2 distances for the selected neighbors, re-sorted.

    The GEMM expansion is used only to pick candidates: its cancellation
    residue (~1e-8 on coincident points) would leak into reported distances,
    so the k survivors are recomputed by direct differences and reordered by
    (distance, index).
    """
    diff = queries[:, None, :] - reference[idx]
    exact = np.sqrt(np.einsum("mkd,mkd->mk", diff, diff))
    col_order = np.argsort(idx, axis=1, kind="stable")
    idx = np.take_along_axis(idx, col_order, axis=1)
    exact = np.take_along_axis(exact, col_order, axis=1)
    val_order = np.argsort(exact, axis=1, kind="stable")
    return (np.take_along_axis(idx, val_order, axis=1),
            np.take_along_axis(exact, val_order, axis=1))


def _query_blocks(reference: np.ndarray, queries: np.ndarray, k: int, metric: str,
                  exclude_diagonal_offset: int | None = None):
    """Yield (row_start, idx, dist) blocks of exact top-k neighbors.

    With `exclude_diagonal_offset` set, query row i excludes reference column
    i + offset (self-exclusion for in-place correction).
    """
    n = reference.shape[0]
    cache = _ref_cache(reference, metric)
    block = max(1, _BLOCK_ELEMS // max(n, 1))
    for start in range(0, queries.shape[0], block):
        q = queries[start:start + block]
        dist = _pairwise_block(q, reference, metric, cache)
        if exclude_diagonal_offset is not None:
            rows = np.arange(q.shape[0])
            cols = rows + start + exclude_diagonal_offset
            dist[rows, cols] = np.inf
        idx, vals = _topk_rows(dist, k)
        if metric == L2:
            idx, vals = _refine_l2(reference, q, idx)
        yield start, idx, vals


def knn_query(reference: EmbeddingSet, query, k: int, metric: str = L2,
              exclude: int | None = None) -> list[Neighbor]:
    """Exact k nearest reference rows, ascending by (distance, index)."""
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != reference.d:
        raise ValueError(f"query shape {q.shape} does not match reference d={reference.d}")
    usable = reference.n - (1 if exclude is not None else 0)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > usable:
        raise ValueError(f"k too large: {k} > {usable} usable reference samples")

    dist = _pairwise_block(q[None, :], reference.data, metric)
    if exclude is not None:
        dist[0, exclude] = np.inf
    idx, vals = _topk_rows(dist, k)
    if metric == L2:
        idx, vals = _refine_l2(reference.data, q[None, :], idx)
    return [Neighbor(int(i), float(v)) for i, v in zip(idx[0], vals[0])]


def _vote_batch(nbr_idx: np.ndarray, nbr_dist: np.ndarray, ref_labels: np.ndarray,
                num_classes: int, config: VoteConfig) -> np.ndarray:
    """Vectorized label vote for a block of queries.

    nearest_neighbor_wins applies only when the minimum distance is unique
    (otherwise there is no single nearest neighbor and the lowest tied class
    id wins), which makes the vote a pure function of the neighbor multiset.
    """
    m, k = nbr_idx.shape
    votes = ref_labels[nbr_idx].astype(np.int64)
    flat_rows = np.repeat(np.arange(m), k)
    scores = np.zeros((m, num_classes))
    if config.scheme == DISTANCE_WEIGHTED:
        np.add.at(scores, (flat_rows, votes.ravel()),
                  (1.0 / (nbr_dist + config.epsilon)).ravel())
    else:  # hard majority; soft labels reduce to it at the argmax
        np.add.at(scores, (flat_rows, votes.ravel()), 1.0)

    best = scores.max(axis=1)
    tied = scores == best[:, None]
    lowest = tied.argmax(axis=1)
    if config.tie_rule == LOWEST_CLASS_ID:
        return lowest.astype(np.uint32)

    rows = np.arange(m)
    at_min = nbr_dist == nbr_dist.min(axis=1, keepdims=True)
    nearest = votes[rows, at_min.argmax(axis=1)]
    use_nearest = (at_min.sum(axis=1) == 1) & tied[rows, nearest]
    return np.where(use_nearest, nearest, lowest).astype(np.uint32)


def _neighbor_arrays(neighbors) -> tuple[np.ndarray, np.ndarray]:
    if len(neighbors) == 0:
        raise ValueError("neighbor list is empty")
    idx = np.array([nb.index for nb in neighbors], dtype=np.int64)
    dist = np.array([nb.distance for nb in neighbors], dtype=np.float64)
    return idx, dist


def vote_hard(neighbors, labels, config: VoteConfig = VoteConfig()) -> int:
    """Majority vote over neighbor labels.

    Count ties resolve per config.tie_rule: under nearest_neighbor_wins the
    tied class of the unique nearest neighbor wins; without a unique nearest
    (or when its class is not tied) the lowest tied class id wins.
    """
    idx, dist = _neighbor_arrays(neighbors)
    labels = np.asarray(labels)
    num_classes = int(labels.max()) + 1
    cfg = VoteConfig(HARD_MAJORITY, config.tie_rule, config.epsilon)
    return int(_vote_batch(idx[None, :], dist[None, :], labels, num_classes, cfg)[0])


def vote_weighted(neighbors, labels, config: VoteConfig = VoteConfig()) -> int:
    """Inverse-distance-weighted vote: argmax_c sum 1/(distance + epsilon)."""
    idx, dist = _neighbor_arrays(neighbors)
    labels = np.asarray(labels)
    num_classes = int(labels.max()) + 1
    cfg = VoteConfig(DISTANCE_WEIGHTED, config.tie_rule, config.epsilon)
    return int(_vote_batch(idx[None, :], dist[None, :], labels, num_classes, cfg)[0])


def vote_soft(neighbors, labels, num_classes: int) -> np.ndarray:
    """Per-class neighbor fractions; sums to 1."""
    idx, _ = _neighbor_arrays(neighbors)
    counts = np.bincount(np.asarray(labels)[idx].astype(np.int64), minlength=num_classes)
    return counts / len(neighbors)


def correct_iterknn(embeddings: EmbeddingSet, labels, num_classes: int, k: int,
                    metric: str = L2, vote: VoteConfig = VoteConfig()) -> np.ndarray:
    """Re-infer every label from its k nearest other samples.

    All votes read the pre-correction label array; the sample itself is
    excluded from its own neighborhood. Returns a fresh label array.
    """
    labels = np.asarray(labels)
    n = embeddings.n
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match n={n}")
    if k < 1 or k >= n:
        raise ValueError(f"k must be in [1, n-1] = [1, {n - 1}], got {k}")

    out = np.empty(n, dtype=np.uint32)
    for start, idx, dist in _query_blocks(embeddings.data, embeddings.data, k, metric,
                                          exclude_diagonal_offset=0):
        out[start:start + idx.shape[0]] = _vote_batch(idx, dist, labels, num_classes, vote)
    return out


def low_loss_reference_mask(labels, num_classes: int, cumulative_loss,
                            per_class_count) -> np.ndarray:
    """Mark, per class, the `per_class_count` samples with lowest cumulative
    loss (ties by lower index). Classes smaller than the count contribute all
    their members."""
    labels = np.asarray(labels)
    loss = np.asarray(cumulative_loss, dtype=np.float64)
    if loss.shape != labels.shape:
        raise ValueError("labels and cumulative_loss must have the same length")
    counts = np.broadcast_to(np.asarray(per_class_count, dtype=np.int64), (num_classes,))
    if (counts < 1).any():
        raise ValueError("per_class_count must be >= 1")

    mask = np.zeros(labels.shape[0], dtype=bool)
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        take = min(int(counts[c]), members.size)
        order = np.lexsort((members, loss[members]))[:take]
        mask[members[order]] = True
    return mask


def correct_selknn(embeddings: EmbeddingSet, labels, num_classes: int,
                   cumulative_loss, per_class_count, k: int, metric: str = L2,
                   vote: VoteConfig = VoteConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Correct labels against a trusted low-loss reference subset.

    Per class, the `per_class_count` samples with lowest cumulative loss
    (ties by lower index) keep their labels and form the reference set;
    every other sample is re-labeled by a vote over its k nearest reference
    samples. Returns (new_labels, reference_mask).
    """
    labels = np.asarray(labels)
    n = embeddings.n
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match n={n}")
    mask = low_loss_reference_mask(labels, num_classes, cumulative_loss, per_class_count)
    reference = np.flatnonzero(mask)
    if reference.size == 0:
        raise ValueError("empty reference set")
    if k > reference.size:
        raise ValueError(f"k too large: {k} > reference set size {reference.size}")

    new_labels = labels.astype(np.uint32).copy()
    queries = np.flatnonzero(~mask)
    if queries.size:
        ref_data = embeddings.data[reference]
        ref_labels = labels[reference]
        q_data = embeddings.data[queries]
        for start, idx, dist in _query_blocks(ref_data, q_data, k, metric):
            block = queries[start:start + idx.shape[0]]
            new_labels[block] = _vote_batch(idx, dist, ref_labels, num_classes, vote)
    return new_labels, mask


def predict_deep_knn(reference: EmbeddingSet, reference_labels, queries: EmbeddingSet,
                     k: int, metric: str = L2, vote: VoteConfig = VoteConfig(),
                     num_classes: int | None = None) -> np.ndarray:
    """Classify query rows by vote over their k nearest reference rows."""
    if reference.d != queries.d:
        raise ValueError(f"dimension mismatch: reference d={reference.d}, queries d={queries.d}")
    ref_labels = np.asarray(reference_labels)
    if ref_labels.shape != (reference.n,):
        raise ValueError("reference_labels must align with reference rows")
    if k < 1 or k > reference.n:
        raise ValueError(f"k must be in [1, {reference.n}], got {k}")
    if num_classes is None:
        num_classes = int(ref_labels.max()) + 1

    out = np.empty(queries.n, dtype=np.uint32)
    for start, idx, dist in _query_blocks(reference.data, queries.data, k, metric):
        out[start:start + idx.shape[0]] = _vote_batch(idx, dist, ref_labels, num_classes, vote)
    return out


def clamp_k(k: int, usable: int, context: str) -> int:
    """Clamp k to the usable reference size, logging when it shrinks."""
    if k <= usable:
        return k
    logger.warning("k=%d exceeds %s (%d usable); clamping", k, context, usable)
    return usable
