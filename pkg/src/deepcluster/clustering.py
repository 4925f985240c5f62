"""Clustering of embedding rows: k-means, an SVD-based dimensionality
reduction, utterance-level strategies, and oracle permutation alignment.

k-means is Lloyd's algorithm with distance-weighted probabilistic seeding
and a fixed number of restarts, fully deterministic per seed.  The spectral
reduction projects rows of V onto the leading left singular vectors of the
degree-normalized embedding matrix, which stands in for an eigendecomposition
of the (never materialized) N x N inner-product affinity matrix.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DataError

STRATEGIES = ("global_kmeans", "segment_kmeans_oracle", "segment_spectral_oracle")


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        k = self.centroids.shape[0]
        if self.labels.size and not (0 <= self.labels.min() <= self.labels.max() < k):
            raise DataError("labels reference a centroid that does not exist")
        if self.inertia < 0:
            raise DataError("inertia cannot be negative")

    @property
    def k(self):
        return self.centroids.shape[0]


def _seed_centroids(points, k, rng):
    """First centroid uniform; each next one drawn with probability
    proportional to squared distance from the chosen set."""
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))  # all remaining mass at distance zero
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return points[chosen].copy()


def _lloyd(points, k, rng, max_iter, tol):
    centroids = _seed_centroids(points, k, rng)
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(points.shape[0]), new_labels].sum())
        history.append(inertia)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        old = centroids.copy()
        taken = set()
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = points[members].mean(axis=0)
            else:
                # re-seed an empty cluster from the farthest point not
                # already claimed by another empty cluster this round
                dist_own = d2[np.arange(points.shape[0]), labels].copy()
                dist_own[list(taken)] = -1.0
                far = int(np.argmax(dist_own))
                taken.add(far)
                centroids[c] = points[far]
        if np.sum((centroids - old) ** 2) <= tol:
            break
    d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(points.shape[0]), labels].sum())
    history.append(inertia)
    return ClusterAssignment(labels, centroids, inertia, history)


def kmeans(points, k, seed, restarts=10, max_iter=300, tol=1e-6) -> ClusterAssignment:
    """Best of ``restarts`` Lloyd runs by final inertia, deterministic per
    seed.  ``tol`` bounds the summed squared centroid movement per sweep."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DataError("points must be N x K")
    n = points.shape[0]
    if k < 1:
        raise DataError("k must be at least 1")
    if n < k:
        raise DataError(f"cannot form {k} clusters from {n} points")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([int(seed), r])
        result = _lloyd(points, k, rng, max_iter, tol)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def spectral_reduce(V, m, mode="ng_l2", return_singular_values=False):
    """Project embedding rows onto the m leading left singular vectors of
    D^{-1/2} V, where d = V (V^T 1) holds the row sums of V V^T.

    ng_l2 normalizes each reduced row to unit length.  paper_literal divides
    each row by the square root of its plain sum instead, and fails on rows
    whose sum is not positive; it exists for fidelity experiments only.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2:
        raise DataError("V must be N x K")
    if not 1 <= m <= V.shape[1]:
        raise DataError(f"m must lie in [1, {V.shape[1]}], got {m}")
    if mode not in ("ng_l2", "paper_literal"):
        raise ConfigError(f"unknown reduction mode {mode!r}")
    degrees = V @ (V.T @ np.ones(V.shape[0]))
    if np.any(degrees <= 0.0):
        raise DataError("degenerate degree: some rows have non-positive "
                        "affinity row sums")
    scaled = V / np.sqrt(degrees)[:, None]
    u, s, _ = np.linalg.svd(scaled, full_matrices=False)
    u = u[:, :m]
    if mode == "ng_l2":
        norms = np.linalg.norm(u, axis=1)
        degenerate = norms < 1e-12
        norms[degenerate] = 1.0
        u = u / norms[:, None]
        u[degenerate, 0] = 1.0
        u[degenerate, 1:] = 0.0
    else:
        sums = u.sum(axis=1)
        if np.any(sums <= 0.0):
            raise DataError(
                "math domain: paper_literal normalization needs positive "
                "row sums; use ng_l2"
            )
        u = u / np.sqrt(sums)[:, None]
    if return_singular_values:
        return u, s
    return u


def _derive_seed(seed, index):
    return int(np.random.default_rng([int(seed), 1000 + index]).integers(2**31))


def _nearest_centroid(points, centroids):
    d2 = ((points[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def _fit_then_assign(points, k, seed, keep):
    """k-means on the kept rows, nearest-centroid labels for every row.

    Falls back to fitting on all rows when no subset is requested or fewer
    than k rows are kept."""
    if keep is None or keep.all() or np.count_nonzero(keep) < k:
        return kmeans(points, k, seed).labels
    assignment = kmeans(points[keep], k, seed)
    return _nearest_centroid(points, assignment.centroids)


def cluster_utterance(segment_embeddings, k, strategy, seed, weights=None):
    """Label every bin of an utterance given per-segment embedding matrices.

    global_kmeans runs one k-means over all segments' rows concatenated, so
    labels share one space.  The segment_* strategies cluster each segment
    independently and leave label spaces unaligned; aligning them across
    segments is the caller's problem (see oracle_permutation).

    ``weights`` gives one binary vector per segment, aligned with that
    segment's embedding rows.  Zero-weight rows (near-silent bins, whose
    embeddings the training loss never constrained) are excluded from the
    cluster geometry fit and labeled afterwards by nearest centroid, so the
    result still covers every row.
    """
    if len(segment_embeddings) == 0:
        raise DataError("need at least one segment")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown clustering strategy {strategy!r}")
    sizes = [np.asarray(e).shape[0] for e in segment_embeddings]
    if weights is not None:
        if len(weights) != len(segment_embeddings):
            raise DataError("one weight vector per segment required")
        weights = [np.asarray(w).ravel() > 0 for w in weights]
        if [w.size for w in weights] != sizes:
            raise DataError("weights must align with embedding rows")
    if strategy == "global_kmeans":
        stacked = np.concatenate([np.asarray(e) for e in segment_embeddings])
        keep = None if weights is None else np.concatenate(weights)
        labels = _fit_then_assign(stacked, k, seed, keep)
        bounds = np.cumsum([0] + sizes)
        return [labels[bounds[i] : bounds[i + 1]] for i in range(len(sizes))]
    out = []
    for idx, emb in enumerate(segment_embeddings):
        emb = np.asarray(emb)
        if strategy == "segment_spectral_oracle":
            emb = spectral_reduce(emb, m=k)
        keep = None if weights is None else weights[idx]
        out.append(_fit_then_assign(emb, k, _derive_seed(seed, idx), keep))
    return out


MAX_PERMUTATION_SOURCES = 4


def oracle_permutation(segment_masks, segment_starts, mixture, references):
    """Best cluster-to-source assignment per segment by exhaustive search.

    ``segment_masks[s]`` has shape (k, frames, bins) over the frames starting
    at ``segment_starts[s]`` of the mixture spectrogram.  The cost of mapping
    source j to cluster p[j] is the squared error between the masked mixture
    and reference j over the segment.  Returns one tuple p per segment.
    """
    if len(segment_masks) != len(segment_starts):
        raise DataError("one start frame per segment mask required")
    k = np.asarray(segment_masks[0]).shape[0]
    if k > MAX_PERMUTATION_SOURCES:
        raise ConfigError(
            f"exhaustive alignment over {k}! permutations is not supported "
            f"(max {MAX_PERMUTATION_SOURCES} sources)"
        )
    if len(references) != k:
        raise DataError(f"got {k} masks per segment but {len(references)} references")
    for ref in references:
        if ref.values.shape != mixture.values.shape:
            raise DataError("reference and mixture spectrograms must align")
    perms = list(itertools.permutations(range(k)))
    out = []
    for masks, start in zip(segment_masks, segment_starts):
        masks = np.asarray(masks, dtype=np.float64)
        frames = masks.shape[1]
        mix = mixture.values[start : start + frames]
        if mix.shape[0] != frames:
            raise DataError("segment extends past the end of the mixture")
        refs = [r.values[start : start + frames] for r in references]
        # cost[c, j]: cluster c's masked mixture vs reference j
        cost = np.empty((k, k))
        for c in range(k):
            masked = masks[c] * mix
            for j in range(k):
                cost[c, j] = np.sum(np.abs(masked - refs[j]) ** 2)
        best = min(perms, key=lambda p: sum(cost[p[j], j] for j in range(k)))
        out.append(tuple(best))
    return out
