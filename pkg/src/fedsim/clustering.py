"""1-D two-means clustering of similarity scores and per-layer cluster distance."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import ModelParams

log = logging.getLogger(__name__)


@dataclass
class ClusterAssignment:
    """Two-way split of 1-D scores; cluster 0 holds the lower centroid.

    suspect_label is None when all values coincide (single cluster, nobody
    suspected). On an exact size tie the lower-scoring cluster is suspect,
    since every implemented attack drags scores down, and a warning is
    logged because tied clusters mean the attacker bound was violated.
    """

    labels: np.ndarray
    centroids: tuple[float, ...]
    majority_label: int
    suspect_label: Optional[int]

    def suspect_indices(self) -> np.ndarray:
        if self.suspect_label is None:
            return np.empty(0, np.int64)
        return np.flatnonzero(self.labels == self.suspect_label)


def _within_sse(v: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for lab in (0, 1):
        grp = v[labels == lab]
        if grp.size:
            total += float(((grp - grp.mean()) ** 2).sum())
    return total


def kmeans_2(values) -> ClusterAssignment:
    """Lloyd's algorithm on 1-D values with deterministic (min, max) init.

    Iterates until the assignment is stable; midpoint ties go to the lower
    cluster. Lloyd can stall in a local optimum on 1-D data, so the result
    is checked against every sorted-threshold split and replaced when one
    is strictly better (lowest cut wins among equals), making the output
    the global 2-means optimum.
    """
    v = np.asarray(values, np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ValueError(f"need >= 2 scalar values, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")

    if v.min() == v.max():
        return ClusterAssignment(
            labels=np.zeros(v.size, np.int64),
            centroids=(float(v[0]),),
            majority_label=0,
            suspect_label=None,
        )

    c0, c1 = float(v.min()), float(v.max())
    labels = None
    while True:
        new_labels = (np.abs(v - c1) < np.abs(v - c0)).astype(np.int64)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        c0 = float(v[labels == 0].mean())
        c1 = float(v[labels == 1].mean())

    best_sse = _within_sse(v, labels)
    order = np.argsort(v, kind="stable")
    for cut in range(1, v.size):
        cut_labels = np.zeros(v.size, np.int64)
        cut_labels[order[cut:]] = 1
        sse = _within_sse(v, cut_labels)
        if sse < best_sse:
            best_sse = sse
            labels = cut_labels
    c0 = float(v[labels == 0].mean())
    c1 = float(v[labels == 1].mean())

    n0, n1 = int((labels == 0).sum()), int((labels == 1).sum())
    if n0 == n1:
        log.warning(
            "tied cluster sizes (%d each); suspecting the lower-score cluster", n0
        )
        suspect = 0
    else:
        suspect = 0 if n0 < n1 else 1
    return ClusterAssignment(
        labels=labels,
        centroids=(c0, c1),
        majority_label=1 - suspect,
        suspect_label=suspect,
    )


def correlation_distance_matrix(vectors: list[np.ndarray]) -> np.ndarray:
    """Pairwise 1 - Pearson(u, v); a constant vector makes the pair's distance 1."""
    n = len(vectors)
    d = np.zeros((n, n))
    centered = []
    norms = []
    for vec in vectors:
        c = vec.astype(np.float64) - vec.mean()
        centered.append(c)
        norms.append(np.linalg.norm(c))
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] == 0.0 or norms[j] == 0.0:
                dist = 1.0
            else:
                dist = 1.0 - float(centered[i] @ centered[j]) / (norms[i] * norms[j])
            d[i, j] = d[j, i] = dist
    return d


def single_linkage_root_distance(dist: np.ndarray) -> float:
    """Height of the final single-linkage merge.

    Merges happen at increasing distances, so the root joins the last two
    clusters at the threshold where the distance graph becomes connected:
    the largest edge of a minimum spanning tree (computed with Prim).
    """
    n = dist.shape[0]
    in_tree = np.zeros(n, bool)
    best = np.full(n, np.inf)
    in_tree[0] = True
    best = np.minimum(best, dist[0])
    best[0] = np.inf
    root = 0.0
    for _ in range(n - 1):
        nxt = int(np.argmin(np.where(in_tree, np.inf, best)))
        root = max(root, float(best[nxt]))
        in_tree[nxt] = True
        best = np.minimum(best, dist[nxt])
    return root


def per_layer_cluster_distance(updates: list[ModelParams]) -> list[tuple[str, float]]:
    """Root cluster distance per parameterized layer across client updates.

    Each client's layer weights are flattened; pairwise correlation distance
    feeds a single-linkage merge whose final height is reported.
    """
    if len(updates) < 3:
        raise ValueError(f"need >= 3 updates, got {len(updates)}")
    out = []
    for layer_idx, layer in enumerate(updates[0].layers):
        vectors = [u.layers[layer_idx].weight.ravel() for u in updates]
        dist = correlation_distance_matrix(vectors)
        out.append((layer.name, single_linkage_root_distance(dist)))
    return out
