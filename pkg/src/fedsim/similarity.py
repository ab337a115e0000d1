"""Representation-similarity metrics over penultimate-layer weight matrices.

The compared objects are PLR matrices: the [units, fan_in] weight matrix of
the last hidden dense layer. Rows play the role of examples in the kernel
formalism, so two models sharing an architecture always compare cleanly.
All statistics are computed in float64 regardless of parameter dtype.
"""

from __future__ import annotations

import numpy as np

from .engine import Architecture, ModelParams

DEFAULT_BANDWIDTH_SCALE = 0.5
_DEGENERATE_HSIC = 1e-12


def extract_plr(params: ModelParams, arch: Architecture) -> np.ndarray:
    """Weight matrix [units, fan_in] of the penultimate dense layer, bias dropped."""
    if arch.penultimate_name is None:
        raise ValueError("architecture has no penultimate dense layer (needs two Dense layers)")
    return params.get(arch.penultimate_name).weight.copy()


def _pairwise_sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xn = (x * x).sum(axis=1)[:, None]
    yn = (y * y).sum(axis=1)[None, :]
    d2 = xn + yn - 2.0 * (x @ y.T)
    return np.maximum(d2, 0.0)


def _median_distance(d2: np.ndarray) -> float:
    n = d2.shape[0]
    off_diag = np.sqrt(d2[np.triu_indices(n, k=1)])
    return float(np.median(off_diag))


def rbf_gram(x: np.ndarray, bandwidth_scale: float = DEFAULT_BANDWIDTH_SCALE) -> np.ndarray:
    """RBF kernel matrix over rows, sigma = bandwidth_scale * median row distance.

    A zero median (more than half the row pairs identical) degenerates to the
    all-ones kernel, which centering later annihilates.
    """
    x = np.asarray(x, np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need a 2-D matrix with >= 2 rows, got shape {x.shape}")
    d2 = _pairwise_sq_dists(x, x)
    sigma = bandwidth_scale * _median_distance(d2)
    if sigma == 0.0:
        return np.ones_like(d2)
    k = np.exp(-d2 / (2.0 * sigma * sigma))
    return (k + k.T) / 2.0


def _center(k: np.ndarray) -> np.ndarray:
    # H K H with H = I - 11^T/n, applied without materializing H
    row = k.mean(axis=0, keepdims=True)
    col = k.mean(axis=1, keepdims=True)
    return k - row - col + k.mean()


def hsic(k: np.ndarray, l: np.ndarray) -> float:
    """Biased HSIC estimator: trace(K H L H) / (n-1)^2."""
    if k.shape != l.shape or k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"gram matrices must be square and same size, got {k.shape} vs {l.shape}")
    n = k.shape[0]
    if n < 2:
        raise ValueError("HSIC needs n >= 2")
    return float((_center(np.asarray(k, np.float64)) * _center(np.asarray(l, np.float64))).sum()
                 / (n - 1) ** 2)


def kernel_cka(x: np.ndarray, y: np.ndarray,
               bandwidth_scale: float = DEFAULT_BANDWIDTH_SCALE) -> float:
    """RBF-kernel CKA in [0,1]: HSIC(Kx,Ky) / sqrt(HSIC(Kx,Kx) HSIC(Ky,Ky)).

    Returns 0 for a degenerate constant representation (self-HSIC ~ 0),
    which treats it as maximally dissimilar rather than dividing by zero.
    """
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    kx = rbf_gram(x, bandwidth_scale)
    ky = rbf_gram(y, bandwidth_scale)
    hxx = hsic(kx, kx)
    hyy = hsic(ky, ky)
    if hxx < _DEGENERATE_HSIC or hyy < _DEGENERATE_HSIC:
        return 0.0
    return hsic(kx, ky) / np.sqrt(hxx * hyy)


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """CKA with the linear kernel K = XX^T."""
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    kx, ky = x @ x.T, y @ y.T
    hxx = hsic(kx, kx)
    hyy = hsic(ky, ky)
    if hxx < _DEGENERATE_HSIC or hyy < _DEGENERATE_HSIC:
        return 0.0
    return hsic(kx, ky) / np.sqrt(hxx * hyy)


def mmd(x: np.ndarray, y: np.ndarray,
        bandwidth_scale: float = DEFAULT_BANDWIDTH_SCALE) -> float:
    """Biased squared MMD with an RBF kernel, pooled-median bandwidth.

    Row counts may differ. mmd(x, x) == 0 by construction.
    """
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("MMD needs >= 2 rows on each side")
    pooled = np.concatenate([x, y])
    sigma = bandwidth_scale * _median_distance(_pairwise_sq_dists(pooled, pooled))
    if sigma == 0.0:
        return 0.0
    s = 2.0 * sigma * sigma
    kxx = np.exp(-_pairwise_sq_dists(x, x) / s).mean()
    kyy = np.exp(-_pairwise_sq_dists(y, y) / s).mean()
    kxy = np.exp(-_pairwise_sq_dists(x, y) / s).mean()
    return float(kxx + kyy - 2.0 * kxy)


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two flat vectors."""
    u, v = np.asarray(u, np.float64).ravel(), np.asarray(v, np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(u @ v / (nu * nv))


def euclidean_dist(u: np.ndarray, v: np.ndarray) -> float:
    u, v = np.asarray(u, np.float64).ravel(), np.asarray(v, np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    return float(np.linalg.norm(u - v))


def similarity_score(metric: str, reference: np.ndarray, other: np.ndarray) -> float:
    """Uniform 'larger is more similar' scoring used by the defense.

    mmd and euclidean are distances, so their score is the negated value.
    """
    if metric == "kernel_cka":
        return kernel_cka(reference, other)
    if metric == "linear_cka":
        return linear_cka(reference, other)
    if metric == "mmd":
        return -mmd(reference, other)
    if metric == "cosine":
        return cosine_sim(reference, other)
    if metric == "euclidean":
        return -euclidean_dist(reference, other)
    raise ValueError(f"unknown similarity metric '{metric}'")


SIMILARITY_METRICS = ("kernel_cka", "linear_cka", "mmd", "cosine", "euclidean")
