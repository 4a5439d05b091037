"""Pixel-space distribution metrics needing no pretrained models.

Real images are clustered into K bins with seeded k-means; generated images
are assigned to the nearest centroid. A bin counts as statistically different
when a two-proportion z-test rejects equality at the chosen significance, and
the two bin histograms are also compared as a Jensen-Shannon divergence in
bits. A plain pairwise-L1 spread stands in for learned diversity metrics.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .imagecore import Image


@dataclass
class BinModel:
    """K pixel-space centroids plus the training set's bin occupancy."""

    centroids: np.ndarray    # (K, D)
    counts: np.ndarray       # (K,)
    n_real: int
    inertia_history: list[float] | None = None

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def proportions(self) -> np.ndarray:
        return self.counts / max(self.n_real, 1)


def _flatten_set(images) -> np.ndarray:
    rows = []
    for img in images:
        arr = img.data if isinstance(img, Image) else np.asarray(img)
        rows.append(arr.reshape(-1).astype(np.float64))
    if not rows:
        return np.zeros((0, 0))
    return np.stack(rows)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d2 = (x * x).sum(axis=1)[:, None] - 2.0 * x @ c.T + (c * c).sum(axis=1)[None, :]
    return np.maximum(d2, 0.0)


def fit_bins(real_images, k: int, seed: int, max_iters: int = 100, tol: float = 1e-6) -> BinModel:
    """Lloyd's k-means over flattened pixels with seeded greedy init.

    Initial centroids are picked proportionally to squared distance from the
    already-chosen set; iteration stops at ``max_iters`` or when the relative
    inertia improvement drops below ``tol``. Deterministic for a fixed seed.
    """
    x = _flatten_set(real_images)
    n = x.shape[0]
    if k < 2:
        raise ValueError("need at least 2 bins")
    if n < k:
        raise ValueError(f"need at least k={k} images, got {n}")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[int(rng.integers(n))]
    d2 = _sq_dists(x, centroids[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            probs = d2 / total
            probs = probs / probs.sum()
            idx = int(rng.choice(n, p=probs))
        centroids[j] = x[idx]
        d2 = np.minimum(d2, _sq_dists(x, centroids[j : j + 1]).ravel())

    prev_inertia = np.inf
    history: list[float] = []
    assign = np.zeros(n, dtype=np.intp)
    for _ in range(max_iters):
        dists = _sq_dists(x, centroids)
        assign = dists.argmin(axis=1)
        inertia = float(np.maximum(dists[np.arange(n), assign], 0.0).sum())
        history.append(inertia)
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                # re-seed an empty bin at the worst-covered point
                far = int(dists[np.arange(n), assign].argmax())
                centroids[j] = x[far]
        if prev_inertia < np.inf and prev_inertia > 0:
            if (prev_inertia - inertia) / prev_inertia < tol:
                break
        elif inertia == 0.0:
            break
        prev_inertia = inertia
    dists = _sq_dists(x, centroids)
    assign = dists.argmin(axis=1)
    counts = np.bincount(assign, minlength=k).astype(np.int64)
    return BinModel(centroids=centroids, counts=counts, n_real=n, inertia_history=history)


def assign_bins(model: BinModel, images) -> np.ndarray:
    x = _flatten_set(images)
    return _sq_dists(x, model.centroids).argmin(axis=1)


def ndb_jsd(model: BinModel, generated_images, significance: float = 0.05) -> tuple[int, float]:
    """(number of statistically different bins, Jensen-Shannon divergence in bits)."""
    gen_assign = assign_bins(model, generated_images)
    n_gen = gen_assign.shape[0]
    if n_gen == 0:
        raise ValueError("need at least one generated image")
    gen_counts = np.bincount(gen_assign, minlength=model.k).astype(np.int64)

    z_crit = NormalDist().inv_cdf(1.0 - significance / 2.0)
    n1, n2 = model.n_real, n_gen
    p1 = model.counts / n1
    p2 = gen_counts / n2
    pooled = (model.counts + gen_counts) / (n1 + n2)
    se = np.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(p1 - p2) / se, 0.0)
    ndb = int((z > z_crit).sum())

    eps = 1e-12
    p = p1 + eps
    p /= p.sum()
    q = p2 + eps
    q /= q.sum()
    m = 0.5 * (p + q)
    jsd = 0.5 * float((p * np.log2(p / m)).sum()) + 0.5 * float((q * np.log2(q / m)).sum())
    return ndb, jsd


def pairwise_diversity(images) -> float:
    """Mean over all unordered pairs of the mean absolute pixel difference."""
    x = _flatten_set(images)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 images")
    total = 0.0
    for i in range(n - 1):
        total += float(np.abs(x[i + 1 :] - x[i]).mean(axis=1).sum())
    return total / (n * (n - 1) / 2)
