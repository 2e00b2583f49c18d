"""Sequence-level quality proxy and rank correlation.

The quality score follows the MAUVE recipe with a cheap featurizer: each
sequence becomes an L2-normalized vector of hashed n-gram counts (all
orders up to ``ngram_order``), the pooled vectors of both sample sets
are quantized with one shared k-means, and the two resulting cluster histograms ``p`` (reference) and ``q``
(model) are compared along the divergence frontier

    x(lam) = exp(-c * KL(q || r_lam)),  y(lam) = exp(-c * KL(p || r_lam)),
    r_lam = lam * p + (1 - lam) * q.

The score is the area under that curve. It is a *proxy*: it uses n-gram
features rather than a neural embedding, and its values are not
comparable with published MAUVE numbers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from scipy.stats import rankdata, spearmanr
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .dist import CondDist, epsilon_smooth
from .measures import kl

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


class CorrelationUndefined(ValueError):
    """Rank correlation of a constant vector."""


class TooFewSamples(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    ngram_order: int = 3
    hash_dim: int = 1024
    n_clusters: int = 32
    scaling_c: float = 5.0
    grid_size: int = 99
    kmeans_seed: int = 0
    kmeans_iters: int = 50
    smoothing: float = 1e-6

    def __post_init__(self):
        if self.ngram_order < 1 or self.hash_dim < 1:
            raise ValueError("ngram_order and hash_dim must be positive")
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be >= 2")
        if not self.scaling_c > 0 or self.grid_size < 1:
            raise ValueError("scaling_c must be > 0 and grid_size >= 1")

    @property
    def grid(self) -> np.ndarray:
        return np.arange(1, self.grid_size + 1) / (self.grid_size + 1)


@dataclass(frozen=True)
class QualityScore:
    value: float
    n_model_samples: int
    n_ref_samples: int
    spec: FeatureSpec


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _hash_ngrams(ids: np.ndarray, n: int) -> np.ndarray:
    h = np.full(ids.size - n + 1, np.uint64(n))
    with np.errstate(over="ignore"):
        for j in range(n):
            h = _mix64(h ^ ids[j: ids.size - n + 1 + j].astype(np.uint64))
    return h


def featurize(seqs: Sequence[Sequence[int]], spec: FeatureSpec = FeatureSpec()) -> np.ndarray:
    """Rows of hashed 1..``spec.ngram_order``-gram counts, one per sequence, L2-normalized."""
    out = np.zeros((len(seqs), spec.hash_dim))
    for row, seq in enumerate(seqs):
        ids = np.asarray(seq, dtype=np.int64)
        if ids.size == 0:
            raise ValueError(f"sequence {row} is empty")
        for n in range(1, min(spec.ngram_order, ids.size) + 1):
            buckets = (_hash_ngrams(ids, n) % np.uint64(spec.hash_dim)).astype(np.int64)
            np.add.at(out[row], buckets, 1.0)
        out[row] /= np.linalg.norm(out[row])
    return out


def kmeans(x: np.ndarray, k: int, seed: int = 0, iters: int = 50) -> np.ndarray:
    """Cluster label per row: one k-means++ initialization followed by Lloyd iterations."""
    if x.shape[0] < k:
        raise TooFewSamples(f"k-means needs at least {k} points, got {x.shape[0]}")
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=iters, algorithm="lloyd",
                random_state=seed)
    with warnings.catch_warnings():
        # duplicate rows can leave fewer distinct points than clusters
        warnings.simplefilter("ignore", ConvergenceWarning)
        return km.fit_predict(x)


def frontier_area(p_hist: np.ndarray, q_hist: np.ndarray, spec: FeatureSpec = FeatureSpec()) -> float:
    """Area under the divergence frontier of two histograms over the same bins."""
    # the area is symmetric in its arguments; a fixed argument order makes it so bit-for-bit
    if tuple(p_hist / p_hist.sum()) > tuple(q_hist / q_hist.sum()):
        p_hist, q_hist = q_hist, p_hist
    p =epsilon_smooth(CondDist.from_probs(p_hist / p_hist.sum(), check=False), spec.smoothing)
    q = epsilon_smooth(CondDist.from_probs(q_hist / q_hist.sum(), check=False), spec.smoothing)
    xs, ys = [0.0, 1.0], [1.0, 0.0]
    for lam in spec.grid:
        r = CondDist.from_probs(lam * p.probs + (1 - lam) * q.probs, check=False)
        xs.append(math.exp(-spec.scaling_c * max(kl(q, r), 0.0)))
        ys.append(math.exp(-spec.scaling_c * max(kl(p, r), 0.0)))
    xs, ys = np.asarray(xs), np.asarray(ys)
    order = np.lexsort((-ys, xs))
    xs, ys = xs[order], ys[order]
    return float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))


def quality_score(model_seqs: Sequence[Sequence[int]], ref_seqs: Sequence[Sequence[int]],
                  spec: FeatureSpec = FeatureSpec()) -> QualityScore:
    """Frontier-area quality of ``model_seqs`` against ``ref_seqs`` (higher is closer)."""
    if len(model_seqs) < spec.n_clusters or len(ref_seqs) < spec.n_clusters:
        raise TooFewSamples(f"need at least n_clusters={spec.n_clusters} sequences on each side "
                            f"(got {len(model_seqs)} model, {len(ref_seqs)} reference)")
    fm = featurize(model_seqs, spec)
    fr = featurize(ref_seqs, spec)
    pooled = np.vstack([fm, fr])
    side = np.concatenate([np.zeros(len(fm), np.int8), np.ones(len(fr), np.int8)])
    # canonical row order: clustering must not depend on argument or sample order
    canon = np.lexsort(pooled.T[::-1])
    labels = np.empty(len(pooled), dtype=np.int64)
    labels[canon] = kmeans(pooled[canon], spec.n_clusters, spec.kmeans_seed, spec.kmeans_iters)
    q_hist = np.bincount(labels[side == 0], minlength=spec.n_clusters).astype(np.float64)
    p_hist = np.bincount(labels[side == 1], minlength=spec.n_clusters).astype(np.float64)
    area = frontier_area(p_hist, q_hist, spec)
    return QualityScore(min(max(area, np.finfo(float).tiny), 1.0), len(model_seqs), len(ref_seqs), spec)


def average_ranks(xs: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    return rankdata(np.asarray(xs, dtype=np.float64), method="average")


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman's rho with average ranks for ties."""
    if len(xs) != len(ys):
        raise ValueError("spearman needs equally long inputs")
    if len(xs) < 3:
        raise ValueError("spearman needs at least 3 points")
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if np.isnan(x).any() or np.isnan(y).any():
        raise ValueError("spearman input contains NaN")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise CorrelationUndefined("rank correlation is undefined for a constant input")
    return max(-1.0, min(1.0, float(spearmanr(x, y).statistic)))


def permutation_pvalue(xs: Sequence[float], ys: Sequence[float], n_perm: int = 10_000, seed: int = 0) -> float:
    """Two-sided p-value of Spearman's rho under random re-pairing of ``ys``.

    Uses the ``(1 + hits) / (1 + n_perm)`` estimator, so it is never 0.
    """
    rho = spearman(xs, ys)
    rx, ry = average_ranks(xs), average_ranks(ys)
    rng = np.random.Generator(np.random.PCG64(seed))
    rx_c = rx - rx.mean()
    ry_c = ry - ry.mean()
    den = math.sqrt(float(rx_c @ rx_c) * float(ry_c @ ry_c))
    perms = np.argsort(rng.random((n_perm, ry.size)), axis=1)
    rhos = (ry_c[perms] @ rx_c) / den
    hits = int(np.count_nonzero(np.abs(rhos) >= abs(rho) - 1e-12))
    return (1 + hits) / (1 + n_perm)
