"""Distribution metrics for generated 2D samples.

Raw-space stand-ins for the usual feature-space generative metrics: Fréchet
distance between Gaussian fits, RBF-kernel MMD^2, k-NN manifold precision and
recall, and the fraction of samples landing inside the target's high-density
region.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial.distance import cdist

from .diffusion import SampleBatch
from .mixtures import GaussianMixture, log_density, sample_mixture


@dataclass
class MetricsReport:
    """All metrics for one run; one CSV row in the harness schema."""

    frechet: float
    mmd2: float
    precision: float
    recall: float
    support_frac: float
    n_gen: int
    n_real: int

    def __post_init__(self):
        if self.frechet < 0:
            raise ValueError("frechet must be nonnegative")
        for name in ("precision", "recall", "support_frac"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _points(batch):
    return batch.points if isinstance(batch, SampleBatch) else np.asarray(batch, dtype=np.float64)


def _fit_gaussian(x):
    mu = x.mean(axis=0, dtype=np.float64)
    cov = np.cov(x, rowvar=False, dtype=np.float64)
    return mu, np.atleast_2d(cov)


def _sqrt_trace_2x2(M):
    """tr(sqrt(M)) for a 2x2 matrix with nonnegative eigenvalues, closed form:
    sqrt(tr M + 2 sqrt(det M))."""
    det = max(float(np.linalg.det(M)), 0.0)
    inner = float(np.trace(M)) + 2.0 * np.sqrt(det)
    return np.sqrt(max(inner, 0.0))


def frechet_gaussian(A, B) -> float:
    """Fréchet distance between Gaussian fits of two point sets.

    ||mu_A - mu_B||^2 + tr(S_A + S_B - 2 (S_A S_B)^{1/2}), with the 2x2 matrix
    square-root trace in closed form. Near-singular covariances get a 1e-8
    ridge (with a warning).
    """
    a, b = _points(A), _points(B)
    d = a.shape[1]
    if len(a) < d + 1 or len(b) < d + 1:
        raise ValueError(f"need at least dim+1={d + 1} points per batch")
    mu_a, S_a = _fit_gaussian(a)
    mu_b, S_b = _fit_gaussian(b)
    ridge = False
    for S in (S_a, S_b):
        if np.linalg.eigvalsh(S).min() < 1e-10:
            S += 1e-8 * np.eye(d)
            ridge = True
    if ridge:
        warnings.warn("frechet_gaussian: degenerate covariance, added 1e-8 ridge")
    diff = mu_a - mu_b
    val = float(diff @ diff + np.trace(S_a) + np.trace(S_b) - 2.0 * _sqrt_trace_2x2(S_a @ S_b))
    return max(val, 0.0)


def median_pairwise_distance(A, B, cap: int = 2000) -> float:
    """Median distance over the pooled set, on a deterministic even-stride
    subset of at most ``cap`` points per side."""
    pts = []
    for x in (_points(A), _points(B)):
        if len(x) > cap:
            idx = np.linspace(0, len(x) - 1, cap).astype(np.int64)
            x = x[idx]
        pts.append(x)
    pool = np.concatenate(pts, axis=0)
    d = cdist(pool, pool)
    iu = np.triu_indices(len(pool), k=1)
    return float(np.median(d[iu]))


def _mean_kernel(X, Y, sigma2, chunk=1024):
    total = 0.0
    for lo in range(0, len(X), chunk):
        sq = cdist(X[lo:lo + chunk], Y, "sqeuclidean")
        total += float(np.sum(np.exp(-sq / (2.0 * sigma2)), dtype=np.float64))
    return total / (len(X) * len(Y))


def mmd_rbf(A, B, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) MMD^2 with a Gaussian kernel.

    The bandwidth defaults to the median pairwise distance of the pooled set;
    identical inputs give exactly zero.
    """
    a, b = _points(A), _points(B)
    if bandwidth is None:
        bandwidth = median_pairwise_distance(a, b)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    s2 = bandwidth * bandwidth
    return _mean_kernel(a, a, s2) + _mean_kernel(b, b, s2) - 2.0 * _mean_kernel(a, b, s2)


def _knn_radii(x, k, chunk=1024):
    """Distance from each point to its k-th nearest neighbor among the others."""
    out = np.empty(len(x))
    for lo in range(0, len(x), chunk):
        d = cdist(x[lo:lo + chunk], x)
        # k+1 smallest includes the zero self-distance
        out[lo:lo + chunk] = np.partition(d, k, axis=1)[:, k]
    return out


def _covered_fraction(queries, refs, radii, chunk=1024):
    """Fraction of query points within the ball of at least one reference."""
    hits = 0
    for lo in range(0, len(queries), chunk):
        d = cdist(queries[lo:lo + chunk], refs)
        hits += int(np.sum(np.any(d <= radii[None, :], axis=1)))
    return hits / len(queries)


def precision_recall_knn(real, gen, k: int = 5, return_detail: bool = False):
    """k-NN manifold precision and recall.

    A generated point counts toward precision when it falls inside the k-NN
    ball of some real point; recall is the symmetric statement. Reference
    points whose k-NN radius degenerates to zero (duplicates) are excluded
    from the manifold and counted in the detail.
    """
    r, g = _points(real), _points(gen)
    if k >= min(len(r), len(g)):
        raise ValueError(f"k={k} must be smaller than both sample sizes")
    rad_r = _knn_radii(r, k)
    rad_g = _knn_radii(g, k)
    keep_r, keep_g = rad_r > 0.0, rad_g > 0.0
    excluded = {"real": int(np.sum(~keep_r)), "gen": int(np.sum(~keep_g))}
    precision = _covered_fraction(g, r[keep_r], rad_r[keep_r]) if np.any(keep_r) else 0.0
    recall = _covered_fraction(r, g[keep_g], rad_g[keep_g]) if np.any(keep_g) else 0.0
    if return_detail:
        return precision, recall, excluded
    return precision, recall


def target_support_fraction(gen, gm_target: GaussianMixture, quantile: float = 0.05,
                            n_ref: int = 5000, seed: int = 7_333) -> float:
    """Share of generated points whose target log-density clears the given
    quantile of fresh target draws."""
    if not (0.0 < quantile < 1.0):
        raise ValueError("quantile must lie in (0, 1)")
    ref = sample_mixture(gm_target, n_ref, seed)
    threshold = float(np.quantile(log_density(gm_target, ref.points), quantile))
    g = _points(gen)
    return float(np.mean(log_density(gm_target, g) >= threshold))


def evaluate_samples(gen, real, gm_target: GaussianMixture, k: int = 5,
                     quantile: float = 0.05, bandwidth: float | None = None,
                     n_ref: int = 5000) -> MetricsReport:
    """Bundle all metrics for one generated batch against real target draws."""
    prec, rec = precision_recall_knn(real, gen, k=k)
    return MetricsReport(
        frechet=frechet_gaussian(gen, real),
        mmd2=mmd_rbf(gen, real, bandwidth=bandwidth),
        precision=prec,
        recall=rec,
        support_frac=target_support_fraction(gen, gm_target, quantile=quantile, n_ref=n_ref),
        n_gen=len(_points(gen)),
        n_real=len(_points(real)),
    )
