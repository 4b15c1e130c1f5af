"""Gaussian mixtures with a closed-form denoising oracle.

For a mixture corrupted by the forward process, the exact noise prediction is
available in closed form: each component k, noised to mean sqrt(abar)*mu_k and
covariance abar*Sigma_k + (1-abar)*I, contributes with its posterior
responsibility, and

    eps*(x_t) = sigma_t * sum_k resp_k(x_t) * C_k^{-1} (x_t - sqrt(abar) mu_k).

This is the quantity a trained denoiser approximates, so it serves as ground
truth for samplers and guidance without any training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, SampleBatch

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GaussianMixture:
    """weights (K,), means (K, d), covs (K, d, d), optional labels (K,)."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.weights):
                raise ValueError("labels must match component count")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {self.weights.sum()}, not 1")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if self.means.shape[0] != len(self.weights) or self.covs.shape[0] != len(self.weights):
            raise ValueError("means/covs must match component count")
        for k, C in enumerate(self.covs):
            if not np.allclose(C, C.T, atol=1e-12):
                raise ValueError(f"covariance {k} is not symmetric")
            try:
                np.linalg.cholesky(C)
            except np.linalg.LinAlgError:
                raise ValueError(f"covariance {k} is not positive definite")

    @property
    def n_components(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]


def sample_mixture(gm: GaussianMixture, n: int, seed: int) -> SampleBatch:
    """Draw n points: component by weight, then a Gaussian draw; labels come
    from the component labels (-1 everywhere when the mixture is unlabeled)."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.choice(gm.n_components, size=n, p=gm.weights)
    z = rng.standard_normal((n, gm.dim))
    chols = np.linalg.cholesky(gm.covs)
    pts = gm.means[idx] + np.einsum("nij,nj->ni", chols[idx], z)
    labels = gm.labels[idx] if gm.labels is not None else np.full(n, -1, dtype=np.int64)
    return SampleBatch(points=pts, labels=labels, seed=seed)


def restrict_to_label(gm: GaussianMixture, label: int) -> GaussianMixture:
    """Sub-mixture of the components carrying ``label``, weights renormalized."""
    if gm.labels is None:
        raise ValueError("mixture has no labels to condition on")
    mask = gm.labels == int(label)
    if not np.any(mask):
        raise ValueError(f"no component carries label {label}")
    w = gm.weights[mask]
    return GaussianMixture(weights=w / w.sum(), means=gm.means[mask],
                           covs=gm.covs[mask], labels=gm.labels[mask])


def noised_mixture(gm: GaussianMixture, t: int, sched: NoiseSchedule) -> GaussianMixture:
    """Marginal distribution of x_t when x0 ~ gm."""
    ab = float(sched.alpha_bar(t))
    eye = np.eye(gm.dim)
    return GaussianMixture(weights=gm.weights.copy(),
                           means=np.sqrt(ab) * gm.means,
                           covs=ab * gm.covs + (1.0 - ab) * eye,
                           labels=None if gm.labels is None else gm.labels.copy())


def _component_logpdfs(gm: GaussianMixture, x):
    """log N(x; mu_k, Sigma_k) for all components, shape (n, K)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    diff = x[:, None, :] - gm.means[None, :, :]          # (n, K, d)
    inv = np.linalg.inv(gm.covs)                          # (K, d, d)
    _, logdet = np.linalg.slogdet(gm.covs)
    mah = np.einsum("nkd,kde,nke->nk", diff, inv, diff)
    return -0.5 * (mah + logdet[None, :] + gm.dim * LOG_2PI)


def log_density(gm: GaussianMixture, x):
    """Log mixture density, stabilized by a max-shift over components."""
    x_in = np.asarray(x, dtype=np.float64)
    single = x_in.ndim == 1
    if not np.all(np.isfinite(x_in)):
        raise ValueError("x must be finite")
    lp = _component_logpdfs(gm, x_in) + np.log(gm.weights)[None, :]
    m = lp.max(axis=1, keepdims=True)
    out = (m + np.log(np.sum(np.exp(lp - m), axis=1, keepdims=True)))[:, 0]
    return float(out[0]) if single else out


def analytic_eps(gm: GaussianMixture, x_t, t: int, sched: NoiseSchedule, condition=None):
    """Exact noise prediction eps*(x_t | t, condition) for mixture data.

    ``condition`` restricts the mixture to the components carrying that label;
    None uses the full (marginal) mixture.
    """
    if np.any((np.asarray(t) < 1) | (np.asarray(t) > sched.T)):
        raise ValueError(f"step index {t} outside 1..{sched.T}")
    base = gm if condition is None else restrict_to_label(gm, condition)
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    ab = float(sched.alpha_bar(t))
    sigma = float(sched.sigma(t))
    noised_cov = ab * base.covs + (1.0 - ab) * np.eye(base.dim)
    noised_mean = np.sqrt(ab) * base.means
    inv = np.linalg.inv(noised_cov)
    _, logdet = np.linalg.slogdet(noised_cov)
    diff = x[:, None, :] - noised_mean[None, :, :]
    mah = np.einsum("nkd,kde,nke->nk", diff, inv, diff)
    logr = np.log(base.weights)[None, :] - 0.5 * (mah + logdet[None, :])
    logr -= logr.max(axis=1, keepdims=True)
    resp = np.exp(logr)
    resp /= resp.sum(axis=1, keepdims=True)
    pull = np.einsum("kde,nke->nkd", inv, diff)          # C_k^{-1}(x - m_k)
    eps = sigma * np.einsum("nk,nkd->nd", resp, pull)
    return eps[0] if single else eps


def label_posterior(gm: GaussianMixture, x_t, t: int, sched: NoiseSchedule):
    """Posterior probability of each distinct label given x_t, shape (n, L).

    Returns (labels, probs); useful for checking that conditional predictions
    recombine into the marginal one.
    """
    if gm.labels is None:
        raise ValueError("mixture has no labels")
    noised = noised_mixture(gm, t, sched)
    lp = _component_logpdfs(noised, x_t) + np.log(gm.weights)[None, :]
    labels = np.unique(gm.labels)
    cols = []
    for lab in labels:
        sub = lp[:, gm.labels == lab]
        m = sub.max(axis=1, keepdims=True)
        cols.append((m + np.log(np.exp(sub - m).sum(axis=1, keepdims=True)))[:, 0])
    lse = np.stack(cols, axis=1)
    lse -= lse.max(axis=1, keepdims=True)
    probs = np.exp(lse)
    probs /= probs.sum(axis=1, keepdims=True)
    return labels, probs
