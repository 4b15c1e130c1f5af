"""Discrete noise schedule, forward corruption, and reverse-time samplers.

Samplers are parameterized by an arbitrary eps-prediction function
``eps_fn(x, t_index, labels) -> (n, d) array`` so the same machinery runs on
trained denoisers and on the closed-form mixture oracle. Step indices are
1-based (t = 1..T); training uses continuous t in [0, 1] which maps to indices
via :func:`t_norm_to_index`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SamplingAborted(RuntimeError):
    """Raised when an eps prediction goes non-finite mid-chain."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite eps prediction at step t={step}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule; arrays indexed 0..T-1 for steps 1..T."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def alpha_bar(self, t):
        return self.alpha_bars[np.asarray(t) - 1]

    def sigma(self, t):
        return self.sigmas[np.asarray(t) - 1]


@dataclass
class SampleBatch:
    """Generated or drawn points with per-point labels (-1 = null) and the seed
    that produced them."""

    points: np.ndarray
    labels: np.ndarray
    seed: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels must have equal length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("sample points must be finite")

    def __len__(self):
        return len(self.points)


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("schedule needs T >= 2")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ValueError("need 0 < beta_min < beta_max < 1")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = np.sqrt(1.0 - alpha_bars)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars, sigmas=sigmas)


def t_norm_to_index(t_norm, T: int):
    """Map continuous training time in [0, 1] to a 1-based schedule index."""
    t = np.asarray(t_norm, dtype=np.float64)
    return (np.round(t * (T - 1)).astype(np.int64) + 1)


def index_to_t_norm(t, T: int):
    return (np.asarray(t, dtype=np.float64) - 1.0) / (T - 1.0)


def _check_t(t, T):
    t = np.asarray(t)
    if np.any((t < 1) | (t > T)):
        raise ValueError(f"step index {t} outside 1..{T}")


def forward_noise(x0, t, eps, sched: NoiseSchedule):
    """Corrupt x0 to x_t: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    _check_t(t, sched.T)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    ab = sched.alpha_bar(t)
    ab = np.expand_dims(ab, -1) if np.ndim(ab) == x0.ndim - 1 else ab
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def _eval_eps(eps_fn, x, t, labels):
    eps = np.asarray(eps_fn(x, t, labels), dtype=np.float64)
    if eps.shape != x.shape:
        raise ValueError(f"eps_fn returned shape {eps.shape}, expected {x.shape}")
    if not np.all(np.isfinite(eps)):
        raise SamplingAborted(int(t))
    return eps


def ddpm_sample(eps_fn, n: int, sched: NoiseSchedule, seed: int,
                labels=None, data_dim: int = 2) -> SampleBatch:
    """Ancestral reverse chain from N(0, I) with fixed beta_t reverse variance."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    labels = np.full(n, -1, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    x = rng.standard_normal((n, data_dim))
    for t in range(sched.T, 0, -1):
        eps = _eval_eps(eps_fn, x, t, labels)
        ab, beta, alpha = sched.alpha_bars[t - 1], sched.betas[t - 1], sched.alphas[t - 1]
        mean = (x - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
        if t > 1:
            x = mean + np.sqrt(beta) * rng.standard_normal((n, data_dim))
        else:
            x = mean
    return SampleBatch(points=x, labels=labels, seed=seed)


def ddim_index_sequence(T: int, num_steps: int):
    """Evenly spaced 1-based indices, descending from T to 1."""
    if not (1 <= num_steps <= T):
        raise ValueError(f"num_steps must lie in 1..{T}")
    if num_steps == 1:
        return np.array([T], dtype=np.int64)
    return np.round(np.linspace(T, 1, num_steps)).astype(np.int64)


def ddim_sample(eps_fn, n: int, num_steps: int, sched: NoiseSchedule, seed: int,
                labels=None, data_dim: int = 2) -> SampleBatch:
    """Deterministic (eta = 0) sampler over an evenly spaced index subsequence."""
    if n < 1:
        raise ValueError("need n >= 1")
    taus = ddim_index_sequence(sched.T, num_steps)
    rng = np.random.default_rng(seed)
    labels = np.full(n, -1, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    x = rng.standard_normal((n, data_dim))
    for i, t in enumerate(taus):
        eps = _eval_eps(eps_fn, x, int(t), labels)
        ab = sched.alpha_bars[t - 1]
        x0_hat = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        ab_prev = sched.alpha_bars[taus[i + 1] - 1] if i + 1 < len(taus) else 1.0
        x = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps
    return SampleBatch(points=x, labels=labels, seed=seed)
