"""Guidance target constructions, the controllable-w distribution, training
schedules, and the single fine-tuning step.

Four guidance variants share one algebraic form, a + (w-1) * (a - b); they
differ in where the two branches come from and when the offset is applied:

  cfg     sampling time, both branches from the fine-tuned model
  dog     sampling time, marginal branch from the frozen source model
  mg      training time, both branches from the training model itself
  dogfit  training time, marginal branch from the frozen source model

``dogfit_control`` additionally feeds the sampled guidance strength to the
model as an input so a single trained network covers a range of strengths.
Offsets injected into training targets are plain evaluated arrays, so they are
constants to the loss gradient (the stop-gradient semantics).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .diffusion import NoiseSchedule, forward_noise, index_to_t_norm, t_norm_to_index
from .nn import Denoiser, OptimState

log = logging.getLogger(__name__)

METHODS = ("none", "cfg", "dog", "mg", "dogfit", "dogfit_control")

# Methods that build a guided training target (the rest train on plain noise).
TRAINING_GUIDED = ("mg", "dogfit", "dogfit_control")
# Methods that need two forward passes per sampling step.
DUAL_PASS = ("cfg", "dog")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class GuidanceConfig:
    """Method selector plus guidance strength, w-distribution decay rate,
    late-start / cut-off thresholds, and label dropout."""

    method: str = "dogfit"
    w: float = 1.5
    lam: float = 3.0
    tau_s: int = 0
    tau_c: float = 1.0
    label_dropout: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown guidance method {self.method!r}")
        if self.w < 1.0:
            raise ValueError("guidance strength w must be >= 1")
        if self.lam <= 0.0:
            raise ValueError("decay rate lambda must be positive")
        if not (0.0 <= self.tau_c <= 1.0):
            raise ValueError("cut-off tau_c must lie in [0, 1]")
        if self.tau_s < 0:
            raise ValueError("late-start tau_s must be >= 0")
        if not (0.0 <= self.label_dropout < 1.0):
            raise ValueError("label_dropout must lie in [0, 1)")


# ---------------------------------------------------------------------------
# Pure target / combination ops


def cfg_combine(eps_c, eps_u, w):
    """eps_c + (w-1) * (eps_c - eps_u): amplify the condition at sampling time."""
    eps_c = np.asarray(eps_c, dtype=np.float64)
    eps_u = np.asarray(eps_u, dtype=np.float64)
    return eps_c + _wcol(w, eps_c) * (eps_c - eps_u)


def dog_combine(eps_c_target, eps_u_source, w):
    """Same extrapolation with the frozen source model as the marginal branch."""
    return cfg_combine(eps_c_target, eps_u_source, w)


def mg_target(eps, eps_c, eps_u, w):
    """Guided training target eps + (w-1) * sg(eps_c - eps_u), both branches
    from the training model. Inputs are plain arrays, so the offset is already
    detached from the parameters."""
    eps = np.asarray(eps, dtype=np.float64)
    off = np.asarray(eps_c, dtype=np.float64) - np.asarray(eps_u, dtype=np.float64)
    return eps + _wcol(w, eps) * off


def dogfit_target(eps, eps_c_target, eps_u_source, w):
    """Guided target with the frozen source supplying the marginal branch."""
    return mg_target(eps, eps_c_target, eps_u_source, w)


def _wcol(w, ref):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 0:
        return w - 1.0
    return (w - 1.0).reshape(-1, *([1] * (ref.ndim - 1)))


def sample_w(lam: float, rng: np.random.Generator, size=None):
    """w = 1 + z with z exponential(rate lam), via inverse CDF on a uniform."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    u = rng.random(size)
    return 1.0 - np.log1p(-u) / lam


def w_cdf(lam: float, w):
    """P(W <= w) = 1 - exp(-lam * (w - 1)) for w >= 1, else 0."""
    w = np.asarray(w, dtype=np.float64)
    out = np.where(w < 1.0, 0.0, 1.0 - np.exp(-lam * (w - 1.0)))
    return float(out) if out.ndim == 0 else out


def schedule_active(s: int, t_norm, cfg: GuidanceConfig):
    """Guidance is live only after the late-start step and below the cut-off
    time; both inequalities strict."""
    return (s > cfg.tau_s) & (np.asarray(t_norm) < cfg.tau_c)


# ---------------------------------------------------------------------------
# Training


W_HIST_EDGES = np.array([1.0, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 6.0, 10.0, np.inf])


@dataclass
class TrainState:
    """Mutable state of one fine-tuning (or pretraining) run."""

    model: Denoiser
    source: Denoiser | None
    opt: OptimState
    rng: np.random.Generator
    step: int = 0
    total: int = 0
    skipped_consecutive: int = 0
    # histogram of guidance strengths drawn so far (dogfit_control only)
    w_hist: np.ndarray = field(default_factory=lambda: np.zeros(len(W_HIST_EDGES) - 1, dtype=np.int64))
    w_count: int = 0
    w_le_2: int = 0

    def __post_init__(self):
        if self.source is not None and not self.source.frozen:
            raise ValueError("source model must be a frozen snapshot")

    def record_w(self, w):
        self.w_hist += np.histogram(w, bins=W_HIST_EDGES)[0]
        self.w_count += len(w)
        self.w_le_2 += int(np.sum(w <= 2.0))


def make_train_state(model, source, seed, total, lr=1e-3) -> TrainState:
    return TrainState(model=model, source=source,
                      opt=OptimState.for_params(model.params, lr=lr),
                      rng=np.random.default_rng(seed), total=total)


def train_step(state: TrainState, batch, cfg: GuidanceConfig, sched: NoiseSchedule):
    """One step of the fine-tuning loop; returns the scalar loss.

    Per element: draw noise and a continuous time; (dogfit_control only) draw
    a guidance strength; corrupt x0; where the schedule is live, build the
    method's guided target with the unguided branch evaluated at w=1;
    otherwise the target is the plain noise. One optimizer step on the mean
    squared error of eps(x_t | c, w) against that target.
    """
    x0, c = batch
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    c = np.asarray(c, dtype=np.int64)
    if len(x0) == 0:
        raise ValueError("batch is empty")
    if cfg.method == "dog" and state.source is None:
        raise ValueError("method 'dog' needs a frozen source model")
    if cfg.method in ("cfg", "mg") and cfg.label_dropout <= 0.0:
        raise ValueError(f"method {cfg.method!r} needs label_dropout > 0 to learn "
                         "an unconditional branch")
    model, source, rng = state.model, state.source, state.rng
    n, d = x0.shape
    s = state.step + 1

    eps = rng.standard_normal((n, d))
    t = rng.random(n)
    if cfg.method == "dogfit_control":
        w = sample_w(cfg.lam, rng, size=n)
        state.record_w(w)
    else:
        w = np.full(n, cfg.w)
    if cfg.label_dropout > 0.0:
        c = np.where(rng.random(n) < cfg.label_dropout, nn.NULL_LABEL, c)

    t_idx = t_norm_to_index(t, sched.T)
    x_t = forward_noise(x0, t_idx, eps, sched)

    target = eps
    if cfg.method in TRAINING_GUIDED:
        active = schedule_active(s, t, cfg)
        if np.any(active):
            # offsets are loss constants (stop-gradient), float32 suffices
            if cfg.method == "mg":
                off = (nn.forward(model, x_t, t, c, dtype=np.float32)
                       - nn.forward(model, x_t, t, nn.NULL_LABEL, dtype=np.float32))
            else:
                if source is None:
                    raise ValueError(f"method {cfg.method!r} needs a frozen source model")
                off = (nn.forward(model, x_t, t, c, w=1.0, dtype=np.float32)
                       - nn.forward(source, x_t, t, nn.NULL_LABEL, dtype=np.float32))
            gate = active.astype(np.float64)[:, None]
            target = eps + (w - 1.0)[:, None] * off * gate

    loss, grad = nn.loss_and_grad(
        model, {"x_t": x_t, "t_norm": t, "c": c, "w": w}, target
    )
    if not np.isfinite(loss) or not np.all(np.isfinite(grad.values)):
        state.skipped_consecutive += 1
        state.step = s
        log.warning("train_step %d: non-finite loss/gradient, step skipped", s)
        if state.skipped_consecutive >= 10:
            raise TrainingDiverged(f"10 consecutive non-finite steps, aborting at step {s}")
        return float(loss)
    state.skipped_consecutive = 0
    nn.adam_step(state.opt, model.params, grad)
    state.step = s
    return loss


# ---------------------------------------------------------------------------
# Sampling-time guidance


@dataclass
class ModelSet:
    """Models available at sampling time."""

    model: Denoiser
    source: Denoiser | None = None


class PassLedger:
    """Counts individual model forward passes (per point, per step)."""

    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


def guided_sampler_eps(method: str, models: ModelSet, c, w, x, t: int,
                       sched: NoiseSchedule, ledger: PassLedger | None = None,
                       dtype=np.float32):
    """Per-step eps prediction for each sampling-time method.

    cfg and dog need two forward passes per point; the training-time methods
    are single-pass. ``t`` is a 1-based schedule index.
    """
    if method not in METHODS:
        raise ValueError(f"unknown guidance method {method!r}")
    if models.model is None:
        raise ValueError("fine-tuned model missing")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    t_norm = float(index_to_t_norm(t, sched.T))
    if method == "cfg":
        eps_c = nn.forward(models.model, x, t_norm, c, dtype=dtype)
        eps_u = nn.forward(models.model, x, t_norm, nn.NULL_LABEL, dtype=dtype)
        out = cfg_combine(eps_c, eps_u, w)
        passes = 2 * n
    elif method == "dog":
        if models.source is None:
            raise ValueError("method 'dog' needs the frozen source model")
        eps_c = nn.forward(models.model, x, t_norm, c, dtype=dtype)
        eps_u = nn.forward(models.source, x, t_norm, nn.NULL_LABEL, dtype=dtype)
        out = dog_combine(eps_c, eps_u, w)
        passes = 2 * n
    elif method == "dogfit_control":
        out = nn.forward(models.model, x, t_norm, c, w=w, dtype=dtype)
        passes = n
    else:  # none, mg, dogfit: single conditional pass, w baked in at train time
        out = nn.forward(models.model, x, t_norm, c, dtype=dtype)
        passes = n
    if ledger is not None:
        ledger.add(passes)
    return out


def make_eps_fn(method: str, models: ModelSet, w, sched: NoiseSchedule,
                ledger: PassLedger | None = None):
    """Adapter giving samplers an eps_fn(x, t, labels) closure."""

    def eps_fn(x, t, labels):
        return guided_sampler_eps(method, models, labels, w, x, t, sched, ledger)

    return eps_fn


def passes_per_step(method: str) -> int:
    return 2 if method in DUAL_PASS else 1
