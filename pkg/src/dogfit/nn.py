"""Minimal dense denoiser with hand-written reverse-mode gradients.

Parameters live in a flat float32 vector (`ParamVector`); all math runs in
float64 so analytic gradients survive finite-difference scrutiny. The network
predicts the noise in a 2D point given the corrupted point, a normalized
diffusion time, a class label (or the null label), and optionally a guidance
strength ``w`` that modulates a frozen copy of the label embedding.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field, asdict, replace

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

NULL_LABEL = -1

CHECKPOINT_MAGIC = b"DGF1"


# ---------------------------------------------------------------------------
# Architecture and parameter storage


@dataclass(frozen=True)
class Architecture:
    """Static shape description of a denoiser."""

    data_dim: int = 2
    hidden: tuple = (128, 128, 128, 128)
    activation: str = "silu"
    embed_dim: int = 64
    time_max_period: float = 1000.0
    num_classes: int = 8
    w_enabled: bool = False

    def layer_sizes(self):
        return [self.data_dim + self.embed_dim, *self.hidden, self.data_dim]

    def param_layout(self):
        """Ordered (name, shape) records for the trainable parameters."""
        layout = [("label_embed", (self.num_classes + 1, self.embed_dim))]
        if self.w_enabled:
            layout.append(("w_proj_w", (self.embed_dim,)))
            layout.append(("w_proj_b", (self.embed_dim,)))
        sizes = self.layer_sizes()
        for i in range(len(sizes) - 1):
            layout.append((f"layers.{i}.W", (sizes[i], sizes[i + 1])))
            layout.append((f"layers.{i}.b", (sizes[i + 1],)))
        return layout


class ParamVector:
    """Flat float32 parameter array plus an ordered (name, shape) layout.

    Named views share memory with the flat vector, so in-place updates on
    ``values`` are visible through every view and vice versa.
    """

    def __init__(self, layout, values=None):
        self.layout = [(str(n), tuple(int(d) for d in s)) for n, s in layout]
        total = sum(int(np.prod(s)) for _, s in self.layout)
        if values is None:
            values = np.zeros(total, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32).reshape(-1)
        if values.size != total:
            raise ValueError(
                f"param vector length {values.size} does not match layout total {total}"
            )
        self.values = values
        self._slices = {}
        off = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            self._slices[name] = (off, off + n, shape)
            off += n

    def view(self, name):
        lo, hi, shape = self._slices[name]
        return self.values[lo:hi].reshape(shape)

    def view_of(self, flat, name):
        """View of ``name`` inside an externally held flat copy (e.g. a single
        float64 cast of the whole vector)."""
        lo, hi, shape = self._slices[name]
        return flat[lo:hi].reshape(shape)

    def names(self):
        return [n for n, _ in self.layout]

    def copy(self):
        return ParamVector(self.layout, self.values.copy())

    def congruent(self, other):
        return self.layout == other.layout

    def validate(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite values")

    def __len__(self):
        return self.values.size


@dataclass
class Denoiser:
    """Noise predictor eps(x_t | c, w, t). ``label_embed_frozen`` is a
    non-trainable buffer used as the modulation basis for the w input."""

    arch: Architecture
    params: ParamVector
    label_embed_frozen: np.ndarray
    frozen: bool = False


@dataclass
class OptimState:
    """Adaptive-moment optimizer state, congruent with one ParamVector."""

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    skipped: int = 0
    _scratch: np.ndarray | None = None

    @classmethod
    def for_params(cls, params: ParamVector, lr=1e-3, beta1=0.9, beta2=0.999, eps_hat=1e-8):
        return cls(
            m=np.zeros(len(params), dtype=np.float32),
            v=np.zeros(len(params), dtype=np.float32),
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps_hat=eps_hat,
        )


# ---------------------------------------------------------------------------
# Initialization and model surgery


def init_denoiser(arch: Architecture, seed: int) -> Denoiser:
    """He-initialized trunk, zero-initialized output layer and w projection."""
    rng = np.random.default_rng(seed)
    params = ParamVector(arch.param_layout())
    label = params.view("label_embed")
    label[...] = rng.normal(0.0, 0.1, size=label.shape)
    sizes = arch.layer_sizes()
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        W = params.view(f"layers.{i}.W")
        if i == n_layers - 1:
            W[...] = 0.0  # zero-init output: the fresh model predicts zero noise
        else:
            W[...] = rng.normal(0.0, np.sqrt(2.0 / sizes[i]), size=W.shape)
    # w_proj_w / w_proj_b stay zero so w=1 is exactly inert at start
    params.validate()
    return Denoiser(arch=arch, params=params, label_embed_frozen=label.copy())


def _transfer_params(src: Denoiser, dst: Denoiser):
    shared = set(src.params.names()) & set(dst.params.names())
    for name in shared:
        a, b = src.params.view(name), dst.params.view(name)
        if a.shape == b.shape:
            b[...] = a


def with_w_conditioning(model: Denoiser, enabled: bool = True) -> Denoiser:
    """Copy of the model with the w input path enabled (zero-initialized) or removed."""
    if model.arch.w_enabled == enabled:
        return clone(model)
    arch = replace(model.arch, w_enabled=enabled)
    out = Denoiser(arch=arch, params=ParamVector(arch.param_layout()),
                   label_embed_frozen=model.label_embed_frozen.copy())
    _transfer_params(model, out)
    return out


def reinit_label_embeddings(model: Denoiser, num_classes: int, seed: int) -> Denoiser:
    """Copy with a freshly initialized label table of ``num_classes`` + null row.

    Used at fine-tune start when source and target label spaces differ; the
    frozen modulation basis is reset to the new table.
    """
    rng = np.random.default_rng(seed)
    arch = replace(model.arch, num_classes=int(num_classes))
    out = Denoiser(arch=arch, params=ParamVector(arch.param_layout()),
                   label_embed_frozen=np.zeros((num_classes + 1, arch.embed_dim), dtype=np.float32))
    _transfer_params(model, out)
    label = out.params.view("label_embed")
    label[...] = rng.normal(0.0, 0.1, size=label.shape)
    out.label_embed_frozen = label.copy()
    return out


def refresh_frozen_labels(model: Denoiser):
    """Re-snapshot the live label table into the frozen modulation basis.

    Called once at the late-start threshold so the modulated direction is the
    warmed-up one; the basis never receives gradients either way.
    """
    if model.frozen:
        raise ValueError("cannot refresh buffers of a frozen snapshot")
    model.label_embed_frozen = model.params.view("label_embed").copy()


def clone(model: Denoiser) -> Denoiser:
    out = Denoiser(arch=model.arch, params=model.params.copy(),
                   label_embed_frozen=model.label_embed_frozen.copy())
    return out


def snapshot_frozen(model: Denoiser) -> Denoiser:
    """Immutable value-copy of the model; training the original never touches it."""
    model.params.validate()
    out = clone(model)
    out.frozen = True
    out.params.values.setflags(write=False)
    out.label_embed_frozen.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# Forward pass


def _silu(z):
    s = expit(z)
    return z * s


def _dsilu(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


_ACTIVATIONS = {"silu": (_silu, _dsilu)}


def time_embedding(t_norm, dim, max_period):
    """Sinusoidal features of normalized time, frequencies log-spaced so the
    fastest component has period ``2*pi/max_period`` on [0, 1]."""
    t = np.atleast_1d(np.asarray(t_norm, dtype=np.float64))
    half = dim // 2
    freqs = max_period ** (1.0 - np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _label_rows(c, num_classes):
    c = np.atleast_1d(np.asarray(c))
    if c.dtype == object or np.any(c == None):  # noqa: E711  (None entries mean null)
        c = np.array([NULL_LABEL if v is None else int(v) for v in c])
    c = c.astype(np.int64)
    if np.any((c < NULL_LABEL) | (c >= num_classes)):
        bad = c[(c < NULL_LABEL) | (c >= num_classes)]
        raise ValueError(f"unknown label index {bad[:4].tolist()} for {num_classes} classes")
    return np.where(c == NULL_LABEL, num_classes, c)


def _prep_inputs(model, x_t, t_norm, c, w):
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[0]
    if x.shape[1] != model.arch.data_dim:
        raise ValueError(f"x_t has dimension {x.shape[1]}, expected {model.arch.data_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("x_t contains non-finite values")
    t = np.broadcast_to(np.asarray(t_norm, dtype=np.float64), (n,)).copy()
    if np.any((t < 0.0) | (t > 1.0)):
        raise ValueError("t_norm must lie in [0, 1]")
    rows = _label_rows(c, model.arch.num_classes)
    rows = np.broadcast_to(rows, (n,)).copy()
    w_arr = np.broadcast_to(np.asarray(w, dtype=np.float64), (n,)).copy()
    if model.arch.w_enabled and np.any(w_arr < 1.0):
        raise ValueError("guidance strength w must be >= 1 when w-conditioning is enabled")
    return x, t, rows, w_arr, single


def _forward_cached(model: Denoiser, x, t, rows, w, dtype=np.float64):
    """Shared forward pass; returns output plus the cache backward needs.

    Parameters are cast to ``dtype`` once up front; float64 keeps the loss
    smooth enough for finite-difference checks, float32 is for bulk sampling.
    """
    arch = model.arch
    p = model.params
    flat = p.values.astype(dtype)
    temb = time_embedding(t, arch.embed_dim, arch.time_max_period).astype(dtype)
    L = p.view_of(flat, "label_embed")
    cond = temb + L[rows]
    cache = {"rows": rows, "flat": flat}
    if arch.w_enabled:
        wp = p.view_of(flat, "w_proj_w")
        bp = p.view_of(flat, "w_proj_b")
        F = model.label_embed_frozen.astype(dtype)[rows]
        wm1 = (w - 1.0)[:, None].astype(dtype)
        cond = cond + (wm1 * wp[None, :] + bp[None, :]) * F
        cache["F"] = F
        cache["wm1"] = wm1
    h = np.concatenate([x.astype(dtype), cond], axis=1)
    act, _ = _ACTIVATIONS[arch.activation]
    zs, acts = [], [h]
    n_layers = len(arch.layer_sizes()) - 1
    for i in range(n_layers):
        z = acts[-1] @ p.view_of(flat, f"layers.{i}.W") + p.view_of(flat, f"layers.{i}.b")
        if i < n_layers - 1:
            zs.append(z)
            acts.append(act(z))
        else:
            out = z
    cache["zs"] = zs
    cache["acts"] = acts
    return out, cache


def forward(model: Denoiser, x_t, t_norm, c, w=1.0, dtype=np.float64):
    """Predict the noise for ``x_t`` at normalized time ``t_norm``.

    ``c`` is an integer class label, ``NULL_LABEL`` (-1) or None for the null
    label. ``w`` only matters when the model was built with w-conditioning.
    Accepts single points (d,) or batches (n, d).
    """
    x, t, rows, w_arr, single = _prep_inputs(model, x_t, t_norm, c, w)
    out, _ = _forward_cached(model, x, t, rows, w_arr, dtype=dtype)
    out = out.astype(np.float64)
    return out[0] if single else out


def loss_and_grad(model: Denoiser, batch: dict, target):
    """Mean squared error to ``target`` and its gradient w.r.t. the parameters.

    ``batch`` carries keys x_t, t_norm, c, w. The loss is the batch mean of
    squared L2 distances; the target is a constant (any guidance offset baked
    into it contributes no gradient). Returns (loss, ParamVector).
    """
    x, t, rows, w_arr, _ = _prep_inputs(
        model, batch["x_t"], batch["t_norm"], batch["c"], batch.get("w", 1.0)
    )
    tgt = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if tgt.shape != x.shape:
        raise ValueError(f"target shape {tgt.shape} does not match batch shape {x.shape}")
    n = x.shape[0]
    if n == 0:
        raise ValueError("batch is empty")
    out, cache = _forward_cached(model, x, t, rows, w_arr)
    r = out - tgt
    loss = float(np.sum(r * r, dtype=np.float64) / n)

    arch = model.arch
    p = model.params
    grad = ParamVector(p.layout)
    _, dact = _ACTIVATIONS[arch.activation]
    g = (2.0 / n) * r
    n_layers = len(arch.layer_sizes()) - 1
    acts, zs, flat = cache["acts"], cache["zs"], cache["flat"]
    for i in range(n_layers - 1, -1, -1):
        grad.view(f"layers.{i}.W")[...] = acts[i].T @ g
        grad.view(f"layers.{i}.b")[...] = g.sum(axis=0, dtype=np.float64)
        g = g @ p.view_of(flat, f"layers.{i}.W").T
        if i > 0:
            g = g * dact(zs[i - 1])
    dcond = g[:, arch.data_dim:]
    dL = np.zeros((arch.num_classes + 1, arch.embed_dim), dtype=np.float64)
    np.add.at(dL, cache["rows"], dcond)
    grad.view("label_embed")[...] = dL
    if arch.w_enabled:
        dmod = dcond * cache["F"]
        grad.view("w_proj_w")[...] = (dmod * cache["wm1"]).sum(axis=0, dtype=np.float64)
        grad.view("w_proj_b")[...] = dmod.sum(axis=0, dtype=np.float64)
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizer


def adam_step(opt: OptimState, params: ParamVector, grad: ParamVector):
    """One adaptive-moment update with bias correction, in place.

    theta -= lr * m_hat / (sqrt(v_hat) + eps_hat). Fused float32 arithmetic
    (32-bit training); a non-finite gradient skips the update (moments and
    step count untouched) and records a warning. Returns (params, opt).
    """
    if not params.congruent(grad):
        raise ValueError("gradient layout does not match parameter layout")
    g = grad.values
    if not np.all(np.isfinite(g)):
        opt.skipped += 1
        log.warning("adam_step: non-finite gradient, step %d skipped", opt.step_count + 1)
        return params, opt
    opt.step_count += 1
    if opt._scratch is None or opt._scratch.shape != g.shape:
        opt._scratch = np.empty_like(g)
    s = opt._scratch
    f32 = np.float32
    opt.m *= f32(opt.beta1)
    np.multiply(g, f32(1.0 - opt.beta1), out=s)
    opt.m += s
    opt.v *= f32(opt.beta2)
    np.multiply(g, g, out=s)
    s *= f32(1.0 - opt.beta2)
    opt.v += s
    bc1 = 1.0 - opt.beta1 ** opt.step_count
    bc2 = 1.0 - opt.beta2 ** opt.step_count
    np.divide(opt.v, f32(bc2), out=s)
    np.sqrt(s, out=s)
    s += f32(opt.eps_hat)
    np.divide(opt.m, s, out=s)
    s *= f32(opt.lr / bc1)
    params.values -= s
    return params, opt


# ---------------------------------------------------------------------------
# Checkpoint IO: magic DGF1, length-prefixed JSON descriptor, float32 payload


def _layout_descriptor(model: Denoiser):
    entries = [[name, list(shape), True] for name, shape in model.params.layout]
    entries.append(["label_embed_frozen", list(model.label_embed_frozen.shape), False])
    return entries


def save_checkpoint(model: Denoiser, path):
    desc = {"arch": asdict(model.arch), "layout": _layout_descriptor(model)}
    desc["arch"]["hidden"] = list(model.arch.hidden)
    header = json.dumps(desc, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(model.params.values.astype("<f4").tobytes())
    buf.write(model.label_embed_frozen.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Denoiser:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    desc = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    arch_d = dict(desc["arch"])
    arch_d["hidden"] = tuple(arch_d["hidden"])
    arch = Architecture(**arch_d)
    off = 8 + hlen
    arrays = {}
    for name, shape, _trainable in desc["layout"]:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    layout = [(name, tuple(shape)) for name, shape, trainable in desc["layout"] if trainable]
    flat = np.concatenate([arrays[name].reshape(-1) for name, _ in layout])
    params = ParamVector(layout, flat)
    params.validate()
    if layout != arch.param_layout():
        raise ValueError("checkpoint layout does not match architecture descriptor")
    return Denoiser(arch=arch, params=params, label_embed_frozen=arrays["label_embed_frozen"])
