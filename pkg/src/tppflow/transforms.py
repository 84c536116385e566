"""Invertible layer chain for increasing triangular maps on event-time batches.

A chain maps a batch of non-decreasing time rows to non-decreasing rows of
cumulative intensity, together with the log-diagonal of the (lower
triangular) Jacobian.  Every layer has a closed-form forward, inverse and
vector-Jacobian product, so densities, samples and gradients never touch an
autodiff framework.

Padding semantics: rows are padded by repeating the horizon, which makes the
padded inter-event gaps exactly zero.  Gap-space layers pin those zero gaps
through the chain (a zero gap maps to a zero increment for every parameter
value), so appending more padding never changes a result by even one bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.linalg import solve_triangular

from . import splines as sp
from .splines import RqsSpline

__all__ = [
    "DomainError",
    "ParamStore",
    "TransformSpec",
    "Spline",
    "BlockDiag",
    "Scale",
    "FixedScale",
    "Bridge",
    "Cumsum",
    "Diff",
    "scan_cumsum",
    "pairwise_diff",
    "spline_forward",
    "spline_inverse",
    "bridge_forward",
    "block_forward",
    "block_inverse",
    "build_param_store",
    "compose_forward",
    "compose_forward_cached",
    "compose_inverse",
    "chain_vjp",
    "chain_vjp_cached",
    "inverse_jac_t_apply",
    "SequentialInverter",
]

CLAMP = 1e-12          # round-off guard for inputs of psi_inv / logit
_SCAN_BLOCK = 256


class DomainError(ValueError):
    """An intermediate value left the domain of a layer."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"layer '{layer}': {message}")
        self.layer = layer


# ---------------------------------------------------------------------------
# primitive vector operations


def scan_cumsum(x: np.ndarray) -> np.ndarray:
    """Row-wise inclusive prefix sum via a blocked two-pass scan.

    Within-block sums and the block-offset sweep are independent vectorized
    passes, so the summation order matches a work-efficient parallel scan
    rather than one long sequential accumulation.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n <= _SCAN_BLOCK:
        return np.cumsum(x, axis=-1)
    nb = -(-n // _SCAN_BLOCK)
    pad = nb * _SCAN_BLOCK - n
    xp = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,))], axis=-1)
    xp = xp.reshape(x.shape[:-1] + (nb, _SCAN_BLOCK))
    inner = np.cumsum(xp, axis=-1)
    totals = inner[..., -1]
    offsets = np.cumsum(totals, axis=-1) - totals
    out = inner + offsets[..., None]
    return out.reshape(x.shape[:-1] + (nb * _SCAN_BLOCK,))[..., :n]


def pairwise_diff(x: np.ndarray) -> np.ndarray:
    """Row-wise adjacent differences, first element kept; inverse of cumsum."""
    x = np.asarray(x, dtype=np.float64)
    y = x.copy()
    y[..., 1:] -= x[..., :-1]
    return y


def _reverse_cumsum(x: np.ndarray) -> np.ndarray:
    return scan_cumsum(x[..., ::-1])[..., ::-1]


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Spline:
    """Elementwise rational quadratic spline (see :mod:`tppflow.splines`)."""

    name: str
    n_knots: int

    force_fwd = True
    force_inv = True

    @property
    def rqs(self) -> RqsSpline:
        return RqsSpline(self.n_knots)

    @property
    def n_params(self) -> int:
        return self.rqs.n_params

    def init_params(self):
        return np.zeros(self.n_params)

    def forward(self, x, p):
        return sp.forward(self.rqs, p, x)

    def inverse(self, y, p):
        return sp.inverse(self.rqs, p, y)

    def vjp(self, x, p, g_y, g_ld):
        return sp.vjp(self.rqs, p, x, g_y, g_ld)

    def inv_jac_t(self, x, p, w):
        _, ld = sp.forward(self.rqs, p, x)
        return w * np.exp(-ld)

    def validate(self, x):
        pass  # total map thanks to the linear tails


@dataclass(frozen=True)
class BlockDiag:
    """Repeated H x H lower-triangular block, anchored at ``offset + k*H``.

    The window [0, N) cuts conceptual blocks at both edges; cut positions
    apply the corresponding truncated block (still lower triangular, still
    invertible), so results do not depend on how far a batch is padded.
    """

    name: str
    size: int
    offset: int = 0

    force_fwd = False
    force_inv = False

    def __post_init__(self):
        if self.size < 1 or self.size % 2:
            raise ValueError(f"block size must be a positive even integer, got {self.size}")
        if not (0 <= self.offset < self.size):
            raise ValueError(f"offset must lie in [0, size), got {self.offset}")

    @property
    def n_params(self) -> int:
        h = self.size
        return h * (h + 1) // 2

    def init_params(self):
        return np.zeros(self.n_params)

    def matrix(self, p) -> np.ndarray:
        h = self.size
        b = np.zeros((h, h))
        b[np.diag_indices(h)] = np.exp(p[:h])
        b[np.tril_indices(h, -1)] = p[h:]
        return b

    def _pad_widths(self, n):
        h = self.size
        left = (h - self.offset) % h
        right = (h - (left + n) % h) % h
        return left, right

    def _chunk(self, x):
        left, right = self._pad_widths(x.shape[-1])
        xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(left, right)])
        return xp.reshape(x.shape[:-1] + (-1, self.size)), left

    def forward(self, x, p):
        b = self.matrix(p)
        chunks, left = self._chunk(x)
        y = np.einsum("ij,...nj->...ni", b, chunks)
        n = x.shape[-1]
        y = y.reshape(x.shape[:-1] + (-1,))[..., left:left + n]
        pos = (np.arange(n) + left) % self.size
        ld = np.broadcast_to(p[:self.size][pos], x.shape).copy()
        return y, ld

    def inverse(self, y, p):
        b = self.matrix(p)
        chunks, left = self._chunk(y)
        flat = chunks.reshape(-1, self.size)
        x = solve_triangular(b, flat.T, lower=True).T
        n = y.shape[-1]
        return x.reshape(y.shape[:-1] + (-1,))[..., left:left + n]

    def vjp(self, x, p, g_y, g_ld):
        b = self.matrix(p)
        h = self.size
        xc, left = self._chunk(x)
        gc, _ = self._chunk(g_y)
        g_x = np.einsum("ij,...ni->...nj", b, gc)
        n = x.shape[-1]
        g_x = g_x.reshape(x.shape[:-1] + (-1,))[..., left:left + n]
        g_b = gc.reshape(-1, h).T @ xc.reshape(-1, h)
        g_p = np.zeros_like(p)
        g_p[:h] = np.diag(g_b) * np.diag(b)
        g_p[h:] = g_b[np.tril_indices(h, -1)]
        pos = (np.arange(n) + left) % h
        g_p[:h] += np.bincount(pos, weights=g_ld.reshape(-1, n).sum(axis=0), minlength=h)
        return g_x, g_p

    def inv_jac_t(self, x, p, w):
        b = self.matrix(p)
        chunks, left = self._chunk(w)
        flat = chunks.reshape(-1, self.size)
        u = solve_triangular(b.T, flat.T, lower=False).T
        n = w.shape[-1]
        return u.reshape(w.shape[:-1] + (-1,))[..., left:left + n]

    def validate(self, x):
        pass


@dataclass(frozen=True)
class Scale:
    """Learnable positive scalar scale, stored as a log."""

    name: str

    force_fwd = True
    force_inv = True
    n_params = 1

    def init_params(self):
        return np.zeros(1)

    def forward(self, x, p):
        s = np.exp(p[0])
        return s * x, np.full_like(x, p[0])

    def inverse(self, y, p):
        return y * np.exp(-p[0])

    def vjp(self, x, p, g_y, g_ld):
        s = np.exp(p[0])
        g_p = np.array([s * float((g_y * x).sum()) + float(g_ld.sum())])
        return s * g_y, g_p

    def inv_jac_t(self, x, p, w):
        return w * np.exp(-p[0])

    def validate(self, x):
        pass


@dataclass(frozen=True)
class FixedScale:
    """Constant positive scale (e.g. 1/T), no parameters."""

    value: float

    force_fwd = True
    force_inv = True
    n_params = 0
    name = None

    def __post_init__(self):
        if self.value <= 0:
            raise ValueError(f"scale must be > 0, got {self.value}")

    def forward(self, x, p):
        return self.value * x, np.full_like(x, np.log(self.value))

    def inverse(self, y, p):
        return y / self.value

    def vjp(self, x, p, g_y, g_ld):
        return self.value * g_y, None

    def inv_jac_t(self, x, p, w):
        return w / self.value

    def validate(self, x):
        pass


@dataclass(frozen=True)
class Bridge:
    """Fixed elementwise domain bridge: psi, psi_inv, sigmoid or logit.

    psi(x) = 1 - exp(-x) takes R+ to (0,1); logit/sigmoid move between (0,1)
    and R.  Inputs of psi_inv and logit are clamped to
    [CLAMP, 1 - CLAMP] to absorb round-off at the domain edges.
    """

    kind: str

    n_params = 0
    name = None

    def __post_init__(self):
        if self.kind not in ("psi", "psi_inv", "sigmoid", "logit"):
            raise ValueError(f"unknown bridge kind {self.kind!r}")

    @property
    def force_fwd(self):
        return self.kind != "logit"   # logit output lives in R

    @property
    def force_inv(self):
        return self.kind != "sigmoid"  # sigmoid input lives in R

    def forward(self, x, p):
        k = self.kind
        if k == "psi":
            return -np.expm1(-x), -x
        if k == "psi_inv":
            xc = np.clip(x, CLAMP, 1.0 - CLAMP)
            y = -np.log1p(-xc)
            return y, y
        if k == "sigmoid":
            y = _sigmoid(x)
            return y, -(_softplus(x) + _softplus(-x))
        xc = np.clip(x, CLAMP, 1.0 - CLAMP)
        return np.log(xc) - np.log1p(-xc), -np.log(xc) - np.log1p(-xc)

    def inverse(self, y, p):
        k = self.kind
        if k == "psi":
            yc = np.clip(y, CLAMP, 1.0 - CLAMP)
            return -np.log1p(-yc)
        if k == "psi_inv":
            return -np.expm1(-y)
        if k == "sigmoid":
            yc = np.clip(y, CLAMP, 1.0 - CLAMP)
            return np.log(yc) - np.log1p(-yc)
        return _sigmoid(y)

    def vjp(self, x, p, g_y, g_ld):
        k = self.kind
        if k == "psi":
            return g_y * np.exp(-x) - g_ld, None
        if k == "psi_inv":
            d = 1.0 / (1.0 - np.clip(x, CLAMP, 1.0 - CLAMP))
            return (g_y + g_ld) * d, None
        if k == "sigmoid":
            s = _sigmoid(x)
            return g_y * s * (1.0 - s) + g_ld * (1.0 - 2.0 * s), None
        xc = np.clip(x, CLAMP, 1.0 - CLAMP)
        return (g_y + g_ld * (2.0 * xc - 1.0)) / (xc * (1.0 - xc)), None

    def inv_jac_t(self, x, p, w):
        k = self.kind
        if k == "psi":
            return w * np.exp(x)
        if k == "psi_inv":
            return w * (1.0 - np.clip(x, CLAMP, 1.0 - CLAMP))
        if k == "sigmoid":
            s = _sigmoid(x)
            return w / (s * (1.0 - s))
        xc = np.clip(x, CLAMP, 1.0 - CLAMP)
        return w * xc * (1.0 - xc)

    def validate(self, x):
        k = self.kind
        if k == "psi" and x.size and float(x.min()) < -1e-9:
            raise DomainError("psi", f"input must be >= 0, min was {float(x.min()):g}")
        if k in ("psi_inv", "logit") and x.size:
            lo, hi = float(x.min()), float(x.max())
            if lo < -1e-9 or hi > 1.0 + 1e-9:
                raise DomainError(k, f"input must lie in (0, 1), range was [{lo:g}, {hi:g}]")


@dataclass(frozen=True)
class Cumsum:
    """Row-wise cumulative sum (unit-diagonal Jacobian)."""

    n_params = 0
    name = None
    force_fwd = False
    force_inv = False

    def forward(self, x, p):
        return scan_cumsum(x), np.zeros_like(x)

    def inverse(self, y, p):
        return pairwise_diff(y)

    def vjp(self, x, p, g_y, g_ld):
        return _reverse_cumsum(g_y), None

    def inv_jac_t(self, x, p, w):
        u = w.copy()
        u[..., :-1] -= w[..., 1:]
        return u

    def validate(self, x):
        pass


@dataclass(frozen=True)
class Diff:
    """Row-wise adjacent difference (unit-diagonal Jacobian); inverse of Cumsum."""

    n_params = 0
    name = None
    force_fwd = True   # zero gaps stay exactly zero
    force_inv = False

    def forward(self, x, p):
        return pairwise_diff(x), np.zeros_like(x)

    def inverse(self, y, p):
        return scan_cumsum(y)

    def vjp(self, x, p, g_y, g_ld):
        g = g_y.copy()
        g[..., :-1] -= g_y[..., 1:]
        return g, None

    def inv_jac_t(self, x, p, w):
        return _reverse_cumsum(w)

    def validate(self, x):
        pass


Layer = Union[Spline, BlockDiag, Scale, FixedScale, Bridge, Cumsum, Diff]


# ---------------------------------------------------------------------------
# parameter store and transform spec


@dataclass
class ParamStore:
    """Flat parameter vector with named slices (one slice per learnable layer)."""

    names: tuple
    slices: dict
    values: np.ndarray

    def view(self, name: str) -> np.ndarray:
        return self.values[self.slices[name]]

    def copy(self) -> "ParamStore":
        return ParamStore(self.names, dict(self.slices), self.values.copy())

    def zeros_like(self) -> np.ndarray:
        return np.zeros_like(self.values)

    @property
    def size(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class TransformSpec:
    """Ordered layer chain; ``layers[0]`` is applied to the times first."""

    layers: tuple

    def __post_init__(self):
        names = [l.name for l in self.layers if l.n_params > 0]
        if len(names) != len(set(names)):
            raise ValueError(f"learnable layer names must be unique, got {names}")

    def to_dict(self) -> dict:
        out = []
        for l in self.layers:
            if isinstance(l, Spline):
                out.append({"kind": "spline", "name": l.name, "n_knots": l.n_knots})
            elif isinstance(l, BlockDiag):
                out.append({"kind": "block", "name": l.name, "size": l.size, "offset": l.offset})
            elif isinstance(l, Scale):
                out.append({"kind": "scale", "name": l.name})
            elif isinstance(l, FixedScale):
                out.append({"kind": "fixed_scale", "value": l.value})
            elif isinstance(l, Bridge):
                out.append({"kind": "bridge", "bridge": l.kind})
            elif isinstance(l, Cumsum):
                out.append({"kind": "cumsum"})
            else:
                out.append({"kind": "diff"})
        return {"layers": out}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        layers = []
        for rec in d["layers"]:
            k = rec["kind"]
            if k == "spline":
                layers.append(Spline(rec["name"], rec["n_knots"]))
            elif k == "block":
                layers.append(BlockDiag(rec["name"], rec["size"], rec["offset"]))
            elif k == "scale":
                layers.append(Scale(rec["name"]))
            elif k == "fixed_scale":
                layers.append(FixedScale(rec["value"]))
            elif k == "bridge":
                layers.append(Bridge(rec["bridge"]))
            elif k == "cumsum":
                layers.append(Cumsum())
            elif k == "diff":
                layers.append(Diff())
            else:
                raise ValueError(f"unknown layer kind {k!r}")
        return cls(tuple(layers))


def build_param_store(spec: TransformSpec) -> ParamStore:
    """Identity-initialized flat parameters for a chain."""
    names, slices, chunks = [], {}, []
    pos = 0
    for layer in spec.layers:
        if layer.n_params == 0:
            continue
        init = layer.init_params()
        names.append(layer.name)
        slices[layer.name] = slice(pos, pos + init.size)
        chunks.append(init)
        pos += init.size
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamStore(tuple(names), slices, values)


# ---------------------------------------------------------------------------
# chain execution


def _params_of(layer, store):
    return store.view(layer.name) if layer.n_params else None


@dataclass
class ChainCache:
    spec: TransformSpec
    store: ParamStore
    inputs: list            # per layer input matrix
    pins: list              # per layer pin mask active at the layer OUTPUT (or None)
    z: np.ndarray
    logdiag: np.ndarray


def _validate_rows(x, what):
    if x.size == 0:
        return
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} must be finite")
    if float(x[..., 0].min()) < 0:
        raise ValueError(f"{what} must be non-negative")
    if x.shape[-1] > 1 and np.any(np.diff(x, axis=-1) < 0):
        raise ValueError(f"{what} rows must be non-decreasing")


def _run_forward(times, spec, store, validate):
    x = np.atleast_2d(np.asarray(times, dtype=np.float64)).copy()
    if validate:
        _validate_rows(x, "times")
    logdiag = np.zeros_like(x)
    inputs, pins = [], []
    pin = None
    for layer in spec.layers:
        layer.validate(x)
        inputs.append(x)
        p = _params_of(layer, store)
        y, ld = layer.forward(x, p)
        if isinstance(layer, Diff):
            pin = y == 0.0
            if not pin.any():
                pin = None
        if pin is not None:
            if layer.force_fwd:
                y = np.where(pin, 0.0, y)
            ld = np.where(pin, 0.0, ld)
        pins.append(None if pin is None else pin)
        logdiag += ld
        x = y
        if isinstance(layer, Cumsum):
            pin = None
    return x, logdiag, inputs, pins


def compose_forward(batch_times, spec: TransformSpec, store: ParamStore, validate: bool = True):
    """Map padded time rows through the chain.

    Returns ``(z, logdiag)`` where ``z`` holds the cumulative-intensity rows
    and ``logdiag`` the per-position log Jacobian diagonal.
    """
    z, logdiag, _, _ = _run_forward(batch_times, spec, store, validate)
    return z, logdiag


def compose_forward_cached(batch_times, spec, store, validate: bool = True) -> ChainCache:
    z, logdiag, inputs, pins = _run_forward(batch_times, spec, store, validate)
    return ChainCache(spec, store, inputs, pins, z, logdiag)


def compose_inverse(z, spec: TransformSpec, store: ParamStore, validate: bool = True):
    """Invert the chain: cumulative-intensity rows back to time rows."""
    y = np.atleast_2d(np.asarray(z, dtype=np.float64)).copy()
    if validate:
        _validate_rows(y, "z")
    pin = None
    for layer in reversed(spec.layers):
        p = _params_of(layer, store)
        x = layer.inverse(y, p)
        if isinstance(layer, Cumsum):
            pin = x == 0.0
            if not pin.any():
                pin = None
        if pin is not None and layer.force_inv:
            x = np.where(pin, 0.0, x)
        y = x
        if isinstance(layer, Diff):
            pin = None
    return y


def chain_vjp_cached(cache: ChainCache, cot_z, cot_logdiag):
    """Reverse-mode sweep through a cached forward pass.

    ``cot_z`` and ``cot_logdiag`` are cotangents of the two outputs; returns
    ``(grad_params, grad_times)`` with ``grad_params`` flat like the store.
    """
    spec, store = cache.spec, cache.store
    g = np.array(cot_z, dtype=np.float64, copy=True)
    g_ld_full = np.asarray(cot_logdiag, dtype=np.float64)
    if g.shape != cache.z.shape or g_ld_full.shape != cache.z.shape:
        raise ValueError("cotangent shapes must match the forward output")
    grad = np.zeros_like(store.values)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        pin = cache.pins[i]
        g_ld = g_ld_full if pin is None else np.where(pin, 0.0, g_ld_full)
        if pin is not None and layer.force_fwd:
            g = np.where(pin, 0.0, g)
        p = _params_of(layer, store)
        g, g_p = layer.vjp(cache.inputs[i], p, g, g_ld)
        if g_p is not None:
            grad[store.slices[layer.name]] += g_p
    return grad, g


def chain_vjp(batch_times, spec, store, cot_z, cot_logdiag, validate: bool = True):
    """Gradients of ``sum(cot_z * z) + sum(cot_logdiag * logdiag)``."""
    cache = compose_forward_cached(batch_times, spec, store, validate)
    return chain_vjp_cached(cache, cot_z, cot_logdiag)


def inverse_jac_t_apply(cache: ChainCache, w):
    """Apply the inverse transposed chain Jacobian to a times-cotangent.

    Used for reparametrized sampling gradients: for a loss L(t) with
    t = F^{-1}(z), ``grad_params = -chain_vjp(cot_z=u)`` where
    ``u = J_F^{-T} dL/dt``.  Only valid for caches without pinned positions.
    """
    if any(p is not None for p in cache.pins):
        raise ValueError("inverse_jac_t_apply requires a pin-free forward cache")
    u = np.array(w, dtype=np.float64, copy=True)
    for layer, x in zip(cache.spec.layers, cache.inputs):
        u = layer.inv_jac_t(x, _params_of(layer, cache.store), u)
    return u


# ---------------------------------------------------------------------------
# public single-operation wrappers (strict domains)


def spline_forward(x, spline: RqsSpline, theta):
    """Spline value and log-derivative for x strictly inside (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and (float(x.min()) <= 0.0 or float(x.max()) >= 1.0):
        raise DomainError("spline", "inputs must lie strictly inside (0, 1)")
    return sp.forward(spline, np.asarray(theta, dtype=np.float64), x)


def spline_inverse(y, spline: RqsSpline, theta):
    """Inverse spline for y strictly inside (0, 1)."""
    y = np.asarray(y, dtype=np.float64)
    if y.size and (float(y.min()) <= 0.0 or float(y.max()) >= 1.0):
        raise DomainError("spline", "inputs must lie strictly inside (0, 1)")
    return sp.inverse(spline, np.asarray(theta, dtype=np.float64), y)


def bridge_forward(x, kind: str, scale: float | None = None):
    """Evaluate a domain bridge (psi | psi_inv | sigmoid | logit | scale)."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "scale":
        if scale is None or scale <= 0:
            raise ValueError("scale bridge needs a positive scale value")
        layer = FixedScale(scale)
        return layer.forward(x, None)
    layer = Bridge(kind)
    layer.validate(x)
    return layer.forward(x, None)


def block_forward(x, block: BlockDiag, theta):
    """Apply a block-diagonal lower-triangular layer."""
    return block.forward(np.atleast_2d(np.asarray(x, dtype=np.float64)),
                         np.asarray(theta, dtype=np.float64))


def block_inverse(y, block: BlockDiag, theta):
    """Invert a block-diagonal layer by per-block forward substitution."""
    return block.inverse(np.atleast_2d(np.asarray(y, dtype=np.float64)),
                         np.asarray(theta, dtype=np.float64))


# ---------------------------------------------------------------------------
# one-position-at-a-time inversion (sequential sampling baseline)


class SequentialInverter:
    """Inverts the chain one column at a time, mimicking an autoregressive
    sampler: each call to :meth:`step` consumes one z column and emits one
    time column, using only previously seen columns."""

    def __init__(self, spec: TransformSpec, store: ParamStore, batch_size: int):
        self.spec = spec
        self.store = store
        self.b = batch_size
        self.pos = 0
        self._state = {}
        for i, layer in enumerate(spec.layers):
            if isinstance(layer, Cumsum):
                self._state[i] = np.zeros(batch_size)          # previous output column
            elif isinstance(layer, Diff):
                self._state[i] = np.zeros(batch_size)          # previous input column
            elif isinstance(layer, BlockDiag):
                self._state[i] = np.zeros((batch_size, layer.size))  # inputs of the current block

    def step(self, z_col: np.ndarray) -> np.ndarray:
        v = np.asarray(z_col, dtype=np.float64).copy()
        j = self.pos
        for i in range(len(self.spec.layers) - 1, -1, -1):
            layer = self.spec.layers[i]
            p = _params_of(layer, self.store)
            if isinstance(layer, Cumsum):
                prev = self._state[i]
                self._state[i] = v.copy()
                v = v - prev
            elif isinstance(layer, Diff):
                v = v + self._state[i]
                self._state[i] = v.copy()
            elif isinstance(layer, BlockDiag):
                h = layer.size
                r = (j - layer.offset) % h
                if r == 0:
                    self._state[i][:] = 0.0
                buf = self._state[i]
                bm = layer.matrix(p)
                v = (v - buf[:, :r] @ bm[r, :r]) / bm[r, r]
                buf[:, r] = v
            else:
                v = layer.inverse(v.reshape(-1, 1), p).ravel()
        self.pos += 1
        return v
