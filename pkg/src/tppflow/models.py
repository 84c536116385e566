"""Model factory: the layer chains of the supported process families, plus a
sequential Hawkes baseline with exponential kernel."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import transforms as tr
from .rng import stream
from .seqdata import EventSequence
from .tpp import TppModel

__all__ = [
    "ModelKind",
    "build_model",
    "save_checkpoint",
    "load_checkpoint",
    "HawkesExpParams",
    "hawkes_log_prob",
    "hawkes_compensator",
    "hawkes_rescaled_gaps",
    "hawkes_sample",
]

KINDS = ("hpp", "ipp", "rp", "mrp", "tritpp")


@dataclass(frozen=True)
class ModelKind:
    """Which chain to build and with which hyperparameters.

    ``rate_init`` is the homogeneous-Poisson rate the freshly built model is
    exactly equal to (all learnable layers start at the identity).
    """

    kind: str
    horizon: float
    n_knots: int = 10
    block_size: int = 8
    n_blocks: int = 2
    rate_init: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}, expected one of {KINDS}")
        if self.horizon <= 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        if self.n_knots < 2:
            raise ValueError(f"n_knots must be >= 2, got {self.n_knots}")
        if self.kind == "tritpp":
            if self.block_size < 2 or self.block_size % 2:
                raise ValueError(f"block_size must be even and >= 2, got {self.block_size}")
            if self.n_blocks < 1:
                raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.rate_init <= 0:
            raise ValueError(f"rate_init must be > 0, got {self.rate_init}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "horizon": self.horizon, "n_knots": self.n_knots,
                "block_size": self.block_size, "n_blocks": self.n_blocks,
                "rate_init": self.rate_init}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelKind":
        return cls(**d)


def _layers(kind: ModelKind) -> tuple:
    t, k = kind.horizon, kind.n_knots
    if kind.kind == "hpp":
        return (tr.Scale("rate"),)
    if kind.kind == "ipp":
        # elementwise cumulative intensity T -> [0, rate*T], learnable shape
        return (tr.FixedScale(1.0 / t), tr.Spline("g1", k), tr.Scale("rate"))
    if kind.kind == "rp":
        # iid inter-event times through a learnable hazard
        return (tr.Diff(), tr.Scale("rate"), tr.Bridge("psi"), tr.Spline("g2", k),
                tr.Bridge("psi_inv"), tr.Cumsum())
    if kind.kind == "mrp":
        return (tr.FixedScale(1.0 / t), tr.Spline("g1", k), tr.Scale("rate"), tr.Diff(),
                tr.Bridge("psi"), tr.Spline("g2", k), tr.Bridge("psi_inv"), tr.Cumsum())
    blocks = tuple(
        tr.BlockDiag(f"b{i + 1}", kind.block_size, (kind.block_size // 2) * (i % 2))
        for i in range(kind.n_blocks)
    )
    return ((tr.FixedScale(1.0 / t), tr.Spline("g1", k), tr.Scale("rate"), tr.Diff(),
             tr.Bridge("psi"), tr.Spline("g2", k), tr.Bridge("logit"))
            + blocks
            + (tr.Bridge("sigmoid"), tr.Spline("g3", k), tr.Bridge("psi_inv"), tr.Cumsum()))


def build_model(kind: ModelKind) -> TppModel:
    """Identity-initialized model; log densities equal HPP(rate_init) exactly."""
    spec = tr.TransformSpec(_layers(kind))
    store = tr.build_param_store(spec)
    scale = kind.rate_init if kind.kind in ("hpp", "rp") else kind.rate_init * kind.horizon
    store.view("rate")[0] = np.log(scale)
    return TppModel(spec, store, kind.horizon)


def save_checkpoint(path, model: TppModel, kind: ModelKind | None = None,
                    extra: dict | None = None) -> None:
    """Versioned JSON checkpoint: layer list, named slices, flat values."""
    store = model.params
    rec = {
        "format_version": 1,
        "horizon": model.horizon,
        "transform": model.spec.to_dict(),
        "param_names": list(store.names),
        "param_slices": {n: [store.slices[n].start, store.slices[n].stop]
                         for n in store.names},
        "param_values": store.values.tolist(),
        "model_kind": kind.to_dict() if kind is not None else None,
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rec, fh)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (model, kind or None, extra dict)."""
    with open(path, "r", encoding="utf-8") as fh:
        rec = json.load(fh)
    if rec.get("format_version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {rec.get('format_version')!r}")
    spec = tr.TransformSpec.from_dict(rec["transform"])
    slices = {n: slice(a, b) for n, (a, b) in rec["param_slices"].items()}
    store = tr.ParamStore(tuple(rec["param_names"]), slices,
                          np.asarray(rec["param_values"], dtype=np.float64))
    model = TppModel(spec, store, float(rec["horizon"]))
    kind = ModelKind.from_dict(rec["model_kind"]) if rec.get("model_kind") else None
    return model, kind, rec.get("extra", {})


# ---------------------------------------------------------------------------
# Hawkes process with exponential kernel (sequential baseline)


@dataclass(frozen=True)
class HawkesExpParams:
    """Intensity mu + alpha * sum_j exp(-beta (t - t_j)) over past events."""

    mu: float
    alpha: float
    beta: float

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


def _event_intensities(params: HawkesExpParams, times: np.ndarray) -> np.ndarray:
    """lambda*(t_i) via the O(N) Markov recursion of the exponential kernel."""
    lam = np.empty(times.size)
    s = 0.0
    prev = 0.0
    for i, t in enumerate(times):
        s = s * np.exp(-params.beta * (t - prev))
        lam[i] = params.mu + s
        s += params.alpha
        prev = t
    return lam


def hawkes_compensator(params: HawkesExpParams, times: np.ndarray, horizon: float) -> float:
    return params.mu * horizon + (params.alpha / params.beta) * float(
        (1.0 - np.exp(-params.beta * (horizon - times))).sum())


def hawkes_log_prob(params: HawkesExpParams, sequence: EventSequence) -> float:
    """Exact log density: sum log lambda*(t_i) - integral of lambda*."""
    lam = _event_intensities(params, sequence.times)
    return float(np.log(lam).sum()) - hawkes_compensator(params, sequence.times, sequence.horizon)


def hawkes_rescaled_gaps(params: HawkesExpParams, sequence: EventSequence) -> np.ndarray:
    """Compensator increments between consecutive events (O(N) recursion).

    Under the model these are iid unit exponentials.
    """
    out = np.empty(len(sequence))
    s_plus = 0.0   # excitation just after the previous event
    prev = 0.0
    for i, t in enumerate(sequence.times):
        delta = t - prev
        decay = np.exp(-params.beta * delta)
        out[i] = params.mu * delta + (s_plus / params.beta) * (1.0 - decay)
        s_plus = s_plus * decay + params.alpha
        prev = t
    return out


def hawkes_sample(params: HawkesExpParams, horizon: float, seed: int) -> EventSequence:
    """Exact simulation by Ogata thinning.

    Between events the intensity only decays, so mu + s at the current time
    is a valid piecewise-constant bound that is refreshed after every
    candidate (accepted or rejected).
    """
    if params.alpha >= params.beta:
        raise ValueError(
            f"need alpha < beta for a subcritical process, got {params.alpha} >= {params.beta}")
    rng = stream(seed, 3)
    t = 0.0
    s = 0.0   # excitation at the current time
    events = []
    while True:
        bound = params.mu + s
        w = rng.exponential(1.0 / bound)
        t = t + w
        if t > horizon:
            break
        s = s * np.exp(-params.beta * w)
        if rng.uniform() * bound <= params.mu + s:
            events.append(t)
            s += params.alpha
    return EventSequence(np.asarray(events), horizon)
