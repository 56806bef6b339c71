"""Temporal-aggregated activation smoothing.

Per-channel absolute maxima are taken over every calibration sample,
timestep and token of a layer's input, then balanced against the weight's
per-input-channel maxima with a migration exponent ``alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, as_tensor

__all__ = [
    "ABSMAX_FLOOR",
    "DEFAULT_ALPHA",
    "ON_THE_FLY",
    "ActivationTrace",
    "SmoothingFactor",
    "collect_absmax",
    "merge_absmax",
    "weight_absmax",
    "compute_tas_factor",
    "apply_smoothing",
    "fold_smoothing",
]

ABSMAX_FLOOR = 1e-8
DEFAULT_ALPHA = 0.5


class _OnTheFly:
    """Marker: no producer to fold into, divide activations at run time."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "ON_THE_FLY"


ON_THE_FLY = _OnTheFly()


@dataclass(frozen=True)
class ActivationTrace:
    """Recorded inputs of one linear layer, shape ``(B, T, L, C)``."""

    x: np.ndarray
    layer_id: str = ""
    absmax: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        x = as_tensor(self.x)
        if x.ndim != 4:
            raise ShapeError(f"trace must be B x T x L x C, got shape {x.shape}")
        if x.size == 0:
            raise ValueError(f"trace for layer {self.layer_id!r} is empty")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        fresh = np.abs(x).max(axis=(0, 1, 2))
        if self.absmax is not None and not np.array_equal(np.asarray(self.absmax), fresh):
            raise ValueError(f"stored absmax for layer {self.layer_id!r} does not match the trace")
        fresh.setflags(write=False)
        object.__setattr__(self, "absmax", fresh)

    @property
    def batch(self) -> int:
        return self.x.shape[0]

    @property
    def timesteps(self) -> int:
        return self.x.shape[1]

    @property
    def channels(self) -> int:
        return self.x.shape[3]

    def timestep(self, t: int) -> np.ndarray:
        """Inputs at timestep ``t`` flattened to ``(B * L, C)``."""
        return self.x[:, t].reshape(-1, self.channels)


@dataclass(frozen=True)
class SmoothingFactor:
    s: np.ndarray
    alpha: float | None = None

    def __post_init__(self):
        s = as_tensor(self.s)
        if s.ndim != 1:
            raise ShapeError("smoothing factor must be a vector")
        if not np.all(s > 0):
            raise ValueError("smoothing factor entries must be positive")
        s.setflags(write=False)
        object.__setattr__(self, "s", s)

    def __len__(self) -> int:
        return self.s.shape[0]

    @classmethod
    def identity(cls, channels: int) -> "SmoothingFactor":
        return cls(np.ones(channels))


def collect_absmax(trace: ActivationTrace) -> np.ndarray:
    if not isinstance(trace, ActivationTrace):
        trace = ActivationTrace(trace)
    return trace.absmax.copy()


def merge_absmax(*shards: np.ndarray) -> np.ndarray:
    """Combine statistics gathered on disjoint trace shards."""
    if not shards:
        raise ValueError("nothing to merge")
    return np.maximum.reduce([np.asarray(a, dtype=np.float64) for a in shards])


def weight_absmax(w) -> np.ndarray:
    w = as_tensor(w)
    if w.ndim != 2:
        raise ShapeError(f"weight must be N x C, got shape {w.shape}")
    return np.abs(w).max(axis=0)


def compute_tas_factor(a, b, alpha: float) -> SmoothingFactor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"absmax vectors differ: {a.shape} vs {b.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha!r}")
    a = np.maximum(a, ABSMAX_FLOOR)
    b = np.maximum(b, ABSMAX_FLOOR)
    return SmoothingFactor(a**alpha / b ** (1.0 - alpha), alpha)


def _factor_vector(s) -> np.ndarray:
    return s.s if isinstance(s, SmoothingFactor) else SmoothingFactor(s).s


def apply_smoothing(x, w, s) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x / s, w * s)`` with ``s`` broadcast over the channel axis.

    ``x`` has channels last, ``w`` is N x C; the product ``x @ w.T`` is
    unchanged in exact arithmetic.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    s = _factor_vector(s)
    if x.shape[-1] != s.shape[0] or w.ndim != 2 or w.shape[1] != s.shape[0]:
        raise ShapeError(
            f"channel mismatch: x {x.shape}, w {w.shape}, s {s.shape}"
        )
    return x / s, w * s


def fold_smoothing(producer_w, s, producer_bias=None):
    """Absorb ``1 / s`` into the layer that produces the smoothed activations.

    Returns ``(folded_weight, folded_bias)``, or :data:`ON_THE_FLY` when
    there is no producer.
    """
    s = _factor_vector(s)
    if producer_w is None:
        return ON_THE_FLY
    producer_w = as_tensor(producer_w)
    if producer_w.ndim != 2 or producer_w.shape[0] != s.shape[0]:
        raise ShapeError(
            f"producer weight {producer_w.shape} has {producer_w.shape[0] if producer_w.ndim else 0} "
            f"output channels, smoothing factor has {s.shape[0]}"
        )
    folded_bias = None
    if producer_bias is not None:
        producer_bias = as_tensor(producer_bias)
        if producer_bias.shape != s.shape:
            raise ShapeError("producer bias does not match the smoothing factor")
        folded_bias = producer_bias / s
    return producer_w / s[:, None], folded_bias
