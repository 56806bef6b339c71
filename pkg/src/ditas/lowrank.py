"""Data-free low-rank compensation of weight quantization error.

Alternates between re-quantizing the low-rank-corrected weight and fitting
a rank-r SVD to what quantization left behind, minimising
``||W - Q(W) - B A^T||_F`` without any gradient steps.

Layout: weights are N x C (out x in); ``a`` is C x r, ``b`` is N x r and
the correction added to the dequantized weight is ``b @ a.T``. Singular
values are absorbed into ``a``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .quant import (
    QuantizedTensor,
    is_pass_through,
    quantize_weight_per_input_channel,
    simulate_activation,
)
from .smoothing import SmoothingFactor
from .tensor import ShapeError, as_tensor, frobenius_norm, truncated_svd

__all__ = [
    "DEFAULT_RANK",
    "DEFAULT_ITERATIONS",
    "EARLY_STOP_RTOL",
    "CompensationConfig",
    "CompensatedWeight",
    "alternating_optimize",
    "compensated_forward",
    "quantization_residual",
]

DEFAULT_RANK = 32
DEFAULT_ITERATIONS = 10
EARLY_STOP_RTOL = 1e-10


@dataclass(frozen=True)
class CompensationConfig:
    rank: int = DEFAULT_RANK
    iterations: int = DEFAULT_ITERATIONS
    weight_bits: int = 4

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


@dataclass(frozen=True)
class CompensatedWeight:
    """A quantized N x C weight plus its full-precision low-rank correction.

    ``q_w`` is ``None`` at pass-through bitwidths, in which case
    ``dequantized`` is the smoothed weight itself.
    """

    q_w: QuantizedTensor | None
    dequantized: np.ndarray
    a: np.ndarray
    b: np.ndarray
    residual_history: tuple[float, ...]
    smoothing: SmoothingFactor
    notes: tuple[str, ...] = field(default=())

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def residual(self) -> float:
        return min(self.residual_history)

    def effective_weight(self) -> np.ndarray:
        return self.dequantized + self.b @ self.a.T


def quantization_residual(w_s, bits: int) -> float:
    """Frobenius error of plain per-input-channel quantization."""
    w_s = as_tensor(w_s)
    return frobenius_norm(w_s - quantize_weight_per_input_channel(w_s, bits).dequantize())


def alternating_optimize(w_s, cfg: CompensationConfig, smoothing: SmoothingFactor | None = None) -> CompensatedWeight:
    w_s = as_tensor(w_s)
    if w_s.ndim != 2:
        raise ShapeError(f"weight must be N x C, got shape {w_s.shape}")
    n, c = w_s.shape
    if smoothing is None:
        smoothing = SmoothingFactor.identity(c)
    elif len(smoothing) != c:
        raise ShapeError(f"smoothing factor has {len(smoothing)} channels, weight has {c}")

    notes = []
    rank = cfg.rank
    if rank > min(n, c):
        rank = min(n, c)
        msg = f"rank {cfg.rank} exceeds min(N, C) = {rank}; clamped"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)

    if is_pass_through(cfg.weight_bits):
        return CompensatedWeight(
            None, w_s.copy(), np.zeros((c, rank)), np.zeros((n, rank)), (0.0,), smoothing, tuple(notes)
        )

    a = np.zeros((c, rank))
    b = np.zeros((n, rank))
    history: list[float] = []
    best = None
    for it in range(cfg.iterations):
        q = quantize_weight_per_input_channel(w_s - b @ a.T, cfg.weight_bits)
        deq = q.dequantize()
        residual = w_s - deq
        svd = truncated_svd(residual, rank)
        b = svd.u
        a = svd.v * svd.singular_values
        err = frobenius_norm(residual - b @ a.T)
        history.append(err)
        if best is None or err < best[0]:
            best = (err, q, deq, a, b)
        if it > 0 and history[-2] - err <= EARLY_STOP_RTOL * history[-2]:
            break

    _, q, deq, a, b = best
    return CompensatedWeight(q, deq, a, b, tuple(history), smoothing, tuple(notes))


def compensated_forward(x, cw: CompensatedWeight, act_bits: int, bias=None, smooth_input: bool = True) -> np.ndarray:
    """Quantized layer output ``Q(x / s) W_q^T + (Q(x / s) a) b^T + bias``.

    ``x`` has channels last and is quantized as one tensor. Pass
    ``smooth_input=False`` when the division by ``s`` was already folded
    into the producing layer.
    """
    x = as_tensor(x)
    if x.shape[-1] != cw.dequantized.shape[1]:
        raise ShapeError(f"input has {x.shape[-1]} channels, weight expects {cw.dequantized.shape[1]}")
    if smooth_input:
        x = x / cw.smoothing.s
    xq = simulate_activation(x, act_bits)
    y = xq @ cw.dequantized.T
    if cw.rank:
        y = y + (xq @ cw.a) @ cw.b.T
    if bias is not None:
        y = y + as_tensor(bias)
    return y
