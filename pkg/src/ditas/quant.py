"""Asymmetric affine integer quantization.

``x_hat = s * (clamp(round(x / s) + z, 0, 2**b - 1) - z)`` with rounding
half away from zero. Weights get one (s, z) pair per input channel,
activations a single pair recomputed from the tensor at call time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, as_tensor

__all__ = [
    "SCALE_FLOOR",
    "MIN_BITS",
    "MAX_BITS",
    "QuantParams",
    "ChannelQuantParams",
    "QuantizedTensor",
    "round_half_away",
    "compute_params",
    "quantize",
    "dequantize",
    "fake_quant",
    "quantize_weight_per_input_channel",
    "quantize_weight_per_tensor",
    "quantize_weight_per_output_channel",
    "quantize_weight",
    "fake_quant_activation",
    "PASS_THROUGH_BITS",
    "is_pass_through",
    "simulate_activation",
]

SCALE_FLOOR = 1e-8
MIN_BITS = 2
MAX_BITS = 8
# Scales are truncated to this many mantissa bits. With at most 8-bit codes
# every product scale * code is then exact, so re-calibrating an already
# quantized tensor reproduces the identical scale and fake quantization is
# idempotent bit for bit. Truncation (never rounding up) keeps tie-breaking
# at the range ends outward.
SCALE_MANTISSA_BITS = 44


def _check_bits(bits: int) -> int:
    if int(bits) != bits or not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bitwidth must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")
    return int(bits)


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _canonical_scale(scale):
    mant, exp = np.frexp(scale)
    step = float(1 << SCALE_MANTISSA_BITS)
    return np.ldexp(np.floor(mant * step) / step, exp)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int

    def __post_init__(self):
        _check_bits(self.bits)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale!r}")
        if not 0 <= self.zero_point <= self.qmax:
            raise ValueError(f"zero point {self.zero_point} outside [0, {self.qmax}]")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def representable_range(self) -> tuple[float, float]:
        return self.scale * (0 - self.zero_point), self.scale * (self.qmax - self.zero_point)


@dataclass(frozen=True)
class ChannelQuantParams:
    """Per-channel parameters stored as parallel arrays (one entry per channel)."""

    scales: np.ndarray
    zero_points: np.ndarray
    bits: int

    def __post_init__(self):
        _check_bits(self.bits)
        scales = np.asarray(self.scales, dtype=np.float64)
        zps = np.asarray(self.zero_points, dtype=np.int64)
        if scales.ndim != 1 or scales.shape != zps.shape:
            raise ShapeError("scales and zero points must be 1-D arrays of equal length")
        if not np.all(np.isfinite(scales) & (scales > 0)):
            raise ValueError("all channel scales must be positive and finite")
        if np.any(zps < 0) or np.any(zps > (1 << self.bits) - 1):
            raise ValueError("channel zero points outside the code range")
        scales.setflags(write=False)
        zps.setflags(write=False)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "zero_points", zps)

    def __len__(self) -> int:
        return self.scales.shape[0]

    def __getitem__(self, c: int) -> QuantParams:
        return QuantParams(float(self.scales[c]), int(self.zero_points[c]), self.bits)

    @property
    def per_channel(self) -> list[QuantParams]:
        return [self[c] for c in range(len(self))]


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray
    params: QuantParams | ChannelQuantParams
    axis: int | None = None

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.size and (codes.min() < 0 or codes.max() > (1 << self.params.bits) - 1):
            raise ValueError("codes outside the representable range")
        codes = codes.astype(np.uint8)
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        if isinstance(self.params, ChannelQuantParams):
            if self.axis is None:
                raise ValueError("per-channel params need an axis")
            if codes.shape[self.axis] != len(self.params):
                raise ShapeError(
                    f"{len(self.params)} channel params for axis of length {codes.shape[self.axis]}"
                )

    def _broadcast(self, values: np.ndarray) -> np.ndarray:
        shape = [1] * self.codes.ndim
        shape[self.axis] = -1
        return values.reshape(shape)

    def dequantize(self) -> np.ndarray:
        codes = self.codes.astype(np.float64)
        if isinstance(self.params, ChannelQuantParams):
            s = self._broadcast(self.params.scales)
            z = self._broadcast(self.params.zero_points.astype(np.float64))
        else:
            s, z = self.params.scale, float(self.params.zero_point)
        return s * (codes - z)


def compute_params(values, bits: int) -> QuantParams:
    """Min/max calibration of one quantization grid.

    The observed range is widened to contain zero so the clamped zero point
    can always represent it; for mixed-sign data this is the plain min/max
    rule.
    """
    bits = _check_bits(bits)
    values = as_tensor(values)
    if values.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    lo = min(float(values.min()), 0.0)
    hi = max(float(values.max()), 0.0)
    return _params_from_range(lo, hi, bits)


def _params_from_range(lo: float, hi: float, bits: int) -> QuantParams:
    qmax = (1 << bits) - 1
    scale = float(_canonical_scale(max((hi - lo) / qmax, SCALE_FLOOR)))
    zp = int(np.clip(round_half_away(-lo / scale), 0, qmax))
    return QuantParams(scale, zp, bits)


def _codes(x: np.ndarray, scale, zero_point, qmax: int) -> np.ndarray:
    return np.clip(round_half_away(x / scale) + zero_point, 0, qmax)


def quantize(x, params: QuantParams) -> QuantizedTensor:
    x = as_tensor(x)
    return QuantizedTensor(_codes(x, params.scale, params.zero_point, params.qmax), params)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.dequantize()


def fake_quant(x, params: QuantParams) -> np.ndarray:
    return dequantize(quantize(x, params))


def quantize_weight_per_input_channel(w, bits: int) -> QuantizedTensor:
    """Quantize each column of an N x C weight with its own grid."""
    bits = _check_bits(bits)
    w = as_tensor(w)
    if w.ndim != 2:
        raise ShapeError(f"weight must be 2-D, got shape {w.shape}")
    qmax = (1 << bits) - 1
    lo = np.minimum(w.min(axis=0), 0.0)
    hi = np.maximum(w.max(axis=0), 0.0)
    scales = _canonical_scale(np.maximum((hi - lo) / qmax, SCALE_FLOOR))
    zps = np.clip(round_half_away(-lo / scales), 0, qmax).astype(np.int64)
    codes = _codes(w, scales, zps, qmax)
    return QuantizedTensor(codes, ChannelQuantParams(scales, zps, bits), axis=1)


def quantize_weight_per_output_channel(w, bits: int) -> QuantizedTensor:
    """One grid per row of an N x C weight (the conventional granularity)."""
    q = quantize_weight_per_input_channel(as_tensor(w).T, bits)
    return QuantizedTensor(q.codes.T, q.params, axis=0)


def quantize_weight(w, bits: int, granularity: str = "input_channel") -> QuantizedTensor:
    if granularity == "input_channel":
        return quantize_weight_per_input_channel(w, bits)
    if granularity == "output_channel":
        return quantize_weight_per_output_channel(w, bits)
    if granularity == "tensor":
        return quantize_weight_per_tensor(w, bits)
    raise ValueError(f"unknown weight granularity {granularity!r}")


def quantize_weight_per_tensor(w, bits: int) -> QuantizedTensor:
    return quantize(w, compute_params(w, bits))


def fake_quant_activation(x, bits: int) -> np.ndarray:
    """Dynamic per-tensor quantize-dequantize of ``x``."""
    x = as_tensor(x)
    return fake_quant(x, compute_params(x, bits))


# Bitwidths at or above this are treated as full precision by the layer
# simulators (no quantization applied).
PASS_THROUGH_BITS = 32


def is_pass_through(bits: int) -> bool:
    return bits >= PASS_THROUGH_BITS


def simulate_activation(x, bits: int) -> np.ndarray:
    """Fake-quantize activations, or return them untouched at full precision."""
    if is_pass_through(bits):
        return as_tensor(x)
    return fake_quant_activation(x, bits)
