"""Uniform affine quantization at four granularities.

A quantizer maps ``x -> clip(round(x / S) + Z, 0, 2**b - 1)`` and back via
``S * (code - Z)``.  One ``(S, Z)`` pair applies per *group*; the granularity
decides the grouping:

  TENSOR          one group for the whole array
  TOKEN           one group per row of a (tokens, channels) activation
  WEIGHT_CHANNEL  one group per column (output channel) of a weight matrix
  INPUT_CHANNEL   one group per column (input channel) of an activation

Rounding is round-half-away-from-zero everywhere, including the zero point.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import as_tensor

SCALE_EPS = 1e-8


class Granularity(Enum):
    TENSOR = "tensor"
    TOKEN = "token"
    WEIGHT_CHANNEL = "weight_channel"
    INPUT_CHANNEL = "input_channel"


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with ties away from zero (2.5 -> 3, -2.5 -> -3)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass
class QuantParams:
    """Per-group scale/zero-point pairs for a b-bit affine quantizer.

    scale      : (group_count,) positive float64
    zero_point : (group_count,) integer codes in [0, 2**bits - 1]
    """

    scale: np.ndarray
    zero_point: np.ndarray
    bits: int
    granularity: Granularity

    def __post_init__(self):
        self.scale = np.atleast_1d(as_tensor(self.scale))
        self.zero_point = np.atleast_1d(np.asarray(self.zero_point, dtype=np.int64))
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if self.scale.shape != self.zero_point.shape:
            raise ValueError("scale and zero_point group counts differ")
        if np.any(self.scale <= 0):
            raise ValueError("scale must be positive for every group")
        if np.any((self.zero_point < 0) | (self.zero_point > self.max_code)):
            raise ValueError("zero_point out of code range")

    @property
    def max_code(self) -> int:
        return 2**self.bits - 1

    @property
    def group_count(self) -> int:
        return self.scale.shape[0]

    def copy(self) -> "QuantParams":
        return QuantParams(self.scale.copy(), self.zero_point.copy(),
                           self.bits, self.granularity)


@dataclass
class QuantizedTensor:
    """Integer codes plus the parameters that produced them."""

    codes: np.ndarray
    params: QuantParams


def _group_axes(x: np.ndarray, granularity: Granularity):
    """Return (reduce_axis, broadcast_shape, group_count) for an array.

    ``reduce_axis`` is the axis collapsed when computing per-group min/max;
    None means reduce everything.  ``broadcast_shape`` reshapes a
    (group_count,) vector so it broadcasts against ``x``.
    """
    if granularity is Granularity.TENSOR:
        return None, (1,) * x.ndim, 1
    if x.ndim != 2:
        raise ValueError(
            f"{granularity.value} granularity needs a 2-D array, got shape {x.shape}"
        )
    if granularity is Granularity.TOKEN:
        return 1, (x.shape[0], 1), x.shape[0]
    # WEIGHT_CHANNEL and INPUT_CHANNEL both group by column.
    return 0, (1, x.shape[1]), x.shape[1]


def calibrate_params(x: np.ndarray, bits: int, granularity: Granularity) -> QuantParams:
    """Min/max calibration: S = (max - min) / (2**b - 1), Z = round(-min / S).

    Degenerate groups (max == min) get S = SCALE_EPS and Z = 0: a constant
    channel carries no information, so it quantizes to code 0 everywhere.
    """
    x = as_tensor(x)
    if x.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    if bits < 2:
        raise ValueError(f"bits must be >= 2, got {bits}")
    axis, _, _ = _group_axes(x, granularity)
    if axis is None:
        lo = np.atleast_1d(x.min())
        hi = np.atleast_1d(x.max())
    else:
        lo = x.min(axis=axis)
        hi = x.max(axis=axis)
    max_code = 2**bits - 1
    span = hi - lo
    degenerate = span <= 0
    scale = np.where(degenerate, SCALE_EPS, span / max_code)
    scale = np.maximum(scale, SCALE_EPS)
    zero = np.clip(round_half_away(-lo / scale), 0, max_code)
    zero = np.where(degenerate, 0.0, zero)
    return QuantParams(scale, zero.astype(np.int64), bits, granularity)


def _broadcast(p: QuantParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axis, shape, count = _group_axes(x, p.granularity)
    if p.group_count != count:
        raise ValueError(
            f"params have {p.group_count} groups but {p.granularity.value} "
            f"grouping of shape {x.shape} needs {count}"
        )
    return p.scale.reshape(shape), p.zero_point.reshape(shape)


def quantize(x: np.ndarray, p: QuantParams) -> QuantizedTensor:
    """Elementwise clip(round(x / S) + Z, 0, 2**b - 1) per group."""
    x = as_tensor(x)
    s, z = _broadcast(p, x)
    codes = np.clip(round_half_away(x / s) + z, 0, p.max_code)
    return QuantizedTensor(codes.astype(np.int64), p)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Elementwise S * (code - Z) per group."""
    codes = q.codes
    s, z = _broadcast(q.params, codes)
    return s * (codes.astype(np.float64) - z)


def fake_quantize(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """quantize followed by dequantize, literally the two-step composition."""
    return dequantize(quantize(x, p))
