"""Dense float64 linear-algebra substrate: matmul, GELU, linear layers.

Everything downstream (quantizers, transforms, reconstruction) computes on
plain numpy float64 arrays.  Activations are 2-D ``(tokens, channels)``;
weights are ``(in_channels, out_channels)`` so a forward pass is ``a @ w``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Global minimum of x * Phi(x), attained near x = -0.7518.
GELU_MIN = -0.16997120747990369
GELU_ARGMIN = -0.751791534894327


def as_tensor(x) -> np.ndarray:
    """Coerce to a float64 ndarray without copying when already one."""
    return np.asarray(x, dtype=np.float64)


def matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ w`` with an explicit inner-dimension check.

    Raises
    ------
    ValueError
        If the inner dimensions disagree; the message names both shapes.
    """
    a = as_tensor(a)
    w = as_tensor(w)
    if a.ndim != 2 or w.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {w.shape}")
    if a.shape[1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {w.shape}")
    return a @ w


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, x * Phi(x) with Phi the Gaussian CDF (erf form).

    The exact form matters: its negative lobe is bounded below by
    ``GELU_MIN`` (~ -0.17), which the distribution diagnostics rely on.
    """
    x = as_tensor(x)
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_with_cdf(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """GELU plus the Gaussian CDF of the input (reused by backward passes)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, cdf


def gelu_grad(x: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    """Derivative Phi(x) + x * phi(x); pass ``cdf`` to reuse a forward CDF."""
    x = as_tensor(x)
    if cdf is None:
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass
class LinearLayer:
    """A dense layer: ``y = a @ weight + bias``.

    weight : (in_channels, out_channels)
    bias   : (out_channels,)
    """

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        self.bias = as_tensor(self.bias)
        if self.weight.ndim != 2:
            raise ValueError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.weight.copy(), self.bias.copy())


def linear_forward(layer: LinearLayer, a: np.ndarray) -> np.ndarray:
    """``a @ weight + bias`` with bias broadcast over token rows."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[1] != layer.in_channels:
        raise ValueError(
            f"activation shape {a.shape} does not match weight {layer.weight.shape}"
        )
    return a @ layer.weight + layer.bias
