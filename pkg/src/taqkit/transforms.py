"""Activation-side transformations that keep the matmul output exact.

Two families:

* channel shifting — subtract a per-channel value v, fold ``v @ W`` into the
  next layer's bias so ``a @ W + b == (a - v) @ W + (v @ W + b)``; v is
  tracked across calibration batches with a momentum (EMA) update.
* outlier handling — pick the top-k widest channels of the shifted
  activations, then either migrate them (divide the channel by an integer-ish
  factor m, multiply the matching weight row by m) or split them into m
  duplicate sub-channels at 1/m magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import LinearLayer, as_tensor
from .quantizer import round_half_away


@dataclass
class ShiftState:
    """Per-input-channel shifting values with an EMA update rule.

    The first observed batch initializes ``values`` directly; later batches
    blend in with coefficient (1 - beta).  beta defaults to 0.95.
    """

    values: np.ndarray
    beta: float = 0.95
    updates_seen: int = 0

    def __post_init__(self):
        self.values = as_tensor(self.values)
        if not (0.0 <= self.beta < 1.0):
            raise ValueError(f"beta must be in [0, 1), got {self.beta}")

    @classmethod
    def zeros(cls, channels: int, beta: float = 0.95) -> "ShiftState":
        return cls(np.zeros(channels), beta=beta)


@dataclass
class MigrationPlan:
    """Sorted outlier channel indices and their per-channel factors (>= 1)."""

    outlier_indices: np.ndarray
    factors: np.ndarray

    def __post_init__(self):
        self.outlier_indices = np.asarray(self.outlier_indices, dtype=np.int64)
        self.factors = as_tensor(self.factors)
        if self.outlier_indices.shape != self.factors.shape:
            raise ValueError("indices and factors must have equal length")
        if len(self.outlier_indices) > 1 and np.any(np.diff(self.outlier_indices) <= 0):
            raise ValueError("outlier indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.outlier_indices)

    @classmethod
    def empty(cls) -> "MigrationPlan":
        return cls(np.array([], dtype=np.int64), np.array([]))


def channel_mid_range(a: np.ndarray) -> np.ndarray:
    """(max + min) / 2 over tokens, per channel."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError(f"need a non-empty (tokens, channels) array, got {a.shape}")
    return 0.5 * (a.max(axis=0) + a.min(axis=0))


def momentum_update(state: ShiftState, current: np.ndarray) -> ShiftState:
    """EMA step: v <- beta * v + (1 - beta) * current; first batch sets v."""
    current = as_tensor(current)
    if current.shape != state.values.shape:
        raise ValueError(
            f"current has shape {current.shape}, state has {state.values.shape}"
        )
    if state.updates_seen == 0:
        new = current.copy()
    else:
        new = state.beta * state.values + (1.0 - state.beta) * current
    return ShiftState(new, beta=state.beta, updates_seen=state.updates_seen + 1)


def apply_shift(a: np.ndarray, state: ShiftState) -> np.ndarray:
    """Subtract the per-channel shifting values."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[1] != state.values.shape[0]:
        raise ValueError(
            f"activation shape {a.shape} does not match {state.values.shape[0]} channels"
        )
    return a - state.values


def fold_shift_into_bias(layer: LinearLayer, state: ShiftState) -> LinearLayer:
    """Return the layer with bias replaced by ``v @ W + b`` (weight untouched).

    This makes ``linear_forward(folded, a - v)`` equal ``linear_forward(layer, a)``.
    """
    if state.values.shape[0] != layer.in_channels:
        raise ValueError(
            f"shift has {state.values.shape[0]} channels, layer expects {layer.in_channels}"
        )
    new_bias = state.values @ layer.weight + layer.bias
    return LinearLayer(layer.weight.copy(), new_bias)


def select_outlier_channels(a_shifted: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k channels with the largest (max - min) range.

    Ties break toward the lower channel index; the result is sorted ascending.
    """
    a_shifted = as_tensor(a_shifted)
    if a_shifted.ndim != 2:
        raise ValueError(f"need a (tokens, channels) array, got {a_shifted.shape}")
    n_channels = a_shifted.shape[1]
    if not 0 <= k < n_channels:
        raise ValueError(f"k must satisfy 0 <= k < {n_channels}, got {k}")
    if k == 0:
        return np.array([], dtype=np.int64)
    ranges = a_shifted.max(axis=0) - a_shifted.min(axis=0)
    # Stable sort on the negated ranges: equal ranges keep index order.
    order = np.argsort(-ranges, kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def init_migration_factors(a_shifted: np.ndarray, indices: np.ndarray) -> MigrationPlan:
    """Rounded ratio of each outlier channel's peak magnitude to the normal peak.

    Maxima are taken over absolute values (shifted channels are symmetric, so
    max == |min| up to noise, and |.| keeps the ratio well defined for any
    input).  Factors are floored at 1.
    """
    a_shifted = as_tensor(a_shifted)
    indices = np.asarray(indices, dtype=np.int64)
    n_channels = a_shifted.shape[1]
    if len(indices) and (indices.min() < 0 or indices.max() >= n_channels):
        raise ValueError("outlier index out of range")
    normal = np.setdiff1d(np.arange(n_channels), indices)
    if normal.size == 0:
        raise ValueError("at least one normal channel must remain")
    if len(indices) == 0:
        return MigrationPlan.empty()
    outlier_peak = np.abs(a_shifted[:, indices]).max(axis=0)
    normal_peak = np.abs(a_shifted[:, normal]).max()
    if normal_peak <= 0:
        factors = np.ones(len(indices))
    else:
        factors = np.maximum(1.0, round_half_away(outlier_peak / normal_peak))
    return MigrationPlan(indices, factors)


def migrate(layer: LinearLayer, a_shifted: np.ndarray,
            plan: MigrationPlan) -> tuple[np.ndarray, LinearLayer]:
    """Divide outlier activation columns by m, multiply weight rows by m.

    The product ``a @ W`` is preserved exactly (up to float reassociation);
    the bias is untouched.
    """
    a_shifted = as_tensor(a_shifted)
    idx = plan.outlier_indices
    if len(idx) == 0:
        return a_shifted.copy(), layer.copy()
    if idx.min() < 0 or idx.max() >= layer.in_channels:
        raise ValueError("migration index out of range for layer")
    if a_shifted.shape[1] != layer.in_channels:
        raise ValueError(
            f"activation shape {a_shifted.shape} does not match layer "
            f"({layer.in_channels} input channels)"
        )
    if np.any(plan.factors <= 0):
        raise ValueError("migration factors must be positive")
    a_out = a_shifted.copy()
    a_out[:, idx] = a_out[:, idx] / plan.factors
    w_out = layer.weight.copy()
    w_out[idx, :] = w_out[idx, :] * plan.factors[:, None]
    return a_out, LinearLayer(w_out, layer.bias.copy())


def split_channels(layer: LinearLayer, a_shifted: np.ndarray,
                   plan: MigrationPlan) -> tuple[np.ndarray, LinearLayer]:
    """Replace each outlier channel by m copies at 1/m magnitude.

    The matching weight row is duplicated m times unscaled, so the matmul is
    unchanged while the expanded activation loses its outliers.  Requires
    integer factors; the expanded width is C_i + sum(m - 1).
    """
    a_shifted = as_tensor(a_shifted)
    idx = plan.outlier_indices
    if a_shifted.shape[1] != layer.in_channels:
        raise ValueError(
            f"activation shape {a_shifted.shape} does not match layer "
            f"({layer.in_channels} input channels)"
        )
    if len(idx) and (idx.min() < 0 or idx.max() >= layer.in_channels):
        raise ValueError("split index out of range for layer")
    if np.any(plan.factors != np.round(plan.factors)) or np.any(plan.factors < 1):
        raise ValueError("channel splitting requires integer factors >= 1")
    factors = {int(i): int(m) for i, m in zip(idx, plan.factors)}
    a_cols, w_rows = [], []
    for c in range(layer.in_channels):
        m = factors.get(c, 1)
        for _ in range(m):
            a_cols.append(a_shifted[:, c] / m)
            w_rows.append(layer.weight[c, :])
    a_out = np.stack(a_cols, axis=1)
    w_out = np.stack(w_rows, axis=0)
    return a_out, LinearLayer(w_out, layer.bias.copy())
