"""Quantization-quality diagnostics: bin occupancy, MSE, channel ranges.

The occupancy report measures how well a tensor-wise quantizer resolves a
distribution: which fraction of codes lands below zero, how few bins carry
the bulk of the mass, and how many bins the positive tail really uses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .linalg import as_tensor
from .quantizer import Granularity, QuantParams, fake_quantize, quantize


@dataclass
class OccupancyReport:
    bits: int
    negative_mass_fraction: float       # fraction of elements < 0
    negative_bin_fraction: float        # bins whose dequantized centers are < 0
    positive_bin_fraction: float        # complement, counted over all bins
    positive_mass_quantile: float       # the quantile examined on the positive side
    positive_quantile_bin_fraction: float  # smallest bin fraction covering it
    majority_mass_threshold: float      # "majority mass" level, default 0.79
    majority_mass_bins: int             # smallest bin count covering that mass
    majority_mass_bin_fraction: float
    channel_ranges: np.ndarray          # (channels, 3): min, max, range


def _min_bins_covering(codes: np.ndarray, n_bins: int, mass: float) -> int:
    """Fewest bins whose occupancy sums to >= mass of the elements."""
    if codes.size == 0:
        return 0
    counts = np.bincount(codes.ravel(), minlength=n_bins)
    ordered = np.sort(counts)[::-1]
    need = mass * codes.size
    return int(np.searchsorted(np.cumsum(ordered), need) + 1)


def bin_occupancy(x: np.ndarray, p: QuantParams,
                  positive_quantile: float = 0.996,
                  majority_mass: float = 0.79) -> OccupancyReport:
    """Occupancy statistics for a tensor-wise quantizer over x."""
    if p.granularity is not Granularity.TENSOR:
        raise ValueError("bin occupancy is defined for tensor-wise params")
    x = as_tensor(x)
    n_bins = 2**p.bits
    z = int(p.zero_point[0])
    codes = quantize(x, p).codes

    negative_mass = float(np.mean(x < 0))
    # Center of code k is S*(k - Z); it is negative exactly when k < Z.
    negative_bins = min(max(z, 0), n_bins)
    positive = codes[x > 0]
    pos_bins = _min_bins_covering(positive, n_bins, positive_quantile)
    majority_bins = _min_bins_covering(codes, n_bins, majority_mass)

    if x.ndim == 2:
        lo, hi = x.min(axis=0), x.max(axis=0)
    else:
        lo, hi = np.atleast_1d(x.min()), np.atleast_1d(x.max())
    ranges = np.stack([lo, hi, hi - lo], axis=1)

    return OccupancyReport(
        bits=p.bits,
        negative_mass_fraction=negative_mass,
        negative_bin_fraction=negative_bins / n_bins,
        positive_bin_fraction=(n_bins - negative_bins) / n_bins,
        positive_mass_quantile=positive_quantile,
        positive_quantile_bin_fraction=pos_bins / n_bins,
        majority_mass_threshold=majority_mass,
        majority_mass_bins=majority_bins,
        majority_mass_bin_fraction=majority_bins / n_bins,
        channel_ranges=ranges,
    )


def quant_mse(x: np.ndarray, p: QuantParams) -> float:
    """Mean of (fake_quantize(x) - x)**2."""
    x = as_tensor(x)
    diff = fake_quantize(x, p) - x
    return float(np.mean(diff * diff))


def channel_range_profile(x: np.ndarray) -> np.ndarray:
    """(channels, 3) array of per-channel min, max, range."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"need a (tokens, channels) array, got {x.shape}")
    lo, hi = x.min(axis=0), x.max(axis=0)
    return np.stack([lo, hi, hi - lo], axis=1)


# ---------------------------------------------------------------------------
# CSV writers (schemas documented in the README)
# ---------------------------------------------------------------------------

OCCUPANCY_CSV_HEADER = [
    "layer", "bits", "negative_mass_fraction", "negative_bin_fraction",
    "positive_bin_fraction", "positive_mass_quantile",
    "positive_quantile_bin_fraction", "majority_mass_threshold",
    "majority_mass_bins", "majority_mass_bin_fraction",
]

RANGES_CSV_HEADER = ["layer", "channel", "min", "max", "range"]

MSE_CSV_HEADER = ["block", "output_mse"]


def write_occupancy_csv(rows: list[tuple[str, OccupancyReport]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(OCCUPANCY_CSV_HEADER)
        for layer, rep in rows:
            writer.writerow([
                layer, rep.bits,
                f"{rep.negative_mass_fraction:.17g}",
                f"{rep.negative_bin_fraction:.17g}",
                f"{rep.positive_bin_fraction:.17g}",
                f"{rep.positive_mass_quantile:.17g}",
                f"{rep.positive_quantile_bin_fraction:.17g}",
                f"{rep.majority_mass_threshold:.17g}",
                rep.majority_mass_bins,
                f"{rep.majority_mass_bin_fraction:.17g}",
            ])


def write_ranges_csv(rows: list[tuple[str, np.ndarray]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RANGES_CSV_HEADER)
        for layer, profile in rows:
            for c in range(profile.shape[0]):
                lo, hi, span = profile[c]
                writer.writerow([layer, c, f"{lo:.17g}", f"{hi:.17g}", f"{span:.17g}"])


def write_mse_csv(rows: list[tuple[str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MSE_CSV_HEADER)
        for block, mse in rows:
            writer.writerow([block, f"{mse:.17g}"])
