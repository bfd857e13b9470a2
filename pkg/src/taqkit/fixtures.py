"""Bundled seeded fixtures used by the acceptance checks and the demos.

One seed drives a generator/block pair whose post-GELU activations show all
three target phenomena at once: ranges that grow across the schedule, a
dominant crammed negative lobe with offset-heavy asymmetric channels, and a
few channels concentrating the outliers.  The reconstruction problem is the
block's feedforward pair over that corpus.
"""

from __future__ import annotations

import numpy as np

from .linalg import gelu, linear_forward
from .quantizer import Granularity, calibrate_params
from .reconstruction import FeedForwardUnit, SingleUnitModel
from .toydit import (CalibrationSet, ToyDiTBlock, generate_calibration,
                     random_block)
from .transforms import (ShiftState, channel_mid_range, init_migration_factors,
                         momentum_update, select_outlier_channels)

DEFAULT_SEED = 83
DEFAULT_D = 64
DEFAULT_TOKENS = 8
DEFAULT_TIMESTEPS = 25
DEFAULT_PER_STEP = 32


def phenomenology_setup(seed: int = DEFAULT_SEED, d: int = DEFAULT_D,
                        tokens: int = DEFAULT_TOKENS,
                        timesteps: int = DEFAULT_TIMESTEPS,
                        per_step: int = DEFAULT_PER_STEP
                        ) -> tuple[ToyDiTBlock, CalibrationSet]:
    """Block + plain timestep-scaled corpus (no injected input outliers).

    The block's hot feedforward columns supply the offset and range outliers,
    keeping the corpus itself Gaussian so the shifting/migration margins are
    driven by the channel structure rather than sampling tails.  This is the
    outlier corpus: a few channels dominate the post-GELU ranges.
    """
    calib = generate_calibration(timesteps, per_step, d, tokens, seed,
                                 outlier_channels=0)
    block = random_block(d, seed + 1000)
    return block, calib


def asymmetric_setup(seed: int = DEFAULT_SEED, d: int = DEFAULT_D,
                     tokens: int = DEFAULT_TOKENS,
                     timesteps: int = DEFAULT_TIMESTEPS,
                     per_step: int = DEFAULT_PER_STEP
                     ) -> tuple[ToyDiTBlock, CalibrationSet]:
    """Block + corpus tuned for the shifting benefit, not for migration.

    Offsets are moderate (the dense negative lobe stays resolved by several
    quantizer bins) and no column carries extra gain, so per-channel
    mid-range shifting shrinks the global range without any channel being a
    spread outlier.
    """
    calib = generate_calibration(timesteps, per_step, d, tokens, seed,
                                 outlier_channels=0)
    block = random_block(d, seed + 1000, hot_gain=(1.0, 1.0),
                         hot_bias=(12.0, 18.0), ln2_gain=0.25)
    return block, calib


def momentum_shift_state(captured, beta: float = 0.95) -> ShiftState:
    """EMA of per-sample mid-ranges in shuffled calibration order."""
    state = ShiftState.zeros(captured[0][1].shape[1], beta=beta)
    for _, h in captured:
        state = momentum_update(state, channel_mid_range(h))
    return state


def default_topk(n_channels: int) -> int:
    """ceil(1%) of the input channel count."""
    return max(1, -(-n_channels // 100))


def pf_reconstruction_problem(seed: int = DEFAULT_SEED,
                              bits_w: int = 4, bits_a: int = 8,
                              with_transforms: bool = True
                              ) -> tuple[SingleUnitModel, CalibrationSet]:
    """The bundled toy reconstruction problem: one standalone feedforward pair.

    The calibration samples feed the feedforward directly; targets are its
    full-precision outputs.  With ``with_transforms`` the unit carries
    momentum shifting values and a top-k migration plan initialized from the
    corpus.
    """
    block, calib = phenomenology_setup(seed)
    inputs = calib.stacked()
    n, t, d = inputs.shape
    flat = inputs.reshape(-1, d)
    targets = np.stack([
        linear_forward(block.pf_out, gelu(linear_forward(block.pf_in, a)))
        for a in inputs
    ])

    h_flat = gelu(flat @ block.pf_in.weight + block.pf_in.bias)
    shift_values = None
    plan = None
    if with_transforms:
        captured = [(ts, gelu(linear_forward(block.pf_in, x)))
                    for ts, x in calib.samples]
        shift_values = momentum_shift_state(captured).values
        shifted = h_flat - shift_values
        idx = select_outlier_channels(shifted, default_topk(shifted.shape[1]))
        plan = init_migration_factors(shifted, idx)
        h_eff = shifted.copy()
        h_eff[:, plan.outlier_indices] /= plan.factors
        w2_eff = block.pf_out.weight.copy()
        w2_eff[plan.outlier_indices, :] *= plan.factors[:, None]
    else:
        h_eff = h_flat
        w2_eff = block.pf_out.weight

    unit = FeedForwardUnit(
        pf_in=block.pf_in.copy(),
        pf_out=block.pf_out.copy(),
        w1_params=calibrate_params(block.pf_in.weight, bits_w,
                                   Granularity.WEIGHT_CHANNEL),
        w2_params=calibrate_params(w2_eff, bits_w, Granularity.WEIGHT_CHANNEL),
        a_params=calibrate_params(flat, bits_a, Granularity.TENSOR),
        h_params=calibrate_params(h_eff, bits_a, Granularity.TENSOR),
        shift_values=shift_values,
        plan=plan,
        label="block0/pf",
    )
    return SingleUnitModel(unit, inputs, targets), calib
