"""Miniature DiT-style block and a synthetic timestep-varying calibration set.

The block is one residual transformer block: single-head self-attention plus
a pointwise feedforward (two linears around a GELU).  The "layer norms" are
per-channel affine scale/offset vectors without re-normalization: a real DiT
injects timestep information through conditioned modulation, and dividing by
the row statistics here would erase the timestep-dependent scale that the
calibration generator encodes.  Identity-initialized, they keep the residual
algebra intact while letting the input statistics reach the feedforward.

The generator produces block inputs whose scale grows linearly over the
simulated denoising schedule and whose designated channels carry heavy-tailed
positive magnitudes.  The block factory gives a few feedforward columns large
gains and biases, so the post-GELU activations exhibit the three phenomena
the transforms target: step-wise range growth, a dominant crammed negative
lobe, and channel-concentrated outliers.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from .linalg import LinearLayer, as_tensor, gelu, linear_forward


@dataclass
class ToyDiTBlock:
    """Single-head attention + feedforward block with affine pre-layers."""

    wq: LinearLayer
    wk: LinearLayer
    wv: LinearLayer
    out_proj: LinearLayer
    pf_in: LinearLayer
    pf_out: LinearLayer
    ln1_scale: np.ndarray
    ln1_offset: np.ndarray
    ln2_scale: np.ndarray
    ln2_offset: np.ndarray

    def __post_init__(self):
        d = self.wq.in_channels
        hidden = self.pf_in.out_channels
        if self.pf_out.in_channels != hidden:
            raise ValueError(
                f"pf_in outputs {hidden} channels but pf_out expects "
                f"{self.pf_out.in_channels}"
            )
        if hidden != 4 * d:
            raise ValueError(f"feedforward hidden width must be 4*d, got {hidden} for d={d}")

    @property
    def d(self) -> int:
        return self.wq.in_channels

    @property
    def hidden(self) -> int:
        return self.pf_in.out_channels


def _affine(x: np.ndarray, scale: np.ndarray, offset: np.ndarray) -> np.ndarray:
    return x * scale + offset


def random_block(d: int, seed: int,
                 hot_fraction: float = 0.01,
                 hot_gain: tuple[float, float] = (3.5, 4.5),
                 hot_bias: tuple[float, float] = (70.0, 100.0),
                 bias_mean: float = -0.8,
                 bias_std: float = 0.8,
                 ln2_gain: float = 1.0) -> ToyDiTBlock:
    """Seeded block whose feedforward reproduces the outlier phenomenology.

    ``hot_fraction`` of the 4*d hidden columns get amplified input weights
    (range outliers) and large positive biases (offset-dominated channels);
    the remaining biases lean negative so the majority of post-GELU values
    land in the bounded negative lobe.  ``ln2_gain`` scales the feedforward's
    input affine, controlling how wide the pre-GELU distribution is relative
    to the GELU bend.
    """
    rng = np.random.default_rng(seed)
    h = 4 * d

    def lin(n_in, n_out, bias_scale=0.02):
        w = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
        b = bias_scale * rng.standard_normal(n_out)
        return LinearLayer(w, b)

    wq, wk, wv = lin(d, d), lin(d, d), lin(d, d)
    out_proj = lin(d, d)

    w1 = rng.standard_normal((d, h)) / np.sqrt(d)
    b1 = bias_mean + bias_std * rng.standard_normal(h)
    n_hot = max(1, ceil(hot_fraction * h))
    hot = np.sort(rng.choice(h, size=n_hot, replace=False))
    gains = rng.uniform(hot_gain[0], hot_gain[1], size=n_hot)
    w1[:, hot] *= gains
    b1[hot] = rng.uniform(hot_bias[0], hot_bias[1], size=n_hot)
    pf_in = LinearLayer(w1, b1)
    pf_out = lin(h, d)
    # high-magnitude channels pair with proportionally small outgoing
    # weights, keeping the block's products bounded
    pf_out.weight[hot, :] /= gains[:, None]

    ones = np.ones(d)
    zeros = np.zeros(d)
    return ToyDiTBlock(wq, wk, wv, out_proj, pf_in, pf_out,
                       ones.copy(), zeros.copy(),
                       ln2_gain * ones.copy(), zeros.copy())


def attention(block: ToyDiTBlock, x_norm: np.ndarray) -> np.ndarray:
    """Single-head softmax attention over tokens (no masking)."""
    q = linear_forward(block.wq, x_norm)
    k = linear_forward(block.wk, x_norm)
    v = linear_forward(block.wv, x_norm)
    logits = (q @ k.T) / np.sqrt(block.d)
    logits = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return linear_forward(block.out_proj, weights @ v)


def feedforward(block: ToyDiTBlock, x_norm: np.ndarray) -> np.ndarray:
    return linear_forward(block.pf_out, gelu(linear_forward(block.pf_in, x_norm)))


def block_forward(block: ToyDiTBlock, x: np.ndarray) -> np.ndarray:
    """x + attention(affine1(x)), then + feedforward(affine2(.))."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != block.d:
        raise ValueError(f"input shape {x.shape} does not match block width {block.d}")
    h = x + attention(block, _affine(x, block.ln1_scale, block.ln1_offset))
    return h + feedforward(block, _affine(h, block.ln2_scale, block.ln2_offset))


def pf_input(block: ToyDiTBlock, x: np.ndarray) -> np.ndarray:
    """The feedforward's input activations for a block input x."""
    x = as_tensor(x)
    h = x + attention(block, _affine(x, block.ln1_scale, block.ln1_offset))
    return _affine(h, block.ln2_scale, block.ln2_offset)


# ---------------------------------------------------------------------------
# Calibration generator
# ---------------------------------------------------------------------------

@dataclass
class CalibrationSet:
    """Shuffled (timestep index, activation) samples across a schedule."""

    samples: list[tuple[int, np.ndarray]]
    timesteps: int
    per_step: int
    d: int
    tokens: int
    seed: int

    def __len__(self) -> int:
        return len(self.samples)

    def stacked(self) -> np.ndarray:
        """All sample tensors as one (n_samples, tokens, d) array."""
        return np.stack([x for _, x in self.samples])

    def step_ids(self) -> np.ndarray:
        return np.array([t for t, _ in self.samples], dtype=np.int64)


def generate_calibration(timesteps: int, per_step: int, d: int, tokens: int,
                         seed: int,
                         scale_start: float = 1.0,
                         scale_end: float = 3.0,
                         outlier_channels: int | None = None,
                         outlier_sigma: float = 1.5) -> CalibrationSet:
    """Timestep-indexed synthetic block inputs.

    Step s draws N(0, 1) tokens scaled by a multiplier that ramps linearly
    from ``scale_start`` to ``scale_end`` across the schedule.  A fixed
    seeded subset of channels (default 2% of 4*d, i.e. relative to the
    feedforward width) is replaced by heavy-tailed positive magnitudes
    exp(sigma * z), z ~ N(0, 1).  Samples are shuffled across steps.

    Pass ``outlier_channels=0`` for a plain Gaussian corpus.
    """
    if timesteps < 1 or per_step < 1:
        raise ValueError("timesteps and per_step must be >= 1")
    rng = np.random.default_rng(seed)
    if outlier_channels is None:
        outlier_channels = max(1, round(0.02 * 4 * d))
    if outlier_channels > d:
        raise ValueError(f"outlier_channels {outlier_channels} exceeds d={d}")
    injected = np.sort(rng.choice(d, size=outlier_channels, replace=False)) \
        if outlier_channels else np.array([], dtype=np.int64)

    samples: list[tuple[int, np.ndarray]] = []
    for s in range(timesteps):
        frac = s / (timesteps - 1) if timesteps > 1 else 0.0
        mult = scale_start + (scale_end - scale_start) * frac
        for _ in range(per_step):
            x = rng.standard_normal((tokens, d))
            if outlier_channels:
                x[:, injected] = np.exp(
                    outlier_sigma * rng.standard_normal((tokens, outlier_channels))
                )
            samples.append((s, mult * x))
    order = rng.permutation(len(samples))
    samples = [samples[i] for i in order]
    return CalibrationSet(samples, timesteps, per_step, d, tokens, seed)


def post_gelu_capture(block: ToyDiTBlock, calib: CalibrationSet
                      ) -> list[tuple[int, np.ndarray]]:
    """Post-GELU feedforward activations per calibration sample.

    Returns (timestep, gelu(pf_in(.))) pairs in calibration order, computed
    on the full-precision forward path.
    """
    captured = []
    for t, x in calib.samples:
        a = pf_input(block, x)
        captured.append((t, gelu(linear_forward(block.pf_in, a))))
    return captured
