"""Scale/shift/factor optimization against full-precision block outputs.

The objective is the mean squared difference between a sub-block's output
computed with fake-quantized weights and activations and its full-precision
output.  Rounding is non-differentiable, so gradients w.r.t. the quantizer
scales (and shift values / migration factors, when enabled) use the
straight-through estimator: round(.) acts as identity in the backward pass,
and elements outside the clip range contribute only through the clipped
boundary code.

Two reconstruction modes:

* joint    — all parameters of a unit descend together (one phase).
* separate — the baseline: first weight scales with activations left in
             full precision, then activation scales with weights frozen.

Units are optimized first to last; a multi-unit model feeds each unit the
activations produced by the already-quantized earlier units while targeting
the full-precision outputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .linalg import LinearLayer, as_tensor, gelu, gelu_with_cdf, gelu_grad
from .quantizer import (Granularity, QuantParams, SCALE_EPS, calibrate_params,
                        fake_quantize, round_half_away)
from .transforms import MigrationPlan

WEIGHT_PARAM_NAMES = ("s_w", "s_w1", "s_w2")
ACT_PARAM_NAMES = ("s_a", "s_h")
TRANSFORM_PARAM_NAMES = ("v", "m")


# ---------------------------------------------------------------------------
# Straight-through fake quantization
# ---------------------------------------------------------------------------

def fake_quant_ste(x: np.ndarray, scale, zero_point, bits: int,
                   granularity: Granularity):
    """Fake-quantize and return the pieces the STE backward needs.

    Returns (y, cache) where cache holds the in-range mask and the
    per-element scale sensitivity (code - Z) - (x / S) * in_range.
    """
    x = as_tensor(x)
    max_code = float(2**bits - 1)
    if granularity is Granularity.TENSOR:
        s = scale
        z = zero_point
    elif granularity in (Granularity.WEIGHT_CHANNEL, Granularity.INPUT_CHANNEL):
        s = np.asarray(scale).reshape(1, -1)
        z = np.asarray(zero_point).reshape(1, -1)
    else:
        raise ValueError(f"unsupported STE granularity {granularity}")
    u = x / s
    raw = round_half_away(u) + z
    in_range = (raw >= 0.0) & (raw <= max_code)
    qz = np.clip(raw, 0.0, max_code) - z
    y = s * qz
    cache = (in_range, qz - u * in_range, granularity)
    return y, cache


def fake_quant_ste_vjp(cache, grad_out: np.ndarray):
    """Backward of fake_quant_ste: (grad_x, grad_scale grouped)."""
    in_range, scale_sens, granularity = cache
    grad_x = grad_out * in_range
    weighted = grad_out * scale_sens
    if granularity is Granularity.TENSOR:
        grad_scale = float(weighted.sum())
    else:
        grad_scale = weighted.sum(axis=0)
    return grad_x, grad_scale


# ---------------------------------------------------------------------------
# Reconstruction units
# ---------------------------------------------------------------------------

class LinearUnit:
    """One linear layer with a weight quantizer and an input quantizer."""

    def __init__(self, layer: LinearLayer, w_params: QuantParams,
                 a_params: QuantParams, label: str = "linear"):
        self.layer = layer
        self.w_params = w_params
        self.a_params = a_params
        self.label = label

    @classmethod
    def calibrated(cls, layer: LinearLayer, a: np.ndarray, bits_w: int,
                   bits_a: int, label: str = "linear") -> "LinearUnit":
        w_params = calibrate_params(layer.weight, bits_w, Granularity.WEIGHT_CHANNEL)
        a_params = calibrate_params(a, bits_a, Granularity.TENSOR)
        return cls(layer, w_params, a_params, label)

    def get_params(self) -> dict[str, np.ndarray]:
        return {"s_w": self.w_params.scale.copy(),
                "s_a": self.a_params.scale.copy()}

    def set_params(self, p: dict[str, np.ndarray]) -> None:
        if "s_w" in p:
            self.w_params.scale = np.atleast_1d(as_tensor(p["s_w"]))
        if "s_a" in p:
            self.a_params.scale = np.atleast_1d(as_tensor(p["s_a"]))

    def param_names(self, include_transforms: bool = True) -> tuple[str, ...]:
        return ("s_w", "s_a")

    def forward_fp(self, a: np.ndarray) -> np.ndarray:
        return a @ self.layer.weight + self.layer.bias

    def forward_quant(self, a: np.ndarray, quant_act: bool = True) -> np.ndarray:
        ah = fake_quantize(a, self.a_params) if quant_act else as_tensor(a)
        wh = fake_quantize(self.layer.weight, self.w_params)
        return ah @ wh + self.layer.bias

    def loss_and_grads(self, a: np.ndarray, target: np.ndarray,
                       wanted: set[str], quant_act: bool = True):
        p_w, p_a = self.w_params, self.a_params
        if quant_act:
            ah, cache_a = fake_quant_ste(a, float(p_a.scale[0]),
                                         float(p_a.zero_point[0]), p_a.bits,
                                         Granularity.TENSOR)
        else:
            ah = as_tensor(a)
        wh, cache_w = fake_quant_ste(self.layer.weight, p_w.scale,
                                     p_w.zero_point, p_w.bits,
                                     Granularity.WEIGHT_CHANNEL)
        y = ah @ wh + self.layer.bias
        resid = y - target
        loss = float(np.mean(resid * resid))
        grads: dict[str, np.ndarray] = {}
        g = (2.0 / resid.size) * resid
        if "s_w" in wanted:
            _, grads["s_w"] = fake_quant_ste_vjp(cache_w, ah.T @ g)
        if quant_act and "s_a" in wanted:
            _, gs = fake_quant_ste_vjp(cache_a, g @ wh.T)
            grads["s_a"] = np.atleast_1d(gs)
        return loss, grads

    def realized_layers(self) -> dict[str, LinearLayer]:
        return {"layer": self.layer}


class FeedForwardUnit:
    """pf_in -> GELU -> (shift, migration) -> pf_out, all quantized.

    The shift values are folded into the output bias with the full-precision
    weight (``bias_eff = v @ W2 + b2``), and migration scales outlier
    post-GELU columns down by m while scaling the matching rows of W2 up,
    both inside the differentiable forward so v and m can be finetuned.
    """

    def __init__(self, pf_in: LinearLayer, pf_out: LinearLayer,
                 w1_params: QuantParams, w2_params: QuantParams,
                 a_params: QuantParams, h_params: QuantParams,
                 shift_values: np.ndarray | None = None,
                 plan: MigrationPlan | None = None,
                 label: str = "pf",
                 dynamic_h: bool = False):
        self.pf_in = pf_in
        self.pf_out = pf_out          # original full-precision output layer
        self.w1_params = w1_params
        self.w2_params = w2_params    # calibrated on the migrated weight
        self.a_params = a_params
        self.h_params = h_params      # calibrated on the shifted+migrated H
        self.shift_values = None if shift_values is None else as_tensor(shift_values)
        self.plan = plan if plan is not None and len(plan) else None
        self.label = label
        # dynamic_h: the post-GELU input is quantized online per step at
        # evaluation time, so its scale is not a learnable parameter and the
        # reconstruction path leaves it unquantized.
        self.dynamic_h = dynamic_h

    # -- parameter plumbing -------------------------------------------------

    def get_params(self) -> dict[str, np.ndarray]:
        p = {"s_w1": self.w1_params.scale.copy(),
             "s_w2": self.w2_params.scale.copy(),
             "s_a": self.a_params.scale.copy(),
             "s_h": self.h_params.scale.copy()}
        if self.shift_values is not None:
            p["v"] = self.shift_values.copy()
        if self.plan is not None:
            p["m"] = self.plan.factors.copy()
        return p

    def set_params(self, p: dict[str, np.ndarray]) -> None:
        for name, params in (("s_w1", self.w1_params), ("s_w2", self.w2_params),
                             ("s_a", self.a_params), ("s_h", self.h_params)):
            if name in p:
                params.scale = np.atleast_1d(as_tensor(p[name]))
        if "v" in p and self.shift_values is not None:
            self.shift_values = as_tensor(p["v"])
        if "m" in p and self.plan is not None:
            self.plan.factors = as_tensor(p["m"])

    def param_names(self, include_transforms: bool = True) -> tuple[str, ...]:
        names = ["s_w1", "s_w2", "s_a"]
        if not self.dynamic_h:
            names.append("s_h")
        if include_transforms:
            if self.shift_values is not None:
                names.append("v")
            if self.plan is not None:
                names.append("m")
        return tuple(names)

    # -- forward passes -----------------------------------------------------

    def _transform_pieces(self):
        v = self.shift_values
        idx = self.plan.outlier_indices if self.plan is not None else None
        m = self.plan.factors if self.plan is not None else None
        return v, idx, m

    def migrated_weight(self) -> np.ndarray:
        w2 = self.pf_out.weight.copy()
        if self.plan is not None:
            w2[self.plan.outlier_indices, :] *= self.plan.factors[:, None]
        return w2

    def effective_bias(self) -> np.ndarray:
        """``v @ W2 + b`` folded in full precision (biases stay unquantized).

        Folding against the original weight keeps only the *shifted*
        activation magnitudes exposed to weight-quantization noise; the
        shifted forward then reproduces the unshifted one exactly up to the
        quantizers themselves.
        """
        if self.shift_values is None:
            return self.pf_out.bias.copy()
        return self.shift_values @ self.pf_out.weight + self.pf_out.bias

    def forward_fp(self, a: np.ndarray) -> np.ndarray:
        h = gelu(a @ self.pf_in.weight + self.pf_in.bias)
        return h @ self.pf_out.weight + self.pf_out.bias

    def forward_quant(self, a: np.ndarray, quant_act: bool = True) -> np.ndarray:
        v, idx, m = self._transform_pieces()
        ah = fake_quantize(a, self.a_params) if quant_act else as_tensor(a)
        w1h = fake_quantize(self.pf_in.weight, self.w1_params)
        h = gelu(ah @ w1h + self.pf_in.bias)
        if v is not None:
            h = h - v
        if idx is not None:
            h = h.copy()
            h[:, idx] = h[:, idx] / m
        w2h = fake_quantize(self.migrated_weight(), self.w2_params)
        hh = fake_quantize(h, self.h_params) if quant_act and not self.dynamic_h else h
        return hh @ w2h + self.effective_bias()

    # -- analytic STE gradients ----------------------------------------------

    def loss_and_grads(self, a: np.ndarray, target: np.ndarray,
                       wanted: set[str], quant_act: bool = True):
        v, idx, m = self._transform_pieces()
        w1, b1 = self.pf_in.weight, self.pf_in.bias
        w2, b2 = self.pf_out.weight, self.pf_out.bias

        if quant_act:
            ah, cache_a = fake_quant_ste(a, float(self.a_params.scale[0]),
                                         float(self.a_params.zero_point[0]),
                                         self.a_params.bits, Granularity.TENSOR)
        else:
            ah = as_tensor(a)
        w1h, cache_w1 = fake_quant_ste(w1, self.w1_params.scale,
                                       self.w1_params.zero_point,
                                       self.w1_params.bits,
                                       Granularity.WEIGHT_CHANNEL)
        z_pre = ah @ w1h + b1
        h, cdf = gelu_with_cdf(z_pre)
        ht = h - v if v is not None else h
        if idx is not None:
            htm = ht.copy()
            htm[:, idx] = ht[:, idx] / m
        else:
            htm = ht
        w2m = w2.copy()
        if idx is not None:
            w2m[idx, :] *= m[:, None]
        w2h, cache_w2 = fake_quant_ste(w2m, self.w2_params.scale,
                                       self.w2_params.zero_point,
                                       self.w2_params.bits,
                                       Granularity.WEIGHT_CHANNEL)
        quant_h = quant_act and not self.dynamic_h
        if quant_h:
            hh, cache_h = fake_quant_ste(htm, float(self.h_params.scale[0]),
                                         float(self.h_params.zero_point[0]),
                                         self.h_params.bits, Granularity.TENSOR)
        else:
            hh = htm
        bias_eff = (v @ w2 + b2) if v is not None else b2
        y = hh @ w2h + bias_eff
        resid = y - target
        loss = float(np.mean(resid * resid))

        grads: dict[str, np.ndarray] = {}
        g = (2.0 / resid.size) * resid

        g_hh = g @ w2h.T
        need_w2m = ("m" in wanted and idx is not None)
        if "s_w2" in wanted or need_w2m:
            g_w2m, gs_w2 = fake_quant_ste_vjp(cache_w2, hh.T @ g)
            if "s_w2" in wanted:
                grads["s_w2"] = gs_w2
        if quant_h:
            if "s_h" in wanted:
                _, gs_h = fake_quant_ste_vjp(cache_h, g_hh)
                grads["s_h"] = np.atleast_1d(gs_h)
            g_htm = g_hh * cache_h[0]
        else:
            g_htm = g_hh
        if idx is not None:
            g_ht = g_htm.copy()
            g_ht[:, idx] = g_htm[:, idx] / m
            if "m" in wanted:
                g_m = -np.einsum("ti,ti->i", g_htm[:, idx], ht[:, idx]) / (m * m)
                g_m = g_m + np.einsum("io,io->i", g_w2m[idx, :], w2[idx, :])
                grads["m"] = g_m
        else:
            g_ht = g_htm
        if "v" in wanted and v is not None:
            grads["v"] = w2 @ g.sum(axis=0) - g_ht.sum(axis=0)
        g_z = g_ht * gelu_grad(z_pre, cdf)
        if "s_w1" in wanted:
            _, grads["s_w1"] = fake_quant_ste_vjp(cache_w1, ah.T @ g_z)
        if quant_act and "s_a" in wanted:
            _, gs_a = fake_quant_ste_vjp(cache_a, g_z @ w1h.T)
            grads["s_a"] = np.atleast_1d(gs_a)
        return loss, grads

    def realized_layers(self) -> dict[str, LinearLayer]:
        return {"pf_in": self.pf_in,
                "pf_out": LinearLayer(self.migrated_weight(), self.effective_bias())}


def block_loss(unit, a: np.ndarray, target: np.ndarray | None = None) -> float:
    """Mean squared difference between quantized and full-precision outputs."""
    if target is None:
        target = unit.forward_fp(a)
    diff = unit.forward_quant(a) - target
    return float(np.mean(diff * diff))


def ste_gradient(unit, a: np.ndarray, target: np.ndarray,
                 wanted=None, quant_act: bool = True):
    """Loss and straight-through gradients for the requested parameters.

    ``wanted`` defaults to every optimizable parameter of the unit.
    """
    if wanted is None:
        wanted = set(unit.param_names())
    return unit.loss_and_grads(a, target, set(wanted), quant_act=quant_act)


# ---------------------------------------------------------------------------
# Optimizer and reconstruction drivers
# ---------------------------------------------------------------------------

class Adam:
    """Standard adaptive-moment gradient descent on a dict of arrays."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m.get(k, 0.0) + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v.get(k, 0.0) + (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class ReconConfig:
    """Reconstruction hyperparameters.

    ``batch_size`` counts calibration samples per iteration (0 = the full
    set).  ``optimize_migration_factors`` lets joint mode finetune shift
    values and migration factors along with the scales.
    """

    mode: str = "joint"
    loss: str = "mse"
    learning_rate: float = 1e-3
    iterations: int = 500
    batch_size: int = 64
    seed: int = 0
    optimize_migration_factors: bool = True

    def __post_init__(self):
        if self.mode not in ("joint", "separate"):
            raise ValueError(f"mode must be 'joint' or 'separate', got {self.mode!r}")
        if self.loss != "mse":
            raise ValueError(f"only the mse loss is implemented, got {self.loss!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0")


@dataclass
class ReconTrace:
    """Per-iteration losses plus the surrounding bookkeeping for one unit."""

    label: str
    losses: np.ndarray
    phase_split: int          # weight-phase length; 0 for joint mode
    initial_loss: float       # full-set loss before optimization
    final_loss: float         # full-set loss at the final parameters
    final_params: dict[str, np.ndarray]
    converged: bool

    @property
    def weight_phase_losses(self) -> np.ndarray:
        return self.losses[: self.phase_split]

    @property
    def activation_phase_losses(self) -> np.ndarray:
        return self.losses[self.phase_split:]


def _project(unit, params: dict[str, np.ndarray]) -> None:
    for k in params:
        if k.startswith("s_"):
            params[k] = np.maximum(params[k], SCALE_EPS)
        elif k == "m":
            params[k] = np.maximum(params[k], 1.0)


def optimize_unit(unit, inputs: np.ndarray, targets: np.ndarray,
                  cfg: ReconConfig, phases, rng: np.random.Generator,
                  label: str | None = None) -> ReconTrace:
    """Run the per-unit optimization loop.

    inputs/targets are sample-major 3-D arrays (n_samples, tokens, width);
    minibatches select whole samples.  ``phases`` is a list of
    (param_names, quant_act, n_iterations) triples executed in order.
    """
    label = label or unit.label
    n_samples = inputs.shape[0]
    flat_in = inputs.reshape(-1, inputs.shape[-1])
    flat_tgt = targets.reshape(-1, targets.shape[-1])

    initial_loss = block_loss(unit, flat_in, flat_tgt)
    losses: list[float] = []
    phase_split = 0
    for phase_idx, (names, quant_act, n_iter) in enumerate(phases):
        params = {k: np.atleast_1d(v) for k, v in unit.get_params().items()
                  if k in names}
        opt = Adam(cfg.learning_rate)
        for it in range(n_iter):
            if cfg.batch_size and cfg.batch_size < n_samples:
                sel = rng.choice(n_samples, size=cfg.batch_size, replace=False)
                a = inputs[sel].reshape(-1, inputs.shape[-1])
                t = targets[sel].reshape(-1, targets.shape[-1])
            else:
                a, t = flat_in, flat_tgt
            loss, grads = unit.loss_and_grads(a, t, set(names), quant_act=quant_act)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite reconstruction loss in unit {label!r} "
                    f"at iteration {len(losses)}"
                )
            losses.append(loss)
            opt.step(params, grads)
            _project(unit, params)
            unit.set_params(params)
        if phase_idx == 0 and len(phases) > 1:
            phase_split = n_iter
    final_loss = block_loss(unit, flat_in, flat_tgt)
    return ReconTrace(label=label, losses=np.asarray(losses),
                      phase_split=phase_split, initial_loss=initial_loss,
                      final_loss=final_loss, final_params=unit.get_params(),
                      converged=final_loss <= initial_loss)


def _model_traces(model, calib, cfg: ReconConfig, phases_for) -> list[ReconTrace]:
    rng = np.random.default_rng(cfg.seed)
    traces = []
    for i in range(model.unit_count()):
        unit = model.unit(i)
        inputs, targets = model.unit_io(i, calib)
        traces.append(optimize_unit(unit, inputs, targets, cfg,
                                    phases_for(unit), rng,
                                    label=model.unit_label(i)))
    return traces


def reconstruct_joint(model, calib, cfg: ReconConfig):
    """Optimize every unit's parameters simultaneously, unit by unit."""
    if cfg.mode != "joint":
        raise ValueError(f"reconstruct_joint needs mode='joint', got {cfg.mode!r}")

    def phases(unit):
        names = unit.param_names(include_transforms=cfg.optimize_migration_factors)
        return [(names, True, cfg.iterations)]

    return model, _model_traces(model, calib, cfg, phases)


def reconstruct_separate(model, calib, cfg: ReconConfig):
    """Baseline: weight scales first (activations unquantized), then
    activation scales with the weights frozen.  The iteration budget is
    split evenly between the phases."""
    if cfg.mode != "separate":
        raise ValueError(f"reconstruct_separate needs mode='separate', got {cfg.mode!r}")

    def phases(unit):
        names = unit.param_names(include_transforms=False)
        w_names = tuple(n for n in names if n in WEIGHT_PARAM_NAMES)
        a_names = tuple(n for n in names if n in ACT_PARAM_NAMES)
        first = cfg.iterations // 2
        return [(w_names, False, first), (a_names, True, cfg.iterations - first)]

    return model, _model_traces(model, calib, cfg, phases)


def write_trace_csv(traces: list[ReconTrace], path) -> None:
    """Loss traces as CSV with columns iteration, block_id, loss."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "block_id", "loss"])
        for trace in traces:
            for i, loss in enumerate(trace.losses):
                writer.writerow([i, trace.label, f"{loss:.17g}"])


class SingleUnitModel:
    """Trivial one-unit model: fixed input/target arrays, sample-major."""

    def __init__(self, unit, inputs: np.ndarray, targets: np.ndarray):
        self._unit = unit
        self._inputs = as_tensor(inputs)
        self._targets = as_tensor(targets)

    def unit_count(self) -> int:
        return 1

    def unit(self, i: int):
        return self._unit

    def unit_label(self, i: int) -> str:
        return self._unit.label

    def unit_io(self, i: int, calib=None):
        return self._inputs, self._targets
