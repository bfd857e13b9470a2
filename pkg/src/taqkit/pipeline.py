"""End-to-end quantization of the toy model over a calibration set.

Assembly runs block by block, first to last: calibrate quantizers on the
activations the quantized network actually produces, apply the configured
shifting/migration transforms to the post-GELU feedforward input, then
reconstruct scales (plus shift values and migration factors in joint mode)
against the full-precision outputs.  Later blocks therefore see the
quantized outputs of earlier blocks while every target stays full precision.

Shift modes for the feedforward's post-GELU input:

  none      no shifting
  static    one mid-range computed over the whole calibration corpus
  momentum  EMA of per-sample mid-ranges in calibration order (beta = 0.95)
  dynamic   nothing precomputed; the shift and the quantizer parameters are
            recomputed per timestep online (the baseline the static method
            is compared against; every recomputation is counted).  Dynamic
            mode disables migration and the post-GELU scale is not a
            learnable parameter.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from math import ceil

import numpy as np

from .linalg import LinearLayer, gelu, linear_forward
from .metrics import OccupancyReport, bin_occupancy
from .quantizer import (Granularity, QuantParams, QuantizedTensor,
                        calibrate_params, dequantize, fake_quantize, quantize)
from .reconstruction import (FeedForwardUnit, LinearUnit, ReconConfig,
                             ReconTrace, optimize_unit)
from .toydit import CalibrationSet, ToyDiTBlock, block_forward, random_block
from .transforms import (MigrationPlan, ShiftState, channel_mid_range,
                         init_migration_factors, momentum_update,
                         select_outlier_channels)

SHIFT_MODES = ("none", "static", "momentum", "dynamic")
MIGRATION_MODES = ("none", "migrate", "split")
LAYER_NAMES = ("wq", "wk", "wv", "out_proj", "pf_in", "pf_out")


@dataclass
class PipelineConfig:
    bits_w: int = 4
    bits_a: int = 8
    mode: str = "joint"
    shift: str = "momentum"
    migration: str = "migrate"
    topk: int | None = None
    iterations: int = 500
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    blocks: int = 2
    beta: float = 0.95
    reconstruct: bool = True
    fold: str = "fp"   # "fp": bias folded with the original weight (the
                       # deployed convention); "quantized": folded with the
                       # dequantized weight, used by the comparison harness
                       # to keep shifting orthogonal to weight error

    def __post_init__(self):
        if self.mode not in ("joint", "separate"):
            raise ValueError(f"mode must be joint or separate, got {self.mode!r}")
        if self.shift not in SHIFT_MODES:
            raise ValueError(f"shift must be one of {SHIFT_MODES}, got {self.shift!r}")
        if self.migration not in MIGRATION_MODES:
            raise ValueError(
                f"migration must be one of {MIGRATION_MODES}, got {self.migration!r}")
        if self.migration == "split" and self.mode == "joint":
            raise ValueError(
                "incompatible options: joint reconstruction finetunes migration "
                "factors to non-integer values, which channel splitting cannot "
                "represent; use mode='separate' with migration='split'")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.fold not in ("fp", "quantized"):
            raise ValueError(f"fold must be fp or quantized, got {self.fold!r}")

    def default_topk(self, channels: int) -> int:
        if self.topk is not None:
            return self.topk
        return max(1, ceil(0.01 * channels))


@dataclass
class QuantizedLayerState:
    """Everything needed to replay one quantized linear layer."""

    name: str
    weight_codes: np.ndarray
    w_params: QuantParams
    bias: np.ndarray
    a_params: QuantParams | None          # None: input quantized dynamically
    shift_values: np.ndarray | None = None
    plan: MigrationPlan | None = None

    def __post_init__(self):
        self._weight_cache: np.ndarray | None = None

    def weight(self) -> np.ndarray:
        if self._weight_cache is None:
            self._weight_cache = dequantize(
                QuantizedTensor(self.weight_codes, self.w_params))
        return self._weight_cache

    def quant_input(self, a: np.ndarray) -> np.ndarray:
        return fake_quantize(a, self.a_params) if self.a_params is not None else a


def _expand_columns(h: np.ndarray, plan: MigrationPlan, n_channels: int) -> np.ndarray:
    factors = {int(i): int(m) for i, m in zip(plan.outlier_indices, plan.factors)}
    cols = []
    for c in range(n_channels):
        m = factors.get(c, 1)
        cols.extend([h[:, c] / m] * m)
    return np.stack(cols, axis=1)


def _expand_rows(w: np.ndarray, plan: MigrationPlan, n_channels: int) -> np.ndarray:
    factors = {int(i): int(m) for i, m in zip(plan.outlier_indices, plan.factors)}
    rows = []
    for c in range(n_channels):
        rows.extend([w[c, :]] * factors.get(c, 1))
    return np.stack(rows, axis=0)


def _collapse_columns(g_exp: np.ndarray, plan: MigrationPlan,
                      n_channels: int) -> np.ndarray:
    factors = {int(i): int(m) for i, m in zip(plan.outlier_indices, plan.factors)}
    out = np.empty((g_exp.shape[0], n_channels))
    pos = 0
    for c in range(n_channels):
        m = factors.get(c, 1)
        out[:, c] = g_exp[:, pos:pos + m].sum(axis=1) / m
        pos += m
    return out


@dataclass
class QuantizedModel:
    """Quantized layer states plus the seed-rebuildable FP reference."""

    d: int
    tokens: int
    bits_w: int
    bits_a: int
    seed: int
    shift_mode: str
    migration_mode: str
    layers: list[dict[str, QuantizedLayerState]]
    fp_blocks: list[ToyDiTBlock] = field(default_factory=list)
    shift_recomputations: int = 0
    fold_mode: str = "fp"

    def __post_init__(self):
        if not self.fp_blocks:
            self.fp_blocks = [random_block(self.d, self.seed + 1000 + i)
                              for i in range(len(self.layers))]

    def _attention_quant(self, block: ToyDiTBlock,
                         states: dict[str, QuantizedLayerState],
                         x: np.ndarray) -> np.ndarray:
        xn = x * block.ln1_scale + block.ln1_offset
        outs = {}
        for name in ("wq", "wk", "wv"):
            st = states[name]
            outs[name] = st.quant_input(xn) @ st.weight() + st.bias
        logits = outs["wq"] @ outs["wk"].T / np.sqrt(block.d)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        mix = w @ outs["wv"]
        st = states["out_proj"]
        return st.quant_input(mix) @ st.weight() + st.bias

    def _post_gelu_raw(self, block: ToyDiTBlock,
                       states: dict[str, QuantizedLayerState],
                       a2: np.ndarray) -> np.ndarray:
        st_in = states["pf_in"]
        return gelu(st_in.quant_input(a2) @ st_in.weight() + st_in.bias)

    def _feedforward_quant(self, block: ToyDiTBlock,
                           states: dict[str, QuantizedLayerState],
                           a2: np.ndarray) -> np.ndarray:
        st_out = states["pf_out"]
        h = self._post_gelu_raw(block, states, a2)
        if self.shift_mode == "dynamic":
            v = channel_mid_range(h)
            self.shift_recomputations += 1
            ht = h - v
            p = calibrate_params(ht, self.bits_a, Granularity.TENSOR)
            w_fold = st_out.weight() if self.fold_mode == "quantized" else block.pf_out.weight
            bias_eff = v @ w_fold + block.pf_out.bias
            return fake_quantize(ht, p) @ st_out.weight() + bias_eff
        if st_out.shift_values is not None:
            h = h - st_out.shift_values
        if st_out.plan is not None and len(st_out.plan):
            if self.migration_mode == "split":
                h = _expand_columns(h, st_out.plan, block.hidden)
            else:
                h = h.copy()
                h[:, st_out.plan.outlier_indices] /= st_out.plan.factors
        return st_out.quant_input(h) @ st_out.weight() + st_out.bias

    def block_forward_quant(self, i: int, x: np.ndarray) -> np.ndarray:
        block, states = self.fp_blocks[i], self.layers[i]
        h = x + self._attention_quant(block, states, x)
        a2 = h * block.ln2_scale + block.ln2_offset
        return h + self._feedforward_quant(block, states, a2)

    def forward_quant(self, x: np.ndarray) -> np.ndarray:
        for i in range(len(self.layers)):
            x = self.block_forward_quant(i, x)
        return x

    def forward_fp(self, x: np.ndarray) -> np.ndarray:
        for block in self.fp_blocks:
            x = block_forward(block, x)
        return x


class SplitFeedForwardUnit(FeedForwardUnit):
    """Feedforward unit whose outlier channels are split, not migrated.

    The expansion is a fixed structural transform (integer replication), so
    only the four scale groups are optimizable.
    """

    def __init__(self, pf_in, pf_out, w1_params, w2_params, a_params, h_params,
                 shift_values, split_plan: MigrationPlan, label="pf"):
        super().__init__(pf_in, pf_out, w1_params, w2_params, a_params,
                         h_params, shift_values=shift_values, plan=None,
                         label=label)
        self.split_plan = split_plan
        self._expanded_weight = _expand_rows(pf_out.weight, split_plan,
                                             pf_in.out_channels)

    def param_names(self, include_transforms: bool = True) -> tuple[str, ...]:
        return ("s_w1", "s_w2", "s_a", "s_h")

    def migrated_weight(self) -> np.ndarray:
        return self._expanded_weight.copy()

    def forward_quant(self, a: np.ndarray, quant_act: bool = True) -> np.ndarray:
        ah = fake_quantize(a, self.a_params) if quant_act else np.asarray(a, float)
        w1h = fake_quantize(self.pf_in.weight, self.w1_params)
        h = gelu(ah @ w1h + self.pf_in.bias)
        if self.shift_values is not None:
            h = h - self.shift_values
        h = _expand_columns(h, self.split_plan, self.pf_in.out_channels)
        w2h = fake_quantize(self._expanded_weight, self.w2_params)
        hh = fake_quantize(h, self.h_params) if quant_act else h
        return hh @ w2h + self.effective_bias()

    def loss_and_grads(self, a, target, wanted, quant_act=True):
        from .linalg import gelu_grad, gelu_with_cdf
        from .reconstruction import fake_quant_ste, fake_quant_ste_vjp

        if quant_act:
            ah, cache_a = fake_quant_ste(a, float(self.a_params.scale[0]),
                                         float(self.a_params.zero_point[0]),
                                         self.a_params.bits, Granularity.TENSOR)
        else:
            ah = np.asarray(a, float)
        w1h, cache_w1 = fake_quant_ste(self.pf_in.weight, self.w1_params.scale,
                                       self.w1_params.zero_point,
                                       self.w1_params.bits,
                                       Granularity.WEIGHT_CHANNEL)
        z_pre = ah @ w1h + self.pf_in.bias
        h, cdf = gelu_with_cdf(z_pre)
        ht = h - self.shift_values if self.shift_values is not None else h
        htm = _expand_columns(ht, self.split_plan, self.pf_in.out_channels)
        w2h, cache_w2 = fake_quant_ste(self._expanded_weight,
                                       self.w2_params.scale,
                                       self.w2_params.zero_point,
                                       self.w2_params.bits,
                                       Granularity.WEIGHT_CHANNEL)
        if quant_act:
            hh, cache_h = fake_quant_ste(htm, float(self.h_params.scale[0]),
                                         float(self.h_params.zero_point[0]),
                                         self.h_params.bits, Granularity.TENSOR)
        else:
            hh = htm
        y = hh @ w2h + self.effective_bias()
        resid = y - target
        loss = float(np.mean(resid * resid))
        grads: dict[str, np.ndarray] = {}
        g = (2.0 / resid.size) * resid
        g_hh = g @ w2h.T
        if "s_w2" in wanted:
            _, grads["s_w2"] = fake_quant_ste_vjp(cache_w2, hh.T @ g)
        if quant_act:
            if "s_h" in wanted:
                _, gs = fake_quant_ste_vjp(cache_h, g_hh)
                grads["s_h"] = np.atleast_1d(gs)
            g_htm = g_hh * cache_h[0]
        else:
            g_htm = g_hh
        g_ht = _collapse_columns(g_htm, self.split_plan, self.pf_in.out_channels)
        g_z = g_ht * gelu_grad(z_pre, cdf)
        if "s_w1" in wanted:
            _, grads["s_w1"] = fake_quant_ste_vjp(cache_w1, ah.T @ g_z)
        if quant_act and "s_a" in wanted:
            _, gs = fake_quant_ste_vjp(cache_a, g_z @ w1h.T)
            grads["s_a"] = np.atleast_1d(gs)
        return loss, grads

    def realized_layers(self):
        return {"pf_in": self.pf_in,
                "pf_out": LinearLayer(self._expanded_weight.copy(),
                                      self.effective_bias())}


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _flat(x3: np.ndarray) -> np.ndarray:
    return x3.reshape(-1, x3.shape[-1])


def _unflat(flat: np.ndarray, like: np.ndarray) -> np.ndarray:
    return flat.reshape(like.shape[0], like.shape[1], -1)


def _attention_mix(q3: np.ndarray, k3: np.ndarray, v3: np.ndarray, d: int
                   ) -> np.ndarray:
    mixes = []
    for q, k, v in zip(q3, k3, v3):
        logits = q @ k.T / np.sqrt(d)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        mixes.append(w @ v)
    return np.stack(mixes)


def _recon_phases(unit, cfg: PipelineConfig, rc: ReconConfig):
    if cfg.mode == "joint":
        names = unit.param_names(include_transforms=rc.optimize_migration_factors)
        return [(names, True, rc.iterations)]
    names = unit.param_names(include_transforms=False)
    w_names = tuple(n for n in names if n.startswith("s_w"))
    a_names = tuple(n for n in names if n in ("s_a", "s_h"))
    first = rc.iterations // 2
    return [(w_names, False, first), (a_names, True, rc.iterations - first)]


def quantize_model(calib: CalibrationSet, cfg: PipelineConfig
                   ) -> tuple[QuantizedModel, list[ReconTrace]]:
    """Calibrate, transform and reconstruct the full toy model."""
    d = calib.d
    blocks = [random_block(d, cfg.seed + 1000 + i) for i in range(cfg.blocks)]
    rng = np.random.default_rng(cfg.seed)
    rc = ReconConfig(mode=cfg.mode, learning_rate=cfg.learning_rate,
                     iterations=cfg.iterations, batch_size=cfg.batch_size,
                     seed=cfg.seed,
                     optimize_migration_factors=(cfg.mode == "joint"))
    traces: list[ReconTrace] = []

    x_fp = np.stack([x for _, x in calib.samples])
    x_q = x_fp.copy()
    step_ids = calib.step_ids()

    model = QuantizedModel(d=d, tokens=calib.tokens, bits_w=cfg.bits_w,
                           bits_a=cfg.bits_a, seed=cfg.seed,
                           shift_mode=cfg.shift, migration_mode=cfg.migration,
                           layers=[], fp_blocks=blocks, fold_mode=cfg.fold)

    def run_unit(unit, inputs3, targets3):
        if cfg.reconstruct:
            traces.append(optimize_unit(unit, inputs3, targets3, rc,
                                        _recon_phases(unit, cfg, rc), rng,
                                        label=unit.label))

    for bi, block in enumerate(blocks):
        states: dict[str, QuantizedLayerState] = {}
        label = f"block{bi}"

        # full-precision reference through this block
        xn_fp = x_fp * block.ln1_scale + block.ln1_offset
        fp_heads = {
            name: _unflat(linear_forward(layer, _flat(xn_fp)), xn_fp)
            for name, layer in (("wq", block.wq), ("wk", block.wk),
                                ("wv", block.wv))
        }
        mix_fp = _attention_mix(fp_heads["wq"], fp_heads["wk"],
                                fp_heads["wv"], d)
        o_fp = _unflat(linear_forward(block.out_proj, _flat(mix_fp)), mix_fp)
        h_fp = x_fp + o_fp
        a2_fp = h_fp * block.ln2_scale + block.ln2_offset
        pf_fp = _unflat(
            linear_forward(block.pf_out,
                           gelu(linear_forward(block.pf_in, _flat(a2_fp)))),
            a2_fp)

        # attention projections on the quantized path
        xn_q = x_q * block.ln1_scale + block.ln1_offset
        head_out_q = {}
        for name, layer in (("wq", block.wq), ("wk", block.wk), ("wv", block.wv)):
            unit = LinearUnit.calibrated(layer.copy(), _flat(xn_q), cfg.bits_w,
                                         cfg.bits_a, label=f"{label}/{name}")
            run_unit(unit, xn_q, fp_heads[name])
            head_out_q[name] = _unflat(unit.forward_quant(_flat(xn_q)), xn_q)
            states[name] = _linear_state(name, unit)

        mix_q = _attention_mix(head_out_q["wq"], head_out_q["wk"],
                               head_out_q["wv"], d)
        unit_o = LinearUnit.calibrated(block.out_proj.copy(), _flat(mix_q),
                                       cfg.bits_w, cfg.bits_a,
                                       label=f"{label}/out_proj")
        run_unit(unit_o, mix_q, o_fp)
        o_q = _unflat(unit_o.forward_quant(_flat(mix_q)), mix_q)
        states["out_proj"] = _linear_state("out_proj", unit_o)

        h_q = x_q + o_q
        a2_q = h_q * block.ln2_scale + block.ln2_offset

        # feedforward with shifting and migration
        ff_unit = _build_ff_unit(block, a2_q, cfg, f"{label}/pf", step_ids)
        run_unit(ff_unit, a2_q, pf_fp)
        states["pf_in"], states["pf_out"] = _ff_states(ff_unit, cfg)
        model.layers.append(states)

        if cfg.shift == "dynamic":
            pf_q = _dynamic_pf_outputs(model, bi, a2_q, step_ids)
        else:
            pf_q = _unflat(ff_unit.forward_quant(_flat(a2_q)), a2_q)

        x_q = h_q + pf_q
        x_fp = h_fp + pf_fp
    model.shift_recomputations = 0
    return model, traces


def _linear_state(name: str, unit: LinearUnit) -> QuantizedLayerState:
    return QuantizedLayerState(
        name=name,
        weight_codes=quantize(unit.layer.weight, unit.w_params).codes,
        w_params=unit.w_params.copy(),
        bias=unit.layer.bias.copy(),
        a_params=unit.a_params.copy())


def _build_ff_unit(block: ToyDiTBlock, a2_q: np.ndarray, cfg: PipelineConfig,
                   label: str, step_ids: np.ndarray):
    flat_a = _flat(a2_q)
    w1_params = calibrate_params(block.pf_in.weight, cfg.bits_w,
                                 Granularity.WEIGHT_CHANNEL)
    a_params = calibrate_params(flat_a, cfg.bits_a, Granularity.TENSOR)

    # post-GELU on the quantized path at calibration scales
    w1h = fake_quantize(block.pf_in.weight, w1_params)
    h_samples = [gelu(fake_quantize(a, a_params) @ w1h + block.pf_in.bias)
                 for a in a2_q]
    h_flat = np.vstack(h_samples)

    shift_values = None
    if cfg.shift == "static":
        shift_values = channel_mid_range(h_flat)
    elif cfg.shift == "momentum":
        # one EMA update per calibration sample, in shuffled stream order
        state = ShiftState.zeros(block.hidden, beta=cfg.beta)
        for h in h_samples:
            state = momentum_update(state, channel_mid_range(h))
        shift_values = state.values

    ht_flat = h_flat - shift_values if shift_values is not None else h_flat

    plan = None
    w2_eff = block.pf_out.weight
    htm_flat = ht_flat
    if cfg.migration != "none" and cfg.shift != "dynamic":
        k = cfg.default_topk(block.hidden)
        idx = select_outlier_channels(ht_flat, k)
        plan = init_migration_factors(ht_flat, idx)
        if cfg.migration == "migrate":
            w2_eff = block.pf_out.weight.copy()
            w2_eff[plan.outlier_indices, :] *= plan.factors[:, None]
            htm_flat = ht_flat.copy()
            htm_flat[:, plan.outlier_indices] /= plan.factors
        else:
            htm_flat = _expand_columns(ht_flat, plan, block.hidden)
            w2_eff = _expand_rows(block.pf_out.weight, plan, block.hidden)

    w2_params = calibrate_params(w2_eff, cfg.bits_w, Granularity.WEIGHT_CHANNEL)
    h_params = calibrate_params(htm_flat, cfg.bits_a, Granularity.TENSOR)

    if cfg.migration == "split" and plan is not None:
        return SplitFeedForwardUnit(block.pf_in.copy(), block.pf_out.copy(),
                                    w1_params, w2_params, a_params, h_params,
                                    shift_values, plan, label=label)
    return FeedForwardUnit(block.pf_in.copy(), block.pf_out.copy(),
                           w1_params, w2_params, a_params, h_params,
                           shift_values=shift_values,
                           plan=plan if cfg.migration == "migrate" else None,
                           label=label,
                           dynamic_h=(cfg.shift == "dynamic"))


def _fold_bias(unit, fold: str) -> np.ndarray:
    if unit.shift_values is None or fold == "fp":
        return unit.effective_bias()
    # quantized fold: reproduce v @ W2 against the dequantized weight
    w2q = fake_quantize(unit.migrated_weight(), unit.w2_params)
    plan = getattr(unit, "split_plan", None)
    if plan is not None:
        factors = {int(i): int(m) for i, m in zip(plan.outlier_indices,
                                                  plan.factors)}
        vt = []
        for c in range(unit.pf_in.out_channels):
            m = factors.get(c, 1)
            vt.extend([unit.shift_values[c] / m] * m)
        vt = np.asarray(vt)
    else:
        vt = unit.shift_values.copy()
        if unit.plan is not None:
            vt[unit.plan.outlier_indices] /= unit.plan.factors
    return vt @ w2q + unit.pf_out.bias


def _ff_states(unit, cfg: PipelineConfig
               ) -> tuple[QuantizedLayerState, QuantizedLayerState]:
    in_state = QuantizedLayerState(
        name="pf_in",
        weight_codes=quantize(unit.pf_in.weight, unit.w1_params).codes,
        w_params=unit.w1_params.copy(),
        bias=unit.pf_in.bias.copy(),
        a_params=unit.a_params.copy())
    plan = getattr(unit, "split_plan", None)
    if plan is None:
        plan = unit.plan
    out_state = QuantizedLayerState(
        name="pf_out",
        weight_codes=quantize(unit.migrated_weight(), unit.w2_params).codes,
        w_params=unit.w2_params.copy(),
        bias=_fold_bias(unit, cfg.fold),
        a_params=None if cfg.shift == "dynamic" else unit.h_params.copy(),
        shift_values=None if unit.shift_values is None else unit.shift_values.copy(),
        plan=None if plan is None else MigrationPlan(plan.outlier_indices.copy(),
                                                     plan.factors.copy()))
    return in_state, out_state


def _dynamic_pf_outputs(model: QuantizedModel, bi: int, a2_q: np.ndarray,
                        step_ids: np.ndarray) -> np.ndarray:
    """Per-step dynamic feedforward outputs during assembly propagation."""
    block, states = model.fp_blocks[bi], model.layers[bi]
    st_out = states["pf_out"]
    out = np.empty_like(a2_q)
    for step in np.unique(step_ids):
        sel = np.where(step_ids == step)[0]
        a2 = _flat(a2_q[sel])
        h = model._post_gelu_raw(block, states, a2)
        v = channel_mid_range(h)
        ht = h - v
        p = calibrate_params(ht, model.bits_a, Granularity.TENSOR)
        w_fold = st_out.weight() if model.fold_mode == "quantized" else block.pf_out.weight
        bias_eff = v @ w_fold + block.pf_out.bias
        y = fake_quantize(ht, p) @ st_out.weight() + bias_eff
        out[sel] = y.reshape(len(sel), a2_q.shape[1], -1)
    return out


# ---------------------------------------------------------------------------
# evaluation and the static/dynamic comparison harness
# ---------------------------------------------------------------------------

def evaluate_model(model: QuantizedModel, calib: CalibrationSet) -> dict:
    """Block-output MSE of the quantized model against full precision.

    Dynamic-shift models are evaluated with per-timestep recomputation.
    """
    model.shift_recomputations = 0
    start = time.perf_counter()
    if model.shift_mode == "dynamic":
        per_block = _dynamic_block_mse(model, calib)
    else:
        x_fp = np.stack([x for _, x in calib.samples])
        x_q = x_fp.copy()
        per_block = []
        for bi in range(len(model.layers)):
            y_fp = np.stack([block_forward(model.fp_blocks[bi], x) for x in x_fp])
            y_q = np.stack([model.block_forward_quant(bi, x) for x in x_q])
            per_block.append(float(np.mean((y_q - y_fp) ** 2)))
            x_fp, x_q = y_fp, y_q
    runtime = time.perf_counter() - start
    return {"block_mse": per_block,
            "final_mse": per_block[-1],
            "runtime_s": runtime,
            "shift_recomputations": model.shift_recomputations}


def _dynamic_block_mse(model: QuantizedModel, calib: CalibrationSet) -> list[float]:
    step_ids = calib.step_ids()
    x_fp_all = np.stack([x for _, x in calib.samples])
    n_blocks = len(model.layers)
    err = [0.0] * n_blocks
    total = x_fp_all.shape[0] * model.tokens * model.d
    for step in np.unique(step_ids):
        sel = np.where(step_ids == step)[0]
        x_fp = x_fp_all[sel]
        x_q = x_fp.copy()
        for bi in range(n_blocks):
            block, states = model.fp_blocks[bi], model.layers[bi]
            y_fp = np.stack([block_forward(block, x) for x in x_fp])
            h_attn = np.stack([
                x + model._attention_quant(block, states, x) for x in x_q
            ])
            a2 = _flat(h_attn * block.ln2_scale + block.ln2_offset)
            h = model._post_gelu_raw(block, states, a2)
            v = channel_mid_range(h)
            model.shift_recomputations += 1
            ht = h - v
            p = calibrate_params(ht, model.bits_a, Granularity.TENSOR)
            w_fold = (states["pf_out"].weight() if model.fold_mode == "quantized"
                      else block.pf_out.weight)
            bias_eff = v @ w_fold + block.pf_out.bias
            pf = fake_quantize(ht, p) @ states["pf_out"].weight() + bias_eff
            y_q = h_attn + pf.reshape(h_attn.shape)
            err[bi] += float(np.sum((y_q - y_fp) ** 2))
            x_fp, x_q = y_fp, y_q
    return [e / total for e in err]


def post_gelu_occupancy(model: QuantizedModel, calib: CalibrationSet,
                        block_index: int = 0) -> dict[str, OccupancyReport]:
    """Occupancy of the feedforward's post-GELU input, raw vs transformed."""
    block = model.fp_blocks[block_index]
    states = model.layers[block_index]
    x = np.stack([s for _, s in calib.samples])
    for bi in range(block_index):
        x = np.stack([model.block_forward_quant(bi, s) for s in x])
    h_rows = []
    for s in x:
        hh = s + model._attention_quant(block, states, s)
        a2 = hh * block.ln2_scale + block.ln2_offset
        h_rows.append(model._post_gelu_raw(block, states, a2))
    h = np.vstack(h_rows)
    st_out = states["pf_out"]
    raw_params = calibrate_params(h, model.bits_a, Granularity.TENSOR)
    reports = {"raw": bin_occupancy(h, raw_params)}
    ht = h - st_out.shift_values if st_out.shift_values is not None else h
    if st_out.plan is not None and len(st_out.plan):
        if model.migration_mode == "split":
            ht = _expand_columns(ht, st_out.plan, block.hidden)
        else:
            ht = ht.copy()
            ht[:, st_out.plan.outlier_indices] /= st_out.plan.factors
    params = st_out.a_params
    if params is None:
        params = calibrate_params(ht, model.bits_a, Granularity.TENSOR)
    reports["transformed"] = bin_occupancy(ht, params)
    return reports


def compare_static_dynamic(calib: CalibrationSet, cfg: PipelineConfig) -> dict:
    """Momentum-static shifting vs per-step dynamic shifting without
    reconstruction: identical quantized weights and input quantizers, only
    the post-GELU handling differs."""
    results = {}
    for label, shift in (("static", "momentum"), ("dynamic", "dynamic")):
        pcfg = PipelineConfig(
            bits_w=cfg.bits_w, bits_a=cfg.bits_a, mode="separate", shift=shift,
            migration="none", topk=cfg.topk, seed=cfg.seed, blocks=cfg.blocks,
            beta=cfg.beta, reconstruct=False, fold="quantized")
        t0 = time.perf_counter()
        model, _ = quantize_model(calib, pcfg)
        ev = evaluate_model(model, calib)
        ev["build_s"] = time.perf_counter() - t0
        results[label] = ev
    results["mse_ratio"] = (results["static"]["final_mse"]
                            / results["dynamic"]["final_mse"])
    return results
