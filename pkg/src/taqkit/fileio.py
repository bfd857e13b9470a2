"""Binary file formats: "TAQC" calibration sets and "TAQM" quantized models.

Both formats are little-endian with fixed-width fields and a trailing CRC32
over every preceding byte, so a round trip is bitwise stable and any
single-byte corruption is detected before parsing.  Exact layouts are
documented in the README.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .quantizer import Granularity, QuantParams
from .toydit import CalibrationSet
from .transforms import MigrationPlan

CALIB_MAGIC = b"TAQC"
MODEL_MAGIC = b"TAQM"
CALIB_VERSION = 1
MODEL_VERSION = 1

_GRAN_CODES = {Granularity.TENSOR: 0, Granularity.TOKEN: 1,
               Granularity.WEIGHT_CHANNEL: 2, Granularity.INPUT_CHANNEL: 3}
_GRAN_FROM_CODE = {v: k for k, v in _GRAN_CODES.items()}
_SHIFT_CODES = {"none": 0, "static": 1, "momentum": 2, "dynamic": 3}
_SHIFT_FROM_CODE = {v: k for k, v in _SHIFT_CODES.items()}
_MIG_CODES = {"none": 0, "migrate": 1, "split": 2}
_MIG_FROM_CODE = {v: k for k, v in _MIG_CODES.items()}


class IntegrityError(Exception):
    """CRC mismatch or structural corruption."""


class VersionError(Exception):
    """File carries an unsupported format version."""


def _check_crc(blob: bytes, magic: bytes) -> bytes:
    if len(blob) < len(magic) + 8 or blob[:4] != magic:
        raise IntegrityError(f"not a {magic.decode()} file")
    body, tail = blob[:-4], blob[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", tail)[0]:
        raise IntegrityError("CRC32 mismatch: file is corrupted")
    return body


class _Reader:
    def __init__(self, body: bytes):
        self.body = body
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.body):
            raise IntegrityError("truncated file")
        vals = struct.unpack_from(fmt, self.body, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def array(self, dtype, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.body):
            raise IntegrityError("truncated file")
        arr = np.frombuffer(self.body, dtype=dtype, count=count, offset=self.pos)
        self.pos += size
        return arr.copy()


# ---------------------------------------------------------------------------
# calibration files
# ---------------------------------------------------------------------------

def save_calibration(calib: CalibrationSet, path) -> None:
    parts = [CALIB_MAGIC,
             struct.pack("<IIIII", CALIB_VERSION, calib.timesteps,
                         calib.per_step, calib.d, calib.tokens),
             struct.pack("<Q", calib.seed)]
    for t, x in calib.samples:
        parts.append(struct.pack("<d", float(t)))
        parts.append(np.ascontiguousarray(x, dtype="<f8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_calibration(path) -> CalibrationSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(_check_crc(blob, CALIB_MAGIC))
    r.take("<4s")
    version, timesteps, per_step, d, tokens = r.take("<IIIII")
    if version != CALIB_VERSION:
        raise VersionError(f"calibration format version {version} not supported")
    seed = r.take("<Q")
    samples = []
    for _ in range(timesteps * per_step):
        t = int(r.take("<d"))
        x = r.array("<f8", tokens * d).reshape(tokens, d)
        samples.append((t, x))
    if r.pos != len(r.body):
        raise IntegrityError("trailing bytes after calibration payload")
    return CalibrationSet(samples, timesteps, per_step, d, tokens, int(seed))


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def _pack_params(p: QuantParams | None) -> bytes:
    if p is None:
        return struct.pack("<B", 0)
    parts = [struct.pack("<BIB", 1, p.group_count, _GRAN_CODES[p.granularity]),
             struct.pack("<I", p.bits),
             np.ascontiguousarray(p.scale, dtype="<f8").tobytes(),
             np.ascontiguousarray(p.zero_point, dtype="<u4").tobytes()]
    return b"".join(parts)


def _read_params(r: _Reader) -> QuantParams | None:
    present = r.take("<B")
    if not present:
        return None
    count, gran = r.take("<IB")
    bits = r.take("<I")
    scale = r.array("<f8", count)
    zero = r.array("<u4", count).astype(np.int64)
    return QuantParams(scale, zero, bits, _GRAN_FROM_CODE[gran])


def save_model(model, path) -> None:
    from .pipeline import LAYER_NAMES
    parts = [MODEL_MAGIC,
             struct.pack("<IIIIII", MODEL_VERSION, model.d, model.tokens,
                         len(model.layers), model.bits_w, model.bits_a),
             struct.pack("<Q", model.seed),
             struct.pack("<BB", _SHIFT_CODES[model.shift_mode],
                         _MIG_CODES[model.migration_mode])]
    for states in model.layers:
        for name in LAYER_NAMES:
            st = states[name]
            rows, cols = st.weight_codes.shape
            parts.append(struct.pack("<II", rows, cols))
            parts.append(np.ascontiguousarray(st.weight_codes,
                                              dtype="<u2").tobytes())
            parts.append(_pack_params(st.w_params))
            parts.append(np.ascontiguousarray(st.bias, dtype="<f8").tobytes())
            parts.append(_pack_params(st.a_params))
            if st.shift_values is None:
                parts.append(struct.pack("<I", 0))
            else:
                parts.append(struct.pack("<I", len(st.shift_values)))
                parts.append(np.ascontiguousarray(st.shift_values,
                                                  dtype="<f8").tobytes())
            if st.plan is None or len(st.plan) == 0:
                parts.append(struct.pack("<I", 0))
            else:
                parts.append(struct.pack("<I", len(st.plan)))
                parts.append(np.ascontiguousarray(st.plan.outlier_indices,
                                                  dtype="<u4").tobytes())
                parts.append(np.ascontiguousarray(st.plan.factors,
                                                  dtype="<f8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_model(path):
    from .pipeline import LAYER_NAMES, QuantizedLayerState, QuantizedModel
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(_check_crc(blob, MODEL_MAGIC))
    r.take("<4s")
    version, d, tokens, n_blocks, bits_w, bits_a = r.take("<IIIIII")
    if version != MODEL_VERSION:
        raise VersionError(f"model format version {version} not supported")
    seed = int(r.take("<Q"))
    shift_code, mig_code = r.take("<BB")
    layers = []
    for _ in range(n_blocks):
        states = {}
        for name in LAYER_NAMES:
            rows, cols = r.take("<II")
            codes = r.array("<u2", rows * cols).astype(np.int64).reshape(rows, cols)
            w_params = _read_params(r)
            bias = r.array("<f8", cols)
            a_params = _read_params(r)
            n_shift = r.take("<I")
            shift = r.array("<f8", n_shift) if n_shift else None
            n_plan = r.take("<I")
            plan = None
            if n_plan:
                idx = r.array("<u4", n_plan).astype(np.int64)
                factors = r.array("<f8", n_plan)
                plan = MigrationPlan(idx, factors)
            states[name] = QuantizedLayerState(
                name=name, weight_codes=codes, w_params=w_params, bias=bias,
                a_params=a_params, shift_values=shift, plan=plan)
        layers.append(states)
    if r.pos != len(r.body):
        raise IntegrityError("trailing bytes after model payload")
    return QuantizedModel(d=d, tokens=tokens, bits_w=bits_w, bits_a=bits_a,
                          seed=seed, shift_mode=_SHIFT_FROM_CODE[shift_code],
                          migration_mode=_MIG_FROM_CODE[mig_code],
                          layers=layers)
