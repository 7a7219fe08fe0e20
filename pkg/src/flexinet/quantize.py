"""Int8 quantization: fake-quant QAT hooks, BN folding, conversion, and
pure-integer inference kernels.

Conventions (per-tensor throughout):
  * activations: affine, scale = (max - min) / 255 with the range extended
    to include zero, q = clamp(round(x / scale) + zero_point, -128, 127)
  * weights: symmetric, zero_point = 0, scale = max|w| / 127
  * rounding is always half-away-from-zero, and requantization uses a
    fixed-point int multiplier, so converted-model inference is
    bit-deterministic across platforms.

Convolution accumulators hold int32-range values. They are computed with
float64 matrix products over integer-valued operands, which is exact for
magnitudes far below 2**53 and therefore identical to integer arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .container import (KIND_FLOAT_MODEL, KIND_INT8_MODEL, ContainerError,
                        read_container, write_container)
from .model import ArchConfig, FlexiNet, arch_from_dict, arch_to_dict, build_model
from .tensor import Tensor, conv_output_size, round_half_away

QMIN, QMAX = -128, 127
_MIN_SCALE = 1e-8


class ConversionError(RuntimeError):
    pass


@dataclass
class QuantSpec:
    scale: float
    zero_point: int
    min_val: float
    max_val: float
    symmetric: bool = False

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @classmethod
    def affine(cls, lo, hi):
        """Affine activation spec; the range is widened to include zero."""
        lo = min(float(lo), 0.0)
        hi = max(float(hi), 0.0)
        scale = max((hi - lo) / 255.0, _MIN_SCALE)
        zp = int(np.clip(-128 - round_half_away(np.float64(lo / scale)), QMIN, QMAX))
        return cls(scale, zp, lo, hi, symmetric=False)

    @classmethod
    def symmetric_from(cls, arr):
        m = float(np.max(np.abs(arr))) if np.size(arr) else 0.0
        scale = max(m / 127.0, _MIN_SCALE)
        return cls(scale, 0, -m, m, symmetric=True)


def quantize(arr, spec: QuantSpec) -> np.ndarray:
    q = round_half_away(np.asarray(arr, dtype=np.float64) / spec.scale) + spec.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequantize(q, spec: QuantSpec) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) - spec.zero_point) * spec.scale


class Observer:
    """Running min/max collector for one tensor."""

    def __init__(self):
        self.min_val = None
        self.max_val = None

    def update(self, arr):
        lo = float(np.min(arr))
        hi = float(np.max(arr))
        if self.min_val is None:
            self.min_val, self.max_val = lo, hi
        else:
            self.min_val = min(self.min_val, lo)
            self.max_val = max(self.max_val, hi)

    @property
    def initialized(self):
        return self.min_val is not None

    def spec(self) -> QuantSpec:
        if not self.initialized:
            raise ConversionError("observer has never seen data")
        return QuantSpec.affine(self.min_val, self.max_val)


class QuantRuntime:
    """Forward-pass hooks for QAT ('qat') or observation only ('calibrate')."""

    def __init__(self, mode="qat"):
        if mode not in ("qat", "calibrate"):
            raise ValueError(f"unknown quant mode {mode!r}")
        self.mode = mode
        self.observers: dict[str, Observer] = {}
        self.frozen = False

    def weight(self, name, w: Tensor) -> Tensor:
        if self.mode == "calibrate":
            return w
        m = float(np.max(np.abs(w.data)))
        scale = max(m / 127.0, _MIN_SCALE)
        return T.fake_quant(w, scale, 0, -m, m)

    def activation(self, name, x: Tensor) -> Tensor:
        obs = self.observers.setdefault(name, Observer())
        if not self.frozen:
            obs.update(x.data)
        if self.mode == "calibrate":
            return x
        spec = obs.spec()
        return T.fake_quant(x, spec.scale, spec.zero_point, spec.min_val, spec.max_val)


# ---------------------------------------------------------------------------
# BN folding


@dataclass
class FoldedConv:
    kind: str  # "conv" | "depthwise" | "pointwise"
    w: np.ndarray
    b: np.ndarray
    stride: int = 1
    padding: int = 0


def _fold(conv_w, bn, dtype=np.float64):
    inv = bn.gamma.data.astype(dtype) / np.sqrt(bn.running_var.astype(dtype) + bn.eps)
    w = conv_w.data.astype(dtype) * inv.reshape(-1, *([1] * (conv_w.data.ndim - 1)))
    b = bn.beta.data.astype(dtype) - bn.running_mean.astype(dtype) * inv
    return w, b


@dataclass
class FoldedBlock:
    dw: FoldedConv
    pw: FoldedConv
    proj: FoldedConv | None


class FoldedModel:
    """Float model with batch norms merged into the preceding convolutions."""

    def __init__(self, model: FlexiNet):
        cfg = model.cfg
        self.cfg = cfg
        self.resnorm_lambda = (float(model.resnorm.lambda_rn.data)
                               if model.resnorm is not None else None)
        self.resnorm_eps = model.resnorm.eps if model.resnorm is not None else 1e-5

        w, b = _fold(model.stem1.w, model.stem1.bn)
        self.stem1 = FoldedConv("conv", w, b, stride=2, padding=1)
        w, b = _fold(model.stem2.w, model.stem2.bn)
        self.stem2 = FoldedConv("conv", w, b, stride=2, padding=1)

        self.blocks = []
        for blk in model.blocks:
            w, b = _fold(blk.dw_w, blk.bn1)
            # depthwise folding: one filter per channel, scale by its own channel
            dw = FoldedConv("depthwise", w, b, stride=blk.spec.stride, padding=1)
            w, b = _fold(blk.pw_w, blk.bn2)
            pw = FoldedConv("pointwise", w, b)
            proj = None
            if blk.proj_w is not None:
                proj = FoldedConv("pointwise",
                                  blk.proj_w.data.astype(np.float64),
                                  np.zeros(blk.proj_w.data.shape[0]),
                                  stride=blk.spec.stride)
            self.blocks.append(FoldedBlock(dw, pw, proj))
        self.head = FoldedConv("pointwise",
                               model.head_w.data.astype(np.float64),
                               model.head_b.data.astype(np.float64))
        self.block_names = [blk.name for blk in model.blocks]

    def _resnorm(self, x):
        if self.resnorm_lambda is None:
            return x
        mu = x.mean(axis=(2, 3), keepdims=True)
        v = x.var(axis=(2, 3), keepdims=True)
        return self.resnorm_lambda * x + (x - mu) / np.sqrt(v + self.resnorm_eps)

    @staticmethod
    def _conv(x, fc: FoldedConv):
        if fc.kind == "depthwise":
            out = _dw_conv_f64(x, fc.w, fc.stride, fc.padding)
        else:
            out = _conv_f64(x, fc.w, fc.stride, fc.padding)
        return out + fc.b[None, :, None, None]

    def predict(self, feats: np.ndarray) -> np.ndarray:
        x = self._resnorm(np.asarray(feats, dtype=np.float64))
        x = np.maximum(self._conv(x, self.stem1), 0.0)
        x = np.maximum(self._conv(x, self.stem2), 0.0)
        for fb in self.blocks:
            h = np.maximum(self._conv(x, fb.dw), 0.0)
            h = self._conv(h, fb.pw)
            identity = self._conv(x, fb.proj) if fb.proj is not None else x
            x = np.maximum(h + identity, 0.0)
        x = x.mean(axis=(2, 3), keepdims=True)
        x = self._conv(x, self.head)
        return x.reshape(x.shape[0], -1)


def fold_batch_norm(model: FlexiNet) -> FoldedModel:
    return FoldedModel(model)


# plain-array conv helpers (reuse the tensor kernels' im2col machinery)


def _conv_f64(x, w, stride, padding):
    from .tensor import _im2col, _pad_nchw

    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    xp = _pad_nchw(np.asarray(x, dtype=np.float64), padding, padding)
    cols = _im2col(xp, kh, kw, stride, stride, ho, wo)
    return np.matmul(w.reshape(cout, -1).astype(np.float64), cols).reshape(n, cout, ho, wo)


def _dw_conv_f64(x, w, stride, padding):
    from .tensor import _pad_nchw

    n, c, h, wd = x.shape
    _, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    xp = _pad_nchw(np.asarray(x, dtype=np.float64), padding, padding)
    out = np.zeros((n, c, ho, wo))
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += sl * w[None, :, 0, i, j, None, None]
    return out


# ---------------------------------------------------------------------------
# fixed-point requantization


def _fixed_point(multiplier: float):
    """Represent a positive float multiplier as m0 / 2**shift, m0 < 2**31."""
    if multiplier <= 0:
        raise ValueError(f"multiplier must be positive, got {multiplier}")
    shift = 31
    m0 = int(round(multiplier * (1 << shift)))
    while m0 >= (1 << 31):
        shift -= 1
        if shift < 1:
            raise ValueError(f"multiplier {multiplier} too large for fixed-point form")
        m0 = int(round(multiplier * (1 << shift)))
    return m0, shift


def _scale_round(v: np.ndarray, m0: int, shift: int) -> np.ndarray:
    """round_half_away(v * m0 / 2**shift) in pure int64 arithmetic."""
    p = v.astype(np.int64) * m0
    half = np.int64(1) << (shift - 1)
    mag = (np.abs(p) + half) >> shift
    return np.where(p >= 0, mag, -mag)


def _div_round_half_away(num: np.ndarray, den: int) -> np.ndarray:
    mag = (np.abs(num) + den // 2) // den
    return np.where(num >= 0, mag, -mag)


# ---------------------------------------------------------------------------
# integer kernels (int8 operands, exact accumulation)


def _pad_with_zp(xq, padding, zp):
    """Zero in the real domain corresponds to the zero point in int8."""
    if padding == 0:
        return xq.astype(np.float64)
    return np.pad(xq.astype(np.float64),
                  ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                  constant_values=float(zp))


def _conv_int(xq, wq, stride, padding, zp_in):
    """Σ w · (x - zp_in); returns int64 accumulators."""
    xp = _pad_with_zp(xq, padding, zp_in)
    acc = _conv_f64(xp, wq.astype(np.float64), stride, 0)
    wsum = wq.astype(np.int64).sum(axis=(1, 2, 3))
    return acc.astype(np.int64) - zp_in * wsum[None, :, None, None]


def _dw_conv_int(xq, wq, stride, padding, zp_in):
    xp = _pad_with_zp(xq, padding, zp_in)
    acc = _dw_conv_f64(xp, wq.astype(np.float64), stride, 0)
    wsum = wq.astype(np.int64).sum(axis=(1, 2, 3))
    return acc.astype(np.int64) - zp_in * wsum[None, :, None, None]


@dataclass
class QuantizedConv:
    kind: str  # "conv" | "depthwise" | "pointwise"
    wq: np.ndarray  # int8
    bq: np.ndarray  # int32, scale = s_in * s_w
    w_spec: QuantSpec
    in_spec: QuantSpec
    out_spec: QuantSpec
    stride: int = 1
    padding: int = 0
    relu: bool = False

    def __post_init__(self):
        self.m0, self.shift = _fixed_point(
            self.in_spec.scale * self.w_spec.scale / self.out_spec.scale)

    def apply(self, xq: np.ndarray) -> np.ndarray:
        if self.kind == "depthwise":
            acc = _dw_conv_int(xq, self.wq, self.stride, self.padding,
                               self.in_spec.zero_point)
        else:
            acc = _conv_int(xq, self.wq, self.stride, self.padding,
                            self.in_spec.zero_point)
        acc = acc + self.bq.astype(np.int64)[None, :, None, None]
        q = _scale_round(acc, self.m0, self.shift) + self.out_spec.zero_point
        lo = self.out_spec.zero_point if self.relu else QMIN
        return np.clip(q, lo, QMAX).astype(np.int8)


@dataclass
class QuantizedAdd:
    a_spec: QuantSpec
    b_spec: QuantSpec
    out_spec: QuantSpec
    relu: bool = True

    def __post_init__(self):
        self.ma = _fixed_point(self.a_spec.scale / self.out_spec.scale)
        self.mb = _fixed_point(self.b_spec.scale / self.out_spec.scale)

    def apply(self, aq, bq):
        va = _scale_round(aq.astype(np.int64) - self.a_spec.zero_point, *self.ma)
        vb = _scale_round(bq.astype(np.int64) - self.b_spec.zero_point, *self.mb)
        q = va + vb + self.out_spec.zero_point
        lo = self.out_spec.zero_point if self.relu else QMIN
        return np.clip(q, lo, QMAX).astype(np.int8)


def _global_avg_pool_int(xq: np.ndarray, spec: QuantSpec) -> np.ndarray:
    n, c, h, w = xq.shape
    total = (xq.astype(np.int64) - spec.zero_point).sum(axis=(2, 3), keepdims=True)
    avg = _div_round_half_away(total, h * w) + spec.zero_point
    return np.clip(avg, QMIN, QMAX).astype(np.int8)


@dataclass
class _QBlock:
    dw: QuantizedConv
    pw: QuantizedConv
    proj: QuantizedConv | None
    add: QuantizedAdd


class QuantizedModel:
    """Pure-int8 inference graph with float entry (resnorm) and exit."""

    def __init__(self, cfg: ArchConfig, resnorm_lambda, in_spec, stem1, stem2,
                 blocks, head, logits_spec, resnorm_eps=1e-5):
        self.cfg = cfg
        self.resnorm_lambda = resnorm_lambda
        self.resnorm_eps = resnorm_eps
        self.in_spec = in_spec
        self.stem1 = stem1
        self.stem2 = stem2
        self.blocks = blocks
        self.head = head
        self.logits_spec = logits_spec

    def _resnorm(self, x):
        if self.resnorm_lambda is None:
            return x
        mu = x.mean(axis=(2, 3), keepdims=True)
        v = x.var(axis=(2, 3), keepdims=True)
        return self.resnorm_lambda * x + (x - mu) / np.sqrt(v + self.resnorm_eps)

    def predict(self, feats: np.ndarray, batch_size=64) -> np.ndarray:
        outs = []
        for i in range(0, feats.shape[0], batch_size):
            outs.append(self._predict_batch(feats[i : i + batch_size]))
        return np.concatenate(outs, axis=0)

    def _predict_batch(self, feats):
        x = self._resnorm(np.asarray(feats, dtype=np.float64))
        xq = quantize(x, self.in_spec)
        xq = self.stem1.apply(xq)
        xq = self.stem2.apply(xq)
        for qb in self.blocks:
            hq = qb.dw.apply(xq)
            hq = qb.pw.apply(hq)
            sq = qb.proj.apply(xq) if qb.proj is not None else xq
            xq = qb.add.apply(hq, sq)
        xq = _global_avg_pool_int(xq, self.blocks[-1].add.out_spec)
        xq = self.head.apply(xq)
        logits = dequantize(xq, self.logits_spec)
        return logits.reshape(logits.shape[0], -1).astype(np.float32)


def _quantize_conv(fc: FoldedConv, in_spec: QuantSpec, out_spec: QuantSpec,
                   relu: bool) -> QuantizedConv:
    w_spec = QuantSpec.symmetric_from(fc.w)
    wq = quantize(fc.w, w_spec)
    bias_scale = in_spec.scale * w_spec.scale
    bq = np.clip(round_half_away(fc.b / bias_scale),
                 np.iinfo(np.int32).min, np.iinfo(np.int32).max).astype(np.int32)
    return QuantizedConv(fc.kind, wq, bq, w_spec, in_spec, out_spec,
                         stride=fc.stride, padding=fc.padding, relu=relu)


def convert_int8(model: FlexiNet, observers: dict) -> QuantizedModel:
    """Fold BN, quantize weights symmetrically, wire activation specs.

    ``observers`` maps activation names (as produced by QuantRuntime during
    QAT or calibration) to Observer instances; a missing or empty observer
    is a conversion error naming the tensor.
    """
    folded = fold_batch_norm(model)

    def spec_of(name):
        obs = observers.get(name)
        if obs is None or not obs.initialized:
            raise ConversionError(f"no calibrated observer for activation {name!r}")
        return obs.spec()

    in_spec = spec_of("in")
    s1 = spec_of("stem1")
    s2 = spec_of("stem2")
    stem1 = _quantize_conv(folded.stem1, in_spec, s1, relu=True)
    stem2 = _quantize_conv(folded.stem2, s1, s2, relu=True)

    blocks = []
    prev_spec = s2
    for fb, name in zip(folded.blocks, folded.block_names):
        dw_spec = spec_of(f"{name}.dw")
        pw_spec = spec_of(f"{name}.pw")
        out_spec = spec_of(name)
        dw = _quantize_conv(fb.dw, prev_spec, dw_spec, relu=True)
        pw = _quantize_conv(fb.pw, dw_spec, pw_spec, relu=False)
        if fb.proj is not None:
            proj_spec = spec_of(f"{name}.proj")
            proj = _quantize_conv(fb.proj, prev_spec, proj_spec, relu=False)
            shortcut_spec = proj_spec
        else:
            proj = None
            shortcut_spec = prev_spec
        add = QuantizedAdd(pw_spec, shortcut_spec, out_spec, relu=True)
        blocks.append(_QBlock(dw, pw, proj, add))
        prev_spec = out_spec

    logits_spec = spec_of("logits")
    head = _quantize_conv(folded.head, prev_spec, logits_spec, relu=False)
    return QuantizedModel(model.cfg, folded.resnorm_lambda, in_spec,
                          stem1, stem2, blocks, head, logits_spec,
                          resnorm_eps=folded.resnorm_eps)


# ---------------------------------------------------------------------------
# model serialization


def save_model(model, path):
    """Write a float FlexiNet or a QuantizedModel to the binary container."""
    if isinstance(model, FlexiNet):
        tensors = []
        for name, p in model.params().items():
            tensors.append((name, p.data.astype(np.float32), None))
        for blk in [model.stem1, model.stem2]:
            tensors.append((f"{blk.bn.name}.running_mean", blk.bn.running_mean.astype(np.float32), None))
            tensors.append((f"{blk.bn.name}.running_var", blk.bn.running_var.astype(np.float32), None))
        for b in model.blocks:
            for bn in (b.bn1, b.bn2):
                tensors.append((f"{bn.name}.running_mean", bn.running_mean.astype(np.float32), None))
                tensors.append((f"{bn.name}.running_var", bn.running_var.astype(np.float32), None))
        meta = {"arch": arch_to_dict(model.cfg)}
        write_container(path, KIND_FLOAT_MODEL, meta, tensors)
        return

    if isinstance(model, QuantizedModel):
        tensors = []
        act_specs = {"in": _spec_dict(model.in_spec),
                     "logits": _spec_dict(model.logits_spec)}

        def add_conv(name, qc: QuantizedConv):
            tensors.append((f"{name}.w", qc.wq, qc.w_spec))
            tensors.append((f"{name}.b", qc.bq, None))
            act_specs[f"{name}.out"] = _spec_dict(qc.out_spec)
            act_specs[f"{name}.in"] = _spec_dict(qc.in_spec)

        add_conv("stem1", model.stem1)
        add_conv("stem2", model.stem2)
        structure = []
        for i, qb in enumerate(model.blocks):
            nm = f"blk{i}"
            add_conv(f"{nm}.dw", qb.dw)
            add_conv(f"{nm}.pw", qb.pw)
            if qb.proj is not None:
                add_conv(f"{nm}.proj", qb.proj)
            act_specs[f"{nm}.add.a"] = _spec_dict(qb.add.a_spec)
            act_specs[f"{nm}.add.b"] = _spec_dict(qb.add.b_spec)
            act_specs[f"{nm}.add.out"] = _spec_dict(qb.add.out_spec)
            structure.append({"name": nm,
                              "stride": qb.dw.stride,
                              "has_proj": qb.proj is not None})
        add_conv("head", model.head)
        meta = {
            "arch": arch_to_dict(model.cfg),
            "resnorm_lambda": model.resnorm_lambda,
            "resnorm_eps": model.resnorm_eps,
            "act_specs": act_specs,
            "blocks": structure,
        }
        write_container(path, KIND_INT8_MODEL, meta, tensors)
        return
    raise TypeError(f"cannot save model of type {type(model).__name__}")


def _spec_dict(spec: QuantSpec):
    return {"scale": spec.scale, "zero_point": spec.zero_point,
            "min_val": spec.min_val, "max_val": spec.max_val,
            "symmetric": spec.symmetric}


def _spec_from_dict(d) -> QuantSpec:
    return QuantSpec(d["scale"], d["zero_point"], d["min_val"], d["max_val"],
                     d.get("symmetric", False))


def load_model(path):
    """Load either model kind; dispatches on the container kind byte."""
    kind, meta, tensors = read_container(path)
    if kind == KIND_FLOAT_MODEL:
        cfg = arch_from_dict(meta["arch"])
        model = build_model(cfg)
        params = model.params()
        for name, p in params.items():
            if name not in tensors:
                raise ContainerError(f"{path}: missing parameter {name!r}")
            arr = tensors[name][0].astype(model.dtype)
            if arr.shape != p.data.shape:
                raise ContainerError(
                    f"{path}: parameter {name!r} shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()
        for blk in [model.stem1, model.stem2] + model.blocks:
            bns = [blk.bn] if hasattr(blk, "bn") else [blk.bn1, blk.bn2]
            for bn in bns:
                bn.running_mean = tensors[f"{bn.name}.running_mean"][0].astype(model.dtype).copy()
                bn.running_var = tensors[f"{bn.name}.running_var"][0].astype(model.dtype).copy()
        return model

    if kind == KIND_INT8_MODEL:
        cfg = arch_from_dict(meta["arch"])
        act = {k: _spec_from_dict(v) for k, v in meta["act_specs"].items()}

        def conv_of(name, kind_str, stride, padding, relu):
            wq, wq_spec = tensors[f"{name}.w"]
            bq = tensors[f"{name}.b"][0]
            return QuantizedConv(kind_str, wq, bq, _spec_from_dict(wq_spec),
                                 act[f"{name}.in"], act[f"{name}.out"],
                                 stride=stride, padding=padding, relu=relu)

        stem1 = conv_of("stem1", "conv", 2, 1, True)
        stem2 = conv_of("stem2", "conv", 2, 1, True)
        blocks = []
        for entry in meta["blocks"]:
            nm = entry["name"]
            dw = conv_of(f"{nm}.dw", "depthwise", entry["stride"], 1, True)
            pw = conv_of(f"{nm}.pw", "pointwise", 1, 0, False)
            proj = (conv_of(f"{nm}.proj", "pointwise", entry["stride"], 0, False)
                    if entry["has_proj"] else None)
            add = QuantizedAdd(act[f"{nm}.add.a"], act[f"{nm}.add.b"],
                               act[f"{nm}.add.out"], relu=True)
            blocks.append(_QBlock(dw, pw, proj, add))
        head = conv_of("head", "pointwise", 1, 0, False)
        return QuantizedModel(cfg, meta["resnorm_lambda"], act["in"],
                              stem1, stem2, blocks, head, act["logits"],
                              resnorm_eps=meta.get("resnorm_eps", 1e-5))
    raise ContainerError(f"{path}: unknown model kind {kind}")


def calibrate(model: FlexiNet, feats: np.ndarray, batch_size=32) -> dict:
    """Run observation-only forward passes; returns the observer map."""
    runtime = QuantRuntime(mode="calibrate")
    for i in range(0, feats.shape[0], batch_size):
        model.forward(feats[i : i + batch_size], training=False, quant=runtime)
    return runtime.observers
