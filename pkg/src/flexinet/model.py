"""DS-FlexiNet: stem, depthwise-separable residual blocks, residual norm.

Layout per forward pass (resnorm placed on the input by default):

    ResNorm -> [conv3x3 s2 + BN + ReLU] x2 -> stages of blocks
            -> global average pool -> pointwise classifier (10 logits)

Each block: depthwise 3x3 (carries the stride) + BN + ReLU, pointwise +
BN, residual add (1x1 strided projection when channel count or stride
changes shape), final ReLU. Convs followed by BN carry no bias.

Hooks named ``quant`` thread optional fake-quant/observer state through
the forward pass; the quantization module provides the implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class StageSpec:
    num_blocks: int
    channels: int
    first_stride: int = 2

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError(f"stage needs at least one block, got {self.num_blocks}")
        if self.first_stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.first_stride}")


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    stride: int

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def needs_projection(self) -> bool:
        return self.in_channels != self.out_channels or self.stride != 1


@dataclass(frozen=True)
class ArchConfig:
    stem_channels: tuple[int, int] = (8, 24)
    stages: tuple[StageSpec, ...] = ()
    num_classes: int = 10
    resnorm_placement: str = "input"  # "input" | "post-stem" | "none"
    resnorm_lambda_init: float = 0.1
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.num_classes != 10:
            raise ValueError(f"the scene taxonomy has 10 classes, got {self.num_classes}")
        if self.resnorm_placement not in ("input", "post-stem", "none"):
            raise ValueError(f"unknown resnorm placement {self.resnorm_placement!r}")
        if not self.stages:
            raise ValueError("at least one stage is required")
        chans = [s.channels for s in self.stages]
        if any(b > a for a, b in zip(chans[1:], chans)):
            raise ValueError(f"stage channels must be non-decreasing, got {chans}")

    def block_specs(self) -> list[BlockSpec]:
        specs = []
        cin = self.stem_channels[1]
        for stage in self.stages:
            for j in range(stage.num_blocks):
                stride = stage.first_stride if j == 0 else 1
                specs.append(BlockSpec(cin, stage.channels, stride))
                cin = stage.channels
        return specs


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _NullQuant:
    """No-op quantization hooks used when QAT is disabled."""

    def weight(self, name, w):
        return w

    def activation(self, name, x):
        return x


NULL_QUANT = _NullQuant()


class BatchNorm2d:
    def __init__(self, channels, name, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.name = name

    def forward(self, x, training):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training, self.momentum, self.eps)

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}


class ResNorm:
    """Trainable blend of identity and per-(n, c) instance normalization."""

    def __init__(self, name, lambda_init=0.1, eps=1e-5, dtype=np.float32):
        self.lambda_rn = Tensor(np.asarray(lambda_init, dtype=dtype),
                                requires_grad=True, name=f"{name}.lambda")
        self.eps = eps
        self.name = name

    def forward(self, x, training):
        return T.res_norm(x, self.lambda_rn, eps=self.eps)

    def params(self):
        return {f"{self.name}.lambda": self.lambda_rn}


class ConvBnRelu:
    """Stem unit: 3x3 conv (stride 2, no bias) + BN + ReLU."""

    def __init__(self, cin, cout, name, rng, stride=2, momentum=0.1, dtype=np.float32):
        self.w = Tensor(_kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype),
                        requires_grad=True, name=f"{name}.w")
        self.bn = BatchNorm2d(cout, f"{name}.bn", momentum=momentum, dtype=dtype)
        self.stride = stride
        self.name = name

    def forward(self, x, training, quant=NULL_QUANT):
        w = quant.weight(f"{self.name}.w", self.w)
        h = T.conv2d(x, w, stride=(self.stride, self.stride), padding=(1, 1))
        h = self.bn.forward(h, training)
        h = T.relu(h)
        return quant.activation(self.name, h)

    def params(self):
        return {f"{self.name}.w": self.w, **self.bn.params()}


class Block:
    """Depthwise-separable residual block."""

    def __init__(self, spec: BlockSpec, name, rng, momentum=0.1, dtype=np.float32):
        cin, cout = spec.in_channels, spec.out_channels
        self.spec = spec
        self.name = name
        self.dw_w = Tensor(_kaiming_uniform(rng, (cin, 1, 3, 3), 9, dtype),
                           requires_grad=True, name=f"{name}.dw.w")
        self.bn1 = BatchNorm2d(cin, f"{name}.bn1", momentum=momentum, dtype=dtype)
        self.pw_w = Tensor(_kaiming_uniform(rng, (cout, cin, 1, 1), cin, dtype),
                           requires_grad=True, name=f"{name}.pw.w")
        self.bn2 = BatchNorm2d(cout, f"{name}.bn2", momentum=momentum, dtype=dtype)
        if spec.needs_projection:
            self.proj_w = Tensor(_kaiming_uniform(rng, (cout, cin, 1, 1), cin, dtype),
                                 requires_grad=True, name=f"{name}.proj.w")
        else:
            self.proj_w = None

    def forward(self, x, training, quant=NULL_QUANT):
        s = self.spec.stride
        dw_w = quant.weight(f"{self.name}.dw.w", self.dw_w)
        h = T.depthwise_conv2d(x, dw_w, stride=(s, s), padding=(1, 1))
        h = self.bn1.forward(h, training)
        h = T.relu(h)
        h = quant.activation(f"{self.name}.dw", h)

        pw_w = quant.weight(f"{self.name}.pw.w", self.pw_w)
        h = T.pointwise_conv2d(h, pw_w)
        h = self.bn2.forward(h, training)
        h = quant.activation(f"{self.name}.pw", h)

        if self.proj_w is not None:
            proj_w = quant.weight(f"{self.name}.proj.w", self.proj_w)
            identity = T.conv2d(x, proj_w, stride=(s, s), padding=(0, 0))
            identity = quant.activation(f"{self.name}.proj", identity)
        else:
            identity = x

        out = T.relu(T.add(h, identity))
        return quant.activation(self.name, out)

    def params(self):
        out = {f"{self.name}.dw.w": self.dw_w, **self.bn1.params(),
               f"{self.name}.pw.w": self.pw_w, **self.bn2.params()}
        if self.proj_w is not None:
            out[f"{self.name}.proj.w"] = self.proj_w
        return out


class FlexiNet:
    """Ordered layer graph with named parameters and optional quant state."""

    def __init__(self, cfg: ArchConfig, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        c1, c2 = cfg.stem_channels
        self.resnorm = (ResNorm("resnorm", cfg.resnorm_lambda_init, dtype=dtype)
                        if cfg.resnorm_placement != "none" else None)
        self.stem1 = ConvBnRelu(1, c1, "stem1", rng, momentum=cfg.bn_momentum, dtype=dtype)
        self.stem2 = ConvBnRelu(c1, c2, "stem2", rng, momentum=cfg.bn_momentum, dtype=dtype)
        self.blocks = []
        specs = cfg.block_specs()
        idx = 0
        for si, stage in enumerate(cfg.stages):
            for bi in range(stage.num_blocks):
                self.blocks.append(Block(specs[idx], f"s{si}.b{bi}", rng,
                                         momentum=cfg.bn_momentum, dtype=dtype))
                idx += 1
        c_final = cfg.stages[-1].channels
        self.head_w = Tensor(_kaiming_uniform(rng, (cfg.num_classes, c_final, 1, 1), c_final, dtype),
                             requires_grad=True, name="head.w")
        self.head_b = Tensor(np.zeros(cfg.num_classes, dtype=dtype),
                             requires_grad=True, name="head.b")

    @property
    def layers(self):
        out = []
        if self.resnorm is not None:
            out.append(self.resnorm)
        out.extend([self.stem1, self.stem2])
        out.extend(self.blocks)
        return out

    def forward(self, x, training=False, quant=NULL_QUANT):
        """x: Tensor or ndarray of shape N x 1 x F x T. Returns N x 10 logits."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if self.resnorm is not None and self.cfg.resnorm_placement == "input":
            x = self.resnorm.forward(x, training)
        x = quant.activation("in", x)
        x = self.stem1.forward(x, training, quant)
        x = self.stem2.forward(x, training, quant)
        if self.resnorm is not None and self.cfg.resnorm_placement == "post-stem":
            x = self.resnorm.forward(x, training)
        for block in self.blocks:
            x = block.forward(x, training, quant)
        x = T.global_average_pool(x)
        head_w = quant.weight("head.w", self.head_w)
        x = T.pointwise_conv2d(x, head_w, self.head_b)
        x = quant.activation("logits", x)
        return T.reshape(x, (x.shape[0], self.cfg.num_classes))

    def predict(self, feats: np.ndarray, batch_size=64) -> np.ndarray:
        """Inference logits for a batch of feature maps (no tape, eval mode)."""
        outs = []
        for i in range(0, feats.shape[0], batch_size):
            outs.append(self.forward(feats[i : i + batch_size], training=False).data)
        return np.concatenate(outs, axis=0)

    def params(self) -> dict[str, Tensor]:
        out = {}
        if self.resnorm is not None:
            out.update(self.resnorm.params())
        out.update(self.stem1.params())
        out.update(self.stem2.params())
        for b in self.blocks:
            out.update(b.params())
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def zero_grads(self):
        for p in self.params().values():
            p.grad = None


def build_model(cfg: ArchConfig, seed=0, dtype=np.float32) -> FlexiNet:
    return FlexiNet(cfg, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# parameter / MAC accounting


def _conv_out(size, stride):
    return (size + 2 - 3) // stride + 1  # 3x3, pad 1


@dataclass
class LayerCost:
    name: str
    params: int
    macs: int


def count_params_macs(cfg: ArchConfig, input_hw=(256, 64), detail=False):
    """Parameter and multiply-accumulate counts for one input feature map.

    MAC conventions: conv cost = Kh*Kw*Cin*Cout*Hout*Wout (depthwise:
    Kh*Kw*C*Hout*Wout); BN, ReLU, pooling and the normalization layers
    count zero MACs. Parameters count trainable tensors only (weights,
    biases, BN gamma/beta, resnorm lambda).
    """
    rows = []
    h, w = input_hw
    if cfg.resnorm_placement != "none":
        rows.append(LayerCost("resnorm", 1, 0))
    c1, c2 = cfg.stem_channels
    h1, w1 = _conv_out(h, 2), _conv_out(w, 2)
    rows.append(LayerCost("stem1", 9 * 1 * c1 + 2 * c1, 9 * 1 * c1 * h1 * w1))
    h2, w2 = _conv_out(h1, 2), _conv_out(w1, 2)
    rows.append(LayerCost("stem2", 9 * c1 * c2 + 2 * c2, 9 * c1 * c2 * h2 * w2))
    hh, ww = h2, w2
    for si, stage in enumerate(cfg.stages):
        cin = c2 if si == 0 else cfg.stages[si - 1].channels
        for bi in range(stage.num_blocks):
            stride = stage.first_stride if bi == 0 else 1
            cout = stage.channels
            ho, wo = _conv_out(hh, stride), _conv_out(ww, stride)
            p = 9 * cin + 2 * cin + cin * cout + 2 * cout
            m = 9 * cin * ho * wo + cin * cout * ho * wo
            spec = BlockSpec(cin, cout, stride)
            if spec.needs_projection:
                p += cin * cout
                m += cin * cout * ho * wo
            rows.append(LayerCost(f"s{si}.b{bi}", p, m))
            hh, ww = ho, wo
            cin = cout
    c_final = cfg.stages[-1].channels
    rows.append(LayerCost("head", c_final * cfg.num_classes + cfg.num_classes,
                          c_final * cfg.num_classes))
    total_p = sum(r.params for r in rows)
    total_m = sum(r.macs for r in rows)
    if detail:
        return total_p, total_m, rows
    return total_p, total_m


# Reference configurations sized to the published parameter budgets
# (13.76K / 30.69K / 54.98K / 126.12K within +-15%); channel layouts are
# artifact choices found with the counter above.
REFERENCE_CONFIGS: dict[str, ArchConfig] = {
    "sm-a": ArchConfig(
        stem_channels=(8, 24),
        stages=(StageSpec(1, 32, 2), StageSpec(1, 48, 2), StageSpec(1, 64, 2)),
    ),
    "sm-b": ArchConfig(
        stem_channels=(12, 32),
        stages=(StageSpec(2, 48, 2), StageSpec(1, 64, 2), StageSpec(1, 96, 2)),
    ),
    "sm-c": ArchConfig(
        stem_channels=(16, 40),
        stages=(StageSpec(2, 64, 2), StageSpec(2, 80, 2), StageSpec(1, 120, 2)),
    ),
    "sm-d": ArchConfig(
        stem_channels=(24, 56),
        stages=(StageSpec(2, 80, 2), StageSpec(2, 112, 2), StageSpec(2, 152, 2)),
    ),
}

PARAM_BUDGETS = {"sm-a": 13760, "sm-b": 30690, "sm-c": 54980, "sm-d": 126120}


def arch_to_dict(cfg: ArchConfig) -> dict:
    return {
        "stem_channels": list(cfg.stem_channels),
        "stages": [[s.num_blocks, s.channels, s.first_stride] for s in cfg.stages],
        "num_classes": cfg.num_classes,
        "resnorm_placement": cfg.resnorm_placement,
        "resnorm_lambda_init": cfg.resnorm_lambda_init,
        "bn_momentum": cfg.bn_momentum,
    }


def arch_from_dict(d: dict) -> ArchConfig:
    if isinstance(d, str):
        return REFERENCE_CONFIGS[d]
    if d.get("preset"):
        return REFERENCE_CONFIGS[d["preset"]]
    return ArchConfig(
        stem_channels=tuple(d["stem_channels"]),
        stages=tuple(StageSpec(*s) for s in d["stages"]),
        num_classes=d.get("num_classes", 10),
        resnorm_placement=d.get("resnorm_placement", "input"),
        resnorm_lambda_init=d.get("resnorm_lambda_init", 0.1),
        bn_momentum=d.get("bn_momentum", 0.1),
    )
