"""The hybrid classifier: attention-augmented ResNet branch (GIM), Inception branch (LIM),
feature fusion, optimization layer and softmax head.

Both branches are built with their output shapes propagated block by block,
so an input size that cannot satisfy the architecture fails at build time
with the name of the first block that does not fit.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .attention import MHSA
from .nn import BatchNorm2d, Conv2d, ConvBN, Linear, Module, Pool, Shape, param_count
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

__all__ = [
    "BuildError",
    "ModelConfig",
    "GasHisTransformer",
    "build_gim",
    "build_lim",
    "optimization_layer",
    "quantize_fp16",
    "param_count",
]

PAPER_INPUT = 224
DESK_INPUT = 80
DESK_DIVISOR = 8

# name, repeats, bottleneck width, output channels, first stride
GIM_STAGES = (
    ("c2", 3, 64, 256, 1),
    ("c3", 4, 128, 512, 2),
    ("c4", 6, 256, 1024, 2),
    ("c5", 3, 512, 2048, 2),
)
LIM_REPEATS = {"A": 3, "B": 1, "C": 4, "D": 1, "E": 2}
LIM_C7_WIDTHS = (128, 160, 192)


class BuildError(ContractError):
    """The configured input size or widths cannot satisfy the architecture."""


@dataclass
class ModelConfig:
    """Architecture hyper-parameters.

    ``scale="paper"`` is the 224x224 network with full widths.  ``scale="desk"``
    divides every channel width by ``divisor``, halves stage/block repeats
    (rounding up) and defaults to an 80x80 input.
    """

    scale: str = "paper"
    classes: int = 2
    optimization: str = "dropout"
    p: float = 0.5
    dtype: str = "fp32"
    seed: int = 0
    input_size: int | None = None
    divisor: int | None = None
    heads: int = 4
    eq1_literal: bool = False
    dropconnect_samples: int = 16
    normalize_input: bool = True

    def __post_init__(self) -> None:
        if self.scale == "paper":
            self.input_size = PAPER_INPUT if self.input_size is None else self.input_size
            self.divisor = 1 if self.divisor is None else self.divisor
            if self.input_size != PAPER_INPUT or self.divisor != 1:
                raise ContractError("paper scale fixes input_size=224 and divisor=1")
        elif self.scale == "desk":
            self.input_size = DESK_INPUT if self.input_size is None else self.input_size
            self.divisor = DESK_DIVISOR if self.divisor is None else self.divisor
        else:
            raise ContractError(f"scale must be 'paper' or 'desk', got {self.scale!r}")
        if self.classes < 2:
            raise ContractError(f"classes must be >= 2, got {self.classes}")
        if self.optimization not in ("dropout", "dropconnect"):
            raise ContractError(f"optimization must be 'dropout' or 'dropconnect', got {self.optimization!r}")
        if not 0.0 <= self.p < 1.0:
            raise ContractError(f"p must lie in [0, 1), got {self.p}")
        if self.dtype not in T.DTYPES:
            raise ContractError(f"dtype must be one of {sorted(T.DTYPES)}, got {self.dtype!r}")
        if self.dropconnect_samples < 1:
            raise ContractError("dropconnect_samples must be >= 1")

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        return cls(scale="paper", **overrides)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(scale="desk", **overrides)

    @property
    def feature_dim(self) -> int:
        return 2 * self.width(2048)

    def width(self, n: int) -> int:
        if n % self.divisor:
            raise BuildError(f"channel width {n} is not divisible by divisor {self.divisor}")
        return n // self.divisor

    def repeats(self, n: int) -> int:
        return n if self.scale == "paper" else math.ceil(n / 2)

    @property
    def compute_dtype(self) -> str:
        return "fp64" if self.dtype == "fp64" else "fp32"

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------------
# generic containers
# ---------------------------------------------------------------------------------

class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)

    def out_shape(self, shape: Shape) -> Shape:
        return shape


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def out_shape(self, shape: Shape) -> Shape:
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape


class Branches(Module):
    """Parallel branches over the same input, concatenated along channels."""

    def __init__(self, *branches: Module):
        super().__init__()
        self.branches = list(branches)

    def forward(self, x: Tensor) -> Tensor:
        return T.concat([b(x) for b in self.branches], axis=1)

    def branch_shapes(self, shape: Shape) -> list[Shape]:
        return [b.out_shape(shape) for b in self.branches]

    def out_shape(self, shape: Shape) -> Shape:
        shapes = self.branch_shapes(shape)
        if len({s[1:] for s in shapes}) != 1:
            raise ContractError(f"branch spatial extents disagree: {shapes}")
        return sum(s[0] for s in shapes), shapes[0][1], shapes[0][2]


@dataclass
class Row:
    """One row of the shape contract: a labelled block and its output shape."""

    label: str
    module: Module
    shape: Shape = field(default=(0, 0, 0))


class Stack(Module):
    """Labelled blocks built in order with their shapes checked as they are added."""

    def __init__(self, in_shape: Shape):
        super().__init__()
        self.in_shape = in_shape
        self.blocks: list[Module] = []
        self._rows: list[Row] = []

    @property
    def shape(self) -> Shape:
        return self._rows[-1].shape if self._rows else self.in_shape

    def add(self, label: str, module: Module) -> Shape:
        try:
            out = module.out_shape(self.shape)
        except ContractError as exc:
            raise BuildError(f"block {label!r} cannot take input {self.shape}: {exc}") from exc
        self.blocks.append(module)
        self._rows.append(Row(label, module, out))
        return out

    @property
    def rows(self) -> list[Row]:
        return list(self._rows)

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        for row in self._rows:
            x = row.module(x)
            if trace is not None:
                trace.append((row.label, tuple(x.shape[1:])))
        return x

    def out_shape(self, shape: Shape) -> Shape:
        return self.shape


# ---------------------------------------------------------------------------------
# GIM
# ---------------------------------------------------------------------------------

class Bottleneck(Module):
    """1x1 reduce, 3x3 conv (or MHSA), 1x1 expand, plus the residual path."""

    def __init__(self, in_shape: Shape, width: int, cout: int, stride: int, *, mhsa: bool, cfg: ModelConfig, rng):
        super().__init__()
        cin, h, w = in_shape
        dt = cfg.dtype
        self.reduce = ConvBN(cin, width, 1, rng=rng, dtype=dt)
        if mhsa:
            layers: list[Module] = [MHSA(width, cfg.heads, (h, w), rng=rng, dtype=dt, eq1_literal=cfg.eq1_literal)]
            if stride == 2:
                layers.append(Pool("avg", 2, 2))
            layers += [BatchNorm2d(width, dtype=dt), ReLU()]
            self.spatial = Sequential(*layers)
        else:
            self.spatial = ConvBN(width, width, 3, stride, "same", rng=rng, dtype=dt)
        self.expand = ConvBN(width, cout, 1, rng=rng, dtype=dt, act=False)
        if stride == 1 and cin == cout:
            self.shortcut = None
        elif mhsa and stride == 2:
            # pool first so both paths floor odd extents the same way
            self.shortcut = Sequential(Pool("avg", 2, 2), ConvBN(cin, cout, 1, rng=rng, dtype=dt, act=False))
        else:
            self.shortcut = ConvBN(cin, cout, 1, stride, rng=rng, dtype=dt, act=False)
        self.uses_mhsa = mhsa

    def forward(self, x: Tensor) -> Tensor:
        y = self.expand(self.spatial(self.reduce(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return T.relu(y + skip)

    def out_shape(self, shape: Shape) -> Shape:
        main = self.expand.out_shape(self.spatial.out_shape(self.reduce.out_shape(shape)))
        skip = shape if self.shortcut is None else self.shortcut.out_shape(shape)
        if main != skip:
            raise ContractError(f"residual shapes differ: {main} vs {skip}")
        return main


def build_gim(cfg: ModelConfig, rng: np.random.Generator | None = None) -> Stack:
    """Stem (7x7 conv, BN, ReLU, max pool) and stages c2-c5; c5 uses MHSA in every block."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    dt = cfg.dtype
    stack = Stack((3, cfg.input_size, cfg.input_size))
    c1 = cfg.width(64)
    stack.add("Conv(7,7)", Conv2d(3, c1, 7, 2, "same", rng=rng, dtype=dt))
    stack.add("Batch Norm", BatchNorm2d(c1, dtype=dt))
    stack.add("ReLU Layer", ReLU())
    stack.add("Max Pooling", Pool("max", 3, 2, "same"))
    for name, reps, width, cout, stride in GIM_STAGES:
        blocks = Sequential()
        shape = stack.shape
        for i in range(cfg.repeats(reps)):
            block = Bottleneck(shape, cfg.width(width), cfg.width(cout), stride if i == 0 else 1,
                               mhsa=name == "c5", cfg=cfg, rng=rng)
            try:
                shape = block.out_shape(shape)
            except ContractError as exc:
                raise BuildError(f"block 'Stage {name}' #{i + 1} cannot take input {shape}: {exc}") from exc
            blocks.layers.append(block)
        stack.add(f"Stage {name}", blocks)
    return stack


# ---------------------------------------------------------------------------------
# LIM
# ---------------------------------------------------------------------------------

def _inception_a(cin: int, pool_features: int, cfg: ModelConfig, rng) -> Branches:
    w, dt = cfg.width, cfg.dtype

    def cb(a, b, k, s=1, pad="same"):
        return ConvBN(a, b, k, s, pad, rng=rng, dtype=dt)

    return Branches(
        Sequential(cb(cin, w(64), 1)),
        Sequential(cb(cin, w(48), 1), cb(w(48), w(64), 5)),
        Sequential(cb(cin, w(64), 1), cb(w(64), w(96), 3), cb(w(96), w(96), 3)),
        Sequential(Pool("avg", 3, 1, "same"), cb(cin, w(pool_features), 1)),
    )


def _grid_reduction_c(cin: int, cfg: ModelConfig, rng) -> Branches:
    w, dt = cfg.width, cfg.dtype

    def cb(a, b, k, s=1, pad="same"):
        return ConvBN(a, b, k, s, pad, rng=rng, dtype=dt)

    return Branches(
        Sequential(cb(cin, w(384), 3, 2, "valid")),
        Sequential(cb(cin, w(64), 1), cb(w(64), w(96), 3), cb(w(96), w(96), 3, 2, "valid")),
        Sequential(Pool("max", 3, 2, "valid")),
    )


def _inception_c(cin: int, c7: int, cfg: ModelConfig, rng) -> Branches:
    w, dt = cfg.width, cfg.dtype

    def cb(a, b, k, s=1, pad="same"):
        return ConvBN(a, b, k, s, pad, rng=rng, dtype=dt)

    m = w(c7)
    return Branches(
        Sequential(cb(cin, w(192), 1)),
        Sequential(cb(cin, m, 1), cb(m, m, (1, 7)), cb(m, w(192), (7, 1))),
        Sequential(cb(cin, m, 1), cb(m, m, (7, 1)), cb(m, m, (1, 7)), cb(m, m, (7, 1)), cb(m, w(192), (1, 7))),
        Sequential(Pool("avg", 3, 1, "same"), cb(cin, w(192), 1)),
    )


def _grid_reduction_d(cin: int, cfg: ModelConfig, rng) -> Branches:
    w, dt = cfg.width, cfg.dtype

    def cb(a, b, k, s=1, pad="same"):
        return ConvBN(a, b, k, s, pad, rng=rng, dtype=dt)

    return Branches(
        Sequential(cb(cin, w(192), 1), cb(w(192), w(160), 3, 2, "valid")),
        Sequential(cb(cin, w(192), 1), cb(w(192), w(192), (1, 7)), cb(w(192), w(192), (7, 1)),
                   cb(w(192), w(96), 3, 2, "valid")),
        Sequential(Pool("max", 3, 2, "valid")),
    )


def _inception_e(cin: int, cfg: ModelConfig, rng) -> Branches:
    w, dt = cfg.width, cfg.dtype

    def cb(a, b, k, s=1, pad="same"):
        return ConvBN(a, b, k, s, pad, rng=rng, dtype=dt)

    def split(c):
        return Branches(Sequential(cb(c, w(384), (1, 3))), Sequential(cb(c, w(384), (3, 1))))

    return Branches(
        Sequential(cb(cin, w(320), 1)),
        Sequential(cb(cin, w(384), 1), split(w(384))),
        Sequential(cb(cin, w(448), 1), cb(w(448), w(384), 3), split(w(384))),
        Sequential(Pool("avg", 3, 1, "same"), cb(cin, w(192), 1)),
    )


def build_lim(cfg: ModelConfig, rng: np.random.Generator | None = None) -> Stack:
    """Inception-style stem retargeted to 224x224, then blocks A, B, C, D, E."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    w, dt = cfg.width, cfg.dtype
    stack = Stack((3, cfg.input_size, cfg.input_size))
    stack.add("Conv(3,3)", ConvBN(3, w(32), 3, 2, "valid", rng=rng, dtype=dt))
    stack.add("Conv(3,3)", ConvBN(w(32), w(32), 3, 1, "valid", rng=rng, dtype=dt))
    stack.add("Conv(3,3)", ConvBN(w(32), w(64), 3, 1, "same", rng=rng, dtype=dt))
    stack.add("Max Pooling", Pool("max", 3, 2, "valid"))
    stack.add("Conv(1,1)", ConvBN(w(64), w(80), 1, rng=rng, dtype=dt))
    stack.add("Conv(3,3)", ConvBN(w(80), w(192), 3, 1, "valid", rng=rng, dtype=dt))
    stack.add("Max Pooling", Pool("max", 3, 2, "valid"))

    def group(label: str, makers) -> None:
        blocks = Sequential()
        shape = stack.shape
        for i, make in enumerate(makers):
            block = make(shape[0])
            try:
                shape = block.out_shape(shape)
            except ContractError as exc:
                raise BuildError(f"block {label!r} #{i + 1} cannot take input {shape}: {exc}") from exc
            blocks.layers.append(block)
        stack.add(label, blocks)

    n = cfg.repeats
    group("Inception A", [lambda c: _inception_a(c, 32, cfg, rng)] * n(LIM_REPEATS["A"]))
    group("Inception B", [lambda c: _inception_a(c, 64, cfg, rng)] * n(LIM_REPEATS["B"]))
    c_makers = [lambda c: _grid_reduction_c(c, cfg, rng)]
    c_makers += [lambda c, m=m: _inception_c(c, m, cfg, rng) for m in LIM_C7_WIDTHS[: n(LIM_REPEATS["C"]) - 1]]
    group("Inception C", c_makers)
    group("Inception D", [lambda c: _grid_reduction_d(c, cfg, rng)] * n(LIM_REPEATS["D"]))
    group("Inception E", [lambda c: _inception_e(c, cfg, rng)] * n(LIM_REPEATS["E"]))
    return stack


# ---------------------------------------------------------------------------------
# head
# ---------------------------------------------------------------------------------

def optimization_layer(
    features: Tensor,
    kind: str,
    mode: str,
    p: float,
    *,
    rng: np.random.Generator,
    weight: Tensor | None = None,
    bias: Tensor | None = None,
    samples: int = 16,
) -> Tensor:
    """Regularize the fused features before the classifier.

    ``dropout`` returns the (possibly dropped) features.  ``dropconnect`` acts
    on the weights of the following dense layer, so it needs ``weight`` and
    ``bias`` and returns that layer's pre-activations: in training a random
    weight mask, at evaluation the average of ``samples`` Gaussian draws
    matching the mean and variance of the masked pre-activation.
    """
    if not 0.0 <= p < 1.0:
        raise ContractError(f"p must lie in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    if kind == "dropout":
        return T.dropout(features, p, rng, training=mode == "train")
    if kind != "dropconnect":
        raise ContractError(f"unknown optimization layer {kind!r}")
    if weight is None or bias is None:
        raise ContractError("dropconnect needs the dense weight and bias it regularizes")
    if p == 0.0:
        return T.dense(features, weight, bias)
    ct = T.DTYPES["fp64" if features.dtype == "fp64" else "fp32"]
    keep = 1.0 - p
    if mode == "train":
        mask = Tensor((rng.random(weight.shape) < keep).astype(ct))
        return T.dense(features, weight * mask, bias)
    mean = T.matmul(features, weight) * keep
    var = T.matmul(features * features, weight * weight) * (keep * p)
    eps = rng.standard_normal((samples,) + mean.shape).mean(axis=0).astype(ct)
    noise = T.mul(T.power(var + 1e-12, 0.5), Tensor(eps))
    return T.add_bias(mean + noise, bias, axis=1)


class ClassifierHead(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.kind, self.p, self.samples, self.seed = cfg.optimization, cfg.p, cfg.dropconnect_samples, cfg.seed
        self.fc = Linear(cfg.feature_dim, cfg.classes, rng=rng, dtype=cfg.dtype)
        self._train_rng = np.random.default_rng([cfg.seed, 1])

    def forward(self, features: Tensor) -> Tensor:
        mode = "train" if self.training else "eval"
        # evaluation draws restart from the seed so inference is repeatable
        rng = self._train_rng if self.training else np.random.default_rng([self.seed, 2])
        if self.kind == "dropout":
            return self.fc(optimization_layer(features, "dropout", mode, self.p, rng=rng))
        return optimization_layer(features, "dropconnect", mode, self.p, rng=rng,
                                  weight=self.fc.weight, bias=self.fc.bias, samples=self.samples)


class ModelOutput(NamedTuple):
    probs: Tensor
    logits: Tensor
    features: Tensor | None


class GasHisTransformer(Module):
    """Two-branch classifier: ``softmax(head(GIM(x) ++ LIM(x)))``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.gim = build_gim(cfg, rng)
        self.lim = build_lim(cfg, rng)
        self.head = ClassifierHead(cfg, rng)

    def _input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.config.compute_dtype)
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ContractError(f"input must be [B, 3, {s}, {s}], got {x.shape}")
        return T.standardize(x) if self.config.normalize_input else x

    def branch_features(self, x, trace: list | None = None) -> tuple[Tensor, Tensor]:
        x = self._input(x)
        g_trace = [] if trace is not None else None
        l_trace = [] if trace is not None else None
        g = T.global_avg_pool(self.gim(x, g_trace))
        loc = T.global_avg_pool(self.lim(x, l_trace))
        if trace is not None:
            trace.append(("GIM", g_trace))
            trace.append(("LIM", l_trace))
        return g, loc

    def forward(self, x, with_features: bool = False) -> ModelOutput:
        g, loc = self.branch_features(x)
        fused = T.concat([g, loc], axis=1)
        logits = self.head(fused)
        return ModelOutput(T.softmax(logits), logits, fused if with_features else None)

    def logits(self, x) -> Tensor:
        return self.forward(x).logits

    def shape_trace(self, x) -> dict[str, list[tuple[str, tuple]]]:
        """Run one forward pass and return the per-block output shapes of both branches."""
        trace: list = []
        with T.no_grad():
            g, loc = self.branch_features(x, trace)
            fused = T.concat([g, loc], axis=1)
            logits = self.head(fused)
        out = dict(trace)
        out["fused"] = [("Fusion", tuple(fused.shape[1:]))]
        out["head"] = [("FC+Softmax", tuple(logits.shape[1:]))]
        return out

    @property
    def param_bytes(self) -> int:
        return int(sum(a.nbytes for a in self.state_dict().values()))


def quantize_fp16(model: GasHisTransformer) -> GasHisTransformer:
    """Copy ``model`` with every parameter and buffer stored as fp16.

    Values beyond the fp16 range saturate to +-65504; the number of such
    values is logged.  Arithmetic still runs in fp32.
    """
    if model.config.dtype != "fp32":
        raise ContractError(f"quantize_fp16 expects an fp32 model, got {model.config.dtype}")
    q = copy.deepcopy(model)
    q.config = _with_dtype(model.config)
    limit = float(np.finfo(np.float16).max)
    saturated = 0
    for p in q.parameters():
        saturated += int(np.count_nonzero(np.abs(p.data) > limit))
        p.data = np.clip(p.data, -limit, limit).astype(np.float16)
        p.grad = None
    for m in q.modules():
        for name, buf in list(m._buffers.items()):
            saturated += int(np.count_nonzero(np.abs(buf) > limit))
            m._buffers[name] = np.clip(buf, -limit, limit).astype(np.float16)
    if saturated:
        log.warning("quantize_fp16: %d values saturated to the fp16 range", saturated)
    q.saturated_count = saturated
    return q


def _with_dtype(cfg: ModelConfig) -> ModelConfig:
    d = cfg.to_dict()
    d["dtype"] = "fp16"
    return ModelConfig(**d)
