"""Parameter containers and the basic layers the two branches are assembled from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

Shape = tuple[int, int, int]  # (C, H, W) of one sample


class Module:
    """Base class: discovers parameters, buffers and submodules from attributes."""

    training: bool = True

    def __init__(self) -> None:
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item
            else:
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ContractError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ContractError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name])
        for name, buf in buffers.items():
            if state[name].shape != buf.shape:
                raise ContractError(f"{name}: shape {state[name].shape} != {buf.shape}")
            self._buffer_owner(name)._buffers[name.rsplit(".", 1)[-1]] = np.array(state[name])

    def _buffer_owner(self, dotted: str) -> "Module":
        owner: object = self
        for part in dotted.split(".")[:-1]:
            owner = owner[int(part)] if isinstance(owner, (list, tuple)) else getattr(owner, part)
        assert isinstance(owner, Module)
        return owner

    def out_shape(self, shape: Shape) -> Shape:
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param_count(module: Module) -> int:
    """Exact number of learnable scalars in ``module``."""
    return int(sum(p.size for p in module.parameters()))


def _pair(k) -> tuple[int, int]:
    return (k, k) if isinstance(k, int) else (int(k[0]), int(k[1]))


def parameter(data: np.ndarray, dtype: str) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding="valid", *, rng, dtype="fp32", bias=False):
        super().__init__()
        kh, kw = _pair(kernel)
        self.cin, self.cout, self.kernel, self.stride, self.padding = cin, cout, (kh, kw), stride, padding
        std = np.sqrt(2.0 / (cin * kh * kw))
        self.weight = parameter(rng.normal(0.0, std, size=(cout, cin, kh, kw)), dtype)
        self.bias = parameter(np.zeros(cout), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.stride, self.padding)
        return y if self.bias is None else T.add_bias(y, self.bias, axis=1)

    def out_shape(self, shape: Shape) -> Shape:
        c, h, w = shape
        if c != self.cin:
            raise ContractError(f"expects {self.cin} input channels, got {c}")
        ho, wo = T.conv_output_shape((h, w), self.kernel, self.stride, self.padding)
        return self.cout, ho, wo


class BatchNorm2d(Module):
    def __init__(self, channels: int, *, dtype="fp32", momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.weight = parameter(np.ones(channels), dtype)
        self.bias = parameter(np.zeros(channels), dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=T.DTYPES[dtype]))
        self.register_buffer("running_var", np.ones(channels, dtype=T.DTYPES[dtype]))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm(
            x, self.weight, self.bias, self._buffers["running_mean"], self._buffers["running_var"],
            self.training, self.momentum, self.eps,
        )

    def out_shape(self, shape: Shape) -> Shape:
        if shape[0] != self.channels:
            raise ContractError(f"expects {self.channels} channels, got {shape[0]}")
        return shape


class Linear(Module):
    def __init__(self, din: int, dout: int, *, rng, dtype="fp32"):
        super().__init__()
        bound = 1.0 / np.sqrt(din)
        self.weight = parameter(rng.uniform(-bound, bound, size=(din, dout)), dtype)
        self.bias = parameter(np.zeros(dout), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)


class ConvBN(Module):
    """Convolution, batch norm and (optionally) ReLU."""

    def __init__(self, cin, cout, kernel, stride=1, padding="valid", *, rng, dtype="fp32", act=True):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, stride, padding, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)
        self.act = act

    @property
    def cout(self) -> int:
        return self.conv.cout

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return T.relu(y) if self.act else y

    def out_shape(self, shape: Shape) -> Shape:
        return self.conv.out_shape(shape)


class Pool(Module):
    def __init__(self, kind: str, k: int, stride: int, padding="valid"):
        super().__init__()
        self.kind, self.k, self.stride, self.padding = kind, k, stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return T.pool2d(x, self.kind, self.k, self.stride, self.padding)

    def out_shape(self, shape: Shape) -> Shape:
        c, h, w = shape
        ho, wo = T.conv_output_shape((h, w), (self.k, self.k), self.stride, self.padding)
        return c, ho, wo
