"""Module containers and the basic layers the network is assembled from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .ops import ConvSpec
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Base class: tracks child modules, parameters and buffers by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = name
        object.__setattr__(self, name, value)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            if child is None:
                continue
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for name in mod._buffers:
                yield (f"{mod_name}.{name}" if mod_name else name), getattr(mod, name)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for mod_name, mod in self.named_modules():
            for name, p in mod._params.items():
                key = f"{mod_name}.{name}" if mod_name else name
                p.data = np.array(state[key], dtype=p.dtype).reshape(p.shape)
            for name in mod._buffers:
                key = f"{mod_name}.{name}" if mod_name else name
                buf = getattr(mod, name)
                buf[...] = np.asarray(state[key], dtype=buf.dtype).reshape(buf.shape)

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for _, mod in self.named_modules():
            for p in mod._params.values():
                p.data = p.data.astype(dtype)
            for name in mod._buffers:
                object.__setattr__(mod, name, getattr(mod, name).astype(dtype))
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def kaiming_uniform(shape: tuple, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 1,
        *,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        groups: int = 1,
        bias: bool = True,
        transposed: bool = False,
    ):
        super().__init__()
        self.spec = ConvSpec(in_channels, out_channels, kernel, stride, padding, dilation, groups, transposed)
        shape = self.spec.weight_shape
        fan_in = (in_channels // groups) * kernel * kernel
        if transposed:
            fan_in = shape[0] * kernel * kernel // (stride * stride)
        self.weight = Parameter(kaiming_uniform(shape, max(fan_in, 1), rng))
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm2d(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.eps, self.momentum,
        )


class PReLU(Module):
    def __init__(self, init: float = 0.25):
        super().__init__()
        self.weight = Parameter(np.array([init], dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.prelu(x, self.weight)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.p, self.rng, self.training)


class DSConv(Module):
    """Depthwise KxK filter, pointwise 1x1 projection, BN, ReLU6."""

    def __init__(self, in_channels: int, out_channels: int, *, rng, kernel: int = 3, dilation: int = 1):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.depthwise = Conv2d(in_channels, in_channels, kernel, rng=rng, padding=pad,
                                dilation=dilation, groups=in_channels)
        self.pointwise = Conv2d(in_channels, out_channels, 1, rng=rng)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu6(self.bn(self.pointwise(self.depthwise(x))))


class DoubleConv(Module):
    """Two DSConv units, each followed by an optional attention module."""

    def __init__(self, in_channels: int, out_channels: int, *, rng, dilation: int = 1, attention=None):
        super().__init__()
        self.dsc1 = DSConv(in_channels, out_channels, rng=rng, dilation=dilation)
        self.att1 = attention(out_channels) if attention else None
        self.dsc2 = DSConv(out_channels, out_channels, rng=rng, dilation=dilation)
        self.att2 = attention(out_channels) if attention else None

    def forward(self, x: Tensor) -> Tensor:
        x = self.dsc1(x)
        if self.att1 is not None:
            x = self.att1(x)
        x = self.dsc2(x)
        if self.att2 is not None:
            x = self.att2(x)
        return x


def dsc_param_count(k: int, c_in: int, c_out: int, bias: bool = True) -> int:
    """Parameters of a depthwise + pointwise pair (no BN)."""
    return k * k * c_in + c_in * c_out + ((c_in + c_out) if bias else 0)


def conv_param_count(k: int, c_in: int, c_out: int, bias: bool = True) -> int:
    return k * k * c_in * c_out + (c_out if bias else 0)
