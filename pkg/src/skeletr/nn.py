"""Parameter containers and basic layers on top of :mod:`skeletr.tensor`."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=T.get_default_dtype()), requires_grad=True, name=name)


class Module:
    training: bool = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def _children(self):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (Module, Parameter)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{key}.{i}", item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, (Module, Parameter)):
                        yield f"{key}.{k}", item

    def named_parameters(self, prefix: str = ""):
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield full, child
            else:
                yield from child.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, buf in self._buffers.items():
            yield f"{prefix}{name}", buf
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: b.copy() for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0) -> np.ndarray:
    bound = scale / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, scale: float = 1.0):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(uniform_init(rng, (in_features, out_features), in_features, scale))
        self.bias = Parameter(uniform_init(rng, (out_features,), in_features, scale)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)

    def macs(self, n_rows: int) -> int:
        return n_rows * self.in_features * self.out_features


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm(Module):
    """Per-channel normalization over all leading axes (channels-last)."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        dtype = T.get_default_dtype()
        self.register_buffer("running_mean", np.zeros(dim, dtype=dtype))
        self.register_buffer("running_var", np.ones(dim, dtype=dtype))

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training, self.momentum, self.eps)


class TemporalConv(Module):
    """Convolution along the time axis of ``(N, T, V, C)`` features."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel: int = 1,
                 stride: int = 1, dilation: int = 1, bias: bool = True):
        super().__init__()
        self.kernel, self.stride, self.dilation = kernel, stride, dilation
        self.padding = (kernel + (kernel - 1) * (dilation - 1) - 1) // 2
        fan_in = in_channels * kernel
        self.weight = Parameter(uniform_init(rng, (kernel, in_channels, out_channels), fan_in))
        self.bias = Parameter(uniform_init(rng, (out_channels,), fan_in)) if bias else None

    def forward(self, x):
        return T.conv_time(x, self.weight, self.bias, self.stride, self.dilation, self.padding)

    def out_length(self, t: int) -> int:
        return (t + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) // self.stride + 1
