"""Lightweight parameter-owning module system.

Modules register parameters and submodules by attribute assignment, giving
every parameter a unique dotted name path (e.g. "sdtb1.sdca.q_linear.weight").
"""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import DimensionError, Tensor, default_dtype

__all__ = [
    "Module",
    "Parameter",
    "Linear",
    "Conv2d",
    "LayerNormChannels",
    "BatchNorm2d",
    "trunc_normal",
]


def Parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled into [-2 std, 2 std]."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(default_dtype())


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield (prefix + name, b)
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters plus buffers, keyed by dotted path."""
        state = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state["buffer." + name] = b
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            arr = state[name]
            if arr.shape != p.data.shape:
                raise DimensionError(f"shape mismatch loading {name}")
            p.data = arr.astype(p.data.dtype)
        for name, b in self.named_buffers():
            b[...] = state["buffer." + name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (out_features, in_features), std))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int,
                 rng: np.random.Generator, *, stride: int = 1, pad: int = 0,
                 groups: int = 1, std: float = 0.02, zero_init: bool = False):
        super().__init__()
        shape = (out_ch, in_ch // groups, k, k)
        if zero_init:
            self.weight = Parameter(np.zeros(shape))
        else:
            self.weight = Parameter(trunc_normal(rng, shape, std))
        self.bias = Parameter(np.zeros(out_ch))
        self.stride = stride
        self.pad = pad
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          pad=self.pad, groups=self.groups)


class LayerNormChannels(Module):
    """LayerNorm over the channel axis of NCHW feature maps."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.gain = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, 1, self.gain, self.bias, eps=self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float64))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float64))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm2d(x, self.gain, self.bias, self.running_mean,
                                self.running_var, self.momentum, self.training,
                                eps=self.eps)
