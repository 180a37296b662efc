"""Layers and containers built on :mod:`cacc.tensor`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LAYER_KINDS = (
    "conv2d",
    "maxpool2",
    "upsample2",
    "relu",
    "sigmoid",
    "softmax2",
    "global-avg-pool",
    "grad-reverse",
    "linear",
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 3
    stride: int = 1
    padding: int | None = None
    grl_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.kernel_size % 2 != 1:
                raise ValueError("conv2d kernel size must be odd")
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError("conv2d needs positive channel counts")
        if self.kind == "linear" and (self.in_channels < 1 or self.out_channels < 1):
            raise ValueError("linear needs positive feature counts")
        if self.kind == "grad-reverse" and not self.grl_scale > 0:
            raise ValueError("grad-reverse scale must be positive")


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=T.DEFAULT_DTYPE):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class; parameters are discovered from attributes."""

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel_size
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Tensor(
            glorot_uniform(rng, (out_channels, in_channels, k, k), in_channels * k * k, out_channels * k * k),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=T.DEFAULT_DTYPE), requires_grad=True)

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(glorot_uniform(rng, (in_features, out_features), in_features, out_features),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=T.DEFAULT_DTYPE), requires_grad=True)

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class GradReverse(Module):
    def __init__(self, scale=1.0):
        if not scale > 0:
            raise ValueError("gradient reversal scale must be positive")
        self.scale = scale

    def forward(self, x):
        return T.grad_reverse(x, self.scale)


class _Fn(Module):
    def __init__(self, fn):
        self.fn = fn

    def forward(self, x):
        return self.fn(x)


def ReLU():
    return _Fn(T.relu)


def Sigmoid():
    return _Fn(T.sigmoid)


def MaxPool2():
    return _Fn(T.maxpool2)


def Upsample2():
    return _Fn(T.upsample2)


def GlobalAvgPool():
    return _Fn(T.global_avg_pool)


def Softmax2():
    return _Fn(T.softmax2)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def build_layer(spec: LayerSpec, rng=None) -> Module:
    """Instantiate the layer described by ``spec``."""
    if spec.kind == "conv2d":
        return Conv2d(spec.in_channels, spec.out_channels, spec.kernel_size, spec.stride, spec.padding, rng)
    if spec.kind == "linear":
        return Linear(spec.in_channels, spec.out_channels, rng)
    if spec.kind == "grad-reverse":
        return GradReverse(spec.grl_scale)
    return {
        "maxpool2": MaxPool2,
        "upsample2": Upsample2,
        "relu": ReLU,
        "sigmoid": Sigmoid,
        "softmax2": Softmax2,
        "global-avg-pool": GlobalAvgPool,
    }[spec.kind]()


def forward(layer: Module, x: Tensor) -> Tensor:
    return layer(x)
