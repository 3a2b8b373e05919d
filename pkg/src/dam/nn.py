"""Parameter containers and the handful of layers the model is built from."""

from __future__ import annotations

from math import gcd

import numpy as np

from . import functional as F
from .rng import CounterRNG
from .tensor import Tensor, relu


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)


class Module:
    """Walks attributes in definition order to name parameters and buffers."""

    buffer_names: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def learnable(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        """Cast parameters and buffers in place (float64 is for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        for name in self.buffer_names:
            setattr(self, name, getattr(self, name).astype(dtype))
        for _, child in self._children():
            child._cast_buffers(dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.named_parameters()}
        out.update({n: b for n, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in own.items():
            src = np.asarray(state[name])
            if src.shape != p.shape:
                raise ValueError(f"{name}: shape {src.shape} != {p.shape}")
            p.data = src.astype(p.dtype).copy()
        for name, b in bufs.items():
            np.copyto(b, np.asarray(state[name]).reshape(b.shape))


def he_normal(rng: CounterRNG, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng: CounterRNG, stride=1, pad=None, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(he_normal(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, pad=self.pad, stride=self.stride)


class Conv3d(Module):
    def __init__(self, cin, cout, kernel: tuple[int, int, int], rng: CounterRNG, dtype=np.float32):
        super().__init__()
        fan_in = cin * int(np.prod(kernel))
        self.weight = Parameter(he_normal(rng, (cout, cin) + tuple(kernel), fan_in, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias, pad="same")


class BatchNorm(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.groups = groups
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.groupnorm(x, self.groups, self.gamma, self.beta, self.eps)


class ConvBlock(Module):
    """conv2d -> groupnorm -> relu.

    The group count falls back to ``gcd(groups, cout)`` so narrow layers
    (e.g. 2 channels) remain valid.
    """

    def __init__(self, cin, cout, k, rng: CounterRNG, groups=4, stride=1, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, dtype=dtype)
        self.norm = GroupNorm(cout, gcd(groups, cout), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.norm(self.conv(x)))
