"""Parameter containers and the plain layers the blocks are built from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Mapping, Optional

import numpy as np

from . import ops
from .tensor import ConfigError, Tensor, default_dtype

__all__ = [
    "Module",
    "ModuleList",
    "ParamSet",
    "Conv2d",
    "BatchNorm2d",
    "Linear",
    "he_normal",
    "init_params",
]


class ParamSet(OrderedDict):
    """Ordered ``name -> array`` mapping, plus free-form ``meta``."""

    def __init__(self, *args, meta: Optional[dict] = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.meta = dict(meta or {})


def he_normal(shape: tuple, rng: np.random.Generator, fan_in: Optional[int] = None) -> np.ndarray:
    """Normal(0, sqrt(2 / fan_in)); fan_in defaults to prod(shape[1:])."""
    if fan_in is None:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Module:
    """Tracks tensors (parameters), numpy buffers and child modules in insertion order."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _mode(self, training: Optional[bool]) -> bool:
        return self.training if training is None else training

    # -- traversal --------------------------------------------------------
    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- state ------------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> ParamSet:
        state = ParamSet()
        for name, p in self.named_parameters():
            state[name] = p.data.copy()
        for name, b in self.named_buffers():
            state[name] = b.copy()
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        expected = set(own) | set(bufs)
        missing, extra = expected - set(state), set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in state.items():
            target = own[name].data if name in own else bufs[name]
            if target.shape != np.shape(arr):
                raise ValueError(f"{name}: shape {np.shape(arr)} does not match {target.shape}")
        for name, arr in state.items():
            target = own[name].data if name in own else bufs[name]
            target[...] = arr

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer in place to ``dtype``."""
        for m in self.modules():
            for name, p in m._params.items():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, b in list(m._buffers.items()):
                m.register_buffer(name, b.astype(dtype))
        return self

    def reset_parameters(self, rng: np.random.Generator) -> None:
        """Layers with weights override this; containers do nothing."""


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items: list[Module] = []
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _param(shape: tuple) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = False):
        super().__init__()
        if min(in_ch, out_ch, kernel, stride) < 1:
            raise ConfigError(f"Conv2d({in_ch}, {out_ch}, k={kernel}, s={stride}) is not valid")
        self.stride, self.padding = stride, padding
        self.weight = _param((out_ch, in_ch, kernel, kernel))
        self.bias = _param((out_ch,)) if bias else None

    def reset_parameters(self, rng):
        self.weight.data[...] = he_normal(self.weight.shape, rng)
        if self.bias is not None:
            self.bias.data[...] = 0.0

    def forward(self, x: Tensor, training: Optional[bool] = None) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, truncate=True)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = _param((channels,))
        self.beta = _param((channels,))
        self.gamma.data[...] = 1.0
        dt = default_dtype()
        self.register_buffer("running_mean", np.zeros(channels, dtype=dt))
        self.register_buffer("running_var", np.ones(channels, dtype=dt))

    def reset_parameters(self, rng):
        self.gamma.data[...] = 1.0
        self.beta.data[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def forward(self, x: Tensor, training: Optional[bool] = None) -> Tensor:
        mode = "train" if self._mode(training) else "eval"
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               mode=mode, eps=self.eps, momentum=self.momentum)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.weight = _param((out_features, in_features))
        self.bias = _param((out_features,)) if bias else None

    def reset_parameters(self, rng):
        self.weight.data[...] = he_normal(self.weight.shape, rng)
        if self.bias is not None:
            self.bias.data[...] = 0.0

    def forward(self, x: Tensor, training: Optional[bool] = None) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)


def init_params(module: Module, seed: int) -> Module:
    """Deterministically (re)initialize every layer of ``module`` from ``seed``.

    Conv and FC weights are He-normal by fan-in, biases zero, BN gamma one and
    beta zero. Layers draw from one generator in traversal order.
    """
    rng = np.random.default_rng(seed)
    for m in module.modules():
        m.reset_parameters(rng)
    return module
