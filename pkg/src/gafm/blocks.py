"""GAFM building blocks: SE recalibration, SE-bottleneck, auxiliary branch, gated fusion."""

from __future__ import annotations

from typing import Optional

from . import ops
from .nn import BatchNorm2d, Conv2d, Module, _param, he_normal
from .tensor import ConfigError, ShapeError, Tensor

__all__ = [
    "FusionError",
    "SEBlock",
    "Bottleneck",
    "AuxBranch",
    "GFFM",
    "se_reduction",
    "se_forward",
    "bottleneck_forward",
    "aux_forward",
    "gffm_fuse",
]


class FusionError(ShapeError):
    """Main and auxiliary feature maps cannot be fused."""


def se_reduction(channels: int, ratio: int = 16, min_hidden: int = 4) -> int:
    """Largest r <= ratio dividing ``channels`` with channels / r >= min_hidden (r >= 1)."""
    r = max(1, min(ratio, channels // min_hidden))
    while channels % r:
        r -= 1
    return r


def _training(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


class SEBlock(Module):
    """Squeeze-and-excitation: per-channel sigmoid scales from pooled statistics.

    ``reduce_weight`` is (C/r, C) and ``expand_weight`` is (C, C/r); both act as
    bias-free dense layers on the N x C pooled vector.
    """

    def __init__(self, channels: int, reduction: Optional[int] = None):
        super().__init__()
        r = se_reduction(channels) if reduction is None else int(reduction)
        if r < 1 or channels % r:
            raise ConfigError(f"SE reduction ratio {r} must divide channel count {channels}")
        self.channels, self.reduction = channels, r
        hidden = channels // r
        self.reduce_weight = _param((hidden, channels))
        self.expand_weight = _param((channels, hidden))

    def reset_parameters(self, rng):
        self.reduce_weight.data[...] = he_normal(self.reduce_weight.shape, rng)
        self.expand_weight.data[...] = he_normal(self.expand_weight.shape, rng)

    def scales(self, f_b: Tensor) -> Tensor:
        """N x C recalibration factors, each in (0, 1)."""
        squeezed = ops.global_avg_pool(f_b)
        hidden = ops.relu(ops.fully_connected(squeezed, self.reduce_weight))
        return ops.sigmoid(ops.fully_connected(hidden, self.expand_weight))

    def forward(self, f_b: Tensor, training: Optional[bool] = None) -> Tensor:
        if f_b.ndim != 4 or f_b.shape[1] != self.channels:
            raise ShapeError(f"SE block for {self.channels} channels got input {f_b.shape}")
        s = self.scales(f_b)
        return ops.mul(f_b, ops.reshape(s, (s.shape[0], s.shape[1], 1, 1)))


class Bottleneck(Module):
    """1x1 reduce -> 3x3 (strided) -> 1x1 expand, each with BN; SE on the expand output.

    Identity shortcut when shapes match, otherwise a 1x1 conv + BN projection.
    """

    expansion = 4

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, se_ratio: int = 16):
        super().__init__()
        mid = max(out_ch // self.expansion, 1)
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.conv1 = Conv2d(in_ch, mid, 1)
        self.bn1 = BatchNorm2d(mid)
        self.conv2 = Conv2d(mid, mid, 3, stride=stride, padding=1)
        self.bn2 = BatchNorm2d(mid)
        self.conv3 = Conv2d(mid, out_ch, 1)
        self.bn3 = BatchNorm2d(out_ch)
        self.se = SEBlock(out_ch, se_reduction(out_ch, se_ratio))
        if stride > 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, stride=stride)
            self.proj_bn = BatchNorm2d(out_ch)
        else:
            self.proj = None

    def shortcut(self, x: Tensor, training: bool) -> Tensor:
        if self.proj is None:
            return x
        return self.proj_bn(self.proj(x), training)

    def forward(self, x: Tensor, training: Optional[bool] = None) -> Tensor:
        tr = self._mode(training)
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"bottleneck expects {self.in_ch} input channels, got {x.shape}")
        h = ops.relu(self.bn1(self.conv1(x), tr))
        h = ops.relu(self.bn2(self.conv2(h), tr))
        f_b = self.bn3(self.conv3(h), tr)
        return ops.relu(ops.add(self.shortcut(x, tr), self.se(f_b)))


class AuxBranch(Module):
    """Single 3x3 conv + BN + ReLU; stride matches the paired main stage."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.in_ch, self.stride = in_ch, stride
        self.conv = Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor, training: Optional[bool] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"aux branch expects {self.in_ch} input channels, got {x.shape}")
        return ops.relu(self.bn(self.conv(x), self._mode(training)))


class GFFM(Module):
    """Gated feature fusion of main and auxiliary maps.

    gate = sigmoid(W_m * [main, aux]); mixed = W_a * [main, aux];
    out = W_g * (gate * main + (1 - gate) * mixed). All three are 1x1 convs with bias.
    """

    def __init__(self, channels: int, out_channels: Optional[int] = None):
        super().__init__()
        out_channels = channels if out_channels is None else out_channels
        self.channels = channels
        self.gate_conv = Conv2d(2 * channels, channels, 1, bias=True)
        self.mix_conv = Conv2d(2 * channels, channels, 1, bias=True)
        self.out_conv = Conv2d(channels, out_channels, 1, bias=True)

    def _check(self, f_main: Tensor, f_aux: Tensor) -> None:
        if f_main.shape != f_aux.shape:
            raise FusionError(f"cannot fuse main {f_main.shape} with aux {f_aux.shape}")
        if f_main.shape[1] != self.channels:
            raise FusionError(f"fusion configured for {self.channels} channels, got {f_main.shape}")

    def gate(self, f_main: Tensor, f_aux: Tensor) -> Tensor:
        self._check(f_main, f_aux)
        return ops.sigmoid(self.gate_conv(ops.concat_channels(f_main, f_aux)))

    def forward(self, f_main: Tensor, f_aux: Tensor, training: Optional[bool] = None) -> Tensor:
        self._check(f_main, f_aux)
        cat = ops.concat_channels(f_main, f_aux)
        f_m = ops.sigmoid(self.gate_conv(cat))
        mixed = self.mix_conv(cat)
        fused = ops.add(ops.mul(f_m, f_main), ops.mul(ops.one_minus(f_m), mixed))
        return self.out_conv(fused)


def se_forward(block: SEBlock, f_b: Tensor) -> Tensor:
    return block(f_b)


def bottleneck_forward(block: Bottleneck, x: Tensor, mode: str = "train") -> Tensor:
    return block(x, _training(mode))


def aux_forward(branch: AuxBranch, x: Tensor, mode: str = "train") -> Tensor:
    return branch(x, _training(mode))


def gffm_fuse(g: GFFM, f_main: Tensor, f_aux: Tensor, mode: str = "train") -> Tensor:
    return g(f_main, f_aux, _training(mode))
