"""Full GAFM network, feature extractor and the VNN income head."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .blocks import GFFM, AuxBranch, Bottleneck
from .nn import BatchNorm2d, Conv2d, Linear, Module, ModuleList, init_params
from .tensor import ConfigError, ShapeError, Tensor

__all__ = [
    "GafmConfig",
    "GafmStage",
    "GafmNetwork",
    "FeatureExtractor",
    "Vnn",
    "network_forward",
    "to_feature_extractor",
    "vnn_forward",
    "parameter_census",
]


@dataclass
class GafmConfig:
    stem_width: int = 16
    widths: tuple = (16, 32, 64)
    blocks: tuple = (2, 2, 2)
    strides: tuple = (1, 2, 2)
    input_size: int = 64
    in_channels: int = 3
    se_ratio: int = 16

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)
        self.strides = tuple(int(s) for s in self.strides)
        if not (len(self.widths) == len(self.blocks) == len(self.strides)) or not self.widths:
            raise ConfigError("widths, blocks and strides must be non-empty and equally long")
        if min(self.blocks) < 1 or min(self.strides) < 1 or min(self.widths) < 1:
            raise ConfigError("widths, blocks and strides must be positive")

    @classmethod
    def tiny(cls) -> "GafmConfig":
        """One stage, width 8, 16x16 input: small enough for full gradient checks."""
        return cls(stem_width=8, widths=(8,), blocks=(1,), strides=(1,), input_size=16)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def total_stride(self) -> int:
        # stem conv (2) and max-pool (2), then each stage
        return 4 * int(np.prod(self.strides))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


class GafmStage(Module):
    """Main SE-bottleneck path and auxiliary branch, merged by one GFFM."""

    def __init__(self, in_ch: int, width: int, n_blocks: int, stride: int, se_ratio: int = 16):
        super().__init__()
        self.main = ModuleList(
            Bottleneck(in_ch if i == 0 else width, width, stride if i == 0 else 1, se_ratio)
            for i in range(n_blocks)
        )
        self.aux = AuxBranch(in_ch, width, stride)
        self.fusion = GFFM(width)

    def forward(self, x: Tensor, training: Optional[bool] = None) -> Tensor:
        tr = self._mode(training)
        f_main = x
        for block in self.main:
            f_main = block(f_main, tr)
        f_aux = self.aux(x, tr)
        return self.fusion(f_main, f_aux, tr)


class GafmNetwork(Module):
    """stem -> GAFM stages -> global average pool -> FC(1)."""

    def __init__(self, config: Optional[GafmConfig] = None, seed: int = 0):
        super().__init__()
        self.config = config = config or GafmConfig()
        self.stem_conv = Conv2d(config.in_channels, config.stem_width, 7, stride=2, padding=3)
        self.stem_bn = BatchNorm2d(config.stem_width)
        stages, in_ch = [], config.stem_width
        for width, n, s in zip(config.widths, config.blocks, config.strides):
            stages.append(GafmStage(in_ch, width, n, s, config.se_ratio))
            in_ch = width
        self.stages = ModuleList(stages)
        self.head = Linear(config.feature_dim, 1)
        init_params(self, seed)

    def check_input(self, images: Tensor) -> None:
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected N x {cfg.in_channels} x H x W images, got {images.shape}")
        step = cfg.total_stride
        for extent in images.shape[2:]:
            if extent < step or extent % step:
                raise ConfigError(
                    f"input size {images.shape[2:]} incompatible with total stride {step}"
                )

    def features(self, images: Tensor, training: Optional[bool] = None) -> Tensor:
        """Pooled output of the last GAFM stage, N x feature_dim."""
        tr = self._mode(training)
        self.check_input(images)
        h = ops.relu(self.stem_bn(self.stem_conv(images), tr))
        h = ops.max_pool2d(h, 3, 2, 1)
        for stage in self.stages:
            h = stage(h, tr)
        return ops.global_avg_pool(h)

    def forward(self, images: Tensor, training: Optional[bool] = None) -> Tensor:
        return self.head(self.features(images, training))


class FeatureExtractor(Module):
    """Headless view of a :class:`GafmNetwork`; shares its parameter tensors."""

    def __init__(self, net: GafmNetwork):
        super().__init__()
        self.config = net.config
        self.stem_conv = net.stem_conv
        self.stem_bn = net.stem_bn
        self.stages = net.stages
        object.__setattr__(self, "_net", net)
        object.__setattr__(self, "training", net.training)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def forward(self, images: Tensor, training: Optional[bool] = None) -> Tensor:
        return self._net.features(images, self._mode(training))


class Vnn(Module):
    """Three dense layers: relu(W1 f + b1) -> relu(W2 . + b2) -> W3 . + b3."""

    def __init__(self, in_features: int, hidden: Sequence[int] = (64, 32), seed: int = 0):
        super().__init__()
        h1, h2 = hidden
        self.in_features, self.hidden = in_features, (int(h1), int(h2))
        self.fc1 = Linear(in_features, h1)
        self.fc2 = Linear(h1, h2)
        self.fc3 = Linear(h2, 1)
        init_params(self, seed)

    def forward(self, features: Tensor, training: Optional[bool] = None) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self.in_features:
            raise ShapeError(f"VNN expects N x {self.in_features} features, got {features.shape}")
        h = ops.relu(self.fc1(features))
        h = ops.relu(self.fc2(h))
        return self.fc3(h)


def network_forward(net: GafmNetwork, images: Tensor, mode: str = "eval") -> Tensor:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return net(images, mode == "train")


def to_feature_extractor(net: GafmNetwork) -> FeatureExtractor:
    return FeatureExtractor(net)


def vnn_forward(v: Vnn, features: Tensor) -> Tensor:
    return v(features)


def parameter_census(module: Module) -> dict:
    """Names, total trainable scalars and buffer scalars of ``module``."""
    names = [n for n, _ in module.named_parameters()]
    buffers = [n for n, _ in module.named_buffers()]
    return {
        "parameters": names,
        "buffers": buffers,
        "n_parameters": int(sum(p.size for p in module.parameters())),
        "n_buffer_values": int(sum(b.size for _, b in module.named_buffers())),
    }
