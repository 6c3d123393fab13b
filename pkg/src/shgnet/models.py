"""Residual network family (basic and bottleneck blocks) with a two-layer head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .autodiff import Tensor, global_avg_pool, maxpool2d, relu
from .errors import ConfigError
from .nn import BatchNorm2d, Conv2d, Dropout, Linear, Module

Hook = Callable[[Tensor], Tensor]

# depth -> (blocks per stage, bottleneck)
DEPTH_PRESETS = {
    18: ((2, 2, 2, 2), False),
    34: ((3, 4, 6, 3), False),
    50: ((3, 4, 6, 3), True),
}
FREEZE_MODES = ("full", "frozen_backbone")


@dataclass
class ModelConfig:
    """Shape of a residual network.

    ``block_counts`` lists blocks per stage; stage ``s`` has width
    ``base_width * 2**s`` (times 4 at the output of bottleneck blocks) and
    every stage after the first halves the spatial size.
    """

    block_counts: tuple[int, ...] = (2, 2, 2, 2)
    base_width: int = 16
    num_classes: int = 3
    head_hidden: int = 512
    head_dropout: float = 0.1
    input_channels: int = 3
    bottleneck: bool = False
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_pool: bool = False
    input_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.block_counts = tuple(int(b) for b in self.block_counts)
        if not self.block_counts or min(self.block_counts) < 1:
            raise ConfigError(f"block_counts must be non-empty positive, got {self.block_counts}")
        if self.base_width < 4:
            raise ConfigError(f"base_width must be >= 4, got {self.base_width}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not 0 <= self.head_dropout < 1:
            raise ConfigError(f"head_dropout must lie in [0, 1), got {self.head_dropout}")
        if self.head_hidden < 1 or self.input_channels < 1:
            raise ConfigError("head_hidden and input_channels must be positive")

    @classmethod
    def from_depth(cls, depth: int, **overrides) -> "ModelConfig":
        if depth not in DEPTH_PRESETS:
            raise ConfigError(f"unknown depth {depth}; choose from {sorted(DEPTH_PRESETS)}")
        blocks, bottleneck = DEPTH_PRESETS[depth]
        return cls(block_counts=blocks, bottleneck=bottleneck, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_counts"] = list(self.block_counts)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))

    @property
    def expansion(self) -> int:
        return 4 if self.bottleneck else 1

    @property
    def feature_dim(self) -> int:
        return self.base_width * 2 ** (len(self.block_counts) - 1) * self.expansion


class BasicBlock(Module):
    """conv3x3-bn-relu-conv3x3-bn plus identity/projection shortcut, then relu."""

    def __init__(self, in_ch: int, width: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_ch, width, 3, stride, 1, rng=rng)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, 1, 1, rng=rng)
        self.bn2 = BatchNorm2d(width)
        self.shortcut = None
        if stride != 1 or in_ch != width:
            self.shortcut = Conv2d(in_ch, width, 1, stride, 0, rng=rng)
            self.shortcut_bn = BatchNorm2d(width)
        self.out_ch = width

    def forward(self, x: Tensor) -> Tensor:
        out = relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return relu(out + skip)


class Bottleneck(Module):
    """1x1 reduce, 3x3, 1x1 expand (x4) with shortcut."""

    def __init__(self, in_ch: int, width: int, stride: int, rng: np.random.Generator):
        super().__init__()
        out_ch = width * 4
        self.conv1 = Conv2d(in_ch, width, 1, 1, 0, rng=rng)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, stride, 1, rng=rng)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, out_ch, 1, 1, 0, rng=rng)
        self.bn3 = BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(in_ch, out_ch, 1, stride, 0, rng=rng)
            self.shortcut_bn = BatchNorm2d(out_ch)
        self.out_ch = out_ch

    def forward(self, x: Tensor) -> Tensor:
        out = relu(self.bn1(self.conv1(x)))
        out = relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        skip = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return relu(out + skip)


class Head(Module):
    """linear -> relu -> dropout -> linear."""

    def __init__(self, in_features: int, hidden: int, num_classes: int, p: float,
                 rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(in_features, hidden, rng=rng)
        self.drop = Dropout(p, rng=np.random.default_rng(rng.integers(2 ** 63)))
        self.fc2 = Linear(hidden, num_classes, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.drop(relu(self.fc1(x))))


class ResNet(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        w = config.base_width
        self.stem = Conv2d(config.input_channels, w, config.stem_kernel, config.stem_stride,
                           config.stem_kernel // 2, rng=rng)
        self.stem_bn = BatchNorm2d(w)
        block_cls = Bottleneck if config.bottleneck else BasicBlock
        in_ch = w
        self.stages: list[list[Module]] = []
        for s, n_blocks in enumerate(config.block_counts):
            stage = []
            for b in range(n_blocks):
                stride = 2 if (s > 0 and b == 0) else 1
                block = block_cls(in_ch, w * 2 ** s, stride, rng)
                self.add_module(f"stage{s + 1}.{b}", block)
                in_ch = block.out_ch
                stage.append(block)
            self.stages.append(stage)
        self.head = Head(in_ch, config.head_hidden, config.num_classes, config.head_dropout, rng)
        self.freeze_mode = "full"

    def layer_ids(self) -> list[str]:
        """Hookable activation names, shallow to deep. ``stageN`` aliases its last block."""
        ids = ["stem"]
        for s, stage in enumerate(self.stages, start=1):
            ids += [f"stage{s}.{b}" for b in range(len(stage))] + [f"stage{s}"]
        return ids

    @property
    def default_cam_layer(self) -> str:
        return f"stage{len(self.stages)}"

    def features(self, x: Tensor, hooks: Optional[Mapping[str, Hook]] = None) -> Tensor:
        """Backbone forward pass up to the pooled ``[N, feature_dim]`` vector."""
        hooks = hooks or {}
        unknown = set(hooks) - set(self.layer_ids())
        if unknown:
            raise KeyError(f"unknown layer id(s) {sorted(unknown)}; choose from {self.layer_ids()}")

        def tap(name, t):
            return hooks[name](t) if name in hooks else t

        h = tap("stem", relu(self.stem_bn(self.stem(x))))
        if self.config.stem_pool:
            h = maxpool2d(h, 3, 2, padding=1)
        for s, stage in enumerate(self.stages, start=1):
            for b, block in enumerate(stage):
                h = tap(f"stage{s}.{b}", block(h))
            h = tap(f"stage{s}", h)
        return global_avg_pool(h)

    def forward(self, x, hooks: Optional[Mapping[str, Hook]] = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.stem.weight.dtype))
        return self.head(self.features(x, hooks))

    def backbone_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("head.")]

    def head_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith("head.")]

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def freeze_mask(self) -> dict[str, bool]:
        return {n: bool(p.requires_grad) for n, p in self.named_parameters()}

    def reseed(self, seed: int) -> None:
        """Reset the dropout stream (used to make training runs reproducible)."""
        self.head.drop.rng = np.random.default_rng(seed)


def build_model(config: ModelConfig) -> ResNet:
    return ResNet(config)


def set_freeze(model: ResNet, mode: str) -> ResNet:
    """``frozen_backbone``: only head parameters train and backbone BN statistics
    stay fixed. ``full``: everything trains."""
    if mode not in FREEZE_MODES:
        raise ConfigError(f"freeze mode must be one of {FREEZE_MODES}, got {mode!r}")
    frozen = mode == "frozen_backbone"
    for _, p in model.backbone_parameters():
        p.requires_grad = not frozen
    for _, p in model.head_parameters():
        p.requires_grad = True
    for name, m in model.named_modules():
        if isinstance(m, BatchNorm2d):
            m.frozen = frozen
    model.freeze_mode = mode
    return model


def apply_freeze_mask(model: ResNet, mask: Mapping[str, bool], mode: str) -> None:
    set_freeze(model, mode)
    for name, p in model.named_parameters():
        if name in mask:
            p.requires_grad = bool(mask[name])


def count_parameters(model: Module, trainable_only: bool = False) -> int:
    return sum(p.data.size for _, p in model.named_parameters()
               if p.requires_grad or not trainable_only)


def load_backbone(model: ResNet, state: Mapping[str, np.ndarray]) -> None:
    """Copy every non-head tensor (weights and BN statistics) from ``state``."""
    backbone = {k: v for k, v in state.items() if not k.startswith("head.")}
    model.load_state_dict(backbone, strict=False)
    missing = sorted(k for k in model.state_dict() if not k.startswith("head.") and k not in backbone)
    if missing:
        raise KeyError(f"pretrained state lacks backbone tensors: {missing[:5]}...")
