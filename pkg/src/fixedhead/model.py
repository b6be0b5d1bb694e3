"""Small CNN presets used for desk-scale head comparisons.

"tiny3" is three conv3x3 -> batchnorm -> relu blocks, each at stride 2,
followed by global average pooling and the chosen head. Building with the
identity head applies the headless transform at construction time: the final
block is rewidened to the class count so pooled features are the scores.
"""

import math

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    relu,
)
from .errors import ConfigError, DimensionError
from .heads import HeadKind, build_head, head_forward, head_parameters
from .rng import Rng

PRESETS = {"tiny3": (16, 32, 64)}


class ConvBlock:
    """conv3x3(stride) -> batchnorm -> relu, bias-free conv."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng: Rng):
        fan_in = c_in * 9
        w = rng.standard_normal((c_out, c_in, 3, 3)) * math.sqrt(2.0 / fan_in)
        self.weight = Parameter(Tensor(w), trainable=True)
        self.gamma = Parameter(Tensor(np.ones(c_out)), trainable=True)
        self.beta = Parameter(Tensor(np.zeros(c_out)), trainable=True)
        self.running_mean = np.zeros(c_out)
        self.running_var = np.ones(c_out)
        self.stride = stride

    def forward(self, x: Tensor, train: bool) -> Tensor:
        y = conv2d(x, self.weight.value, stride=self.stride, padding=1)
        y = batchnorm2d(
            y, self.gamma.value, self.beta.value,
            self.running_mean, self.running_var, train=train,
        )
        return relu(y)


class SmallCNN:
    """Conv blocks + global average pooling + one of the four heads."""

    def __init__(
        self,
        in_channels: int,
        widths: tuple[int, ...],
        num_classes: int,
        head_kind: HeadKind,
        rng: Rng,
    ):
        head_kind = HeadKind(head_kind)
        widths = tuple(int(w) for w in widths)
        if head_kind is HeadKind.FIXED_IDENTITY:
            if num_classes > widths[-1]:
                raise DimensionError(
                    f"identity head needs final width >= {num_classes}, "
                    f"preset gives {widths[-1]}"
                )
            widths = widths[:-1] + (num_classes,)
        self.in_channels = in_channels
        self.widths = widths
        self.num_classes = num_classes
        self.blocks = []
        c_prev = in_channels
        for i, c in enumerate(widths):
            self.blocks.append(ConvBlock(c_prev, c, stride=2, rng=rng.split(f"block{i}")))
            c_prev = c
        self.head, self.head_report = build_head(
            head_kind, n_c=widths[-1], K=num_classes, rng=rng.split("head")
        )

    def features(self, x: Tensor, train: bool) -> Tensor:
        """Pre-pooling feature map (N, n_c, H', W')."""
        for block in self.blocks:
            x = block.forward(x, train)
        return x

    def forward(self, x: Tensor, train: bool) -> Tensor:
        pooled = global_avg_pool(self.features(x, train))
        return head_forward(self.head, pooled)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for i, b in enumerate(self.blocks):
            out += [
                (f"block{i}.weight", b.weight),
                (f"block{i}.gamma", b.gamma),
                (f"block{i}.beta", b.beta),
            ]
        names = {"W": self.head.W, "b": self.head.b, "alpha": self.head.alpha}
        out += [(f"head.{n}", p) for n, p in names.items() if p is not None]
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, b in enumerate(self.blocks):
            out += [
                (f"block{i}.running_mean", b.running_mean),
                (f"block{i}.running_var", b.running_var),
            ]
        return out

    def fixed_parameters(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not p.trainable]

    def head_parameters(self) -> list[Parameter]:
        return head_parameters(self.head)


def build_small_cnn(
    preset: str,
    in_channels: int,
    num_classes: int,
    head_kind: HeadKind,
    seed: int,
    widths: tuple[int, ...] | None = None,
) -> SmallCNN:
    if widths is None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
        widths = PRESETS[preset]
    return SmallCNN(in_channels, widths, num_classes, head_kind, Rng(seed).split("model"))
