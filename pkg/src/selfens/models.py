"""Architecture presets."""
from __future__ import annotations

from .nn import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    GlobalAvgPool,
    MaxPool2x2,
    NetworkSpec,
    ReLU,
    SoftmaxHead,
)

PRESETS = ("mnist_usps", "conv_small", "mlp")


def _w(channels: int, mult: float) -> int:
    return max(1, int(round(channels * mult)))


def _conv_bn(kh, ch, padding, bn_momentum):
    return [Conv2D(kh, kh, ch, padding), BatchNorm(bn_momentum), ReLU()]


def mnist_usps(input_shape=(28, 28, 1), classes=10, width_multiplier=1.0, bn_momentum=0.01) -> NetworkSpec:
    """The MNIST <-> USPS network; width 1 and 28x28x1 input give the full-size layer shapes."""
    w = width_multiplier
    layers = [
        *_conv_bn(5, _w(32, w), "valid", bn_momentum),
        MaxPool2x2(),
        *_conv_bn(3, _w(64, w), "valid", bn_momentum),
        *_conv_bn(3, _w(64, w), "valid", bn_momentum),
        MaxPool2x2(),
        Dropout(0.5),
        Dense(_w(256, w)),
        ReLU(),
        SoftmaxHead(classes),
    ]
    return NetworkSpec(input_shape, layers)


def conv_small(input_shape=(32, 32, 3), classes=10, width_multiplier=0.25, bn_momentum=0.01) -> NetworkSpec:
    """The 13-layer MNIST/SVHN/CIFAR/STL network, scaled in width."""
    w = width_multiplier
    layers = []
    for ch in (128, 256):
        for _ in range(3):
            layers += _conv_bn(3, _w(ch, w), "same", bn_momentum)
        layers += [MaxPool2x2(), Dropout(0.5)]
    layers += _conv_bn(3, _w(512, w), "valid", bn_momentum)
    layers += _conv_bn(1, _w(256, w), "valid", bn_momentum)
    layers += _conv_bn(1, _w(128, w), "valid", bn_momentum)
    layers += [GlobalAvgPool(), SoftmaxHead(classes)]
    return NetworkSpec(input_shape, layers)


def mlp(input_shape=(16, 16, 1), classes=10, width_multiplier=1.0, bn_momentum=0.01, hidden=128) -> NetworkSpec:
    h = _w(hidden, width_multiplier)
    layers = [
        Dense(h), BatchNorm(bn_momentum), ReLU(),
        Dense(h), BatchNorm(bn_momentum), ReLU(),
        SoftmaxHead(classes),
    ]
    return NetworkSpec(input_shape, layers)


def build(preset: str, input_shape, classes: int, width_multiplier: float | None = None, bn_momentum: float = 0.01) -> NetworkSpec:
    builders = {"mnist_usps": mnist_usps, "conv_small": conv_small, "mlp": mlp}
    if preset not in builders:
        raise ValueError(f"unknown architecture preset {preset!r}; choose from {PRESETS}")
    kw = {} if width_multiplier is None else {"width_multiplier": width_multiplier}
    return builders[preset](tuple(input_shape), classes, bn_momentum=bn_momentum, **kw)
