# models/backbone.py
"""
Atrous ResNet feature extractor.

Three 3x3 stem convolutions (the first with stride 2) and a stride-2 max pool,
then four bottleneck stages. The output stride decides which stages
downsample and which dilate instead, so parameter shapes never depend on it.
"""
import logging

import numpy as np

from autograd import functional as F
from autograd.functional import ConvSpec
from autograd.tensor import Tensor, add
from exceptions import ConfigError, ShapeError
from models.layers import BatchNorm2d, Conv2d, ConvBNReLU, Module, ModuleList

logger = logging.getLogger(__name__)

# output_stride -> (stage strides, stage dilations)
STAGE_LAYOUT = {
    32: ((1, 2, 2, 2), (1, 1, 1, 1)),
    16: ((1, 2, 2, 1), (1, 1, 1, 2)),
    8: ((1, 2, 1, 1), (1, 1, 2, 4)),
}

STEM_WIDTHS = (64, 64, 128)
STAGE_WIDTHS = (64, 128, 256, 512)
EXPANSION = 4
STAGE_NAMES = ("res2", "res3", "res4", "res5")


class Bottleneck(Module):
    """1x1 reduce, 3x3 dilated, 1x1 expand, with a projection shortcut on shape change."""

    def __init__(self, in_channels, mid_channels, out_channels, stride, dilation, rng, bn_momentum=0.1):
        super().__init__()
        self.conv1 = Conv2d(ConvSpec.same(in_channels, mid_channels, kernel=1), rng)
        self.bn1 = BatchNorm2d(mid_channels, momentum=bn_momentum)
        self.conv2 = Conv2d(
            ConvSpec.same(mid_channels, mid_channels, kernel=3, dilation=dilation, stride=stride), rng
        )
        self.bn2 = BatchNorm2d(mid_channels, momentum=bn_momentum)
        self.conv3 = Conv2d(ConvSpec.same(mid_channels, out_channels, kernel=1), rng)
        self.bn3 = BatchNorm2d(out_channels, momentum=bn_momentum)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = ConvBNReLU(
                ConvSpec.same(in_channels, out_channels, kernel=1, stride=stride),
                rng, activation=False, bn_momentum=bn_momentum,
            )
        self.dilation = dilation
        self.stride = stride

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = F.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        identity = self.shortcut(x) if self.shortcut is not None else x
        return F.relu(add(y, identity))

    def output_shape(self, shape):
        return self.conv3.output_shape(self.conv2.output_shape(self.conv1.output_shape(shape)))


class AtrousResNet(Module):
    def __init__(self, config, in_channels: int, rng: np.random.Generator):
        super().__init__()
        strides, dilations = STAGE_LAYOUT[config.output_stride]
        stem = [config.scaled(c) for c in STEM_WIDTHS]
        momentum = config.bn_momentum

        self.in_channels = in_channels
        self.stem = ModuleList([
            ConvBNReLU(ConvSpec.same(in_channels, stem[0], kernel=3, stride=2), rng, bn_momentum=momentum),
            ConvBNReLU(ConvSpec.same(stem[0], stem[1], kernel=3), rng, bn_momentum=momentum),
            ConvBNReLU(ConvSpec.same(stem[1], stem[2], kernel=3), rng, bn_momentum=momentum),
        ])

        channels = stem[2]
        for name, depth, width, stride, dilation in zip(
            STAGE_NAMES, config.block_depths, STAGE_WIDTHS, strides, dilations
        ):
            mid = config.scaled(width)
            out = mid * EXPANSION
            blocks = ModuleList()
            for index in range(depth):
                blocks.append(
                    Bottleneck(channels, mid, out, stride if index == 0 else 1, dilation, rng, momentum)
                )
                channels = out
            setattr(self, name, blocks)
        self.out_channels = channels
        self.dilations = dilations
        self.strides = strides

    def stages(self):
        return [getattr(self, name) for name in STAGE_NAMES]

    def forward(self, x):
        for layer in self.stem:
            x = layer(x)
        x = F.max_pool2d(x, kernel=3, stride=2, padding=1)
        for stage in self.stages():
            for block in stage:
                x = block(x)
        return x

    def output_shape(self, shape):
        for layer in self.stem:
            shape = layer.output_shape(shape)
        n, c, h, w = shape
        shape = (n, c, (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1)
        for stage in self.stages():
            for block in stage:
                shape = block.output_shape(shape)
        return shape


def build_backbone(config, in_channels: int, rng: np.random.Generator) -> AtrousResNet:
    """
    Build one branch of the network.

    Args:
        config: ModelConfig (output_stride, block_depths, width_multiplier)
        in_channels: 3 for RGB, 1 for depth
        rng: generator for He-uniform initialisation
    """
    if in_channels not in (1, 3):
        raise ShapeError(f"backbone input must have 1 or 3 channels, got {in_channels}")
    if config.output_stride not in STAGE_LAYOUT:
        raise ConfigError(f"output_stride must be one of {sorted(STAGE_LAYOUT)}", key="output_stride")
    return AtrousResNet(config, in_channels, rng)


def init_depth_stem_from_rgb(rgb_first_conv_weights) -> Tensor:
    """Average an RGB first-layer filter bank over its input channels: [C,3,k,k] -> [C,1,k,k]."""
    weights = rgb_first_conv_weights.data if isinstance(rgb_first_conv_weights, Tensor) else np.asarray(
        rgb_first_conv_weights
    )
    if weights.ndim != 4 or weights.shape[1] != 3:
        raise ShapeError(f"expected RGB filters [C,3,k,k], got {list(weights.shape)}")
    return Tensor(weights.mean(axis=1, keepdims=True).astype(weights.dtype))


FIRST_CONV = "stem.0.conv.weight"


def init_depth_branch_from_rgb(depth: AtrousResNet, rgb: AtrousResNet):
    """Give the depth branch the RGB branch's weights, its first filters channel-averaged."""
    rgb_state = rgb.state_dict()
    for path, tensor in depth.state_dict().items():
        source = rgb_state[path]
        if path == FIRST_CONV:
            tensor.data = init_depth_stem_from_rgb(source).data.astype(tensor.dtype)
        else:
            tensor.data = source.data.astype(tensor.dtype).copy()
    logger.debug("depth branch initialised from RGB branch")
