# models/segnet_model.py
"""
RGB-D segmentation network: two atrous ResNet branches, a fusion block,
a dilated pyramid head with pooled global context, and bilinear logits
upsampling back to the input resolution.
"""
import dataclasses
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Optional, Tuple

import numpy as np

from autograd import functional as F
from autograd.functional import ConvSpec
from autograd.tensor import Tensor, add, as_tensor, concat_channels, crop_spatial
from exceptions import ConfigError, DataError, ShapeError
from helper import derive_rng, digest_arrays
from models.backbone import STAGE_LAYOUT, build_backbone, init_depth_branch_from_rgb
from models.layers import Conv2d, ConvBNReLU, Module, ModuleList

logger = logging.getLogger(__name__)

FULL_TOP_CHANNELS = 2048
FULL_FUSION_CHANNELS = 512
MAX_RATE = 4096

PYRAMID_PRESETS = {
    # rate 1 stands for the undilated 1x1 level
    "default": {"rates": (1, 2, 4, 8, 16), "gap": True},
    "deeplab-v2": {"rates": (6, 12, 18, 24), "gap": False},
}
FUSION_MODES = ("sum", "concat")
GROUPS = ("rgb", "depth", "fusion", "head")


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults give the CPU-sized toy network."""

    output_stride: int = 8
    block_depths: Tuple[int, ...] = (2, 2, 2, 2)
    width_multiplier: Fraction = Fraction(1, 8)
    fusion_mode: str = "concat"
    fusion_channels: Optional[int] = None
    pyramid_preset: str = "default"
    pyramid_rates: Optional[Tuple[int, ...]] = None
    pyramid_gap: Optional[bool] = None
    num_classes: int = 19
    depth_branch: bool = True
    rgb_branch: bool = True
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.width_multiplier = Fraction(self.width_multiplier).limit_denominator(1024)
        self.block_depths = tuple(int(d) for d in self.block_depths)
        if self.output_stride not in STAGE_LAYOUT:
            raise ConfigError(f"output_stride must be one of {sorted(STAGE_LAYOUT)}", key="output_stride")
        if len(self.block_depths) != 4 or min(self.block_depths) < 1:
            raise ConfigError("block_depths needs four positive counts", key="block_depths")
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier must be positive", key="width_multiplier")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}", key="fusion_mode")
        if self.pyramid_preset not in PYRAMID_PRESETS:
            raise ConfigError(f"pyramid_preset must be one of {sorted(PYRAMID_PRESETS)}", key="pyramid_preset")
        if not (self.rgb_branch or self.depth_branch):
            raise ConfigError("at least one of rgb_branch / depth_branch must be on", key="depth_branch")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive", key="num_classes")
        preset = PYRAMID_PRESETS[self.pyramid_preset]
        if self.pyramid_rates is None:
            self.pyramid_rates = preset["rates"]
        self.pyramid_rates = tuple(int(r) for r in self.pyramid_rates)
        if self.pyramid_gap is None:
            self.pyramid_gap = preset["gap"]
        if self.fusion_channels is None:
            self.fusion_channels = self.scaled(FULL_FUSION_CHANNELS)
        for rate in self.pyramid_rates:
            if not 1 <= rate <= MAX_RATE:
                raise ConfigError(f"pyramid rate {rate} outside [1, {MAX_RATE}]", key="pyramid_rates")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        values = dict(block_depths=(3, 4, 23, 3), width_multiplier=Fraction(1), fusion_channels=None)
        values.update(overrides)
        return cls(**values)

    def replace(self, **changes) -> "ModelConfig":
        # derived fields follow the field they derive from unless given
        if "pyramid_preset" in changes:
            changes.setdefault("pyramid_rates", None)
            changes.setdefault("pyramid_gap", None)
        if "width_multiplier" in changes:
            changes.setdefault("fusion_channels", None)
        return dataclasses.replace(self, **changes)

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width_multiplier)))

    @property
    def top_channels(self) -> int:
        return self.scaled(FULL_TOP_CHANNELS // 4) * 4

    @property
    def both_branches(self) -> bool:
        return self.rgb_branch and self.depth_branch


class FusionBlock(Module):
    """Reduce each branch with 1x1 conv + BN + ReLU, then sum or concatenate."""

    def __init__(self, top_channels, fusion_channels, mode, rng, bn_momentum=0.1):
        super().__init__()
        self.rgb_reduce = ConvBNReLU(ConvSpec.same(top_channels, fusion_channels, kernel=1), rng, bn_momentum=bn_momentum)
        self.depth_reduce = ConvBNReLU(ConvSpec.same(top_channels, fusion_channels, kernel=1), rng, bn_momentum=bn_momentum)
        self.mode = mode
        self.out_channels = fusion_channels * (2 if mode == "concat" else 1)

    def forward(self, rgb_feat, depth_feat):
        if rgb_feat.shape != depth_feat.shape:
            raise ShapeError(f"fusion inputs differ: {list(rgb_feat.shape)} vs {list(depth_feat.shape)}")
        return combine(self.rgb_reduce(rgb_feat), self.depth_reduce(depth_feat), self.mode)

    def output_shape(self, shape):
        n, _, h, w = shape
        return (n, self.out_channels, h, w)


def combine(rgb_reduced, depth_reduced, mode: str) -> Tensor:
    if mode == "sum":
        return add(rgb_reduced, depth_reduced)
    if mode == "concat":
        return concat_channels(rgb_reduced, depth_reduced)
    raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}", key="fusion_mode")


def fuse(block: FusionBlock, rgb_feat, depth_feat) -> Tensor:
    return block(rgb_feat, depth_feat)


class PyramidHead(Module):
    """
    Parallel dilated levels summed together, concatenated with the pooled
    global context, then a 1x1 logits convolution.

    Rate 1 builds a 1x1 level; any other rate a 3x3 level with padding r.
    """

    def __init__(self, in_channels, channels, num_classes, rates, gap, rng, bn_momentum=0.1):
        super().__init__()
        self.rates = tuple(rates)
        self.branches = ModuleList()
        for rate in self.rates:
            if rate == 1:
                spec = ConvSpec.same(in_channels, channels, kernel=1)
            else:
                spec = ConvSpec.same(in_channels, channels, kernel=3, dilation=rate)
            self.branches.append(ConvBNReLU(spec, rng, bn_momentum=bn_momentum))
        self.gap = ConvBNReLU(ConvSpec.same(in_channels, channels, kernel=1), rng, bn_momentum=bn_momentum) if gap else None
        head_in = channels * (2 if gap else 1)
        self.logits = Conv2d(ConvSpec.same(head_in, num_classes, kernel=1, has_bias=True), rng)

    @property
    def has_gap(self) -> bool:
        return self.gap is not None

    def pyramid(self, fused):
        total = None
        for branch in self.branches:
            out = branch(fused)
            total = out if total is None else add(total, out)
        return total

    def forward(self, fused, out_h, out_w):
        fused = as_tensor(fused)
        features = self.pyramid(fused)
        if self.gap is not None:
            h, w = fused.shape[2], fused.shape[3]
            context = self.gap(F.global_avg_pool(fused))
            features = concat_channels(features, F.bilinear_upsample(context, h, w))
        return F.bilinear_upsample(self.logits(features), out_h, out_w)

    def output_shape(self, shape, out_h, out_w):
        n = shape[0]
        return (n, self.logits.spec.out_channels, out_h, out_w)


class DeepLabV2Head(Module):
    """Baseline head: 3x3 dilated classifiers straight to K channels, summed."""

    def __init__(self, in_channels, num_classes, rates, rng):
        super().__init__()
        self.rates = tuple(rates)
        self.branches = ModuleList(
            Conv2d(ConvSpec.same(in_channels, num_classes, kernel=3, dilation=rate, has_bias=True), rng)
            for rate in self.rates
        )
        self.num_classes = num_classes

    @property
    def has_gap(self) -> bool:
        return False

    def forward(self, fused, out_h, out_w):
        total = None
        for branch in self.branches:
            out = branch(fused)
            total = out if total is None else add(total, out)
        return F.bilinear_upsample(total, out_h, out_w)

    def output_shape(self, shape, out_h, out_w):
        return (shape[0], self.num_classes, out_h, out_w)


def pyramid_head(head: Module, fused, out_h: int, out_w: int) -> Tensor:
    return head(fused, out_h, out_w)


def _as_batch(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 3:
        x = Tensor(x.data[None])
    if x.ndim != 4:
        raise ShapeError(f"expected [N,C,H,W] input, got {list(x.shape)}")
    return x


def _reflect_pad(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    if not (pad_h or pad_w):
        return x
    return Tensor(np.pad(x.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="reflect"))


class SegNet(Module):
    """
    Args:
        config: ModelConfig
        rng: initialisation generator (defaults to the "init" stream of `seed`)
        seed: root seed used when rng is not given
    """

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None, seed: int = 0):
        super().__init__()
        rng = rng or derive_rng(seed, "init")
        self.config = config
        top = config.top_channels
        self.rgb = build_backbone(config, 3, rng) if config.rgb_branch else None
        self.depth = build_backbone(config, 1, rng) if config.depth_branch else None
        if self.rgb is not None and self.depth is not None:
            init_depth_branch_from_rgb(self.depth, self.rgb)
            self.fusion = FusionBlock(top, config.fusion_channels, config.fusion_mode, rng, config.bn_momentum)
            head_in = self.fusion.out_channels
        else:
            self.fusion = None
            head_in = top
        if config.pyramid_preset == "deeplab-v2":
            self.head = DeepLabV2Head(head_in, config.num_classes, config.pyramid_rates, rng)
        else:
            self.head = PyramidHead(
                head_in, config.fusion_channels, config.num_classes,
                config.pyramid_rates, config.pyramid_gap, rng, config.bn_momentum,
            )

    def _padding(self, height, width):
        os_ = self.config.output_stride
        return (-height) % os_, (-width) % os_

    def features(self, rgb=None, depth=None):
        """Top feature maps per branch, then the map the head consumes."""
        feats = {}
        if self.rgb is not None:
            feats["rgb"] = self.rgb(rgb)
        if self.depth is not None:
            feats["depth"] = self.depth(depth)
        if self.fusion is not None:
            feats["fused"] = self.fusion(feats["rgb"], feats["depth"])
        else:
            feats["fused"] = feats["rgb"] if self.rgb is not None else feats["depth"]
        return feats

    def forward(self, rgb=None, depth=None):
        if self.rgb is not None and rgb is None:
            raise DataError("this model has an RGB branch; an RGB input is required")
        if self.depth is not None and depth is None:
            raise DataError("this model has a depth branch; a depth input is required")
        if self.rgb is None and rgb is not None:
            raise DataError("this model has no RGB branch; pass rgb=None")
        if self.depth is None and depth is not None:
            raise DataError("this model has no depth branch; pass depth=None")
        rgb = _as_batch(rgb) if rgb is not None else None
        depth = _as_batch(depth) if depth is not None else None
        reference = rgb if rgb is not None else depth
        if rgb is not None and depth is not None and rgb.shape[2:] != depth.shape[2:]:
            raise ShapeError(f"RGB {list(rgb.shape)} and depth {list(depth.shape)} extents differ")

        height, width = reference.shape[2], reference.shape[3]
        pad_h, pad_w = self._padding(height, width)
        if rgb is not None:
            rgb = _reflect_pad(rgb, pad_h, pad_w)
        if depth is not None:
            depth = _reflect_pad(depth, pad_h, pad_w)

        fused = self.features(rgb, depth)["fused"]
        logits = self.head(fused, height + pad_h, width + pad_w)
        if pad_h or pad_w:
            logits = crop_spatial(logits, height, width)
        return logits

    def trace_shapes(self, height: int, width: int, batch: int = 1) -> Dict[str, Tuple[int, ...]]:
        """Extents of every stage for an input of this size, without running convolutions."""
        pad_h, pad_w = self._padding(height, width)
        shapes = {}
        for name, branch, channels in (("rgb", self.rgb, 3), ("depth", self.depth, 1)):
            if branch is not None:
                shapes[name] = branch.output_shape((batch, channels, height + pad_h, width + pad_w))
        if self.fusion is not None:
            shapes["fused"] = self.fusion.output_shape(shapes["rgb"])
        else:
            shapes["fused"] = shapes["rgb"] if "rgb" in shapes else shapes["depth"]
        shapes["logits"] = self.head.output_shape(shapes["fused"], height, width)
        return shapes

    def predict(self, rgb=None, depth=None) -> np.ndarray:
        """Argmax class map [N,H,W]; ties resolve to the lowest class id."""
        logits = self.forward(rgb, depth)
        return logits.data.argmax(axis=1)

    def set_frozen(self, group: str, frozen: bool = True):
        """Stop (or resume) gradient flow into a layer group and pin its batch norms."""
        module = getattr(self, group, None)
        if module is None:
            return
        for _, param in module.named_parameters():
            param.requires_grad = not frozen
        for _, child in module.named_modules():
            if hasattr(child, "frozen"):
                child.frozen = frozen


def forward(model: SegNet, rgb, depth=None) -> Tensor:
    return model(rgb, depth)


def parameter_group(path: str) -> str:
    group = path.split(".", 1)[0]
    if group not in GROUPS:
        raise ValueError(f"parameter path '{path}' belongs to no layer group")
    return group


def parameter_digest(model: Module, prefix: str = "") -> str:
    """Hash of every parameter and buffer whose path starts with `prefix`."""
    return digest_arrays(
        (path, tensor.data) for path, tensor in model.state_dict().items() if path.startswith(prefix)
    )
