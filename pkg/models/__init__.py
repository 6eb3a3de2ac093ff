# This file makes the models directory a Python package
from .layers import BatchNorm2d, Conv2d, ConvBNReLU, Module, ModuleList
from .backbone import AtrousResNet, build_backbone, init_depth_branch_from_rgb, init_depth_stem_from_rgb
from .segnet_model import (
    GROUPS,
    DeepLabV2Head,
    FusionBlock,
    ModelConfig,
    PyramidHead,
    SegNet,
    fuse,
    forward,
    parameter_digest,
    parameter_group,
    pyramid_head,
)
from .checkpoint import LoadReport, load_checkpoint, read_checkpoint, save_checkpoint

__all__ = [
    'BatchNorm2d', 'Conv2d', 'ConvBNReLU', 'Module', 'ModuleList', 'AtrousResNet',
    'build_backbone', 'init_depth_branch_from_rgb', 'init_depth_stem_from_rgb', 'GROUPS',
    'DeepLabV2Head', 'FusionBlock', 'ModelConfig', 'PyramidHead', 'SegNet', 'fuse', 'forward',
    'parameter_digest', 'parameter_group', 'pyramid_head', 'LoadReport', 'load_checkpoint',
    'read_checkpoint', 'save_checkpoint',
]
