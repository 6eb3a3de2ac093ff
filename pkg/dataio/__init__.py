# This file makes the dataio directory a Python package
from .class_maps import (
    CLASS_MAPS,
    IGNORE_ID,
    ClassMap,
    carla_class_map,
    cityscapes_class_map,
    cityscapes_to_carla_class_map,
    colorize,
    get_class_map,
    load_palette,
    palette_for,
    synthetic_class_map,
)
from .loader import (
    Sample,
    SegmentationDataset,
    load_sample,
    prefetch,
    read_manifest,
    save_sample,
    write_manifest,
)
from .augment import AugmentParams, augment, hflip, rescale
from .synthetic import gen_synthetic, render_shape_mask, shape_size

__all__ = [
    'CLASS_MAPS', 'IGNORE_ID', 'ClassMap', 'carla_class_map', 'cityscapes_class_map',
    'cityscapes_to_carla_class_map', 'colorize', 'get_class_map', 'load_palette', 'palette_for',
    'synthetic_class_map', 'Sample', 'SegmentationDataset', 'load_sample', 'prefetch',
    'read_manifest', 'save_sample', 'write_manifest', 'AugmentParams', 'augment', 'hflip',
    'rescale', 'gen_synthetic', 'render_shape_mask', 'shape_size',
]
