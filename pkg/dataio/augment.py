# dataio/augment.py
"""
Training-time augmentation: random rescale, crop with padding, left-right
flip and RGB colour jitter. Every step moves rgb, depth and labels together
so the three planes stay pixel-aligned.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from PIL import Image, ImageEnhance

from dataio.class_maps import IGNORE_ID
from dataio.loader import Sample
from exceptions import ConfigError


@dataclass(frozen=True)
class AugmentParams:
    scale_range: Tuple[float, float] = (0.5, 2.0)
    crop: int = 720
    hflip_prob: float = 0.5
    jitter: bool = False
    jitter_range: Tuple[float, float] = (0.8, 1.2)
    rescale_depth: bool = False

    def __post_init__(self):
        if self.crop < 1:
            raise ConfigError(f"crop must be positive, got {self.crop}", key="crop")
        low, high = self.scale_range
        if not 0 < low <= high:
            raise ConfigError(f"invalid scale range {self.scale_range}", key="scale_range")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"flip probability {self.hflip_prob} outside [0, 1]", key="hflip_prob")

    @classmethod
    def from_config(cls, data_config, jitter: bool = False) -> "AugmentParams":
        return cls(
            scale_range=(data_config.scale_min, data_config.scale_max),
            crop=data_config.crop,
            hflip_prob=data_config.hflip_prob,
            jitter=jitter,
            rescale_depth=data_config.rescale_depth,
        )


def _resize_plane(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    image = Image.fromarray(plane.astype(np.float32))
    return np.asarray(image.resize((width, height), Image.Resampling.BILINEAR), dtype=np.float32)


def rescale(sample: Sample, scale: float, rescale_depth: bool = False) -> Sample:
    """Resample by `scale`: bilinear for rgb and depth, nearest for labels."""
    if scale == 1.0:
        return sample
    h, w = sample.extent
    height, width = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    rgb = np.stack([_resize_plane(channel, height, width) for channel in sample.rgb])
    depth = _resize_plane(sample.depth[0], height, width)[None]
    if rescale_depth:
        depth = depth / scale
    labels = Image.fromarray(sample.labels).resize((width, height), Image.Resampling.NEAREST)
    return Sample(
        np.clip(rgb, 0.0, 1.0), np.clip(depth, 0.0, 1.0), np.asarray(labels), name=sample.name
    )


def crop(sample: Sample, size: int, top: int, left: int) -> Sample:
    """size x size window at (top, left) of the sample padded on the bottom/right up to `size`."""
    h, w = sample.extent
    pad_h, pad_w = max(0, size - h), max(0, size - w)
    pad = ((0, pad_h), (0, pad_w))
    rgb = np.pad(sample.rgb, ((0, 0),) + pad, constant_values=0.0)
    depth = np.pad(sample.depth, ((0, 0),) + pad, constant_values=0.0)
    labels = np.pad(sample.labels, pad, constant_values=IGNORE_ID)
    window = (slice(top, top + size), slice(left, left + size))
    return Sample(rgb[(slice(None),) + window], depth[(slice(None),) + window], labels[window], name=sample.name)


def hflip(sample: Sample) -> Sample:
    return Sample(
        sample.rgb[:, :, ::-1].copy(), sample.depth[:, :, ::-1].copy(), sample.labels[:, ::-1].copy(),
        name=sample.name,
    )


def color_jitter(rgb: np.ndarray, factors) -> np.ndarray:
    """Brightness, contrast, then saturation on an 8-bit rendering; depth is never touched."""
    image = Image.fromarray(np.round(rgb.transpose(1, 2, 0) * 255.0).astype(np.uint8))
    brightness, contrast, saturation = factors
    image = ImageEnhance.Brightness(image).enhance(brightness)
    image = ImageEnhance.Contrast(image).enhance(contrast)
    image = ImageEnhance.Color(image).enhance(saturation)
    return np.asarray(image, dtype=np.uint8).transpose(2, 0, 1).astype(np.float32) / 255.0


def augment(sample: Sample, params: AugmentParams, rng: np.random.Generator) -> Sample:
    """
    Random scale, crop, flip and (optionally) colour jitter.

    Args:
        sample: decoded Sample
        params: AugmentParams
        rng: generator owning every random draw; equal seeds give equal output

    Returns:
        a new Sample of extent crop x crop
    """
    low, high = params.scale_range
    scale = float(rng.uniform(low, high)) if high > low else float(low)
    out = rescale(sample, scale, params.rescale_depth)

    h, w = out.extent
    top = int(rng.integers(0, max(h, params.crop) - params.crop + 1))
    left = int(rng.integers(0, max(w, params.crop) - params.crop + 1))
    out = crop(out, params.crop, top, left)

    if rng.random() < params.hflip_prob:
        out = hflip(out)

    if params.jitter:
        factors = rng.uniform(params.jitter_range[0], params.jitter_range[1], size=3)
        out = Sample(color_jitter(out.rgb, factors), out.depth, out.labels, name=out.name)
    return out
