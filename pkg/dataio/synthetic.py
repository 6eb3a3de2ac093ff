# dataio/synthetic.py
"""
Procedural multi-scale RGB-D scenes.

Shape classes come in pairs that share kind and colour and differ only in
their physical size, so a small object up close and a large one far away
look alike in RGB; the depth plane tells them apart.
"""
import logging
import os
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw

from dataio.class_maps import IGNORE_ID, SHAPE_KINDS, synthetic_class_map
from dataio.loader import MANIFEST_COLUMNS, Sample, save_sample, write_manifest
from exceptions import ConfigError, DataError
from helper import derive_rng

logger = logging.getLogger(__name__)

MIN_DISTANCE = 1.0
MAX_DISTANCE = 10.0
MIN_SHAPE_PX = 3
SIZE_FRACTION = 0.25
PLACEMENT_TRIES = 40
DISTANCE_PUSH = 1.25

# One base colour per shape pair, cycled past eight pairs
BASE_COLOURS = np.array([
    (0.85, 0.25, 0.20), (0.20, 0.55, 0.85), (0.25, 0.75, 0.30), (0.90, 0.80, 0.20),
    (0.65, 0.30, 0.75), (0.95, 0.55, 0.15), (0.20, 0.80, 0.75), (0.80, 0.40, 0.55),
])

SHAPE_COLUMNS = ["scene", "shape", "class", "kind", "distance", "depth", "size", "area", "visible"]


@dataclass
class ShapeSpec:
    class_id: int
    kind: str
    intrinsic: float
    distance: float
    size: int
    top: int = 0
    left: int = 0
    placed: bool = False


def shape_class(class_id: int):
    """(kind, intrinsic size) of a synthetic class; odd ids are the small member of a pair."""
    kind = SHAPE_KINDS[(class_id - 1) // 2 % len(SHAPE_KINDS)]
    intrinsic = 1.0 if class_id % 2 == 1 else 2.0
    return kind, intrinsic


def shape_size(intrinsic: float, distance: float, image_size: int) -> int:
    """On-screen extent in pixels, inversely proportional to distance."""
    return max(MIN_SHAPE_PX, int(round(SIZE_FRACTION * image_size * intrinsic / distance)))


def _box(kind: str, size: int):
    if kind == "bar":
        return size, max(1, size // 3)
    return size, size


def render_shape_mask(kind: str, size: int, image_size: int, top: int = 0, left: int = 0) -> np.ndarray:
    """Boolean [image_size, image_size] mask of one shape whose bounding box starts at (top, left)."""
    if kind not in SHAPE_KINDS:
        raise ConfigError(f"unknown shape kind '{kind}'", key="kind")
    width, height = _box(kind, size)
    canvas = Image.new("L", (image_size, image_size), 0)
    draw = ImageDraw.Draw(canvas)
    right, bottom = left + width - 1, top + height - 1
    if kind == "square" or kind == "bar":
        draw.rectangle([left, top, right, bottom], fill=1)
    elif kind == "disk":
        draw.ellipse([left, top, right, bottom], fill=1)
    else:
        draw.polygon([(left, bottom), (right, bottom), (left + (width - 1) / 2.0, top)], fill=1)
    return np.asarray(canvas, dtype=bool)


def _background(rng: np.random.Generator, image_size: int) -> np.ndarray:
    """Grey noise over a random linear gradient."""
    ys, xs = np.mgrid[0:image_size, 0:image_size] / max(1, image_size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    gradient = 0.35 + 0.15 * (np.cos(angle) * xs + np.sin(angle) * ys)
    noise = rng.normal(0.0, 0.05, size=(image_size, image_size))
    grey = np.clip(gradient + noise, 0.0, 1.0)
    tint = rng.uniform(0.9, 1.1, size=3)
    return np.clip(grey[None] * tint[:, None, None], 0.0, 1.0)


def _size_range(intrinsic: float, image_size: int) -> int:
    """Distinct on-screen sizes a shape of this intrinsic size can take."""
    return shape_size(intrinsic, MIN_DISTANCE, image_size) - shape_size(intrinsic, MAX_DISTANCE, image_size) + 1


def _plan_shapes(rng, image_size: int, num_classes: int) -> List[ShapeSpec]:
    available = sum(_size_range(shape_class(c)[1], image_size) for c in range(1, num_classes))
    count = min(int(rng.integers(3, 9)), available)
    shapes = []
    taken = set()
    while len(shapes) < count:
        class_id = int(rng.integers(1, num_classes))
        kind, intrinsic = shape_class(class_id)
        distance = float(rng.uniform(MIN_DISTANCE, MAX_DISTANCE))
        size = shape_size(intrinsic, distance, image_size)
        # one class never repeats an on-screen size within a scene
        while (class_id, size) in taken and distance < MAX_DISTANCE:
            distance = min(MAX_DISTANCE, distance * 1.02)
            size = shape_size(intrinsic, distance, image_size)
        if (class_id, size) in taken:
            continue
        taken.add((class_id, size))
        shapes.append(ShapeSpec(class_id, kind, intrinsic, distance, size))
    return shapes


def _farther(shape: ShapeSpec, image_size: int, sizes_in_use):
    """Smallest push that yields a new, unused on-screen size, or None."""
    distance, size = shape.distance, shape.size
    while distance < MAX_DISTANCE:
        distance = min(MAX_DISTANCE, distance * DISTANCE_PUSH)
        size = shape_size(shape.intrinsic, distance, image_size)
        if size != shape.size and (shape.class_id, size) not in sizes_in_use:
            return distance, size
    return None


def _place(rng, shapes: List[ShapeSpec], image_size: int):
    """Nearest first, each without overlap where room allows; a shape with no room is pushed further away."""
    occupied = np.zeros((image_size, image_size), dtype=bool)
    sizes_in_use = {(s.class_id, s.size) for s in shapes}
    for shape in sorted(shapes, key=lambda s: s.distance):
        while not shape.placed:
            width, height = _box(shape.kind, shape.size)
            for _ in range(PLACEMENT_TRIES):
                top = int(rng.integers(0, image_size - height + 1))
                left = int(rng.integers(0, image_size - width + 1))
                mask = render_shape_mask(shape.kind, shape.size, image_size, top, left)
                if not (mask & occupied).any():
                    shape.top, shape.left, shape.placed = top, left, True
                    break
            if shape.placed:
                break
            pushed = _farther(shape, image_size, sizes_in_use)
            if pushed is None:
                # no room left: overlap, occlusion resolves it
                shape.top = int(rng.integers(0, image_size - height + 1))
                shape.left = int(rng.integers(0, image_size - width + 1))
                mask = render_shape_mask(shape.kind, shape.size, image_size, shape.top, shape.left)
                break
            sizes_in_use.discard((shape.class_id, shape.size))
            sizes_in_use.add((shape.class_id, pushed[1]))
            shape.distance, shape.size = pushed
        occupied |= mask


def render_scene(rng: np.random.Generator, image_size: int, num_classes: int):
    """
    One scene.

    Returns:
        (Sample, list of per-shape records)
    """
    rgb = _background(rng, image_size)
    depth = np.ones((1, image_size, image_size))
    labels = np.zeros((image_size, image_size), dtype=np.uint8)

    shapes = _plan_shapes(rng, image_size, num_classes)
    _place(rng, shapes, image_size)

    masks = []
    # far to near, nearer shapes overwrite farther ones
    for shape in sorted(shapes, key=lambda s: -s.distance):
        mask = render_shape_mask(shape.kind, shape.size, image_size, shape.top, shape.left)
        base = BASE_COLOURS[((shape.class_id - 1) // 2) % len(BASE_COLOURS)]
        colour = np.clip(base + rng.normal(0.0, 0.06, size=3), 0.0, 1.0)
        texture = rng.normal(0.0, 0.03, size=(3, image_size, image_size))
        fill = np.clip(colour[:, None, None] + texture, 0.0, 1.0)
        rgb = np.where(mask[None], fill, rgb)
        depth[0][mask] = shape.distance / MAX_DISTANCE
        labels[mask] = shape.class_id
        masks.append((shape, mask))

    records = []
    for shape, mask in masks:
        visible = np.zeros_like(mask)
        visible[mask] = depth[0][mask] == shape.distance / MAX_DISTANCE
        visible &= labels == shape.class_id
        records.append({
            "class": shape.class_id,
            "kind": shape.kind,
            "distance": shape.distance,
            "depth": shape.distance / MAX_DISTANCE,
            "size": shape.size,
            "area": int(mask.sum()),
            "visible": int(visible.sum()),
        })
    return Sample(rgb, depth, labels), records


def gen_synthetic(
    count: int,
    image_size: int,
    num_classes: int,
    seed: int,
    out_dir,
    val_fraction: float = 0.25,
) -> pd.DataFrame:
    """
    Write `count` scenes under out_dir (rgb/, depth/, labels/, manifest.tsv, shapes.tsv).

    Args:
        count: scenes, at least 1
        image_size: square extent, at least 32
        num_classes: background plus shape classes, at least 2
        seed: root seed; equal seeds give byte-identical files
        out_dir: output directory (created)
        val_fraction: share of scenes, taken from the end, tagged "val"

    Returns:
        the manifest frame (paths relative to out_dir)
    """
    if count < 1:
        raise ConfigError("count must be at least 1", key="count")
    if image_size < 32:
        raise ConfigError("image_size must be at least 32", key="size")
    if num_classes < 2 or num_classes > IGNORE_ID:
        raise ConfigError(f"num_classes must lie in [2, {IGNORE_ID - 1}]", key="classes")
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("val_fraction must lie in [0, 1)", key="val_fraction")
    synthetic_class_map(num_classes)

    try:
        for sub in ("rgb", "depth", "labels"):
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        probe = os.path.join(out_dir, ".write-test")
        with open(probe, "w", encoding="utf-8") as f:
            f.write("")
        os.remove(probe)
    except OSError as e:
        raise DataError(f"cannot write to output directory {out_dir}: {e}") from e

    logger.info(f"🔄 Generating {count} synthetic scenes ({image_size}x{image_size}, {num_classes} classes) in {out_dir}")
    rng = derive_rng(seed, "synth")
    n_val = int(round(count * val_fraction))
    rows, shape_rows = [], []
    for index in range(count):
        sample, records = render_scene(rng, image_size, num_classes)
        stem = f"{index:05d}.png"
        paths = {
            "rgb": os.path.join("rgb", stem),
            "depth": os.path.join("depth", stem),
            "label": os.path.join("labels", stem),
        }
        save_sample(
            sample,
            os.path.join(out_dir, paths["rgb"]),
            os.path.join(out_dir, paths["depth"]),
            os.path.join(out_dir, paths["label"]),
        )
        rows.append({**paths, "split": "val" if index >= count - n_val else "train"})
        for number, record in enumerate(records):
            shape_rows.append({"scene": index, "shape": number, **record})

    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    write_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    shapes = pd.DataFrame(shape_rows, columns=SHAPE_COLUMNS)
    shapes.to_csv(os.path.join(out_dir, "shapes.tsv"), sep="\t", index=False, float_format="%.6f")
    logger.info(f"✅ Wrote {count} scenes ({count - n_val} train, {n_val} val) to {out_dir}")
    return manifest


def read_shapes(out_dir) -> Optional[pd.DataFrame]:
    path = os.path.join(out_dir, "shapes.tsv")
    if not os.path.exists(path):
        return None
    return pd.read_csv(path, sep="\t")
