# dataio/loader.py
"""
RGB / depth / label image triplets on disk, the manifest that lists them,
and a bounded, order-preserving prefetch over a dataset.
"""
import logging
import os
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from PIL import Image, UnidentifiedImageError

from autograd.tensor import Tensor
from dataio.class_maps import ClassMap
from exceptions import DataError
from extensions import worker_count

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["rgb", "depth", "label", "split"]
DEPTH_16_SCALE = 65535.0
DEPTH_8_SCALE = 255.0


@dataclass
class Sample:
    """
    One aligned RGB-D frame.

    rgb is [3,H,W] and depth [1,H,W], both float32 in [0,1]; labels is a
    [H,W] uint8 map of training ids with 255 for ignored pixels.
    """

    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.labels = np.asarray(self.labels).astype(np.uint8)
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise DataError(f"rgb must be [3,H,W], got {list(self.rgb.shape)}")
        if self.depth.ndim != 3 or self.depth.shape[0] != 1:
            raise DataError(f"depth must be [1,H,W], got {list(self.depth.shape)}")
        extents = {self.rgb.shape[1:], self.depth.shape[1:], self.labels.shape}
        if len(extents) != 1:
            raise DataError(f"rgb, depth and labels disagree on extents: {sorted(extents)}")
        for plane, values in (("rgb", self.rgb), ("depth", self.depth)):
            if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
                raise DataError(f"{plane} values must be finite and within [0, 1]")

    @property
    def extent(self):
        return self.labels.shape

    def batch(self):
        """(rgb, depth, labels) with a leading batch axis of one."""
        return Tensor(self.rgb[None]), Tensor(self.depth[None]), self.labels[None].astype(np.int64)


def _open(path) -> Image.Image:
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    try:
        image = Image.open(path)
        image.load()
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"cannot decode image {path}: {e}") from e
    return image


def read_rgb(path) -> np.ndarray:
    image = _open(path)
    if image.mode != "RGB":
        image = image.convert("RGB")
    return np.asarray(image, dtype=np.uint8).transpose(2, 0, 1).astype(np.float32) / 255.0


def read_depth(path) -> np.ndarray:
    """Single-channel depth; 16-bit files scale by 1/65535, 8-bit files by 1/255."""
    image = _open(path)
    if image.mode in ("I;16", "I;16B", "I;16L", "I"):
        values = np.asarray(image).astype(np.float64) / DEPTH_16_SCALE
    elif image.mode == "L":
        values = np.asarray(image).astype(np.float64) / DEPTH_8_SCALE
    else:
        raise DataError(f"depth image {path} must be single-channel 8 or 16 bit, got mode {image.mode}")
    return np.clip(values, 0.0, 1.0).astype(np.float32)[None]


def read_labels(path, class_map: ClassMap) -> np.ndarray:
    image = _open(path)
    if image.mode not in ("L", "P"):
        raise DataError(f"label image {path} must be 8-bit single-channel, got mode {image.mode}")
    return class_map.apply(np.asarray(image, dtype=np.uint8))


def load_sample(rgb_path, depth_path, label_path, class_map: ClassMap) -> Sample:
    rgb = read_rgb(rgb_path)
    depth = read_depth(depth_path)
    labels = read_labels(label_path, class_map)
    if not (rgb.shape[1:] == depth.shape[1:] == labels.shape):
        raise DataError(
            f"dimension mismatch: rgb {rgb.shape[1:]}, depth {depth.shape[1:]}, labels {labels.shape} "
            f"({rgb_path})"
        )
    return Sample(rgb, depth, labels, name=os.path.splitext(os.path.basename(rgb_path))[0])


def save_sample(sample: Sample, rgb_path, depth_path, label_path, depth_bits: int = 16):
    """
    Write a sample as PNGs: 8-bit RGB, 16-bit (or 8-bit) depth, 8-bit training ids.

    Reload the labels with `class_map.on_train_ids()`; they are already remapped.
    """
    for path in (rgb_path, depth_path, label_path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    rgb = np.round(sample.rgb.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Image.fromarray(rgb).save(rgb_path)
    if depth_bits == 16:
        depth = np.round(sample.depth[0].astype(np.float64) * DEPTH_16_SCALE).astype(np.uint16)
        Image.fromarray(depth).save(depth_path)
    elif depth_bits == 8:
        depth = np.round(sample.depth[0] * DEPTH_8_SCALE).astype(np.uint8)
        Image.fromarray(depth).save(depth_path)
    else:
        raise DataError(f"depth_bits must be 8 or 16, got {depth_bits}")
    Image.fromarray(sample.labels).save(label_path)


# ---- manifest ----

def read_manifest(path) -> pd.DataFrame:
    """
    Rows of rgb, depth, label and split; relative paths resolve against the
    manifest's directory.
    """
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    try:
        frame = pd.read_csv(
            path, sep="\t", header=None, dtype=str, keep_default_na=False, encoding="utf-8", comment=None
        )
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=MANIFEST_COLUMNS)
    if frame.shape[1] != len(MANIFEST_COLUMNS):
        raise DataError(f"manifest {path} must have {len(MANIFEST_COLUMNS)} tab-separated columns")
    frame.columns = MANIFEST_COLUMNS
    root = os.path.dirname(os.path.abspath(path))
    for column in ("rgb", "depth", "label"):
        frame[column] = [p if os.path.isabs(p) else os.path.join(root, p) for p in frame[column]]
    return frame


def write_manifest(frame: pd.DataFrame, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame[MANIFEST_COLUMNS].to_csv(path, sep="\t", header=False, index=False, encoding="utf-8")


class SegmentationDataset:
    """
    Samples of one manifest split, decoded lazily.

    Args:
        manifest: manifest path or an already-read frame
        class_map: raw id -> training id map applied to labels
        split: keep only rows with this split tag (None keeps every row)
    """

    def __init__(self, manifest, class_map: ClassMap, split: Optional[str] = None):
        frame = manifest if isinstance(manifest, pd.DataFrame) else read_manifest(manifest)
        if split is not None:
            frame = frame[frame["split"] == split]
        self.frame = frame.reset_index(drop=True)
        self.class_map = class_map
        self.split = split

    def __len__(self):
        return len(self.frame)

    def __getitem__(self, index: int) -> Sample:
        if not 0 <= index < len(self.frame):
            raise IndexError(index)
        row = self.frame.iloc[index]
        return load_sample(row["rgb"], row["depth"], row["label"], self.class_map)

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))


def _fetch(dataset, index: int, transform: Optional[Callable]):
    sample = dataset[index]
    return transform(index, sample) if transform is not None else sample


def prefetch(
    dataset,
    order: Iterable[int],
    transform: Optional[Callable] = None,
    buffer: int = 4,
    workers: Optional[int] = None,
) -> Iterator:
    """
    Decode (and transform) samples concurrently, delivered in `order`.

    Args:
        dataset: indexable collection of samples
        order: sample indices in delivery order
        transform: optional `transform(index, sample)` run in the worker
        buffer: most samples decoded ahead of the consumer
        workers: thread count, capped by SEGNET_THREADS
    """
    order = [int(i) for i in order]
    n_jobs = min(worker_count(workers), max(1, buffer))
    if n_jobs == 1 or len(order) <= 1:
        for index in order:
            yield _fetch(dataset, index, transform)
        return
    parallel = Parallel(n_jobs=n_jobs, backend="threading", return_as="generator", pre_dispatch=max(1, buffer))
    yield from parallel(delayed(_fetch)(dataset, index, transform) for index in order)
