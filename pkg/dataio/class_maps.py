# dataio/class_maps.py
"""
Raw label ids -> contiguous training ids.

Every map is total over its declared source ids; anything undeclared or
deliberately dropped becomes the ignore id 255.
"""
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from exceptions import ConfigError, DataError

IGNORE_ID = 255
PALETTE_DIR = os.path.join(os.path.dirname(__file__), "palettes")


@dataclass(frozen=True)
class ClassMap:
    """
    Args:
        name: registry name
        source_classes: (raw id, name) pairs the dataset declares
        target_classes: evaluation class names, index = training id
        mapping: raw id -> training id or IGNORE_ID
    """

    name: str
    source_classes: Tuple[Tuple[int, str], ...]
    target_classes: Tuple[str, ...]
    mapping: Dict[int, int] = field(hash=False)

    def __post_init__(self):
        declared = {raw for raw, _ in self.source_classes}
        if set(self.mapping) != declared:
            raise ConfigError(f"class map '{self.name}' is not total over its source ids", key="class_map")
        if any(not 0 <= raw <= 255 for raw in declared):
            raise ConfigError(f"class map '{self.name}' declares raw ids outside 0..255", key="class_map")
        used = sorted({t for t in self.mapping.values() if t != IGNORE_ID})
        if used != list(range(len(self.target_classes))):
            raise ConfigError(
                f"class map '{self.name}' targets {used}, expected 0..{len(self.target_classes) - 1}",
                key="class_map",
            )

    @property
    def num_classes(self) -> int:
        return len(self.target_classes)

    @property
    def lookup(self) -> np.ndarray:
        table = np.full(256, IGNORE_ID, dtype=np.uint8)
        for raw, target in self.mapping.items():
            table[raw] = target
        return table

    def apply(self, raw_labels) -> np.ndarray:
        """Remap a raw id map; ids the map does not declare become 255."""
        raw = np.asarray(raw_labels)
        if raw.dtype.kind not in "ui":
            raise DataError(f"label maps must hold integer ids, got {raw.dtype}")
        in_range = (raw >= 0) & (raw <= 255)
        return np.where(in_range, self.lookup[np.clip(raw, 0, 255)], IGNORE_ID).astype(np.uint8)

    def on_train_ids(self) -> "ClassMap":
        """Identity map over this map's training ids (labels that were already remapped)."""
        sources = tuple(enumerate(self.target_classes))
        return ClassMap(
            name=f"{self.name}/train-ids",
            source_classes=sources,
            target_classes=self.target_classes,
            mapping={i: i for i, _ in sources},
        )


# Official Cityscapes label table: (raw id, name, train id)
CITYSCAPES_LABELS = (
    (0, "unlabeled", IGNORE_ID),
    (1, "ego vehicle", IGNORE_ID),
    (2, "rectification border", IGNORE_ID),
    (3, "out of roi", IGNORE_ID),
    (4, "static", IGNORE_ID),
    (5, "dynamic", IGNORE_ID),
    (6, "ground", IGNORE_ID),
    (7, "road", 0),
    (8, "sidewalk", 1),
    (9, "parking", IGNORE_ID),
    (10, "rail track", IGNORE_ID),
    (11, "building", 2),
    (12, "wall", 3),
    (13, "fence", 4),
    (14, "guard rail", IGNORE_ID),
    (15, "bridge", IGNORE_ID),
    (16, "tunnel", IGNORE_ID),
    (17, "pole", 5),
    (18, "polegroup", IGNORE_ID),
    (19, "traffic light", 6),
    (20, "traffic sign", 7),
    (21, "vegetation", 8),
    (22, "terrain", 9),
    (23, "sky", 10),
    (24, "person", 11),
    (25, "rider", 12),
    (26, "car", 13),
    (27, "truck", 14),
    (28, "bus", 15),
    (29, "caravan", IGNORE_ID),
    (30, "trailer", IGNORE_ID),
    (31, "train", 16),
    (32, "motorcycle", 17),
    (33, "bicycle", 18),
)

CITYSCAPES_CLASSES = tuple(name for _, name, train in CITYSCAPES_LABELS if train != IGNORE_ID)

# CARLA semantic tags as exported by the simulator
CARLA_TAGS = (
    (0, "None"),
    (1, "Buildings"),
    (2, "Fences"),
    (3, "Other"),
    (4, "Pedestrians"),
    (5, "Poles"),
    (6, "RoadLines"),
    (7, "Roads"),
    (8, "Sidewalks"),
    (9, "Vegetation"),
    (10, "Vehicles"),
    (11, "Walls"),
    (12, "TrafficSigns"),
)
CARLA_IGNORED_TAGS = ("None", "Other", "RoadLines")
CARLA_CLASSES = (
    "Buildings", "Fences", "Pedestrians", "Poles", "Roads",
    "Sidewalks", "Vegetation", "Vehicles", "Walls", "TrafficSigns",
)

# Cityscapes training class -> CARLA evaluation class
CITYSCAPES_TO_CARLA = {
    "road": "Roads",
    "sidewalk": "Sidewalks",
    "building": "Buildings",
    "wall": "Walls",
    "fence": "Fences",
    "pole": "Poles",
    "traffic sign": "TrafficSigns",
    "vegetation": "Vegetation",
    "person": "Pedestrians",
    "car": "Vehicles",
    "truck": "Vehicles",
    "bus": "Vehicles",
}

SHAPE_KINDS = ("square", "disk", "triangle", "bar")


def cityscapes_class_map() -> ClassMap:
    return ClassMap(
        name="cityscapes",
        source_classes=tuple((raw, name) for raw, name, _ in CITYSCAPES_LABELS),
        target_classes=CITYSCAPES_CLASSES,
        mapping={raw: train for raw, _, train in CITYSCAPES_LABELS},
    )


def carla_class_map() -> ClassMap:
    mapping = {
        raw: IGNORE_ID if name in CARLA_IGNORED_TAGS else CARLA_CLASSES.index(name)
        for raw, name in CARLA_TAGS
    }
    return ClassMap(name="carla", source_classes=CARLA_TAGS, target_classes=CARLA_CLASSES, mapping=mapping)


def cityscapes_to_carla_class_map() -> ClassMap:
    """Cityscapes training ids scored against the CARLA class set; car, truck and bus become Vehicles."""
    sources = tuple(enumerate(CITYSCAPES_CLASSES))
    mapping = {
        train: CARLA_CLASSES.index(CITYSCAPES_TO_CARLA[name]) if name in CITYSCAPES_TO_CARLA else IGNORE_ID
        for train, name in sources
    }
    return ClassMap(
        name="cityscapes-to-carla", source_classes=sources, target_classes=CARLA_CLASSES, mapping=mapping
    )


def synthetic_class_names(num_classes: int) -> Tuple[str, ...]:
    """background, then pairs of one shape kind: the small one first, the large one second."""
    names = ["background"]
    for c in range(1, num_classes):
        kind = SHAPE_KINDS[(c - 1) // 2 % len(SHAPE_KINDS)]
        size = "small" if c % 2 == 1 else "large"
        group = (c - 1) // (2 * len(SHAPE_KINDS))
        names.append(f"{kind}-{size}" + (f"-{group + 1}" if group else ""))
    return tuple(names)


def synthetic_class_map(num_classes: int = 9) -> ClassMap:
    if num_classes < 2:
        raise ConfigError("synthetic data needs at least 2 classes", key="num_classes")
    names = synthetic_class_names(num_classes)
    sources = tuple(enumerate(names))
    return ClassMap(name="synthetic", source_classes=sources, target_classes=names, mapping={i: i for i in range(num_classes)})


CLASS_MAPS: Dict[str, Callable[..., ClassMap]] = {
    "cityscapes": cityscapes_class_map,
    "carla": carla_class_map,
    "cityscapes-to-carla": cityscapes_to_carla_class_map,
    "synthetic": synthetic_class_map,
}


def get_class_map(name: str, num_classes: Optional[int] = None) -> ClassMap:
    """Look up a class map by name; `num_classes` sizes the synthetic map."""
    if name not in CLASS_MAPS:
        raise ConfigError(f"unknown class map '{name}', choose from {sorted(CLASS_MAPS)}", key="class_map")
    if name == "synthetic":
        return synthetic_class_map(num_classes or 9)
    return CLASS_MAPS[name]()


# ---- palettes ----

def default_palette(num_classes: int) -> np.ndarray:
    """Bit-interleaved colour table (the PASCAL VOC scheme)."""
    palette = np.zeros((num_classes, 3), dtype=np.uint8)
    for index in range(num_classes):
        c, r, g, b = index, 0, 0, 0
        for bit in range(8):
            r |= ((c >> 0) & 1) << (7 - bit)
            g |= ((c >> 1) & 1) << (7 - bit)
            b |= ((c >> 2) & 1) << (7 - bit)
            c >>= 3
        palette[index] = (r, g, b)
    return palette


def load_palette(path, num_classes: Optional[int] = None) -> np.ndarray:
    """Read `R G B` rows (text after `#` is a comment) into a [K,3] uint8 table."""
    if not os.path.exists(path):
        raise DataError(f"palette file not found: {path}")
    rows = []
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            try:
                values = [int(p) for p in parts]
            except ValueError as e:
                raise DataError(f"{path}:{number}: expected three integers") from e
            if len(values) != 3 or any(not 0 <= v <= 255 for v in values):
                raise DataError(f"{path}:{number}: expected three integers in 0..255")
            rows.append(values)
    palette = np.array(rows, dtype=np.uint8).reshape(-1, 3)
    if num_classes is not None and len(palette) < num_classes:
        raise DataError(f"palette {path} has {len(palette)} colours, {num_classes} classes need colouring")
    return palette


def palette_for(class_map: ClassMap, path=None) -> np.ndarray:
    """Explicit palette file, else the packaged one for this map, else the default table."""
    if path:
        return load_palette(path, class_map.num_classes)
    target_name = "carla" if class_map.target_classes == CARLA_CLASSES else class_map.name
    packaged = os.path.join(PALETTE_DIR, f"{target_name}.txt")
    if os.path.exists(packaged):
        return load_palette(packaged, class_map.num_classes)
    return default_palette(class_map.num_classes)


def colorize(labels: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """[H,W] ids -> [H,W,3] uint8; ids outside the palette (the ignore id) render black."""
    labels = np.asarray(labels)
    table = np.zeros((256, 3), dtype=np.uint8)
    table[: len(palette)] = palette[:256]
    return table[np.clip(labels, 0, 255)]

