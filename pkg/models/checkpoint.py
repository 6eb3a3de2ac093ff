# models/checkpoint.py
"""
Named-tensor checkpoint archive.

Layout (all integers 32-bit little-endian unsigned):
    b"SGCK" | format_version | entry count |
    per entry: path length, UTF-8 path, rank, extents..., float32 LE values (row-major)

Paths beginning with "_" carry trainer state (iteration counters, momentum
buffers); model loading hands them back untouched.
"""
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np

from exceptions import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"SGCK"
FORMAT_VERSION = 1
STATE_PREFIX = "_"
_U32 = struct.Struct("<I")
_VALUE_DTYPE = np.dtype("<f4")


@dataclass
class LoadReport:
    restored: List[str] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)
    unexpected: List[str] = field(default_factory=list)
    mismatched: List[str] = field(default_factory=list)
    extras: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def clean(self) -> bool:
        return not (self.missing or self.unexpected or self.mismatched)

    def summary(self) -> str:
        return (
            f"restored={len(self.restored)} missing={len(self.missing)} "
            f"unexpected={len(self.unexpected)} mismatched={len(self.mismatched)}"
        )


def write_checkpoint(path, entries: Dict[str, np.ndarray]):
    """Serialize path -> array entries; the file appears atomically."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    chunks = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(entries))]
    for name, array in entries.items():
        array = np.asarray(array)
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(array.ndim))
        chunks.extend(_U32.pack(int(extent)) for extent in array.shape)
        chunks.append(np.ascontiguousarray(array, dtype=_VALUE_DTYPE).tobytes())
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp_path, path)


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()

    offset = 0

    def take(size):
        nonlocal offset
        if offset + size > len(blob):
            raise CheckpointError(f"checkpoint {path} is truncated")
        chunk = blob[offset: offset + size]
        offset += size
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = _U32.unpack(take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    (count,) = _U32.unpack(take(4))

    entries = {}
    for _ in range(count):
        (length,) = _U32.unpack(take(4))
        try:
            name = take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"checkpoint {path} has a corrupt entry name") from e
        (rank,) = _U32.unpack(take(4))
        if rank > 4:
            raise CheckpointError(f"entry {name} has rank {rank}")
        shape = tuple(_U32.unpack(take(4))[0] for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(take(size * 4), dtype=_VALUE_DTYPE)
        entries[name] = values.reshape(shape).astype(np.float32)
    if offset != len(blob):
        raise CheckpointError(f"checkpoint {path} has trailing bytes")
    return entries


def save_checkpoint(model, path, extras: Optional[Dict[str, np.ndarray]] = None):
    """Write every parameter and batch-norm statistic of `model`, plus `extras`."""
    entries = {name: tensor.data for name, tensor in model.state_dict().items()}
    for name, value in (extras or {}).items():
        if not name.startswith(STATE_PREFIX):
            raise CheckpointError(f"extra entry '{name}' must start with '{STATE_PREFIX}'")
        entries[name] = np.asarray(value, dtype=np.float32).reshape(-1) if np.ndim(value) == 0 else value
    write_checkpoint(path, entries)
    logger.info(f"✅ Checkpoint saved to {path} ({len(entries)} entries)")


def _selected(name: str, prefixes: Optional[Iterable[str]]) -> bool:
    return prefixes is None or any(name.startswith(p) for p in prefixes)


def load_checkpoint(model, path, strict: bool = True, prefixes: Optional[Iterable[str]] = None) -> LoadReport:
    """
    Restore parameters and statistics by path.

    Args:
        model: module to load into
        path: checkpoint file
        strict: fail on any missing, unexpected or shape-mismatched entry
        prefixes: only consider paths starting with one of these

    Returns:
        LoadReport naming restored, missing, unexpected and mismatched paths
    """
    prefixes = tuple(prefixes) if prefixes is not None else None
    entries = read_checkpoint(path)
    state = model.state_dict()
    report = LoadReport()

    for name, values in entries.items():
        if name.startswith(STATE_PREFIX):
            report.extras[name] = values
        elif _selected(name, prefixes) and name not in state:
            report.unexpected.append(name)

    updates = []
    for name, tensor in state.items():
        if not _selected(name, prefixes):
            continue
        if name not in entries:
            report.missing.append(name)
        elif entries[name].shape != tensor.shape:
            report.mismatched.append(name)
        else:
            updates.append((name, tensor))

    if strict and not report.clean:
        problems = [f"missing {n}" for n in report.missing]
        problems += [f"unexpected {n}" for n in report.unexpected]
        problems += [
            f"shape mismatch {n}: file {list(entries[n].shape)} vs model {list(state[n].shape)}"
            for n in report.mismatched
        ]
        raise CheckpointError(f"strict load of {path} failed: " + "; ".join(problems[:10]))

    for name, tensor in updates:
        tensor.data = entries[name].astype(tensor.dtype)
        report.restored.append(name)

    if report.clean:
        logger.info(f"✅ Checkpoint loaded from {path} ({report.summary()})")
    else:
        logger.warning(f"⚠️ Partial checkpoint load from {path} ({report.summary()})")
    return report
