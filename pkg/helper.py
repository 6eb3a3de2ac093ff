# helper.py
import hashlib
import zlib

import numpy as np


# Every random stream is derived from the root seed and a component name,
# so rerunning one component alone reproduces its numbers.
def derive_rng(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(component.encode("utf-8"))])


def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    """
    Shuffled sample order for one epoch, fixed by (seed, epoch).
    """
    return derive_rng(seed, f"shuffle/{epoch}").permutation(count)


def digest_arrays(named_arrays) -> str:
    """SHA-256 over (name, dtype, shape, bytes) of each array, in the given order."""
    h = hashlib.sha256()
    for name, array in named_arrays:
        array = np.ascontiguousarray(array)
        h.update(name.encode("utf-8"))
        h.update(str(array.dtype).encode("ascii"))
        h.update(str(array.shape).encode("ascii"))
        h.update(array.tobytes())
    return h.hexdigest()


def format_float(value: float) -> str:
    return f"{value:.6g}"
