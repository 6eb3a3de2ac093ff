# autograd/tensor.py
"""
Dense tensors with reverse-mode automatic differentiation.

Every forward op that touches a tracked tensor appends one node to the
active Tape (define-by-run). `backward` walks that tape in reverse order
and writes d(loss)/d(leaf) into the `.grad` of every leaf that asked for it.
The tape, the recording flag and the default dtype are context-local, so
separate threads or tasks never share a tape.
"""
import contextlib
import logging
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any, Iterable, Optional, Sequence, Tuple

import numpy as np

from exceptions import NonFiniteError, ShapeError, StaleTapeError

logger = logging.getLogger(__name__)

MAX_RANK = 4

_default_dtype: ContextVar[Any] = ContextVar("default_dtype", default=np.float32)
_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)
_active_tape: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)


def get_default_dtype():
    return _default_dtype.get()


@contextlib.contextmanager
def double_precision():
    """Create new tensors in float64 (used by gradient checks)."""
    token = _default_dtype.set(np.float64)
    try:
        yield
    finally:
        _default_dtype.reset(token)


@contextlib.contextmanager
def no_grad():
    """Run forward ops without recording them."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """
    Dense rank-1..4 array in (batch, channel, height, width) order.

    Args:
        data: array-like values; scalars become shape (1,)
        requires_grad: make this a leaf that receives gradients
        dtype: element type, defaults to the context default (float32)
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported rank {MAX_RANK}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None
        self._generation = -1

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def is_recorded(self) -> bool:
        """True while this tensor's tape node is still valid."""
        return (
            self.node_id is not None
            and self._tape is not None
            and self._tape.generation == self._generation
        )

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.is_recorded()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{flag})"


class Parameter(Tensor):
    """Learnable leaf tensor. `decay` marks weights that take weight decay."""

    def __init__(self, data, decay: bool = False, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.decay = decay


@dataclass
class Node:
    node_id: int
    fn: "Function"
    inputs: Tuple[Tensor, ...]


class Tape:
    """Ordered record of the ops run in one execution context."""

    def __init__(self):
        self.nodes = []
        self.generation = 0

    def __len__(self):
        return len(self.nodes)

    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def record(self, fn: "Function", inputs: Sequence[Tensor], out: Tensor) -> int:
        node = Node(self.next_id, fn, tuple(inputs))
        self.nodes.append(node)
        out.node_id = node.node_id
        out._tape = self
        out._generation = self.generation
        return node.node_id

    def clear(self):
        """Drop every node; tensors recorded so far become stale."""
        self.nodes = []
        self.generation += 1

    @classmethod
    @contextlib.contextmanager
    def scope(cls):
        """Install a fresh tape for the duration of the block."""
        tape = cls()
        token = _active_tape.set(tape)
        try:
            yield tape
        finally:
            _active_tape.reset(token)


def current_tape() -> Tape:
    tape = _active_tape.get()
    if tape is None:
        tape = Tape()
        _active_tape.set(tape)
    return tape


class Function:
    """
    Base class for differentiable ops.

    Subclasses implement `forward` on raw arrays and `backward`, which maps the
    gradient of the output to a tuple of input gradients (None where an input
    takes no gradient).
    """

    name = "function"

    def __init__(self):
        self.needs_input_grad: Tuple[bool, ...] = ()

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{self.name} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{self.name} has no backward pass")

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        fn = cls()
        fn.needs_input_grad = tuple(t.tracked for t in tensors)
        out_data = fn.forward(*(t.data for t in tensors), **kwargs)
        if not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"{cls.name} produced non-finite values")
        out = Tensor(out_data)
        if is_grad_enabled() and any(fn.needs_input_grad):
            current_tape().record(fn, tensors, out)
        return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor_new(
    shape: Sequence[int],
    init: str = "zeros",
    value: float = 0.0,
    values: Optional[Iterable[float]] = None,
    seed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    dtype=None,
    requires_grad: bool = False,
) -> Tensor:
    """
    Allocate a tensor.

    Args:
        shape: positive extents, rank 1..4
        init: "zeros", "constant" (fill with `value`), "uniform"
            (U(-value, value)) or "values" (explicit row-major `values`)
        seed / rng: randomness for "uniform"; a seed always gives the same values

    Returns:
        Tensor not on any tape, with no grad
    """
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= MAX_RANK:
        raise ShapeError(f"rank must be 1..{MAX_RANK}, got {len(shape)}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be positive, got {list(shape)}")
    dtype = dtype or get_default_dtype()

    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif init == "uniform":
        if rng is None:
            rng = np.random.default_rng(seed)
        data = rng.uniform(-value, value, size=shape).astype(dtype)
    elif init == "values":
        flat = np.asarray(list(values if values is not None else []), dtype=dtype)
        if flat.size != int(np.prod(shape)):
            raise ShapeError(f"{flat.size} values do not fill shape {list(shape)}")
        data = flat.reshape(shape)
    else:
        raise ValueError(f"unknown init '{init}'")
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


class Add(Function):
    name = "add"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add needs identical shapes, got {list(a.shape)} and {list(b.shape)}")
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul needs identical shapes, got {list(a.shape)} and {list(b.shape)}")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class SumAll(Function):
    name = "sum"

    def forward(self, x):
        self.shape = x.shape
        return np.sum(x, dtype=x.dtype).reshape(1)

    def backward(self, grad):
        return (np.full(self.shape, grad.reshape(-1)[0], dtype=grad.dtype),)


class ConcatChannels(Function):
    name = "concat_channels"

    def forward(self, a, b):
        if a.ndim != 4 or b.ndim != 4:
            raise ShapeError("concat_channels needs rank-4 tensors")
        if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
            raise ShapeError(
                f"concat_channels needs equal batch/height/width, got {list(a.shape)} and {list(b.shape)}"
            )
        self.split = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, grad):
        return grad[:, : self.split], grad[:, self.split:]


class SliceChannels(Function):
    name = "slice_channels"

    def forward(self, x, start, stop):
        if not 0 <= start < stop <= x.shape[1]:
            raise ShapeError(f"channel slice [{start}, {stop}) outside {x.shape[1]} channels")
        self.shape, self.start, self.stop = x.shape, start, stop
        return x[:, start:stop].copy()

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        full[:, self.start: self.stop] = grad
        return (full,)


class CropSpatial(Function):
    name = "crop_spatial"

    def forward(self, x, height, width):
        if height > x.shape[2] or width > x.shape[3] or height < 1 or width < 1:
            raise ShapeError(f"cannot crop {list(x.shape)} to {height}x{width}")
        self.shape = x.shape
        return x[:, :, :height, :width].copy()

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        full[:, :, : grad.shape[2], : grad.shape[3]] = grad
        return (full,)


def add(a, b) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def mul(a, b) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def sum_all(x) -> Tensor:
    return SumAll.apply(as_tensor(x))


def concat_channels(a, b) -> Tensor:
    return ConcatChannels.apply(as_tensor(a), as_tensor(b))


def slice_channels(x, start: int, stop: int) -> Tensor:
    return SliceChannels.apply(as_tensor(x), start=start, stop=stop)


def crop_spatial(x, height: int, width: int) -> Tensor:
    """Keep the top-left height x width window."""
    return CropSpatial.apply(as_tensor(x), height=height, width=width)


def _zero_fill(tensors: Optional[Iterable[Tensor]]):
    for tensor in tensors or ():
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None):
    """
    Accumulate d(loss)/d(leaf) into every reachable leaf with requires_grad.

    Args:
        loss: single-element tensor
        inputs: leaves that must hold a grad afterwards; unreachable ones get zeros
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    inputs = list(inputs) if inputs is not None else None

    if loss.node_id is None:
        if loss.requires_grad:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
        else:
            logger.debug("backward on an untracked loss writes no gradients")
        _zero_fill(inputs)
        return

    tape = loss._tape
    if tape is None or tape.generation != loss._generation:
        raise StaleTapeError("loss was recorded on a tape that has been cleared")

    pending = {loss.node_id: np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        grad = pending.pop(node.node_id, None)
        if grad is None:
            continue
        for tensor, g in zip(node.inputs, node.fn.backward(grad)):
            if g is None:
                continue
            if tensor._tape is tape and tensor.is_recorded():
                key = tensor.node_id
                pending[key] = g if key not in pending else pending[key] + g
            elif tensor.requires_grad:
                key = id(tensor)
                if key in leaves:
                    leaves[key] = (tensor, leaves[key][1] + g)
                else:
                    leaves[key] = (tensor, g)

    for tensor, g in leaves.values():
        g = np.array(g, dtype=tensor.data.dtype)
        tensor.grad = g if tensor.grad is None else tensor.grad + g
    _zero_fill(inputs)
