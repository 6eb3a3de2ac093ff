# models/layers.py
"""
Parameter containers around the functional ops.

A Module finds its parameters, buffers and children by walking its own
attributes in definition order, so parameter paths read like
`rgb.res4.1.conv2.weight`.
"""
import math
from collections import OrderedDict
from typing import Iterator, Tuple

import numpy as np

from autograd import functional as F
from autograd.functional import BatchNormState, ConvSpec
from autograd.tensor import Parameter, Tensor, get_default_dtype


class Module:
    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError(f"{type(self).__name__} has no forward")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}{name}.")

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield f"{prefix}{name}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and not isinstance(value, Parameter):
                yield f"{prefix}{name}", value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, Tensor]":
        """Parameters and buffers by path (the checkpoint contents)."""
        state = OrderedDict(self.named_parameters())
        state.update(self.named_buffers())
        return state

    def train(self, mode: bool = True):
        for _, module in self.named_modules():
            module.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    """Children addressed by position: `res4.0`, `res4.1`, ..."""

    def __init__(self, modules=()):
        super().__init__()
        self._count = 0
        for module in modules:
            self.append(module)

    def append(self, module: Module):
        setattr(self, str(self._count), module)
        self._count += 1

    def __len__(self):
        return self._count

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._count))

    def __getitem__(self, index: int) -> Module:
        if index < 0:
            index += self._count
        return getattr(self, str(index))


def he_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    """U(-b, b) with b = sqrt(6 / fan_in)."""
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.weight = Parameter(he_uniform(spec.weight_shape, rng), decay=True)
        self.bias = Parameter(np.zeros(spec.out_channels, dtype=get_default_dtype())) if spec.has_bias else None

    def forward(self, x):
        return F.conv2d(x, self.spec, self.weight, self.bias)

    def output_shape(self, shape):
        n, _, h, w = shape
        return (n, self.spec.out_channels) + self.spec.output_size(h, w)


class BatchNorm2d(Module):
    """Train mode follows `training`; `frozen` pins it to running statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        dtype = get_default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps
        self.frozen = False

    @property
    def mode(self) -> str:
        return "train" if self.training and not self.frozen else "frozen"

    @property
    def state(self) -> BatchNormState:
        return BatchNormState(
            self.gamma, self.beta, self.running_mean, self.running_var,
            momentum=self.momentum, eps=self.eps, mode=self.mode,
        )

    def forward(self, x):
        return F.batch_norm(x, self.state)

    def output_shape(self, shape):
        return shape


class ConvBNReLU(Module):
    """conv + batch norm, followed by ReLU unless `activation` is off."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, activation: bool = True, bn_momentum: float = 0.1):
        super().__init__()
        self.conv = Conv2d(spec, rng)
        self.bn = BatchNorm2d(spec.out_channels, momentum=bn_momentum)
        self.activation = activation

    def forward(self, x):
        y = self.bn(self.conv(x))
        return F.relu(y) if self.activation else y

    def output_shape(self, shape):
        return self.conv.output_shape(shape)
