"""Parameter containers shared by the GAT block and the field network."""

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor


@dataclass
class Linear:
    weight: Tensor  # (fan_in, fan_out)
    bias: Tensor = None

    @property
    def fan_in(self):
        return self.weight.shape[0]

    @property
    def fan_out(self):
        return self.weight.shape[1]


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


def init_linear(rng, fan_in, fan_out, bias=True, dtype=np.float32):
    """Uniform init in +-sqrt(1/fan_in) for weight and bias alike."""
    bound = math.sqrt(1.0 / fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, dtype=dtype)
    b = None
    if bias:
        b = Tensor(rng.uniform(-bound, bound, size=(fan_out,)), requires_grad=True, dtype=dtype)
    return Linear(w, b)


def init_layernorm(dim, dtype=np.float32):
    return LayerNormParams(
        Tensor(np.ones(dim), requires_grad=True, dtype=dtype),
        Tensor(np.zeros(dim), requires_grad=True, dtype=dtype),
    )


def named_tensors(obj, prefix=""):
    """Yield ``(dotted_name, tensor)`` for every tensor inside ``obj``.

    Walks dataclasses, lists and dicts in declaration order so names are
    stable across runs.
    """
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is not None:
                yield from named_tensors(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from named_tensors(value, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key, value in obj.items():
            yield from named_tensors(value, f"{prefix}.{key}" if prefix else str(key))


def parameters(obj):
    return [t for _, t in named_tensors(obj)]
