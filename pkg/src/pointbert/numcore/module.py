"""Parameter containers: a small ``Module`` base plus Linear and LayerNorm."""

from collections import OrderedDict

import numpy as np

from ..errors import CheckpointError, ShapeError
from .functional import layernorm
from .tensor import Tensor, matmul


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Attributes holding Tensors, Modules or lists of Modules form the tree.

    Parameter names are dotted attribute paths in definition order, which
    fixes the checkpoint record order.
    """

    training = True

    def named_parameters(self, prefix=""):
        out = []
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def children(self):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def train(self, mode=True):
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        missing = [k for k in params if k not in state]
        unexpected = [k for k in state if k not in params]
        if strict and (missing or unexpected):
            raise CheckpointError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
            p.data = value.copy()

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored as (in, out).

    ``init="uniform"`` draws from ±1/sqrt(in); ``init="he"`` uses the wider
    ±sqrt(6/in) bound that keeps activation scale through ReLU stacks.
    """

    def __init__(self, in_dim, out_dim, rng, bias=True, init="uniform"):
        if init not in ("uniform", "he"):
            raise ValueError(f"unknown init {init!r}")
        bound = np.sqrt(6.0 / in_dim) if init == "he" else 1.0 / np.sqrt(in_dim)
        self.weight = parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return layernorm(x, self.gain, self.bias, self.eps)
