"""
Parameter containers and the small layers the encoder and heads are built from
"""

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from hierbert.exceptions import DimensionError
from hierbert.tensor import Tensor, add, layer_norm, matmul, reshape


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Walks attributes (tensors, sub-modules, lists of sub-modules) in definition order"""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + attr, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")

    def parameters(self) -> Dict[str, Tensor]:
        params = dict(self.named_parameters())
        for name, p in params.items():
            p.name = name
        return params

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray], strict: bool = True):
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(arrays))
            if missing:
                raise KeyError(f"Missing arrays for parameters: {missing}")
        for name, p in params.items():
            if name not in arrays:
                continue
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"load {name}", p.shape, value.shape)
            p.data = value.copy()


class Linear(Module):
    """Affine map over the last dimension: x @ weight + bias"""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, std: float = 0.02):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = parameter(rng.normal(0.0, std, size=(in_dim, out_dim)))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError("linear", x.shape, self.weight.shape)
        lead = x.shape[:-1]
        y = matmul(reshape(x, (-1, self.in_dim)), self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        return reshape(y, lead + (self.out_dim,))


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-12):
        self.eps = eps
        self.gamma = parameter(np.ones(width))
        self.beta = parameter(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


def zero_init(module: Module, value: Optional[float] = 0.0):
    """Set every parameter of a module to a constant (tests and ablations)"""
    for p in module.parameters().values():
        p.data = np.full(p.shape, value)
