"""
Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves on the innermost active `GradTape` whenever one
of their inputs requires a gradient. Outside a tape every op is a plain numpy
computation, which is how inference and probing run.

Shapes are never broadcast implicitly except for a bias vector added over the
last dimension; any other mismatch raises `DimensionError`.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from hierbert.exceptions import DimensionError, ParameterError, TapeStateError, TokenLookupError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float, int]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

# Score given to masked attention positions; exp() of it underflows to exactly 0.
MASK_SCORE = -1e30
GELU_C = np.sqrt(2.0 / np.pi)

_ids = itertools.count()
_active_tapes: List["GradTape"] = []


class Tensor:
    """n-dimensional float64 array that can take part in a gradient tape"""

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.flags = set()
        self.node_id = next(_ids)
        self._tape: Optional["GradTape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(t.node_id for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.node_id


class GradTape:
    """Ordered record of differentiable ops; consumed by exactly one backward pass"""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: BackwardFn):
        if self.consumed:
            raise TapeStateError("Cannot record on a consumed gradient tape")
        output._tape = self
        self.entries.append(TapeEntry(op, inputs, output, backward))

    def backward(self, loss: Tensor) -> List[Tensor]:
        return backward(loss, tape=self)


def active_tape() -> Optional[GradTape]:
    return _active_tapes[-1] if _active_tapes else None


def _result(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], grad_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, grad_fn)
    return out


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor, tape: Optional[GradTape] = None) -> List[Tensor]:
    """
    Reverse-mode accumulation from a scalar loss.

    Leaf tensors that require a gradient receive it in `.grad` (added to any
    gradient already there). Returns the leaves that were reached.
    """
    if loss.data.size != 1:
        raise DimensionError("backward", loss.shape)
    tape = tape or loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return [loss]
        raise TapeStateError("Loss was not recorded on a gradient tape")
    if tape.consumed:
        raise TapeStateError()

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output_id, None)
        if g is None:
            continue
        for inp, ig in zip(entry.inputs, entry.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp._tape is not tape:
                leaves[inp.node_id] = inp
            prev = grads.get(inp.node_id)
            grads[inp.node_id] = ig if prev is None else prev + ig

    tape.consumed = True
    tape.entries = []

    reached = []
    for node_id, leaf in leaves.items():
        g = grads[node_id]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        reached.append(leaf)
    return reached


# ============ Elementwise ============

def add(a: Tensor, b: Tensor) -> Tensor:
    """Same-shape sum, or a bias vector added over the last dimension"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _result("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        width = b.shape[0]
        return _result("add_bias", a.data + b.data, (a, b),
                       lambda g: (g, g.reshape(-1, width).sum(axis=0)))
    raise DimensionError("add", a.shape, b.shape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("sub", a.shape, b.shape)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _result("scale", x.data * c, (x,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation"""
    xd = x.data
    inner = GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    return _result("gelu", out, (x,), grad_fn)


def mask_fill(x: Tensor, keep: np.ndarray, value: float = MASK_SCORE) -> Tensor:
    """Replace entries where `keep` is False; `keep` may broadcast to x"""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    out = np.where(keep, x.data, value)
    return _result("mask_fill", out, (x,), lambda g: (np.where(keep, g, 0.0),))


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity at inference or p == 0"""
    if not 0.0 <= p < 1.0:
        raise ParameterError("dropout_p", p, "[0, 1)")
    if not training or p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    factor = keep / (1.0 - p)
    return _result("dropout", x.data * factor, (x,), lambda g: (g * factor,))


# ============ Shape ============

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", old, tuple(shape))
    return _result("reshape", out, (x,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result("permute", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inverse),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes"""
    return _result("transpose", np.swapaxes(x.data, -1, -2), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _result("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors,
                   lambda g: tuple(np.split(g, bounds, axis=ax)))


def gather_rows(x: Tensor, indices: ArrayLike, table: str = "rows") -> Tensor:
    """Select rows of a 2-D tensor; repeated indices accumulate gradient"""
    if x.ndim != 2:
        raise DimensionError("gather_rows", x.shape)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size:
        bad = idx[(idx < 0) | (idx >= x.shape[0])]
        if bad.size:
            raise TokenLookupError(table, int(bad[0]), x.shape[0])
    n_rows = x.shape[0]

    def grad_fn(g):
        full = np.zeros((n_rows, g.shape[-1]))
        np.add.at(full, idx.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (full,)

    return _result("gather_rows", x.data[idx], (x,), grad_fn)


# ============ Reductions ============

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result("mean", np.array(x.data.sum() / n), (x,), lambda g: (np.full(shape, float(g) / n),))


# ============ Linear algebra ============

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    Both operands are 2-D, or both have the same rank and identical leading
    (batch) dimensions.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b),
                   lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))


# ============ Normalisation ============

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError("softmax", x.shape)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result("softmax", y, (x,),
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def grad_fn(g):
        flat_g = g.reshape(-1, width)
        flat_xhat = xhat.reshape(-1, width)
        d_gamma = (flat_g * flat_xhat).sum(axis=0)
        d_beta = flat_g.sum(axis=0)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, d_gamma, d_beta

    return _result("layer_norm", xhat * gd + beta.data, (x, gamma, beta), grad_fn)


# ============ Losses ============

def cross_entropy(logits: Tensor, targets: ArrayLike, ignore_index: Optional[int] = -100) -> Tensor:
    """
    Mean negative log-likelihood over rows whose target is not `ignore_index`.

    When every row is ignored the loss is 0, carries the flag "all_ignored",
    and produces a zero gradient.
    """
    if logits.ndim != 2:
        raise DimensionError("cross_entropy", logits.shape)
    n, n_classes = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise DimensionError("cross_entropy", logits.shape, t.shape)
    valid = np.ones(n, dtype=bool) if ignore_index is None else t != ignore_index
    bad = t[valid & ((t < 0) | (t >= n_classes))]
    if bad.size:
        raise TokenLookupError("classes", int(bad[0]), n_classes)
    count = int(valid.sum())
    if count == 0:
        logger.warning("cross_entropy: every row ignored, loss defined as 0")
        out = _result("cross_entropy", np.array(0.0), (logits,), lambda g: (np.zeros((n, n_classes)),))
        out.flags.add("all_ignored")
        return out

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, t[rows]].sum() / count

    def grad_fn(g):
        d = np.exp(logp)
        d[rows, t[rows]] -= 1.0
        d[~valid] = 0.0
        return (d * (float(g) / count),)

    return _result("cross_entropy", np.array(loss), (logits,), grad_fn)
