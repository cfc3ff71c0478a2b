"""
Оптимизатор Adam с AMSGrad
Максимум вторых моментов и отделённый weight decay
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Set

import numpy as np

from hierbert.exceptions import NumericError, ParameterError
from hierbert.tensor import Tensor

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    vhat: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def arrays(self) -> Dict[str, np.ndarray]:
        """Flat name -> array view used by checkpoints"""
        out = {}
        for prefix, table in (("optim.m.", self.m), ("optim.v.", self.v), ("optim.vhat.", self.vhat)):
            for name in sorted(table):
                out[prefix + name] = table[name]
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], t: int) -> "AdamState":
        state = cls(t=t)
        for key, value in arrays.items():
            for prefix, table in (("optim.m.", state.m), ("optim.v.", state.v), ("optim.vhat.", state.vhat)):
                if key.startswith(prefix):
                    table[key[len(prefix):]] = np.array(value, dtype=np.float64)
        return state


class AdamAMSGrad:
    """
    Per step and parameter:
        theta <- theta - lr * wd * theta
        m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2;  vhat <- max(vhat, v)
        theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(vhat / (1 - b2^t)) + eps)

    Parameters listed in `frozen` are skipped entirely, state included.
    """

    def __init__(self, params: Dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 state: Optional[AdamState] = None):
        if lr < 0:
            raise ParameterError("lr", lr, "[0, inf)")
        if weight_decay < 0:
            raise ParameterError("weight_decay", weight_decay, "[0, inf)")
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = state or AdamState()
        self.frozen: Set[str] = set()

    def freeze(self, names: Iterable[str]):
        self.frozen.update(names)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        active = {n: p for n, p in self.params.items() if n not in self.frozen and p.grad is not None}
        for name, p in active.items():
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"Non-finite gradient for parameter '{name}'; step aborted", parameter=name)

        state = self.state
        state.t += 1
        bc1 = 1.0 - BETA1 ** state.t
        bc2 = 1.0 - BETA2 ** state.t
        lr, wd = self.lr, self.weight_decay

        for name, p in active.items():
            g = p.grad
            if name not in state.m:
                state.m[name] = np.zeros_like(p.data)
                state.v[name] = np.zeros_like(p.data)
                state.vhat[name] = np.zeros_like(p.data)
            m = state.m[name] = BETA1 * state.m[name] + (1.0 - BETA1) * g
            v = state.v[name] = BETA2 * state.v[name] + (1.0 - BETA2) * g * g
            vhat = state.vhat[name] = np.maximum(state.vhat[name], v)

            data = p.data
            if wd:
                data = data - lr * wd * data
            p.data = data - lr * (m / bc1) / (np.sqrt(vhat / bc2) + EPS)


def adam_amsgrad_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState,
                      lr: float, wd: float = 0.0) -> AdamState:
    """Functional form: apply one update with explicit gradients"""
    for name, g in grads.items():
        params[name].grad = g
    AdamAMSGrad(params, lr, wd, state).step()
    return state
