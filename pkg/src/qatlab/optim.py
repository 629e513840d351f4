"""First-order optimizers keyed by parameter name.

State is stored per name rather than per object because the auxiliary branch
replaces its factor tensors whenever it is truncated or re-split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class SGD:
    def __init__(self, weight_decay: float = 0.0):
        self.weight_decay = weight_decay

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        for p in params.values():
            if p.grad is None:
                continue
            p.data -= lr * (p.grad + self.weight_decay * p.data)

    def slice_state(self, name, rows=None, cols=None) -> None:
        pass

    def reset_state(self, name) -> None:
        pass


@dataclass
class _Moments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class AdamW:
    """Adam with decoupled weight decay: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    state: dict[str, _Moments] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            st = self.state.get(name)
            if st is None or st.m.shape != p.data.shape:
                if st is not None:
                    raise ValueError(f"optimizer state for {name!r} has shape {st.m.shape}, parameter {p.data.shape}")
                st = self.state[name] = _Moments(np.zeros_like(p.data), np.zeros_like(p.data))
            g = p.grad
            st.t += 1
            st.m = self.beta1 * st.m + (1.0 - self.beta1) * g
            st.v = self.beta2 * st.v + (1.0 - self.beta2) * g * g
            m_hat = st.m / (1.0 - self.beta1**st.t)
            v_hat = st.v / (1.0 - self.beta2**st.t)
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)

    def slice_state(self, name: str, rows=None, cols=None) -> None:
        """Keep moments only for the surviving rows/columns of a shrunk parameter."""
        st = self.state.get(name)
        if st is None:
            return
        for attr in ("m", "v"):
            a = getattr(st, attr)
            if rows is not None:
                a = a[rows, :]
            if cols is not None:
                a = a[:, cols]
            setattr(st, attr, a.copy())

    def reset_state(self, name: str) -> None:
        self.state.pop(name, None)

    def drop_prefix(self, prefix: str) -> None:
        for k in [k for k in self.state if k.startswith(prefix)]:
            del self.state[k]
