"""Named parameter store and the AdamW update with decoupled weight decay."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


class ParamStore:
    """Named trainable tensors plus per-parameter AdamW moment buffers.

    Buffers (e.g. batch-norm running statistics) are registered with
    trainable=False: they are serialized like parameters but never optimized.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype).type
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def create(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=trainable)
        self._params[name] = t
        self._m[name] = np.zeros(t.shape, dtype=self.dtype)
        self._v[name] = np.zeros(t.shape, dtype=self.dtype)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self._params.items() if t.requires_grad}

    def moments(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self._m[name], self._v[name]

    def num_elements(self, trainable_only: bool = True) -> int:
        return sum(
            t.size
            for t in self._params.values()
            if t.requires_grad or not trainable_only
        )


def adamw_step(
    store: ParamStore,
    grads: dict[str, np.ndarray | Tensor],
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One AdamW step over the gradient'd subset of the store's parameters.

    Weight decay is decoupled: applied directly to the parameter values, not
    folded into the gradient before the moment updates.
    """
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(grads):
        if name not in store:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        p = store[name]
        g = grads[name]
        g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=p.data.dtype)
        if g.shape != p.shape:
            raise ShapeError(
                f"adamw: gradient shape {g.shape} != parameter {name!r} shape {p.shape}"
            )
        m, v = store.moments(name)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= lr * weight_decay * p.data
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
