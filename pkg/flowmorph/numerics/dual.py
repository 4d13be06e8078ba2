"""
Forward-mode dual numbers carrying several tangent directions at once.

The primal and every tangent are tape ``Var`` objects, so a forward-mode pass
run under a ``GradTape`` is itself differentiable in reverse mode.
"""

from typing import List, Optional, Sequence

import numpy as np

from flowmorph.numerics import tape as T
from flowmorph.numerics.tape import Var


class Dual:
    """Primal value plus one tangent per seeded direction."""

    __slots__ = ("primal", "tangents")

    def __init__(self, primal, tangents: Sequence):
        self.primal = T.as_var(primal)
        self.tangents: List[Var] = [T.as_var(t) for t in tangents]

    @classmethod
    def seeded(cls, x, seed_columns: int, extra=None) -> "Dual":
        """
        Dual input for a batch of rows whose first ``seed_columns`` columns
        are differentiated; ``extra`` columns (conditioning) carry zero tangents.

        Args:
            x: (N, d) spatial input
            seed_columns: Number of seeded directions (d)
            extra: Optional (N, k) or (k,) conditioning appended as constant columns
        """
        x = T.as_var(x)
        n, d = x.shape
        if seed_columns != d:
            raise ValueError(f"Expected {d} seed columns, got {seed_columns}")

        width = d
        primal = x
        if extra is not None:
            extra = T.as_var(extra)
            if extra.value.ndim == 1:
                extra = T.broadcast_to(T.reshape(extra, (1, extra.shape[0])), (n, extra.shape[0]))
            width = d + extra.shape[1]
            primal = T.concat([x, extra], axis=1)

        tangents = []
        for k in range(d):
            seed = np.zeros((n, width))
            seed[:, k] = 1.0
            tangents.append(Var(seed))
        return cls(primal, tangents)

    def linear(self, weight: Var, bias: Optional[Var] = None) -> "Dual":
        primal = self.primal @ weight
        if bias is not None:
            primal = primal + bias
        return Dual(primal, [t @ weight for t in self.tangents])

    def activate(self, kind: str) -> "Dual":
        if kind == "identity":
            return self
        if kind == "tanh":
            out = T.tanh(self.primal)
            slope = 1.0 - out * out
            return Dual(out, [slope * t for t in self.tangents])
        if kind == "elu":
            out = T.elu(self.primal)
            slope = T.elu_derivative(self.primal)
            return Dual(out, [slope * t for t in self.tangents])
        if kind == "relu":
            raise ValueError("relu is not differentiable at its kink; use elu or tanh for spatial derivatives")
        raise ValueError(f"Unknown activation: {kind}")

    @property
    def width(self) -> int:
        return self.primal.shape[-1]
