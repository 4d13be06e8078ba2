import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """
    Adam moments keyed by tensor name.

    Each key keeps its own step counter, so tensors that only receive
    gradients on some steps (latent rows) get correct bias correction.
    """

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    key_steps: Dict[str, int] = field(default_factory=dict)
    step_count: int = 0

    def reset(self) -> None:
        self.m.clear()
        self.v.clear()
        self.key_steps.clear()
        self.step_count = 0


def adam_step(state: AdamState, values: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              lr: Optional[float] = None) -> Tuple[AdamState, Dict[str, np.ndarray]]:
    """
    One Adam update.

    Args:
        state: Optimizer state (updated in place and returned)
        values: Current tensors; only keys present in ``grads`` move
        grads: Gradients keyed like ``values``
        lr: Optional learning-rate override for this step

    Returns:
        (state, new values) where new values holds every key of ``values``
    """
    rate = state.learning_rate if lr is None else lr
    updated = dict(values)

    for name, grad in grads.items():
        if name not in values:
            raise ValueError(f"Gradient for unknown tensor: {name}")
        value = np.asarray(values[name], dtype=np.float64)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != value.shape:
            raise ValueError(f"Gradient shape {grad.shape} does not match {name} shape {value.shape}")

        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        t = state.key_steps.get(name, 0) + 1

        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)

        state.m[name], state.v[name], state.key_steps[name] = m, v, t
        updated[name] = value - rate * m_hat / (np.sqrt(v_hat) + state.eps)

    state.step_count += 1
    return state, updated
