"""
Fully-connected networks: parameters, plain and taped forward passes, and
exact spatial Jacobians through forward-mode duals.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from flowmorph.numerics import tape as T
from flowmorph.numerics.dual import Dual
from flowmorph.numerics.tape import GradTape, Var

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "elu", "tanh", "identity")

_NUMPY_ACTIVATIONS = {
    "identity": lambda a: a,
    "relu": lambda a: np.maximum(a, 0.0),
    "tanh": np.tanh,
    "elu": lambda a: np.where(a > 0.0, a, np.expm1(np.minimum(a, 0.0))),
}


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Weights stored as (fan_in, fan_out) matrices, one activation per layer."""

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    activations: Tuple[str, ...]
    use_bias: bool = True

    def __post_init__(self):
        weights = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        biases = tuple(np.array(b, dtype=np.float64) for b in self.biases)
        activations = tuple(self.activations)

        if not weights:
            raise ValueError("An MLP needs at least one layer")
        if not (len(weights) == len(biases) == len(activations)):
            raise ValueError("weights, biases and activations must have equal length")

        for k, (w, b, act) in enumerate(zip(weights, biases, activations)):
            if w.ndim != 2:
                raise ValueError(f"Layer {k} weight must be 2-D, got shape {w.shape}")
            if b.shape != (w.shape[1],):
                raise ValueError(f"Layer {k} bias shape {b.shape} does not match width {w.shape[1]}")
            if k > 0 and weights[k - 1].shape[1] != w.shape[0]:
                raise ValueError(f"Layer {k} input width {w.shape[0]} does not chain from {weights[k - 1].shape[1]}")
            if act not in ACTIVATIONS:
                raise ValueError(f"Unknown activation: {act}")
            if not self.use_bias and np.any(b != 0.0):
                raise ValueError("Bias-free network has non-zero biases")

        for arr in weights + biases:
            arr.setflags(write=False)

        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "activations", activations)

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_width(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def widths(self) -> List[int]:
        return [self.input_width] + [w.shape[1] for w in self.weights]

    @property
    def spatially_differentiable(self) -> bool:
        return "relu" not in self.activations

    def named_tensors(self, prefix: str) -> List[Tuple[str, np.ndarray]]:
        """Trainable tensors in a fixed order; zero biases of bias-free nets are excluded."""
        out = []
        for k, w in enumerate(self.weights):
            out.append((f"{prefix}.W{k}", w))
            if self.use_bias:
                out.append((f"{prefix}.b{k}", self.biases[k]))
        return out

    def with_tensors(self, mapping: Dict[str, np.ndarray], prefix: str) -> "MlpParams":
        """Copy with any tensors present in ``mapping`` replaced."""
        weights, biases = list(self.weights), list(self.biases)
        for k in range(len(weights)):
            key = f"{prefix}.W{k}"
            if key in mapping:
                weights[k] = _checked(mapping[key], weights[k].shape, key)
            key = f"{prefix}.b{k}"
            if self.use_bias and key in mapping:
                biases[k] = _checked(mapping[key], biases[k].shape, key)
        return MlpParams(tuple(weights), tuple(biases), self.activations, self.use_bias)

    def bind(self, tape: Optional[GradTape] = None, prefix: str = "mlp") -> "MlpVars":
        """Wrap tensors as Vars, watched on ``tape`` when one is given."""
        if tape is None:
            weights = [Var(w) for w in self.weights]
            biases = [Var(b) if self.use_bias else None for b in self.biases]
        else:
            weights = [tape.watch(w, f"{prefix}.W{k}") for k, w in enumerate(self.weights)]
            biases = [tape.watch(b, f"{prefix}.b{k}") if self.use_bias else None
                      for k, b in enumerate(self.biases)]
        return MlpVars(weights, biases, self.activations)


def _checked(value, shape, name) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"Tensor {name} has shape {arr.shape}, expected {shape}")
    return arr


@dataclass
class MlpVars:
    weights: List[Var]
    biases: List[Optional[Var]]
    activations: Tuple[str, ...]

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]


def _activate(x: Var, kind: str) -> Var:
    if kind == "identity":
        return x
    if kind == "relu":
        return T.relu(x)
    if kind == "tanh":
        return T.tanh(x)
    if kind == "elu":
        return T.elu(x)
    raise ValueError(f"Unknown activation: {kind}")


def mlp_apply(params: MlpVars, x) -> Var:
    """Taped forward pass over a (width,) vector or an (N, width) batch."""
    out = T.as_var(x)
    if out.shape[-1] != params.input_width:
        raise ValueError(f"Input width {out.shape[-1]} does not match network width {params.input_width}")
    for w, b, act in zip(params.weights, params.biases, params.activations):
        out = out @ w
        if b is not None:
            out = out + b
        out = _activate(out, act)
    return out


def mlp_apply_dual(params: MlpVars, x: Dual) -> Dual:
    out = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        out = out.linear(w, b).activate(act)
    return out


def mlp_forward(params: MlpParams, inputs) -> np.ndarray:
    """
    Plain numpy forward pass.

    Args:
        params: Network parameters
        inputs: (width,) vector or (N, width) batch

    Returns:
        np.ndarray: Output vector or batch
    """
    out = np.asarray(inputs, dtype=np.float64)
    if out.ndim not in (1, 2) or out.shape[-1] != params.input_width:
        raise ValueError(f"Input shape {out.shape} does not match network width {params.input_width}")
    for w, b, act in zip(params.weights, params.biases, params.activations):
        out = _NUMPY_ACTIVATIONS[act](out @ w + b)
    return out


def spatial_tangents(params: MlpVars, x, conditioning) -> Tuple[Var, List[Var]]:
    """
    Network output and its derivatives along each spatial axis.

    Args:
        params: Bound network whose input is concat(x, conditioning)
        x: (N, 3) points
        conditioning: (c,) or (N, c) conditioning

    Returns:
        (output, [d/dx, d/dy, d/dz]) each of shape (N, out)
    """
    if "relu" in params.activations:
        raise ValueError("Spatial derivatives need C1 activations; relu backbone rejected")
    x = T.as_var(x)
    dual = Dual.seeded(x, x.shape[1], conditioning)
    out = mlp_apply_dual(params, dual)
    return out.primal, out.tangents


def spatial_jacobian(params: MlpParams, x, conditioning) -> np.ndarray:
    """
    Exact Jacobian of the network output with respect to the spatial input.

    Returns:
        np.ndarray: J with J[a, b] = d output_a / d x_b
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    conditioning = np.asarray(conditioning, dtype=np.float64).reshape(-1)
    if x.shape[1] + conditioning.shape[0] != params.input_width:
        raise ValueError(
            f"Point width {x.shape[1]} plus conditioning {conditioning.shape[0]} "
            f"does not match network width {params.input_width}"
        )
    if not params.spatially_differentiable:
        raise ValueError("Spatial derivatives need C1 activations; relu backbone rejected")

    _, tangents = spatial_tangents(params.bind(), x, conditioning)
    return np.stack([t.value[0] for t in tangents], axis=1)


def glorot_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def build_mlp(widths: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
              use_bias: bool = True) -> MlpParams:
    if len(widths) != len(activations) + 1:
        raise ValueError("Need one activation per layer")
    weights = tuple(glorot_layer(rng, widths[k], widths[k + 1]) for k in range(len(widths) - 1))
    biases = tuple(np.zeros(widths[k + 1]) for k in range(len(widths) - 1))
    return MlpParams(weights, biases, tuple(activations), use_bias)


def build_backbone(latent_dim: int, width: int, activation: str, rng: np.random.Generator,
                   output_width: int = 3) -> MlpParams:
    """Tapering backbone: concat(x, z) -> 4n_f -> 2n_f -> n_f -> linear head."""
    if latent_dim < 1 or width < 1:
        raise ValueError(f"latent_dim and width must be >= 1, got {latent_dim}, {width}")
    widths = [3 + latent_dim, 4 * width, 2 * width, width, output_width]
    return build_mlp(widths, [activation] * 3 + ["identity"], rng)


def build_sign_net(latent_dim: int, width: int, rng: np.random.Generator) -> MlpParams:
    """Bias-free tanh network, odd in its input."""
    return build_mlp([latent_dim, width, 1], ["tanh", "tanh"], rng, use_bias=False)
