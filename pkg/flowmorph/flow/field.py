"""
The learned deformation flow between two latent codes.

The velocity for the pair (z_i, z_j) at point x and time t is

    h(x, z_i + t (z_j - z_i)) * s(u) * m

with m = |z_j - z_i|, u = (z_j - z_i) / m, h the backbone (optionally the curl
of a vector potential, optionally mirror-symmetrized about the yz-plane) and s
the sign function. Equal codes give the exact zero field.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from flowmorph.numerics import tape as T
from flowmorph.numerics.mlp import (
    MlpParams,
    MlpVars,
    build_backbone,
    build_sign_net,
    mlp_apply,
    spatial_tangents,
)
from flowmorph.numerics.tape import GradTape, Var

logger = logging.getLogger(__name__)

FLOW_MODES = ("direct", "divfree")
SYMMETRIES = ("off", "yz")
SIGN_MODES = ("hub", "oddmlp")

_ALIASES = {
    "divergence_free": "divfree",
    "div-free": "divfree",
    "plane_yz": "yz",
    "odd-mlp": "oddmlp",
    "odd_mlp": "oddmlp",
    "hub-rule": "hub",
    "none": "off",
}

MIRROR = np.array([-1.0, 1.0, 1.0])


class FlowModelError(ValueError):
    """Invalid flow configuration or a sign rule used outside its domain."""


def normalize_flag(value, allowed: Tuple[str, ...], name: str) -> str:
    if value is False or value is None:
        value = "off"
    value = _ALIASES.get(str(value).lower(), str(value).lower())
    if value not in allowed:
        raise FlowModelError(f"Unknown {name} {value!r}; expected one of {allowed}")
    return value


@dataclass(frozen=True, eq=False)
class LatentCode:
    """Position of a shape in deformation space; the hub is the zero vector."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Latent code has non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def hub(cls, dim: int) -> "LatentCode":
        return cls(np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def is_hub(self) -> bool:
        return not np.any(self.values)


CodeLike = Union[LatentCode, Var, np.ndarray]


def code_value(code: CodeLike) -> np.ndarray:
    if isinstance(code, LatentCode):
        return code.values
    if isinstance(code, Var):
        return code.value
    return np.asarray(code, dtype=np.float64).reshape(-1)


def _code_var(code: CodeLike) -> Var:
    return code if isinstance(code, Var) else Var(code_value(code))


class PairContext:
    """
    Ordered pair of codes the flow runs between.

    Codes may be tape Vars, in which case gradients reach them through
    every velocity evaluated with this context.
    """

    def __init__(self, source: CodeLike, target: CodeLike):
        self.source = source
        self.target = target
        self.source_value = code_value(source)
        self.target_value = code_value(target)
        if self.source_value.shape != self.target_value.shape:
            raise ValueError(f"Latent dimensions differ: {self.source_value.shape} vs {self.target_value.shape}")
        self.delta = self.target_value - self.source_value

    @property
    def dim(self) -> int:
        return self.source_value.shape[0]

    @property
    def is_identity(self) -> bool:
        return not np.any(self.delta)

    @property
    def magnitude(self) -> float:
        return float(np.sqrt(np.sum(self.delta * self.delta)))

    @property
    def direction(self) -> Optional[np.ndarray]:
        if self.is_identity:
            return None
        return self.delta / self.magnitude

    @property
    def source_is_hub(self) -> bool:
        return not np.any(self.source_value)

    @property
    def target_is_hub(self) -> bool:
        return not np.any(self.target_value)

    def reversed(self) -> "PairContext":
        return PairContext(self.target, self.source)

    def conditioning(self, t: float) -> np.ndarray:
        """Latent conditioning at time t; exactly the endpoint codes at t=0 and t=1."""
        if t == 0.0:
            return self.source_value.copy()
        if t == 1.0:
            return self.target_value.copy()
        return self.source_value + self.delta * t

    def toward(self, alpha: float) -> "PairContext":
        """Context whose target is the conditioning at ``alpha``."""
        return PairContext(self.source, self.conditioning(alpha))


def conditioning_at(ctx: PairContext, t: float) -> np.ndarray:
    return ctx.conditioning(t)


@dataclass(frozen=True, eq=False)
class FlowModel:
    """Backbone, optional sign network and parameterization flags."""

    backbone: MlpParams
    latent_dim: int
    width: int
    mode: str = "direct"
    symmetry: str = "off"
    sign: str = "hub"
    sign_net: Optional[MlpParams] = None

    def __post_init__(self):
        mode = normalize_flag(self.mode, FLOW_MODES, "flow mode")
        symmetry = normalize_flag(self.symmetry, SYMMETRIES, "symmetry")
        sign = normalize_flag(self.sign, SIGN_MODES, "sign mode")
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "symmetry", symmetry)
        object.__setattr__(self, "sign", sign)

        if self.backbone.input_width != 3 + self.latent_dim:
            raise FlowModelError(
                f"Backbone input width {self.backbone.input_width} != 3 + latent_dim {self.latent_dim}")
        if self.backbone.output_width != 3:
            raise FlowModelError(f"Backbone output width must be 3, got {self.backbone.output_width}")
        if mode == "divfree" and not self.backbone.spatially_differentiable:
            raise FlowModelError("divfree mode takes the curl of the backbone and needs C1 activations; relu is rejected")
        if sign == "oddmlp":
            if self.sign_net is None:
                raise FlowModelError("oddmlp sign mode needs a sign network")
            if self.sign_net.use_bias or self.sign_net.input_width != self.latent_dim \
                    or self.sign_net.output_width != 1:
                raise FlowModelError("Sign network must be bias-free with latent_dim inputs and one output")
            if any(a not in ("tanh", "identity") for a in self.sign_net.activations):
                raise FlowModelError("Sign network activations must be odd (tanh)")

    @classmethod
    def create(cls, latent_dim: int = 8, width: int = 16, mode: str = "direct", symmetry: str = "off",
               sign: str = "hub", activation: str = "elu", seed: Optional[int] = 0) -> "FlowModel":
        """Freshly initialized model; equal seeds give identical parameters."""
        rng = np.random.default_rng(seed)
        backbone = build_backbone(latent_dim, width, activation, rng)
        sign = normalize_flag(sign, SIGN_MODES, "sign mode")
        sign_net = build_sign_net(latent_dim, width, rng) if sign == "oddmlp" else None
        return cls(backbone, latent_dim, width, mode, symmetry, sign, sign_net)

    @property
    def activation(self) -> str:
        return self.backbone.activations[0]

    def flags(self) -> Dict[str, object]:
        return {
            "mode": self.mode,
            "symmetry": self.symmetry,
            "sign": self.sign,
            "latent_dim": self.latent_dim,
            "width": self.width,
            "activation": self.activation,
        }

    def named_tensors(self) -> List[Tuple[str, np.ndarray]]:
        tensors = self.backbone.named_tensors("backbone")
        if self.sign_net is not None:
            tensors += self.sign_net.named_tensors("sign")
        return tensors

    def with_tensors(self, mapping: Dict[str, np.ndarray]) -> "FlowModel":
        backbone = self.backbone.with_tensors(mapping, "backbone")
        sign_net = self.sign_net.with_tensors(mapping, "sign") if self.sign_net is not None else None
        return replace(self, backbone=backbone, sign_net=sign_net)

    def bind(self, tape: Optional[GradTape] = None) -> "FlowVars":
        return FlowVars(
            self.backbone.bind(tape, "backbone"),
            self.sign_net.bind(tape, "sign") if self.sign_net is not None else None,
        )


@dataclass
class FlowVars:
    backbone: MlpVars
    sign_net: Optional[MlpVars]


def _direct(fv: FlowVars, x: Var, cond: Var) -> Var:
    n = x.shape[0]
    c = cond.shape[0]
    tiled = T.broadcast_to(T.reshape(cond, (1, c)), (n, c))
    return mlp_apply(fv.backbone, T.concat([x, tiled], axis=1))


def _curl(fv: FlowVars, x: Var, cond: Var) -> Var:
    _, (gx, gy, gz) = spatial_tangents(fv.backbone, x, cond)

    def col(v, k):
        return v[:, k:k + 1]

    return T.concat([
        col(gy, 2) - col(gz, 1),
        col(gz, 0) - col(gx, 2),
        col(gx, 1) - col(gy, 0),
    ], axis=1)


def _inner(model: FlowModel, fv: FlowVars, x: Var, cond: Var) -> Var:
    if model.mode == "divfree":
        return _curl(fv, x, cond)
    return _direct(fv, x, cond)


def field_value(model: FlowModel, fv: FlowVars, x, cond) -> Var:
    """Flow function h(x, cond) for a batch, with the curl and mirror wrappers applied."""
    x = T.as_var(x)
    cond = T.as_var(cond)
    if model.symmetry == "yz":
        direct = _inner(model, fv, x, cond)
        mirrored = _inner(model, fv, x * MIRROR, cond)
        return (direct + mirrored * MIRROR) * 0.5
    return _inner(model, fv, x, cond)


def _sign(model: FlowModel, fv: FlowVars, ctx: PairContext, delta: Var, magnitude: Var):
    if model.sign == "hub":
        if ctx.target_is_hub:
            return 1.0
        if ctx.source_is_hub:
            return -1.0
        raise FlowModelError("Hub sign rule needs the hub code at one end of the pair")
    return T.reshape(mlp_apply(fv.sign_net, delta / magnitude), ())


def flow_velocity(model: FlowModel, fv: FlowVars, ctx: PairContext, x, t: float) -> Var:
    """
    Velocities of a point batch, differentiable through parameters, codes and x.

    Args:
        model: Flow model
        fv: Bound model tensors (constant or watched)
        ctx: Code pair
        x: (N, 3) points
        t: Time in [0, 1]
    """
    x = T.as_var(x)
    if ctx.is_identity:
        return Var(np.zeros(x.shape))

    zi, zj = _code_var(ctx.source), _code_var(ctx.target)
    delta = zj - zi
    magnitude = T.sqrt(T.vsum(delta * delta))
    if t == 0.0:
        cond = zi
    elif t == 1.0:
        cond = zj
    else:
        cond = zi + delta * t

    h = field_value(model, fv, x, cond)
    sign = _sign(model, fv, ctx, delta, magnitude)
    return h * (sign * magnitude)


def _check_time(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"Flow time must lie in [0, 1], got {t}")
    return t


def _check_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("Flow evaluated at non-finite point")
    return x


def eval_flow(model: FlowModel, ctx: PairContext, x, t: float) -> np.ndarray:
    """Velocity at one point (3,) or a batch (N, 3)."""
    t = _check_time(t)
    x = _check_points(x)
    single = x.ndim == 1
    batch = x.reshape(-1, 3)
    out = flow_velocity(model, model.bind(), ctx, batch, t).value
    return out[0] if single else out


def curl_potential(model: FlowModel, x, z) -> np.ndarray:
    """Curl of the backbone potential at point(s) x under conditioning z."""
    if model.mode != "divfree":
        raise FlowModelError("curl_potential needs a divfree model")
    x = _check_points(x)
    single = x.ndim == 1
    out = _curl(model.bind(), Var(x.reshape(-1, 3)), Var(code_value(z))).value
    return out[0] if single else out


def symmetrize(model: FlowModel, x, z) -> np.ndarray:
    """Mirror-symmetrized flow function at point(s) x under conditioning z."""
    if model.symmetry != "yz":
        raise FlowModelError("symmetrize needs symmetry 'yz'")
    x = _check_points(x)
    single = x.ndim == 1
    out = field_value(model, model.bind(), x.reshape(-1, 3), code_value(z)).value
    return out[0] if single else out


def sign_value(model: FlowModel, ctx: PairContext) -> float:
    """Sign factor for the pair; the odd network evaluates to 0 for equal codes."""
    if model.sign == "hub":
        if ctx.target_is_hub and not ctx.source_is_hub:
            return 1.0
        if ctx.source_is_hub and not ctx.target_is_hub:
            return -1.0
        if ctx.is_identity:
            return 0.0
        raise FlowModelError("Hub sign rule needs the hub code at exactly one end of the pair")
    if ctx.is_identity:
        return 0.0
    return float(mlp_apply(model.sign_net.bind(), ctx.direction).value[0])


def flow_divergence(model: FlowModel, ctx: PairContext, x, t: float) -> np.ndarray:
    """Exact divergence of the velocity at a batch of points (reverse over forward)."""
    t = _check_time(t)
    x = _check_points(x).reshape(-1, 3)
    div = np.zeros(x.shape[0])
    fv = model.bind()
    for axis in range(3):
        with GradTape() as tape:
            xv = tape.watch(x, "x")
            velocity = flow_velocity(model, fv, ctx, xv, t)
            total = T.vsum(velocity[:, axis])
        div += T.backprop_scalar(tape, total)["x"][:, axis]
    return div


def finite_difference_divergence(model: FlowModel, ctx: PairContext, x, t: float, h: float = 1e-4) -> np.ndarray:
    """Central-difference divergence, used to cross-check the exact path."""
    x = _check_points(x).reshape(-1, 3)
    div = np.zeros(x.shape[0])
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        forward = eval_flow(model, ctx, x + step, t)[:, axis]
        backward = eval_flow(model, ctx, x - step, t)[:, axis]
        div += (forward - backward) / (2.0 * h)
    return div
