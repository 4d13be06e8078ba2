"""
Moving point sets with a flow model: plain deformation for inference and
taped RK4 unrolls for training.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from flowmorph.flow.field import FlowModel, FlowVars, PairContext, flow_velocity
from flowmorph.flow.odeint import OdeConfig, Trajectory, integrate, rk4_step, rk4_times
from flowmorph.numerics import tape as T
from flowmorph.numerics.tape import GradTape, Var

logger = logging.getLogger(__name__)


def _numpy_flow(model: FlowModel, ctx: PairContext) -> Callable[[np.ndarray, float], np.ndarray]:
    fv = model.bind()

    def flow(x: np.ndarray, t: float) -> np.ndarray:
        return flow_velocity(model, fv, ctx, Var(x), t).value

    return flow


def deform_trajectory(model: FlowModel, ctx: PairContext, points, cfg: Optional[OdeConfig] = None,
                      span: Tuple[float, float] = (0.0, 1.0),
                      record_times: Optional[Sequence[float]] = None) -> Trajectory:
    """Integrate the pair flow and keep every recorded snapshot."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if ctx.is_identity:
        traj = Trajectory()
        marks = [] if record_times is None else record_times
        for t in sorted({float(span[0]), float(span[1])} | {float(t) for t in marks if span[0] < t < span[1]}):
            traj.record(t, points)
        return traj
    return integrate(_numpy_flow(model, ctx), points, span, cfg, record_times)


def deform(model: FlowModel, ctx: PairContext, points, cfg: Optional[OdeConfig] = None,
           span: Tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """
    Advect points from t=span[0] to t=span[1]; order and count are preserved.

    Equal codes return a copy of the input without integrating.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if ctx.is_identity or span[0] == span[1]:
        return points.copy()
    return integrate(_numpy_flow(model, ctx), points, span, cfg).final


def deform_through_hub(model: FlowModel, source, target, points, cfg: Optional[OdeConfig] = None) -> np.ndarray:
    """Source code to the hub, then the hub to the target code."""
    hub = np.zeros_like(np.asarray(PairContext(source, target).source_value))
    canonical = deform(model, PairContext(source, hub), points, cfg)
    return deform(model, PairContext(hub, target), canonical, cfg)


def advect_rk4_states(model: FlowModel, fv: FlowVars, ctx: PairContext, x, steps: int,
                      span: Tuple[float, float] = (0.0, 1.0)) -> List[Var]:
    """Taped RK4 unroll returning the state after every step (the start state first)."""
    x = T.as_var(x)
    if ctx.is_identity:
        return [x] * (steps + 1)

    def flow(points, t):
        return flow_velocity(model, fv, ctx, points, t)

    times = rk4_times(span, steps)
    states = [x]
    for k in range(steps):
        x = rk4_step(flow, x, times[k], times[k + 1])
        states.append(x)
    return states


def advect_rk4(model: FlowModel, fv: FlowVars, ctx: PairContext, x, steps: int,
               span: Tuple[float, float] = (0.0, 1.0)) -> Var:
    return advect_rk4_states(model, fv, ctx, x, steps, span)[-1]


def advect_var(model: FlowModel, fv: FlowVars, ctx: PairContext, x, cfg: OdeConfig) -> Var:
    """
    Advect a Var. RK4 stays on the tape; dopri5 is evaluated as a constant,
    which is enough for loss values but carries no gradient.
    """
    if cfg.solver == "rk4":
        return advect_rk4(model, fv, ctx, x, int(cfg.steps))
    return Var(deform(model, ctx, T.value_of(x), cfg))


def integrate_with_grad(model: FlowModel, ctx: PairContext, points, cfg: OdeConfig,
                        loss_fn: Callable[[Var], Var]) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Loss of the advected points and its exact gradients through the RK4 unroll.

    Returns:
        (loss value, gradients) keyed by tensor name, plus ``latent.source`` and
        ``latent.target`` for the two codes
    """
    if cfg.solver != "rk4":
        raise ValueError("integrate_with_grad differentiates a fixed-step unroll; use the rk4 solver for training")

    with GradTape() as tape:
        fv = model.bind(tape)
        source = tape.watch(ctx.source_value, "latent.source")
        target = tape.watch(ctx.target_value, "latent.target")
        taped_ctx = PairContext(source, target)
        out = advect_rk4(model, fv, taped_ctx, np.asarray(points, dtype=np.float64).reshape(-1, 3), int(cfg.steps))
        loss = loss_fn(out)

    grads = T.backprop_scalar(tape, loss)
    return float(loss.value), grads
