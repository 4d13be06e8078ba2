from .field import (
    FlowModel,
    FlowModelError,
    LatentCode,
    PairContext,
    conditioning_at,
    curl_potential,
    eval_flow,
    finite_difference_divergence,
    flow_divergence,
    flow_velocity,
    sign_value,
    symmetrize,
)
from .odeint import IntegrationError, OdeConfig, Trajectory, integrate
from .advect import (
    advect_rk4,
    advect_rk4_states,
    deform,
    deform_through_hub,
    deform_trajectory,
    integrate_with_grad,
)

__all__ = [
    'FlowModel',
    'FlowModelError',
    'LatentCode',
    'PairContext',
    'conditioning_at',
    'curl_potential',
    'eval_flow',
    'finite_difference_divergence',
    'flow_divergence',
    'flow_velocity',
    'sign_value',
    'symmetrize',
    'IntegrationError',
    'OdeConfig',
    'Trajectory',
    'integrate',
    'advect_rk4',
    'advect_rk4_states',
    'deform',
    'deform_through_hub',
    'deform_trajectory',
    'integrate_with_grad',
]
