from .tape import GradTape, Var, as_var, backprop_scalar
from .dual import Dual
from .mlp import (
    MlpParams,
    MlpVars,
    build_backbone,
    build_mlp,
    build_sign_net,
    mlp_apply,
    mlp_forward,
    spatial_jacobian,
    spatial_tangents,
)
from .optim import AdamState, adam_step
from .serialize import load_tensors, save_tensors

__all__ = [
    'GradTape',
    'Var',
    'as_var',
    'backprop_scalar',
    'Dual',
    'MlpParams',
    'MlpVars',
    'build_backbone',
    'build_mlp',
    'build_sign_net',
    'mlp_apply',
    'mlp_forward',
    'spatial_jacobian',
    'spatial_tangents',
    'AdamState',
    'adam_step',
    'load_tensors',
    'save_tensors',
]
