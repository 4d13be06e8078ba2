"""
Training objectives: Chamfer on tape, hub-and-spoke and direct pair losses,
edge-length regularizer and vertex L2.

Every loss accepts numpy arrays or tape Vars. Vars in give a Var out (so the
loss can be backpropagated), plain arrays give a float.
"""

import logging
from typing import Optional, Tuple, Union

import numpy as np

from flowmorph.flow.advect import advect_var
from flowmorph.flow.field import FlowModel, FlowModelError, FlowVars, PairContext, code_value
from flowmorph.flow.odeint import OdeConfig
from flowmorph.geometry.mesh import Mesh, PointCloud, edge_lengths
from flowmorph.geometry.spatial import SpatialIndex
from flowmorph.numerics import tape as T
from flowmorph.numerics.tape import Var

logger = logging.getLogger(__name__)

Points = Union[np.ndarray, Var, PointCloud]


def _points_var(points: Points) -> Var:
    if isinstance(points, PointCloud):
        return Var(points.points)
    return T.as_var(points)


def _result(value: Var, *inputs) -> Union[Var, float]:
    if any(isinstance(i, Var) for i in inputs) or value.tracked:
        return value
    return float(value.value)


def chamfer_var(a: Points, b: Points) -> Var:
    """Squared-L2 training Chamfer; nearest neighbours are picked on values, gradients flow through positions."""
    av, bv = _points_var(a), _points_var(b)
    if av.shape[0] == 0 or bv.shape[0] == 0:
        raise ValueError("Chamfer distance needs non-empty point sets")
    to_b, _ = SpatialIndex(bv.value).query(av.value)
    to_a, _ = SpatialIndex(av.value).query(bv.value)
    da = av - bv[to_b]
    db = av[to_a] - bv
    return T.mean(T.vsum(da * da, axis=1)) + T.mean(T.vsum(db * db, axis=1))


def vertex_l2_loss(a: Points, b: Points):
    """Mean squared distance between corresponding vertices."""
    av, bv = _points_var(a), _points_var(b)
    if av.shape != bv.shape:
        raise ValueError(f"Vertex counts differ: {av.shape[0]} vs {bv.shape[0]}")
    d = av - bv
    return _result(T.mean(T.vsum(d * d, axis=1)), a, b)


def edge_terms(mesh: Mesh, max_edges: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Non-degenerate edges and rest lengths, optionally subsampled."""
    edges, lengths = edge_lengths(mesh)
    keep = lengths > 0.0
    edges, lengths = edges[keep], lengths[keep]
    if max_edges is not None and edges.shape[0] > max_edges:
        rng = rng or np.random.default_rng(0)
        pick = np.sort(rng.choice(edges.shape[0], size=max_edges, replace=False))
        edges, lengths = edges[pick], lengths[pick]
    return edges, lengths


def edge_change(edges: np.ndarray, rest: np.ndarray, vertices) -> Var:
    """Mean squared relative change of the given edges."""
    v = T.as_var(vertices)
    if edges.shape[0] == 0:
        return Var(0.0)
    d = v[edges[:, 1]] - v[edges[:, 0]]
    length = T.sqrt(T.vsum(d * d, axis=1))
    rel = (length - rest) / rest
    return T.mean(rel * rel)


def edge_regularizer(mesh_before: Mesh, vertices_after):
    """
    Mean over edges of ((|e'| - |e|) / |e|)^2; zero-length rest edges are skipped.
    """
    shape = T.value_of(vertices_after).shape
    if shape != mesh_before.vertices.shape:
        raise ValueError(f"Vertex count mismatch: {shape[0]} vs {mesh_before.num_vertices}")
    edges, rest = edge_terms(mesh_before)
    return _result(edge_change(edges, rest, vertices_after), vertices_after)


def _hub_like(code) -> np.ndarray:
    return np.zeros_like(code_value(code))


def hub_spoke_terms(model: FlowModel, fv: FlowVars, z_i, z_j, p_i: Points, p_j: Points,
                    cfg: OdeConfig) -> Var:
    """Chamfer(i -> hub -> j, P_j) + Chamfer(P_i, j -> hub -> i)."""
    hub = _hub_like(z_i)
    x_i, x_j = _points_var(p_i), _points_var(p_j)
    i_to_j = advect_var(model, fv, PairContext(hub, z_j),
                        advect_var(model, fv, PairContext(z_i, hub), x_i, cfg), cfg)
    j_to_i = advect_var(model, fv, PairContext(hub, z_i),
                        advect_var(model, fv, PairContext(z_j, hub), x_j, cfg), cfg)
    return chamfer_var(i_to_j, x_j) + chamfer_var(x_i, j_to_i)


def pairwise_terms(model: FlowModel, fv: FlowVars, z_i, z_j, p_i: Points, p_j: Points,
                   cfg: OdeConfig) -> Var:
    """Chamfer(i -> j, P_j) + Chamfer(P_i, j -> i) without the hub."""
    if model.sign != "oddmlp":
        raise FlowModelError("Direct pair training needs the oddmlp sign; the hub rule only covers hub pairs")
    x_i, x_j = _points_var(p_i), _points_var(p_j)
    i_to_j = advect_var(model, fv, PairContext(z_i, z_j), x_i, cfg)
    j_to_i = advect_var(model, fv, PairContext(z_j, z_i), x_j, cfg)
    return chamfer_var(i_to_j, x_j) + chamfer_var(x_i, j_to_i)


def hub_spoke_loss(model: FlowModel, table, i: int, j: int, samples, cfg: OdeConfig) -> float:
    """
    Hub-and-spoke loss for shapes i and j of a latent table.

    Args:
        model: Flow model
        table: LatentTable (or an (N, c) array of codes)
        i, j: Shape indices
        samples: Mapping or sequence from shape index to its sampled points
        cfg: Integrator used for all four integrations
    """
    codes = getattr(table, "codes", table)
    value = hub_spoke_terms(model, model.bind(), codes[i], codes[j], samples[i], samples[j], cfg)
    return float(value.value)


def pairwise_loss(model: FlowModel, table, i: int, j: int, samples, cfg: OdeConfig) -> float:
    """Direct pair loss for shapes i and j; needs the oddmlp sign."""
    codes = getattr(table, "codes", table)
    value = pairwise_terms(model, model.bind(), codes[i], codes[j], samples[i], samples[j], cfg)
    return float(value.value)
