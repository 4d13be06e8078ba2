"""
Canonical space: deform shapes to the hub, match vertices there, and score
matches with the semantic matching score.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from flowmorph.core.checkpoint import FlowCheckpoint
from flowmorph.flow.advect import deform
from flowmorph.flow.field import FlowModel, PairContext, code_value
from flowmorph.flow.odeint import OdeConfig
from flowmorph.geometry.mesh import Mesh
from flowmorph.geometry.spatial import SpatialIndex

logger = logging.getLogger(__name__)

ModelLike = Union[FlowCheckpoint, FlowModel]


@dataclass
class Correspondence:
    """Matched target vertex for every source vertex, with the matching distance."""

    indices: np.ndarray
    distances: np.ndarray
    target_count: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.distances = np.asarray(self.distances, dtype=np.float64)
        if self.indices.shape != self.distances.shape:
            raise ValueError("Correspondence indices and distances differ in length")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.target_count):
            raise ValueError("Correspondence index outside the target vertex range")
        if np.any(self.distances < 0):
            raise ValueError("Correspondence distances must be non-negative")

    def __len__(self) -> int:
        return self.indices.shape[0]

    def to_rows(self) -> List[Tuple[int, int, float]]:
        return [(k, int(j), float(d)) for k, (j, d) in enumerate(zip(self.indices, self.distances))]


@dataclass
class SmsReport:
    score: float
    forward: float
    backward: float
    matched_pairs: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "score": self.score,
            "forward": self.forward,
            "backward": self.backward,
            "matched_pairs": self.matched_pairs,
        }


def _model(source: ModelLike) -> FlowModel:
    return source.model if isinstance(source, FlowCheckpoint) else source


def _to_hub(model: FlowModel, vertices: np.ndarray, code, cfg: Optional[OdeConfig]) -> np.ndarray:
    value = code_value(code)
    return deform(model, PairContext(value, np.zeros_like(value)), vertices, cfg or OdeConfig.dopri5())


def canonicalize(checkpoint: ModelLike, shape: Union[int, Mesh], code=None, cfg: Optional[OdeConfig] = None,
                 shapes: Optional[Sequence[Mesh]] = None) -> Mesh:
    """
    Deform a shape from its code to the hub; connectivity is unchanged.

    Args:
        checkpoint: Trained checkpoint (or a bare FlowModel with an explicit code)
        shape: Training shape index, or a mesh whose code is given
        code: Latent code of ``shape`` when it is a mesh
        cfg: Integrator (dopri5 defaults)
        shapes: Training meshes, when ``shape`` is an index and the checkpoint has no dataset
    """
    if isinstance(shape, (int, np.integer)):
        if not isinstance(checkpoint, FlowCheckpoint):
            raise ValueError("A shape index needs a checkpoint with a latent table")
        index = int(shape)
        meshes = shapes if shapes is not None else checkpoint.load_shapes("train")
        mesh, code = meshes[index], checkpoint.table[index]
    else:
        if code is None:
            raise ValueError("Canonicalizing a mesh needs its latent code")
        mesh = shape
    return mesh.with_vertices(_to_hub(_model(checkpoint), mesh.vertices, code, cfg))


def correspond(checkpoint: ModelLike, source: Mesh, target: Mesh, codes: Tuple, cfg: Optional[OdeConfig] = None) -> Correspondence:
    """
    Match every source vertex to the target vertex closest in canonical space.

    Args:
        checkpoint: Trained checkpoint or FlowModel
        source, target: Meshes
        codes: (source code, target code)
        cfg: Integrator used for canonicalization
    """
    model = _model(checkpoint)
    z_source, z_target = codes
    canonical_source = _to_hub(model, source.vertices, z_source, cfg)
    canonical_target = _to_hub(model, target.vertices, z_target, cfg)
    idx, sq = SpatialIndex(canonical_target).query(canonical_source)
    return Correspondence(idx, np.sqrt(sq), target.num_vertices)


def naive_correspond(source: Mesh, target: Mesh) -> Correspondence:
    """Nearest target vertex in the undeformed frame."""
    idx, sq = SpatialIndex(target.vertices).query(source.vertices)
    return Correspondence(idx, np.sqrt(sq), target.num_vertices)


def sms(source: Mesh, target: Mesh, forward: Correspondence, backward: Correspondence) -> SmsReport:
    """Semantic matching score: label agreement of both correspondence directions, averaged."""
    if source.labels is None or target.labels is None:
        raise ValueError("Semantic matching score needs labels on both meshes")
    if len(forward) != source.num_vertices or len(backward) != target.num_vertices:
        raise ValueError("Correspondences do not cover the meshes they score")

    forward_score = float(np.mean(source.labels == target.labels[forward.indices]))
    backward_score = float(np.mean(target.labels == source.labels[backward.indices]))
    report = SmsReport(0.5 * (forward_score + backward_score), forward_score, backward_score,
                       len(forward) + len(backward))
    logger.debug(f"SMS {report.score:.4f} (forward {forward_score:.4f}, backward {backward_score:.4f})")
    return report
