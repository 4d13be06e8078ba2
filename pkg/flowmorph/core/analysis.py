"""
Studies over a trained deformation space: style transfer through the hub,
pairwise deformation grids, latent-table projection, integration-scheme
error study and the reconstruction metrics protocol.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from flowmorph.core.checkpoint import FlowCheckpoint, LatentTable
from flowmorph.core.embedder import EmbedConfig, eval_reconstruction, reconstruct
from flowmorph.flow.advect import deform, deform_through_hub, deform_trajectory
from flowmorph.flow.field import FlowModel, PairContext
from flowmorph.flow.odeint import IntegrationError, OdeConfig
from flowmorph.geometry.intersect import count_triangle_intersections
from flowmorph.geometry.mesh import Mesh, PointCloud, sample_surface
from flowmorph.geometry.spatial import chamfer
from flowmorph.processors.preprocessor import ShapePreprocessor
from flowmorph.utils import child_seed, make_rng

logger = logging.getLogger(__name__)


def transfer(checkpoint: FlowCheckpoint, mesh: Mesh, source: int, target: int,
             cfg: Optional[OdeConfig] = None) -> Mesh:
    """Carry shape ``source``'s mesh to shape ``target``'s code through the hub."""
    table = checkpoint.table
    vertices = deform_through_hub(checkpoint.model, table[source], table[target], mesh.vertices,
                                  cfg or OdeConfig.dopri5())
    return mesh.with_vertices(vertices)


def deformation_grid(checkpoint: FlowCheckpoint, shapes: Sequence[Mesh], ids: Optional[Sequence[int]] = None,
                     samples: int = 2048, seed: Optional[int] = 0, cfg: Optional[OdeConfig] = None) -> np.ndarray:
    """
    Eval Chamfer-L1 between shape a carried to b's code and shape b, for every
    ordered pair of the chosen ids. The diagonal measures the hub round trip.
    """
    ids = list(ids) if ids is not None else list(range(len(shapes)))
    cfg = cfg or OdeConfig.dopri5()
    rng = make_rng(seed)
    clouds = {i: sample_surface(shapes[i], samples, seed=child_seed(rng)).points for i in ids}

    grid = np.zeros((len(ids), len(ids)))
    for a, i in enumerate(ids):
        for b, j in enumerate(ids):
            moved = deform_through_hub(checkpoint.model, checkpoint.table[i], checkpoint.table[j], clouds[i], cfg)
            grid[a, b] = chamfer(moved, clouds[j], "l1_eval")
    return grid


def latent_projection(table, dims: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """
    Principal-component projection of the latent codes.

    Returns:
        (coordinates (N, dims), explained variance ratio (dims,))
    """
    codes = table.codes if isinstance(table, LatentTable) else np.asarray(table, dtype=np.float64)
    if not 1 <= dims <= codes.shape[1]:
        raise ValueError(f"dims must be in [1, {codes.shape[1]}], got {dims}")
    centered = codes - codes.mean(axis=0)
    _, singular, components = np.linalg.svd(centered, full_matrices=False)
    # fix the sign of each axis so the largest loading is positive
    flip = np.sign(components[np.arange(components.shape[0]), np.argmax(np.abs(components), axis=1)])
    flip[flip == 0] = 1.0
    components = components * flip[:, None]

    variance = singular ** 2
    total = variance.sum()
    ratio = variance / total if total > 0 else np.zeros_like(variance)
    return centered @ components[:dims].T, ratio[:dims]


@dataclass
class StudyRow:
    solver: str
    setting: float
    max_intersections: int
    round_trip_error: float
    failed: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "solver": self.solver,
            "setting": self.setting,
            "max_intersections": self.max_intersections,
            "round_trip_error": self.round_trip_error,
            "failed": self.failed,
        }


def intersection_study(model: FlowModel, ctx: PairContext, mesh: Mesh,
                       rtols: Sequence[float] = (1e-2, 1e-4, 1e-6), rk4_steps: Sequence[int] = (5, 10, 20, 40),
                       snapshots: int = 20) -> List[StudyRow]:
    """
    Triangle-intersection counts over trajectory snapshots and round-trip
    error for a range of integrator settings. Reported, never asserted.
    """
    rows = []
    record = np.linspace(0.0, 1.0, snapshots)
    settings = [("dopri5", OdeConfig.dopri5(r, r), r) for r in rtols] + \
        [("rk4", OdeConfig.rk4(s), s) for s in rk4_steps]

    for solver, cfg, setting in settings:
        try:
            if solver == "dopri5":
                states = deform_trajectory(model, ctx, mesh.vertices, cfg, record_times=record[1:-1]).states
            else:
                states = [deform(model, ctx, mesh.vertices, cfg)]
            back = deform(model, ctx.reversed(), states[-1], cfg)
        except IntegrationError as e:
            logger.warning(f"{solver} at {setting} gave up: {e}")
            rows.append(StudyRow(solver, float(setting), -1, float("nan"), True))
            continue
        counts = [count_triangle_intersections(mesh.with_vertices(s)) for s in states]
        rows.append(StudyRow(solver, float(setting), int(max(counts)),
                             float(np.max(np.abs(back - mesh.vertices)))))
        logger.info(f"{solver} {setting}: max intersections {rows[-1].max_intersections}, "
                    f"round trip {rows[-1].round_trip_error:.3g}")
    return rows


@dataclass
class MetricsReport:
    rows: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def means(self) -> Dict[str, float]:
        return {
            "chamfer_l1": float(np.mean([r["chamfer_l1"] for r in self.rows])),
            "normal_consistency": float(np.mean([r["normal_consistency"] for r in self.rows])),
        }

    def to_rows(self) -> List[Dict[str, Any]]:
        means = self.means
        return self.rows + [{"shape": "mean", **means}]


Reconstructor = Callable[[PointCloud, int], Mesh]


def run_metrics(checkpoint: FlowCheckpoint, shapes: Sequence[Mesh], names: Optional[Sequence[str]] = None,
                cfg: Optional[EmbedConfig] = None, seed: Optional[int] = 0, observation_points: int = 300,
                noise_std: float = 0.05, train_shapes: Optional[Sequence[Mesh]] = None,
                reconstructor: Optional[Reconstructor] = None, eval_samples: int = 2048) -> MetricsReport:
    """
    Reconstruct every shape from a sparse noisy observation and score it.

    Args:
        checkpoint: Trained deformation space
        shapes: Evaluation meshes (one manifest split)
        names: Row labels, defaults to the shape index
        cfg: Embedding and reconstruction settings
        seed: Seed for observations and reconstruction
        observation_points, noise_std: Observation corruption
        train_shapes: Training meshes in table order
        reconstructor: Replaces reconstruction (observation, shape index) -> Mesh
    """
    if not shapes:
        raise ValueError("Metrics need a non-empty split")
    names = list(names) if names is not None else [str(k) for k in range(len(shapes))]
    preprocessor = ShapePreprocessor()
    rng = make_rng(seed)
    report = MetricsReport()

    for k, shape in enumerate(shapes):
        observation = preprocessor.corrupt_observation(shape, observation_points, noise_std, seed=child_seed(rng))
        run_seed = child_seed(rng)
        if reconstructor is not None:
            mesh = reconstructor(observation, k)
        else:
            mesh = reconstruct(checkpoint, observation, cfg, run_seed, train_shapes).mesh
        chamfer_l1, consistency = eval_reconstruction(mesh, shape, eval_samples, seed=run_seed)
        report.rows.append({"shape": names[k], "chamfer_l1": chamfer_l1, "normal_consistency": consistency})
        logger.info(f"{names[k]}: Chamfer-L1 {chamfer_l1:.6g}, normal consistency {consistency:.4f}")

    return report
