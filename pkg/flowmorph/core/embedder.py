"""
Embedding new observations into a trained deformation space, retrieval of
nearby training shapes and reconstruction by deformation.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from flowmorph.config import DEFAULT_CONFIG
from flowmorph.core.checkpoint import FlowCheckpoint, LatentTable
from flowmorph.core.losses import hub_spoke_terms
from flowmorph.flow.advect import deform_through_hub
from flowmorph.flow.field import FlowModel
from flowmorph.flow.odeint import OdeConfig
from flowmorph.geometry.mesh import Mesh, PointCloud, sample_surface, sample_surface_with_faces
from flowmorph.geometry.spatial import SpatialIndex, chamfer
from flowmorph.numerics import tape as T
from flowmorph.numerics.optim import AdamState, adam_step
from flowmorph.numerics.tape import GradTape, Var
from flowmorph.utils import child_seed, make_rng

logger = logging.getLogger(__name__)

CODE_KEY = "latent.observation"


@dataclass
class EmbedConfig:
    init_std: float = 1e-4
    learning_rate: float = 1e-2
    iterations: int = 30
    fine_tune_iterations: int = 30
    fine_tune_learning_rate: float = 1e-3
    k: int = 5
    shapes_per_step: int = 8
    samples: int = 512
    eval_samples: int = 2048
    ode: OdeConfig = field(default_factory=OdeConfig.rk4)
    eval_ode: OdeConfig = field(default_factory=OdeConfig.dopri5)

    def __post_init__(self):
        for name in ("k", "shapes_per_step", "samples", "eval_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("iterations", "fine_tune_iterations"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.ode.solver != "rk4":
            raise ValueError("Embedding optimizes through a fixed-step unroll; use the rk4 solver")

    @classmethod
    def from_config(cls, config=None) -> "EmbedConfig":
        config = config if config else DEFAULT_CONFIG
        e = config.get("embedding", {})
        return cls(
            init_std=float(e.get("init_std", 1e-4)),
            learning_rate=float(e.get("learning_rate", 1e-2)),
            iterations=int(e.get("iterations", 30)),
            fine_tune_iterations=int(e.get("fine_tune_iterations", 30)),
            fine_tune_learning_rate=float(e.get("fine_tune_learning_rate", 1e-3)),
            k=int(e.get("k", 5)),
            shapes_per_step=int(e.get("shapes_per_step", 8)),
            samples=int(e.get("samples", 512)),
            eval_samples=int(e.get("eval_samples", 2048)),
            ode=OdeConfig.from_config(config, "ode.train"),
            eval_ode=OdeConfig.from_config(config, "ode.eval"),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "init_std": self.init_std,
            "learning_rate": self.learning_rate,
            "iterations": self.iterations,
            "fine_tune_iterations": self.fine_tune_iterations,
            "fine_tune_learning_rate": self.fine_tune_learning_rate,
            "k": self.k,
            "shapes_per_step": self.shapes_per_step,
            "samples": self.samples,
            "eval_samples": self.eval_samples,
            "ode": self.ode.to_dict(),
            "eval_ode": self.eval_ode.to_dict(),
        }


@dataclass
class EmbeddingTrace:
    code: np.ndarray
    initial_code: np.ndarray
    initial_objective: float
    final_objective: float
    trace: List[float] = field(default_factory=list)
    reverted: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "code": self.code.tolist(),
            "initial_code": self.initial_code.tolist(),
            "initial_objective": self.initial_objective,
            "final_objective": self.final_objective,
            "trace": list(self.trace),
            "reverted": self.reverted,
        }


@dataclass
class Candidate:
    shape_id: int
    name: str
    mesh: Mesh
    chamfer: float
    baseline_chamfer: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "shape_id": self.shape_id,
            "name": self.name,
            "chamfer_l1": self.chamfer,
            "undeformed_chamfer_l1": self.baseline_chamfer,
        }


@dataclass
class ReconstructionResult:
    code: np.ndarray
    candidates: List[Candidate]
    embedding: EmbeddingTrace
    fine_tune_trace: List[float] = field(default_factory=list)
    fine_tune_reverted: bool = False

    @property
    def selected(self) -> Candidate:
        return self.candidates[0]

    @property
    def mesh(self) -> Mesh:
        return self.selected.mesh

    def to_dict(self) -> Dict[str, Any]:
        return {
            "code": self.code.tolist(),
            "selected": self.selected.to_dict(),
            "candidates": [c.to_dict() for c in self.candidates],
            "embedding": self.embedding.to_dict(),
            "fine_tune_trace": list(self.fine_tune_trace),
            "fine_tune_reverted": self.fine_tune_reverted,
        }


def _observation_points(observation) -> np.ndarray:
    points = observation.points if isinstance(observation, PointCloud) else np.asarray(observation, dtype=np.float64)
    points = points.reshape(-1, 3)
    if points.shape[0] == 0:
        raise ValueError("Cannot embed an empty observation")
    return points


def _shapes_for(checkpoint: FlowCheckpoint, shapes: Optional[Sequence[Mesh]]) -> List[Mesh]:
    shapes = list(shapes) if shapes is not None else checkpoint.load_shapes("train")
    if len(shapes) != len(checkpoint.table):
        raise ValueError(f"{len(shapes)} shapes for a latent table of {len(checkpoint.table)}")
    return shapes


def _objective(model: FlowModel, fv, code, table: LatentTable, ids: Sequence[int], observed: np.ndarray,
               samples: Dict[int, np.ndarray], cfg: OdeConfig) -> Var:
    total = Var(0.0)
    for i in ids:
        total = total + hub_spoke_terms(model, fv, code, table[i], observed, samples[i], cfg)
    return total / len(ids)


def embed(checkpoint: FlowCheckpoint, observation, cfg: Optional[EmbedConfig] = None, seed: Optional[int] = 0,
          shapes: Optional[Sequence[Mesh]] = None) -> EmbeddingTrace:
    """
    Optimize a latent code for an observation with the network frozen.

    Args:
        checkpoint: Trained deformation space (never modified)
        observation: PointCloud or (N, 3) points; may be sparse and noisy
        cfg: Embedding settings
        seed: Seed for the initial code, shape subsets and training-shape samples
        shapes: Training meshes in table order (loaded from the checkpoint's dataset otherwise)

    Returns:
        EmbeddingTrace: Final code plus the objective at both endpoints
    """
    cfg = cfg if cfg else EmbedConfig()
    observed = _observation_points(observation)
    shapes = _shapes_for(checkpoint, shapes)
    model, table = checkpoint.model, checkpoint.table
    rng = make_rng(seed)

    initial = rng.normal(0.0, cfg.init_std, size=table.dim)
    samples = {i: sample_surface(shape, cfg.samples, seed=child_seed(rng)).points for i, shape in enumerate(shapes)}
    subset_size = min(cfg.shapes_per_step, len(shapes))
    eval_ids = sorted(rng.choice(len(shapes), size=subset_size, replace=False).tolist())

    fv = model.bind()

    def objective(code: np.ndarray) -> float:
        return float(_objective(model, fv, code, table, eval_ids, observed, samples, cfg.ode).value)

    initial_objective = objective(initial)
    optimizer = AdamState(cfg.learning_rate)
    code = initial.copy()
    trace = []

    for iteration in range(cfg.iterations):
        ids = sorted(rng.choice(len(shapes), size=subset_size, replace=False).tolist())
        with GradTape() as tape:
            z = tape.watch(code, CODE_KEY)
            loss = _objective(model, fv, z, table, ids, observed, samples, cfg.ode)
        grads = T.backprop_scalar(tape, loss)
        trace.append(float(loss.value))
        _, updated = adam_step(optimizer, {CODE_KEY: code}, grads)
        code = updated[CODE_KEY]
        logger.debug(f"embed iteration {iteration + 1}: objective {trace[-1]:.6g}")

    final_objective = objective(code) if cfg.iterations else initial_objective
    reverted = False
    if final_objective > initial_objective:
        logger.warning(f"Embedding objective rose ({initial_objective:.6g} -> {final_objective:.6g}); "
                       "keeping the initial code")
        code, final_objective, reverted = initial.copy(), initial_objective, True

    nearest = retrieve_topk(table, code, 1)[0]
    logger.info(f"Embedded observation of {observed.shape[0]} points: objective {initial_objective:.6g} -> "
                f"{final_objective:.6g}, nearest shape {nearest}")
    return EmbeddingTrace(code, initial, initial_objective, final_objective, trace, reverted)


def retrieve_topk(table, z, k: int) -> List[int]:
    """Shape ids ranked by Euclidean latent distance to z; ties go to the lowest id."""
    codes = table.codes if isinstance(table, LatentTable) else np.asarray(table, dtype=np.float64)
    if not 1 <= k <= codes.shape[0]:
        raise ValueError(f"k must be in [1, {codes.shape[0]}], got {k}")
    distances = np.linalg.norm(codes - np.asarray(z, dtype=np.float64).reshape(1, -1), axis=1)
    return [int(i) for i in np.argsort(distances, kind="stable")[:k]]


def fine_tune(model: FlowModel, table: LatentTable, code: np.ndarray, ids: Sequence[int], observed: np.ndarray,
              samples: Dict[int, np.ndarray], cfg: EmbedConfig) -> Tuple[FlowModel, List[float], bool]:
    """
    Fine-tune a copy of the network on the candidate losses with the code frozen.

    Returns:
        (tuned model, objective trace starting with the initial value, reverted flag)
    """
    def objective(m: FlowModel) -> float:
        return float(_objective(m, m.bind(), code, table, ids, observed, samples, cfg.ode).value)

    initial = objective(model)
    trace = [initial]
    optimizer = AdamState(cfg.fine_tune_learning_rate)
    tuned = model

    for _ in range(cfg.fine_tune_iterations):
        with GradTape() as tape:
            fv = tuned.bind(tape)
            loss = _objective(tuned, fv, code, table, ids, observed, samples, cfg.ode)
        grads = T.backprop_scalar(tape, loss)
        _, updated = adam_step(optimizer, dict(tuned.named_tensors()), grads)
        tuned = tuned.with_tensors(updated)

    if cfg.fine_tune_iterations:
        trace.append(objective(tuned))
    if trace[-1] > initial:
        logger.warning(f"Fine-tuning raised the candidate loss ({initial:.6g} -> {trace[-1]:.6g}); reverting")
        return model, trace, True
    return tuned, trace, False


def _surface_chamfer(mesh: Mesh, observed: np.ndarray, samples: int, seed: int) -> float:
    try:
        points = sample_surface(mesh, samples, seed=seed).points
    except ValueError:
        points = mesh.vertices
    return chamfer(points, observed, "l1_eval")


def reconstruct(checkpoint: FlowCheckpoint, observation, cfg: Optional[EmbedConfig] = None, seed: Optional[int] = 0,
                shapes: Optional[Sequence[Mesh]] = None) -> ReconstructionResult:
    """
    Embed, retrieve the top-k training shapes, fine-tune a copy of the network
    and deform every candidate to the embedded code; candidates come back
    ranked by eval Chamfer to the observation.
    """
    cfg = cfg if cfg else EmbedConfig()
    observed = _observation_points(observation)
    shapes = _shapes_for(checkpoint, shapes)
    rng = make_rng(seed)

    embedding = embed(checkpoint, observed, cfg, child_seed(rng), shapes)
    code = embedding.code
    ids = retrieve_topk(checkpoint.table, code, cfg.k)

    samples = {i: sample_surface(shapes[i], cfg.samples, seed=child_seed(rng)).points for i in ids}
    tuned, trace, reverted = fine_tune(checkpoint.model, checkpoint.table, code, ids, observed, samples, cfg)

    eval_seed = child_seed(rng)
    candidates = []
    for i in ids:
        source = shapes[i]
        deformed = source.with_vertices(
            deform_through_hub(tuned, checkpoint.table[i], code, source.vertices, cfg.eval_ode))
        candidates.append(Candidate(
            i, checkpoint.shape_ids[i], deformed,
            _surface_chamfer(deformed, observed, cfg.eval_samples, eval_seed),
            _surface_chamfer(source, observed, cfg.eval_samples, eval_seed),
        ))
    candidates.sort(key=lambda c: c.chamfer)

    logger.info(f"Reconstruction picked shape {candidates[0].shape_id} ({candidates[0].name}) "
                f"with Chamfer-L1 {candidates[0].chamfer:.6g} out of {len(candidates)} candidates")
    return ReconstructionResult(code, candidates, embedding, trace, reverted)


def eval_reconstruction(mesh: Mesh, reference: Mesh, samples: int = 2048, seed: Optional[int] = 0) -> Tuple[float, float]:
    """
    Chamfer-L1 and normal consistency between two meshes.

    Normal consistency pairs every sample with its nearest sample on the other
    mesh and averages |cos| of their face normals, in both directions.
    """
    points_a, faces_a = sample_surface_with_faces(mesh, samples, seed=seed)
    points_b, faces_b = sample_surface_with_faces(reference, samples, seed=seed)
    normals_a = mesh.face_normals()[faces_a]
    normals_b = reference.face_normals()[faces_b]

    a_to_b, _ = SpatialIndex(points_b).query(points_a.points)
    b_to_a, _ = SpatialIndex(points_a).query(points_b.points)
    forward = np.abs(np.sum(normals_a * normals_b[a_to_b], axis=1)).mean()
    backward = np.abs(np.sum(normals_b * normals_a[b_to_a], axis=1)).mean()

    return chamfer(points_a, points_b, "l1_eval"), float(0.5 * (forward + backward))
