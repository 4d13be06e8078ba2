"""
Hub-and-spoke auto-decoder training over a shape collection.

Each step samples a batch of shape pairs, resamples surface points for every
shape in the batch, evaluates the hub-and-spoke Chamfer loss (plus the
optional edge-length term) per pair on its own tape, reduces gradients in
pair order and applies one Adam update to the network and the batch latents.
"""

import csv
import logging
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from flowmorph.config import DEFAULT_CONFIG
from flowmorph.core.checkpoint import DatasetManifest, FlowCheckpoint, LatentTable
from flowmorph.core.losses import edge_change, edge_terms, hub_spoke_terms
from flowmorph.flow.advect import advect_var
from flowmorph.flow.field import FlowModel, FlowVars, PairContext
from flowmorph.flow.odeint import OdeConfig
from flowmorph.geometry.mesh import Mesh, sample_surface
from flowmorph.numerics import tape as T
from flowmorph.numerics.optim import AdamState, adam_step
from flowmorph.numerics.tape import GradTape, Var
from flowmorph.utils import child_seed, make_rng, resolve_threads

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
DIAGNOSTIC_DIR = "diagnostic"


class TrainingError(RuntimeError):
    """Training stopped on a non-finite loss; a diagnostic checkpoint was written."""

    def __init__(self, message: str, checkpoint_path: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    steps: int = 500
    samples_per_shape: int = 512
    edge_weight: float = 0.0
    max_edges: int = 2000
    seed: int = 0
    checkpoint_every: int = 0
    latent_std: float = 0.1
    mode: str = "direct"
    symmetry: str = "off"
    sign: str = "hub"
    latent_dim: int = 8
    width: int = 16
    activation: str = "elu"
    ode: OdeConfig = field(default_factory=OdeConfig.rk4)

    def __post_init__(self):
        if self.samples_per_shape < 1:
            raise ValueError(f"samples_per_shape must be >= 1, got {self.samples_per_shape}")
        if self.edge_weight < 0:
            raise ValueError(f"edge_weight must be >= 0, got {self.edge_weight}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.ode.solver != "rk4":
            raise ValueError("Training differentiates a fixed-step unroll; the training solver must be rk4")

    @classmethod
    def from_config(cls, config=None, seed: Optional[int] = None) -> "TrainConfig":
        config = config if config else DEFAULT_CONFIG
        t = config.get("training", {})
        f = config.get("flow", {})
        return cls(
            learning_rate=float(t.get("learning_rate", 1e-3)),
            batch_size=int(t.get("batch_size", 4)),
            steps=int(t.get("steps", 500)),
            samples_per_shape=int(t.get("samples_per_shape", 512)),
            edge_weight=float(t.get("edge_weight", 0.0)),
            max_edges=int(t.get("max_edges", 2000)),
            seed=config.seed("training", seed),
            checkpoint_every=int(t.get("checkpoint_every", 0) or 0),
            latent_std=float(t.get("latent_std", 0.1)),
            mode=f.get("mode", "direct"),
            symmetry=f.get("symmetry", "off"),
            sign=f.get("sign", "hub"),
            latent_dim=int(f.get("latent_dim", 8)),
            width=int(f.get("width", 16)),
            activation=f.get("activation", "elu"),
            ode=OdeConfig.from_config(config, "ode.train"),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "samples_per_shape": self.samples_per_shape,
            "edge_weight": self.edge_weight,
            "max_edges": self.max_edges,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "latent_std": self.latent_std,
            "mode": self.mode,
            "symmetry": self.symmetry,
            "sign": self.sign,
            "latent_dim": self.latent_dim,
            "width": self.width,
            "activation": self.activation,
            "ode": self.ode.to_dict(),
        }


@dataclass
class EdgeSubset:
    """Vertex subset of one mesh and the sampled edges between its vertices."""

    vertices: np.ndarray
    edges: np.ndarray
    rest: np.ndarray

    @classmethod
    def sample(cls, mesh: Mesh, max_edges: int, rng: np.random.Generator) -> "EdgeSubset":
        edges, rest = edge_terms(mesh, max_edges, rng)
        used, local = np.unique(edges, return_inverse=True)
        return cls(mesh.vertices[used], local.reshape(edges.shape), rest)


@dataclass
class PairResult:
    pair: Tuple[int, int]
    loss: float
    chamfer: float
    edge: float
    grads: Dict[str, np.ndarray]


def sample_pairs(rng: np.random.Generator, count: int, batch_size: int) -> List[Tuple[int, int]]:
    """Ordered pairs drawn uniformly from count x count without replacement."""
    total = count * count
    picks = rng.choice(total, size=min(batch_size, total), replace=False)
    return [(int(p) // count, int(p) % count) for p in picks]


def _edge_path(model: FlowModel, fv: FlowVars, z_from, z_to, subset: EdgeSubset, cfg: OdeConfig) -> Var:
    hub = np.zeros_like(T.value_of(z_from))
    canonical = advect_var(model, fv, PairContext(z_from, hub), subset.vertices, cfg)
    moved = advect_var(model, fv, PairContext(hub, z_to), canonical, cfg)
    return edge_change(subset.edges, subset.rest, moved)


def pair_gradients(model: FlowModel, codes: np.ndarray, pair: Tuple[int, int], samples: Dict[int, np.ndarray],
                   edges: Dict[int, EdgeSubset], cfg: TrainConfig) -> PairResult:
    """Loss and exact gradients of one pair, on a private tape."""
    i, j = pair
    with GradTape() as tape:
        fv = model.bind(tape)
        z_i = tape.watch(codes[i], LatentTable.key(i))
        z_j = z_i if i == j else tape.watch(codes[j], LatentTable.key(j))
        chamfer = hub_spoke_terms(model, fv, z_i, z_j, samples[i], samples[j], cfg.ode)
        loss = chamfer
        edge_value = 0.0
        if cfg.edge_weight > 0:
            edge = _edge_path(model, fv, z_i, z_j, edges[i], cfg.ode) + _edge_path(model, fv, z_j, z_i, edges[j], cfg.ode)
            edge_value = float(edge.value)
            loss = loss + edge * cfg.edge_weight

    grads = T.backprop_scalar(tape, loss)
    return PairResult(pair, float(loss.value), float(chamfer.value), edge_value, grads)


class Trainer:
    """Optimization loop over a shape collection."""

    def __init__(self, cfg: Optional[TrainConfig] = None, threads: Optional[int] = None):
        self.cfg = cfg if cfg else TrainConfig()
        self.threads = resolve_threads(threads)
        self.history: List[Dict[str, Any]] = []

    def initialize(self, count: int, rng: np.random.Generator) -> Tuple[FlowModel, LatentTable]:
        cfg = self.cfg
        model = FlowModel.create(cfg.latent_dim, cfg.width, cfg.mode, cfg.symmetry, cfg.sign,
                                 cfg.activation, seed=child_seed(rng))
        table = LatentTable.initialize(count, cfg.latent_dim, cfg.latent_std, rng)
        return model, table

    def fit(self, shapes: Sequence[Mesh], shape_ids: Optional[Sequence[str]] = None,
            out_dir: Optional[Union[str, Path]] = None, dataset: Optional[List[Dict[str, Any]]] = None,
            dataset_root: Optional[str] = None) -> FlowCheckpoint:
        """
        Train a deformation space for ``shapes``.

        Args:
            shapes: Normalized training meshes
            shape_ids: Names stored in the checkpoint (defaults to shape_<k>)
            out_dir: Directory for the final checkpoint, periodic checkpoints and metrics.csv
            dataset: Manifest rows echoed into the checkpoint
            dataset_root: Directory the manifest rows are relative to

        Returns:
            FlowCheckpoint: Final state; with zero steps, the initialization
        """
        cfg = self.cfg
        if not shapes:
            raise ValueError("Training needs at least one shape")
        shape_ids = list(shape_ids) if shape_ids is not None else [f"shape_{k}" for k in range(len(shapes))]
        out_dir = Path(out_dir) if out_dir is not None else None

        rng = make_rng(cfg.seed)
        model, table = self.initialize(len(shapes), rng)
        optimizer = AdamState(cfg.learning_rate)
        self.history = []

        def snapshot(step: int) -> FlowCheckpoint:
            return FlowCheckpoint(model, table, shape_ids, cfg.to_dict(), list(dataset or []),
                                  dataset_root, step, cfg.seed)

        logger.info(f"Training on {len(shapes)} shapes for {cfg.steps} steps "
                    f"(mode={cfg.mode}, symmetry={cfg.symmetry}, batch={cfg.batch_size}, threads={self.threads})")

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            for step in range(1, cfg.steps + 1):
                pairs = sample_pairs(rng, len(shapes), cfg.batch_size)
                members = sorted({k for pair in pairs for k in pair})
                samples = {k: sample_surface(shapes[k], cfg.samples_per_shape, seed=child_seed(rng)).points
                           for k in members}
                edges = {}
                if cfg.edge_weight > 0:
                    edges = {k: EdgeSubset.sample(shapes[k], cfg.max_edges, make_rng(child_seed(rng)))
                             for k in members}

                codes = table.codes
                results = list(pool.map(
                    lambda pair: pair_gradients(model, codes, pair, samples, edges, cfg), pairs))

                loss = float(np.mean([r.loss for r in results]))
                grads = self._reduce(results)

                if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    path = self._write_diagnostic(snapshot(step - 1), out_dir)
                    raise TrainingError(f"Non-finite loss at step {step} (pairs {pairs})", path)

                values = dict(model.named_tensors())
                values.update({LatentTable.key(k): table[k] for k in members})
                optimizer, updated = adam_step(optimizer, values, grads)
                model = model.with_tensors(updated)
                table = table.with_rows(updated)

                row = {
                    "step": step,
                    "loss": loss,
                    "chamfer": float(np.mean([r.chamfer for r in results])),
                    "edge": float(np.mean([r.edge for r in results])),
                    "pairs": len(pairs),
                }
                self.history.append(row)
                logger.debug(f"step {step}: loss={loss:.6g} chamfer={row['chamfer']:.6g} edge={row['edge']:.6g}")

                if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    snapshot(step).save(out_dir / "checkpoints" / f"step_{step:06d}")

        checkpoint = snapshot(cfg.steps)
        if out_dir is not None:
            checkpoint.save(out_dir)
            self.write_metrics(out_dir / METRICS_FILE)

        if self.history:
            logger.info(f"Training finished: final loss {self.history[-1]['loss']:.6g}")
        else:
            logger.info("Zero training steps; returning the initialization")
        return checkpoint

    def _reduce(self, results: Sequence[PairResult]) -> Dict[str, np.ndarray]:
        total: Dict[str, np.ndarray] = {}
        for result in results:
            for name, grad in result.grads.items():
                total[name] = grad.copy() if name not in total else total[name] + grad
        scale = 1.0 / len(results)
        return {name: g * scale for name, g in total.items()}

    def _write_diagnostic(self, checkpoint: FlowCheckpoint, out_dir: Optional[Path]) -> Path:
        target = out_dir / DIAGNOSTIC_DIR if out_dir is not None else Path(tempfile.mkdtemp(prefix="flowmorph-diag-"))
        path = checkpoint.save(target)
        logger.error(f"Non-finite loss; diagnostic checkpoint written to {path}")
        return path

    def write_metrics(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=["step", "loss", "chamfer", "edge", "pairs"])
            writer.writeheader()
            writer.writerows(self.history)
        return path

    def window_means(self, window: int = 50) -> List[float]:
        """Mean loss over consecutive windows of the history."""
        losses = [row["loss"] for row in self.history]
        return [float(np.mean(losses[k:k + window])) for k in range(0, len(losses) - window + 1, window)]


def train(dataset: Union[DatasetManifest, Sequence[Mesh]], cfg: Optional[TrainConfig] = None,
          out_dir: Optional[Union[str, Path]] = None, threads: Optional[int] = None) -> FlowCheckpoint:
    """Train from a dataset manifest (its train split) or a list of meshes."""
    trainer = Trainer(cfg, threads)
    if isinstance(dataset, DatasetManifest):
        shapes = dataset.load_shapes("train")
        ids = [entry.mesh for entry in dataset.split("train")]
        return trainer.fit(shapes, ids, out_dir, dataset.to_dicts(), str(dataset.root))
    return trainer.fit(list(dataset), out_dir=out_dir)
