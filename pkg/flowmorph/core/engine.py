import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from flowmorph.config import DEFAULT_CONFIG
from flowmorph.core.analysis import MetricsReport, deformation_grid, latent_projection, run_metrics, transfer
from flowmorph.core.canonical import Correspondence, SmsReport, canonicalize, correspond, naive_correspond, sms
from flowmorph.core.checkpoint import DatasetManifest, FlowCheckpoint
from flowmorph.core.embedder import EmbedConfig, EmbeddingTrace, ReconstructionResult, embed, reconstruct
from flowmorph.core.interp import AnimationReport, InterpConfig, PairFit, fit_pair, render_animation
from flowmorph.core.pipeline import VerifyReport, run_verify
from flowmorph.core.trainer import TrainConfig, Trainer
from flowmorph.flow.odeint import OdeConfig
from flowmorph.geometry.mesh import Mesh, sample_surface
from flowmorph.outputs import ReportFormatter
from flowmorph.processors import ShapePreprocessor
from flowmorph.utils import OperationTimer

logger = logging.getLogger(__name__)


class FlowEngine:
    """Entry point tying training, embedding, correspondence and interpolation to one config."""

    def __init__(self, config=None, threads: Optional[int] = None):
        self.config = config if config else DEFAULT_CONFIG
        self.threads = threads if threads is not None else self.config.get("performance.threads")
        self.preprocessor = ShapePreprocessor(self.config)
        self.formatter = None
        self.checkpoint: Optional[FlowCheckpoint] = None
        self.shapes: Optional[List[Mesh]] = None
        self.last_results = None
        self.timer = OperationTimer()

        logger.info("Flow engine initialized")

    @property
    def eval_ode(self) -> OdeConfig:
        return OdeConfig.from_config(self.config, "ode.eval")

    def train(self, dataset: Union[DatasetManifest, Sequence[Mesh], str], out_dir: Optional[str] = None,
              seed: Optional[int] = None) -> FlowCheckpoint:
        """
        Train a deformation space and keep it loaded.

        Args:
            dataset: Manifest, manifest path or normalized meshes
            out_dir: Checkpoint directory (nothing is written when None)
            seed: Overrides training.seed
        """
        if isinstance(dataset, (str, Path)):
            dataset = DatasetManifest.load(dataset)

        trainer = Trainer(TrainConfig.from_config(self.config, seed), self.threads)
        if isinstance(dataset, DatasetManifest):
            shapes = dataset.load_shapes("train", self.preprocessor)
            ids = [entry.mesh for entry in dataset.split("train")]
            with self.timer.track("train", shapes=len(shapes), steps=trainer.cfg.steps):
                checkpoint = trainer.fit(shapes, ids, out_dir, dataset.to_dicts(), str(dataset.root))
        else:
            shapes = list(dataset)
            with self.timer.track("train", shapes=len(shapes), steps=trainer.cfg.steps):
                checkpoint = trainer.fit(shapes, out_dir=out_dir)

        self.checkpoint, self.shapes = checkpoint, shapes
        self.last_results = {"history": trainer.history}
        return checkpoint

    def load(self, directory, shapes: Optional[Sequence[Mesh]] = None) -> FlowCheckpoint:
        self.checkpoint = FlowCheckpoint.load(directory)
        self.shapes = list(shapes) if shapes is not None else None
        return self.checkpoint

    def _require(self) -> FlowCheckpoint:
        if self.checkpoint is None:
            raise ValueError("No checkpoint loaded - train or load one first")
        return self.checkpoint

    def training_shapes(self) -> List[Mesh]:
        if self.shapes is None:
            self.shapes = self._require().load_shapes("train")
        return self.shapes

    def embed(self, observation, seed: Optional[int] = None) -> EmbeddingTrace:
        result = embed(self._require(), observation, EmbedConfig.from_config(self.config),
                       self.config.seed("embedding", seed), self.training_shapes())
        self.last_results = result
        return result

    def reconstruct(self, observation, seed: Optional[int] = None, k: Optional[int] = None) -> ReconstructionResult:
        cfg = EmbedConfig.from_config(self.config)
        if k is not None:
            cfg.k = int(k)
        result = reconstruct(self._require(), observation, cfg, self.config.seed("embedding", seed),
                             self.training_shapes())
        self.last_results = result
        return result

    def canonicalize(self, shape: Union[int, Mesh], code=None) -> Mesh:
        return canonicalize(self._require(), shape, code, self.eval_ode, self.shapes)

    def code_for(self, shape: Union[int, Mesh], seed: Optional[int] = None) -> np.ndarray:
        """Table code for an index, embedded code for a mesh."""
        if isinstance(shape, (int, np.integer)):
            return self._require().table[int(shape)]
        cloud = sample_surface(shape, int(self.config.get("embedding.samples", 512)), seed=self.config.seed("embedding", seed))
        return self.embed(cloud, seed).code

    def correspond(self, source: Mesh, target: Mesh, codes=None, naive: bool = False) -> Correspondence:
        if naive:
            return naive_correspond(source, target)
        codes = codes if codes is not None else (self.code_for(source), self.code_for(target))
        return correspond(self._require(), source, target, codes, self.eval_ode)

    def sms(self, source: Mesh, target: Mesh, codes=None, naive: bool = False) -> SmsReport:
        codes = codes if codes is not None or naive else (self.code_for(source), self.code_for(target))
        forward = self.correspond(source, target, codes, naive)
        backward = self.correspond(target, source, None if codes is None else codes[::-1], naive)
        report = sms(source, target, forward, backward)
        self.last_results = report
        return report

    def interpolate(self, source: Mesh, target: Mesh, out_dir: Optional[str] = None,
                    seed: Optional[int] = None) -> Dict[str, Any]:
        """Fit the keyframe pair, then render frames and the linear baseline."""
        cfg = InterpConfig.from_config(self.config)
        with self.timer.track("interpolate", vertices=source.num_vertices, frames=cfg.frames):
            fit: PairFit = fit_pair(source, target, cfg, self.config.seed("interpolation", seed))
            report: AnimationReport = render_animation(fit.model, fit.codes, source, target, cfg, out_dir)
        self.last_results = {"fit": fit, "animation": report}
        return self.last_results

    def transfer(self, source: int, target: int) -> Mesh:
        return transfer(self._require(), self.training_shapes()[source], source, target, self.eval_ode)

    def deformation_grid(self, ids: Optional[Sequence[int]] = None, seed: Optional[int] = None) -> np.ndarray:
        return deformation_grid(self._require(), self.training_shapes(), ids,
                                int(self.config.get("embedding.eval_samples", 2048)),
                                self.config.seed("metrics", seed), self.eval_ode)

    def latent_projection(self, dims: int = 2):
        return latent_projection(self._require().table, dims)

    def verify(self, seed: Optional[int] = None, sizes: Optional[Dict[str, int]] = None,
               study: bool = False) -> VerifyReport:
        with self.timer.track("verify", study=study):
            report = run_verify(seed, sizes, self.config, study)
        self.last_results = report
        return report

    def metrics(self, split: str = "test", seed: Optional[int] = None) -> MetricsReport:
        checkpoint = self._require()
        manifest = checkpoint.dataset_manifest()
        if manifest is None:
            raise ValueError("Checkpoint does not reference a dataset manifest")
        shapes = manifest.load_shapes(split, self.preprocessor)
        names = [entry.mesh for entry in manifest.split(split)]
        report = run_metrics(
            checkpoint, shapes, names, EmbedConfig.from_config(self.config), self.config.seed("metrics", seed),
            int(self.config.get("metrics.observation_points", 300)), float(self.config.get("metrics.noise_std", 0.05)),
            self.training_shapes(),
        )
        self.last_results = report
        return report

    def update_config(self, new_config: Dict[str, Any]):
        self.config = self.config.copy().override(new_config)
        self.preprocessor = ShapePreprocessor(self.config)
        self.formatter = None
        logger.info("Configuration updated")

    def export_results(self, format_type: str = 'json') -> str:
        if self.last_results is None:
            logger.warning("No results to export - run an operation first")
            return ""

        if not self.formatter:
            self.formatter = ReportFormatter(config=self.config)

        results = self.last_results
        if isinstance(results, VerifyReport):
            return self.formatter.format_verify(results, format_type)
        if hasattr(results, "to_dict"):
            return self.formatter.format_json(results.to_dict())
        logger.warning(f"Unsupported export for {type(results).__name__}")
        return ""
