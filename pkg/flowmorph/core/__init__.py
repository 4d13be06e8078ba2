from .checkpoint import DatasetManifest, FlowCheckpoint, LatentTable
from .losses import edge_regularizer, hub_spoke_loss, pairwise_loss, vertex_l2_loss
from .trainer import TrainConfig, Trainer, TrainingError, train
from .embedder import EmbedConfig, ReconstructionResult, embed, eval_reconstruction, reconstruct, retrieve_topk
from .canonical import Correspondence, SmsReport, canonicalize, correspond, naive_correspond, sms
from .interp import AnimationReport, InterpConfig, PairFit, fit_pair, interpolate, render_animation
from .analysis import deformation_grid, intersection_study, latent_projection, run_metrics, transfer
from .pipeline import FlowPipeline, VerifyReport, run_verify
from .engine import FlowEngine

__all__ = [
    "DatasetManifest",
    "FlowCheckpoint",
    "LatentTable",
    "edge_regularizer",
    "hub_spoke_loss",
    "pairwise_loss",
    "vertex_l2_loss",
    "TrainConfig",
    "Trainer",
    "TrainingError",
    "train",
    "EmbedConfig",
    "ReconstructionResult",
    "embed",
    "eval_reconstruction",
    "reconstruct",
    "retrieve_topk",
    "Correspondence",
    "SmsReport",
    "canonicalize",
    "correspond",
    "naive_correspond",
    "sms",
    "AnimationReport",
    "InterpConfig",
    "PairFit",
    "fit_pair",
    "interpolate",
    "render_animation",
    "deformation_grid",
    "intersection_study",
    "latent_projection",
    "run_metrics",
    "transfer",
    "FlowPipeline",
    "VerifyReport",
    "run_verify",
    "FlowEngine",
]
