"""
FlowMorph - learned invertible deformation flows between 3D shapes.

This package provides tools for:
- Training a hub-and-spoke deformation space over a shape collection
- Embedding sparse, noisy observations and reconstructing meshes
- Canonical correspondence and semantic matching scores
- Keyframe interpolation with volume-conserving flows
"""

__version__ = "0.1.0"
__description__ = "Learned invertible deformation flows between 3D shapes"

# Import main classes for easy access
from flowmorph import morph_meshes, quick_verify
from flowmorph.core import FlowCheckpoint, FlowEngine, FlowPipeline
from flowmorph.flow import FlowModel, OdeConfig, PairContext
from flowmorph.geometry import Mesh, PointCloud
from flowmorph.outputs import DataExporter, ReportFormatter
from flowmorph.processors import ShapePreprocessor

__all__ = [
    "FlowCheckpoint",
    "FlowEngine",
    "FlowPipeline",
    "FlowModel",
    "OdeConfig",
    "PairContext",
    "Mesh",
    "PointCloud",
    "DataExporter",
    "ReportFormatter",
    "ShapePreprocessor",
    "quick_verify",
    "morph_meshes",
]
