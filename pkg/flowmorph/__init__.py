from .config import Config, DEFAULT_CONFIG
from .core import FlowCheckpoint, FlowEngine, FlowPipeline
from .flow import FlowModel, OdeConfig, PairContext
from .geometry import Mesh, PointCloud
from .outputs import DataExporter, ReportFormatter
from .processors import ShapePreprocessor

__version__ = "0.1.0"

__all__ = [
    "Config",
    "DEFAULT_CONFIG",
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
    "__version__",
]


def quick_verify(seed=0, config=None, sizes=None):
    """
    Run the flow invariant suite.

    Args:
        seed (int): Suite seed
        config (Config, optional): Configuration overrides
        sizes (dict, optional): Point counts and model sizes for the checks

    Returns:
        VerifyReport: One entry per property
    """
    engine = FlowEngine(config=config)
    return engine.verify(seed, sizes)


def morph_meshes(source, target, frames=11, config=None, out_dir=None):
    """
    Fit a flow between two keyframes with shared connectivity and render the in-betweens.

    Args:
        source (Mesh): First keyframe
        target (Mesh): Second keyframe
        frames (int): Rendered frames including both ends
        config (Config, optional): Configuration options
        out_dir (str, optional): Directory for frame meshes and report.json

    Returns:
        list: Interpolated meshes
    """
    engine = FlowEngine(config=config)
    engine.update_config({"interpolation.frames": frames})
    return engine.interpolate(source, target, out_dir)["animation"].frames
