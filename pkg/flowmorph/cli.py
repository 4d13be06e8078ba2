"""
Command-line entry point: ``python -m flowmorph <command> [flags]``.

Exit codes: 0 success, 1 usage error (bad flags, missing files, malformed
inputs), 2 computation failure or a failed verification.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from flowmorph import __version__
from flowmorph.config import Config
from flowmorph.core.engine import FlowEngine
from flowmorph.flow.field import FlowModelError
from flowmorph.geometry.mesh import Mesh, PointCloud
from flowmorph.geometry.meshio import MeshParseError, load_mesh, save_mesh
from flowmorph.outputs import DataExporter
from flowmorph.utils import resolve_threads, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

USAGE_ERRORS = (FileNotFoundError, MeshParseError, FlowModelError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def load_points(path: str) -> PointCloud:
    """Observation points from .txt/.xyz (whitespace columns), .npy, or a mesh's vertices."""
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(f"Points file not found: {path}")
    suffix = file_path.suffix.lower()
    if suffix in (".txt", ".xyz"):
        points = np.loadtxt(file_path, dtype=np.float64, ndmin=2)[:, :3]
    elif suffix == ".npy":
        points = np.load(file_path)
    else:
        points = load_mesh(file_path).vertices
    return PointCloud(points)


def load_code(path: str) -> np.ndarray:
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(f"Code file not found: {path}")
    with open(file_path, 'r', encoding='utf-8') as f:
        payload = json.load(f)
    return np.asarray(payload["code"] if isinstance(payload, dict) else payload, dtype=np.float64)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowmorph", description="Learned invertible deformation flows between 3D shapes.")
    parser.add_argument("--version", action="version", version=f"flowmorph {__version__}")
    parser.add_argument("--config", help="YAML config file (flat training keys or nested sections)")
    parser.add_argument("--threads", type=int, default=None,
                        help="Worker threads for data-parallel loops (default: hardware count)")
    parser.add_argument("--log-level", default=None, help="Overrides logging.level")

    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="Train a deformation space over a dataset manifest")
    p.add_argument("--manifest", required=True, help="Dataset manifest JSON")
    p.add_argument("--out", required=True, help="Checkpoint directory")
    p.add_argument("--steps", type=int, help="Optimizer steps")
    p.add_argument("--seed", type=int, help="Training seed")
    p.add_argument("--mode", choices=["direct", "divfree"], help="Flow parameterization")
    p.add_argument("--symmetry", choices=["off", "yz"], help="Mirror symmetry plane")
    p.add_argument("--sign", choices=["hub", "oddmlp"], help="Sign function")
    p.add_argument("--edge-weight", type=float, help="Edge-length regularizer weight")
    p.add_argument("--batch-size", type=int, help="Pairs per step")
    p.add_argument("--learning-rate", type=float, help="Adam learning rate")

    p = sub.add_parser("embed", help="Embed an observation into the latent space")
    p.add_argument("--ckpt", required=True, help="Checkpoint directory")
    p.add_argument("--points", required=True, help="Observation points (.txt, .xyz, .npy or a mesh)")
    p.add_argument("--seed", type=int, help="Embedding seed")
    p.add_argument("--out", required=True, help="Output code JSON")

    p = sub.add_parser("reconstruct", help="Reconstruct a mesh from an observation")
    p.add_argument("--ckpt", required=True, help="Checkpoint directory")
    p.add_argument("--points", required=True, help="Observation points (.txt, .xyz, .npy or a mesh)")
    p.add_argument("--k", type=int, help="Retrieved candidates")
    p.add_argument("--seed", type=int, help="Embedding seed")
    p.add_argument("--out", required=True, help="Output mesh")
    p.add_argument("--report", help="Candidate table JSON")

    p = sub.add_parser("canonicalize", help="Deform a shape to the hub")
    p.add_argument("--ckpt", required=True, help="Checkpoint directory")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--shape", type=int, help="Training shape index")
    group.add_argument("--mesh", help="Mesh file (needs --code or is embedded first)")
    p.add_argument("--code", help="Code JSON written by embed")
    p.add_argument("--seed", type=int, help="Embedding seed when no code is given")
    p.add_argument("--out", required=True, help="Output mesh")

    for name, text in (("correspond", "Dense correspondence through the hub"),
                       ("sms", "Semantic matching score between two labeled meshes")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--ckpt", help="Checkpoint directory (not needed with --naive)")
        p.add_argument("--source", required=True, help="Source mesh")
        p.add_argument("--target", required=True, help="Target mesh")
        p.add_argument("--source-id", type=int, help="Use this training code for the source")
        p.add_argument("--target-id", type=int, help="Use this training code for the target")
        p.add_argument("--naive", action="store_true", help="Nearest neighbors without deformation")
        p.add_argument("--seed", type=int, help="Embedding seed for meshes without a code")
        p.add_argument("--out", required=(name == "correspond"),
                       help="Correspondence CSV" if name == "correspond" else "Score JSON")

    p = sub.add_parser("interpolate", help="Fit a keyframe pair and render the animation")
    p.add_argument("--source", required=True, help="First keyframe mesh")
    p.add_argument("--target", required=True, help="Second keyframe mesh (same connectivity)")
    p.add_argument("--frames", type=int, help="Rendered frames")
    p.add_argument("--mode", choices=["direct", "divfree"], help="Flow parameterization")
    p.add_argument("--symmetry", choices=["off", "yz"], help="Mirror symmetry plane")
    p.add_argument("--edge-weight", type=float, help="Edge-length regularizer weight")
    p.add_argument("--steps", type=int, help="Optimizer steps")
    p.add_argument("--seed", type=int, help="Fitting seed")
    p.add_argument("--out", required=True, help="Output directory")

    p = sub.add_parser("verify", help="Run the flow invariant suite on random models")
    p.add_argument("--seed", type=int, help="Suite seed")
    p.add_argument("--points", type=int, help="Random evaluation points")
    p.add_argument("--report", help="Report path (.json or .txt)")
    p.add_argument("--table", action="store_true", help="Print the human-readable table")
    p.add_argument("--study", action="store_true", help="Also run the integration-scheme study")

    p = sub.add_parser("metrics", help="Reconstruction metrics over a manifest split")
    p.add_argument("--ckpt", required=True, help="Checkpoint directory")
    p.add_argument("--split", default="test", help="Manifest split")
    p.add_argument("--seed", type=int, help="Metrics seed")
    p.add_argument("--out", required=True, help="Per-shape CSV")
    p.add_argument("--projection", help="Latent-table PCA CSV")

    return parser


def build_config(args) -> Config:
    """Config file over defaults, then flags over the file."""
    config = Config(args.config) if args.config else Config()
    overrides: Dict[str, object] = {"logging.level": args.log_level, "performance.threads": args.threads}

    command = args.command
    if command == "train":
        overrides.update({
            "training.steps": args.steps,
            "training.seed": args.seed,
            "training.edge_weight": args.edge_weight,
            "training.batch_size": args.batch_size,
            "training.learning_rate": args.learning_rate,
            "flow.mode": args.mode,
            "flow.symmetry": args.symmetry,
            "flow.sign": args.sign,
        })
    elif command == "interpolate":
        overrides.update({
            "interpolation.frames": args.frames,
            "interpolation.mode": args.mode,
            "interpolation.symmetry": args.symmetry,
            "interpolation.edge_weight": args.edge_weight,
            "interpolation.steps": args.steps,
            "interpolation.seed": args.seed,
        })
    elif command == "reconstruct":
        overrides["embedding.k"] = args.k
    elif command == "verify":
        overrides.update({"verify.seed": args.seed, "verify.points": args.points})
    elif command == "metrics":
        overrides["metrics.seed"] = args.seed

    return config.override(overrides)


def _engine(config: Config, ckpt: Optional[str] = None) -> FlowEngine:
    engine = FlowEngine(config, resolve_threads(config.get("performance.threads")))
    if ckpt:
        if not Path(ckpt).exists():
            raise FileNotFoundError(f"Checkpoint not found: {ckpt}")
        engine.load(ckpt)
    return engine


def _normalized(engine: FlowEngine, path: str) -> Mesh:
    return engine.preprocessor.process(load_mesh(path))["mesh"]


def cmd_train(args, config: Config, exporter: DataExporter) -> int:
    engine = _engine(config)
    checkpoint = engine.train(args.manifest, args.out)
    history = engine.last_results["history"]
    final = history[-1]["loss"] if history else float("nan")
    print(f"Trained {len(checkpoint.table)} shapes for {checkpoint.step} steps, final loss {final:.6g}")
    return EXIT_OK


def cmd_embed(args, config: Config, exporter: DataExporter) -> int:
    engine = _engine(config, args.ckpt)
    trace = engine.embed(load_points(args.points), args.seed)
    exporter.export_code(trace.code, args.out, {"embedding": trace.to_dict()})
    print(f"Objective {trace.initial_objective:.6g} -> {trace.final_objective:.6g}; code written to {args.out}")
    return EXIT_OK


def cmd_reconstruct(args, config: Config, exporter: DataExporter) -> int:
    engine = _engine(config, args.ckpt)
    result = engine.reconstruct(load_points(args.points), args.seed)
    save_mesh(result.mesh, exporter._prepare(args.out))
    if args.report:
        exporter.write_json(args.report, result.to_dict())
    selected = result.selected
    print(f"Selected {selected.name} (chamfer {selected.chamfer:.6g}); mesh written to {args.out}")
    return EXIT_OK


def cmd_canonicalize(args, config: Config, exporter: DataExporter) -> int:
    engine = _engine(config, args.ckpt)
    if args.shape is not None:
        mesh = engine.canonicalize(args.shape)
    else:
        source = _normalized(engine, args.mesh)
        code = load_code(args.code) if args.code else engine.code_for(source, args.seed)
        mesh = engine.canonicalize(source, code)
    save_mesh(mesh, exporter._prepare(args.out))
    print(f"Canonical mesh written to {args.out}")
    return EXIT_OK


def _pair_codes(engine: FlowEngine, args, source: Mesh, target: Mesh):
    if args.naive:
        return None
    if engine.checkpoint is None:
        raise UsageError("--ckpt is required unless --naive is given")
    table = engine.checkpoint.table
    source_code = table[args.source_id] if args.source_id is not None else engine.code_for(source, args.seed)
    target_code = table[args.target_id] if args.target_id is not None else engine.code_for(target, args.seed)
    return source_code, target_code


def cmd_correspond(args, config: Config, exporter: DataExporter) -> int:
    engine = _engine(config, args.ckpt)
    source, target = _normalized(engine, args.source), _normalized(engine, args.target)
    result = engine.correspond(source, target, _pair_codes(engine, args, source, target), args.naive)
    exporter.export_correspondence(result, args.out)
    print(f"Matched {len(result.indices)} source vertices; written to {args.out}")
    return EXIT_OK


def cmd_sms(args, config: Config, exporter: DataExporter) -> int:
    engine = _engine(config, args.ckpt)
    source, target = _normalized(engine, args.source), _normalized(engine, args.target)
    report = engine.sms(source, target, _pair_codes(engine, args, source, target), args.naive)
    if args.out:
        exporter.write_json(args.out, report.to_dict())
    print(f"SMS {report.score:.4f} (forward {report.forward:.4f}, backward {report.backward:.4f})")
    return EXIT_OK


def cmd_interpolate(args, config: Config, exporter: DataExporter) -> int:
    engine = _engine(config)
    result = engine.interpolate(load_mesh(args.source), load_mesh(args.target), args.out, args.seed)
    report = result["animation"]
    print(f"{len(report.frames)} frames written to {args.out}; max volume drift {report.max_volume_drift:.3%} "
          f"(linear {report.baseline_max_volume_drift:.3%})")
    return EXIT_OK


def cmd_verify(args, config: Config, exporter: DataExporter) -> int:
    engine = _engine(config)
    report = engine.verify(config.seed("verify"), {"points": int(config.get("verify.points"))}, args.study)
    if args.report:
        exporter.export_report(report, args.report)
    print(engine.export_results('table' if args.table else 'json'), end="")
    if not report.passed:
        logger.error(f"Verification failed: {', '.join(report.failures)}")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_metrics(args, config: Config, exporter: DataExporter) -> int:
    engine = _engine(config, args.ckpt)
    report = engine.metrics(args.split)
    exporter.write_csv(args.out, report.to_rows(), ["shape", "chamfer_l1", "normal_consistency"])
    if args.projection:
        coords, ratio = engine.latent_projection()
        rows = [{"shape": name, **{f"pc{d}": float(c) for d, c in enumerate(row)}}
                for name, row in zip(engine.checkpoint.shape_ids, coords)]
        rows.append({"shape": "explained_variance", **{f"pc{d}": float(r) for d, r in enumerate(ratio)}})
        exporter.write_csv(args.projection, rows)
    means = report.means
    print(f"{len(report.rows)} shapes: mean chamfer-L1 {means['chamfer_l1']:.6g}, "
          f"mean normal consistency {means['normal_consistency']:.4f}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "embed": cmd_embed,
    "reconstruct": cmd_reconstruct,
    "canonicalize": cmd_canonicalize,
    "correspond": cmd_correspond,
    "sms": cmd_sms,
    "interpolate": cmd_interpolate,
    "verify": cmd_verify,
    "metrics": cmd_metrics,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = build_config(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except USAGE_ERRORS + (ValueError,) as e:
        print(f"flowmorph: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    setup_logging(config.get("logging.level", "INFO"), config.get("logging.log_file"))
    exporter = DataExporter(config)

    try:
        return COMMANDS[args.command](args, config, exporter)
    except UsageError as e:
        print(f"flowmorph: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except USAGE_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_USAGE
    except Exception as e:
        logger.exception(f"{args.command} failed: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
