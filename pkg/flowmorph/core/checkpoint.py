"""
Persistent state of a trained deformation space: latent table, dataset
manifest and the checkpoint bundling them with the flow model.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from flowmorph.flow.field import FlowModel
from flowmorph.geometry.mesh import Mesh
from flowmorph.geometry.meshio import load_labels, load_mesh
from flowmorph.numerics.mlp import MlpParams
from flowmorph.numerics.serialize import load_tensors, manifest_bytes, save_tensors
from flowmorph.processors.preprocessor import ShapePreprocessor

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("train", "test", "val")


class LatentTable:
    """One code per training shape; the hub (zero code) is implicit and never stored."""

    def __init__(self, codes):
        codes = np.array(codes, dtype=np.float64)
        if codes.ndim != 2:
            raise ValueError(f"Latent table must be 2-D, got shape {codes.shape}")
        if not np.all(np.isfinite(codes)):
            raise ValueError("Latent table has non-finite entries")
        codes.setflags(write=False)
        self.codes = codes

    @classmethod
    def initialize(cls, count: int, dim: int, std: float = 0.1,
                   rng: Optional[np.random.Generator] = None) -> "LatentTable":
        rng = rng or np.random.default_rng(0)
        return cls(rng.normal(0.0, std, size=(count, dim)))

    def __len__(self) -> int:
        return self.codes.shape[0]

    def __getitem__(self, index: int) -> np.ndarray:
        return self.codes[index]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    @property
    def hub(self) -> np.ndarray:
        return np.zeros(self.dim)

    @staticmethod
    def key(index: int) -> str:
        return f"latent.{index}"

    def with_rows(self, mapping: Dict[str, np.ndarray]) -> "LatentTable":
        """Copy with rows replaced for every ``latent.<i>`` key present."""
        codes = self.codes.copy()
        for i in range(len(self)):
            row = mapping.get(self.key(i))
            if row is not None:
                codes[i] = row
        return LatentTable(codes)


@dataclass
class ManifestEntry:
    mesh: str
    labels: Optional[str] = None
    split: str = "train"

    def to_dict(self) -> Dict[str, Any]:
        return {"mesh": self.mesh, "labels": self.labels, "split": self.split}


class DatasetManifest:
    """JSON list of shapes: ``{"shapes": [{"mesh": ..., "labels": ..., "split": ...}]}``."""

    def __init__(self, entries: Sequence[ManifestEntry], root: Optional[Path] = None):
        self.entries = list(entries)
        self.root = Path(root) if root is not None else Path(".")
        for entry in self.entries:
            if entry.split not in SPLITS:
                raise ValueError(f"Unknown split {entry.split!r} for {entry.mesh}")
        if not any(e.split == "train" for e in self.entries):
            raise ValueError("Dataset manifest needs at least one train entry")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Dataset manifest not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ValueError(f"Invalid dataset manifest {path}: {e}")
        entries = [ManifestEntry(s["mesh"], s.get("labels"), s.get("split", "train")) for s in data.get("shapes", [])]
        manifest = cls(entries, path.parent)
        for entry in manifest.entries:
            if not manifest.resolve(entry.mesh).exists():
                raise FileNotFoundError(f"Mesh listed in manifest not found: {entry.mesh}")
        return manifest

    @classmethod
    def from_dicts(cls, rows: Sequence[Dict[str, Any]], root=None) -> "DatasetManifest":
        return cls([ManifestEntry(r["mesh"], r.get("labels"), r.get("split", "train")) for r in rows], root)

    def resolve(self, relative: str) -> Path:
        p = Path(relative)
        return p if p.is_absolute() else self.root / p

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def load_shapes(self, split: str = "train", preprocessor: Optional[ShapePreprocessor] = None) -> List[Mesh]:
        """Load and normalize every mesh in a split, in manifest order."""
        preprocessor = preprocessor or ShapePreprocessor()
        shapes = []
        for entry in self.split(split):
            mesh = load_mesh(self.resolve(entry.mesh))
            if entry.labels:
                mesh = mesh.with_labels(load_labels(self.resolve(entry.labels)))
            shapes.append(preprocessor.process(mesh)["mesh"])
        logger.info(f"Loaded {len(shapes)} {split} shapes")
        return shapes

    def to_dicts(self) -> List[Dict[str, Any]]:
        return [e.to_dict() for e in self.entries]


@dataclass
class FlowCheckpoint:
    """Everything needed to reuse a trained deformation space."""

    model: FlowModel
    table: LatentTable
    shape_ids: List[str]
    config: Dict[str, Any] = field(default_factory=dict)
    dataset: List[Dict[str, Any]] = field(default_factory=list)
    dataset_root: Optional[str] = None
    step: int = 0
    seed: int = 0

    def __post_init__(self):
        if len(self.shape_ids) != len(self.table):
            raise ValueError(f"{len(self.shape_ids)} shape ids for {len(self.table)} latent codes")
        if self.table.dim != self.model.latent_dim:
            raise ValueError(f"Latent table dim {self.table.dim} != model latent_dim {self.model.latent_dim}")

    def manifest(self) -> Dict[str, Any]:
        backbone = self.model.backbone
        manifest = {
            "format_version": FORMAT_VERSION,
            "flow": self.model.flags(),
            "backbone": {"widths": backbone.widths, "activations": list(backbone.activations)},
            "latent_table": {"count": len(self.table), "dim": self.table.dim},
            "shape_ids": list(self.shape_ids),
            "config": self.config,
            "dataset": self.dataset,
            "dataset_root": self.dataset_root,
            "step": int(self.step),
            "seed": int(self.seed),
        }
        if self.model.sign_net is not None:
            manifest["sign_net"] = {
                "widths": self.model.sign_net.widths,
                "activations": list(self.model.sign_net.activations),
            }
        return manifest

    def tensors(self):
        return self.model.named_tensors() + [("latent_table", self.table.codes)]

    def save(self, directory) -> Path:
        path = save_tensors(directory, self.manifest(), self.tensors())
        logger.info(f"Checkpoint written to {path} (step {self.step})")
        return path

    def to_bytes(self) -> bytes:
        """Manifest and tensor bytes as written by ``save``; used for equality checks."""
        blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in self.tensors())
        return manifest_bytes(self.manifest()) + blob

    @classmethod
    def load(cls, directory) -> "FlowCheckpoint":
        manifest, tensors = load_tensors(directory)
        flags = manifest["flow"]

        def params(spec, prefix, use_bias=True):
            widths, acts = spec["widths"], spec["activations"]
            weights = tuple(tensors[f"{prefix}.W{k}"] for k in range(len(acts)))
            biases = tuple(tensors[f"{prefix}.b{k}"] if use_bias else np.zeros(widths[k + 1])
                           for k in range(len(acts)))
            return MlpParams(weights, biases, tuple(acts), use_bias)

        try:
            backbone = params(manifest["backbone"], "backbone")
            sign_net = params(manifest["sign_net"], "sign", use_bias=False) if "sign_net" in manifest else None
            model = FlowModel(backbone, int(flags["latent_dim"]), int(flags["width"]), flags["mode"],
                              flags["symmetry"], flags["sign"], sign_net)
            table = LatentTable(tensors["latent_table"].reshape(manifest["latent_table"]["count"],
                                                                  manifest["latent_table"]["dim"]))
        except KeyError as e:
            raise ValueError(f"Checkpoint {directory} is missing {e}")

        logger.info(f"Loaded checkpoint {directory}: {len(table)} shapes, mode={model.mode}")
        return cls(model, table, list(manifest["shape_ids"]), manifest.get("config", {}),
                   manifest.get("dataset", []), manifest.get("dataset_root"),
                   int(manifest.get("step", 0)), int(manifest.get("seed", 0)))

    def dataset_manifest(self) -> Optional[DatasetManifest]:
        if not self.dataset:
            return None
        return DatasetManifest.from_dicts(self.dataset, self.dataset_root)

    def load_shapes(self, split: str = "train") -> List[Mesh]:
        manifest = self.dataset_manifest()
        if manifest is None:
            raise ValueError("Checkpoint does not reference a dataset; pass the shapes explicitly")
        return manifest.load_shapes(split)
