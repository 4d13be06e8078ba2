"""
OBJ and PLY reading and writing on top of trimesh.

Labels travel in a ``<mesh>.labels.txt`` sidecar for OBJ and as an integer
``label`` vertex property for PLY. Coordinates are rounded to 9 significant
digits before they are written.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import trimesh

from flowmorph.geometry.mesh import Mesh

logger = logging.getLogger(__name__)

FORMATS = ("obj", "ply")
FLOAT_DIGITS = 9


class MeshParseError(ValueError):
    """Malformed mesh file or out-of-range face index."""


@dataclass
class LoadReport:
    """What the loader noticed while reading a file."""

    path: str
    format: str
    degenerate_faces: List[int] = field(default_factory=list)
    labels_source: Optional[str] = None

    def to_dict(self):
        return {
            "path": self.path,
            "format": self.format,
            "degenerate_faces": list(self.degenerate_faces),
            "labels_source": self.labels_source,
        }


def labels_path_for(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".labels.txt")


def detect_format(path, fmt: Optional[str] = None) -> str:
    if fmt:
        fmt = fmt.lower().lstrip(".")
    else:
        fmt = Path(path).suffix.lower().lstrip(".")
    if fmt not in FORMATS:
        raise ValueError(f"Unsupported mesh format: {fmt!r} (expected one of {FORMATS})")
    return fmt


def round_significant(values: np.ndarray, digits: int = FLOAT_DIGITS) -> np.ndarray:
    """Round every entry to ``digits`` significant digits."""
    values = np.asarray(values, dtype=np.float64)
    magnitude = np.abs(values)
    scale = np.where(magnitude > 0, np.floor(np.log10(np.where(magnitude > 0, magnitude, 1.0))), 0.0)
    factor = 10.0 ** (digits - 1 - scale)
    return np.round(values * factor) / factor


def _ply_labels(loaded: trimesh.Trimesh) -> Optional[np.ndarray]:
    labels = getattr(loaded, "vertex_attributes", {}).get("label")
    if labels is None:
        data = loaded.metadata.get("_ply_raw", {}).get("vertex", {}).get("data")
        try:
            labels = data["label"]
        except (KeyError, ValueError, TypeError, IndexError):
            return None
    return np.asarray(labels).reshape(-1).astype(np.int64)


def _load_trimesh(path: Path, fmt: str) -> trimesh.Trimesh:
    try:
        loaded = trimesh.load(str(path), file_type=fmt, process=False, maintain_order=True, force="mesh")
    except Exception as e:
        raise MeshParseError(f"{path}: {e}") from e
    if not isinstance(loaded, trimesh.Trimesh):
        raise MeshParseError(f"{path}: no triangle mesh found")
    return loaded


def read_mesh(path, fmt: Optional[str] = None, labels: bool = True) -> Tuple[Mesh, LoadReport]:
    """
    Load a mesh and the report of what loading noticed.

    Args:
        path: File path
        fmt: 'obj' or 'ply'; detected from the extension when omitted
        labels: Attach labels from the sidecar/vertex property when present

    Returns:
        (Mesh, LoadReport)
    """
    path = Path(path)
    fmt = detect_format(path, fmt)
    if not path.exists():
        raise FileNotFoundError(f"Mesh file not found: {path}")

    loaded = _load_trimesh(path, fmt)
    vertices = np.asarray(loaded.vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(loaded.faces, dtype=np.int64).reshape(-1, 3)

    report = LoadReport(path=str(path), format=fmt)
    vertex_labels = None
    if fmt == "obj":
        sidecar = labels_path_for(path)
        if labels and sidecar.exists():
            vertex_labels = load_labels(sidecar)
            report.labels_source = str(sidecar)
    else:
        vertex_labels = _ply_labels(loaded)
        if vertex_labels is not None:
            report.labels_source = "vertex property"
        if not labels:
            vertex_labels = None

    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise MeshParseError(f"{path}: face index out of range for {len(vertices)} vertices")
    if vertex_labels is not None and len(vertex_labels) != len(vertices):
        raise MeshParseError(f"{path}: {len(vertex_labels)} labels for {len(vertices)} vertices")

    mesh = Mesh(vertices, faces, vertex_labels)
    if mesh.num_faces:
        report.degenerate_faces = np.flatnonzero(mesh.face_areas() == 0.0).tolist()
        if report.degenerate_faces:
            logger.warning(f"{path}: {len(report.degenerate_faces)} zero-area faces kept")

    logger.debug(f"Loaded {path}: {mesh.num_vertices} vertices, {mesh.num_faces} faces")
    return mesh, report


def load_mesh(path, fmt: Optional[str] = None, labels: bool = True) -> Mesh:
    """Load an OBJ or PLY file as a triangle mesh."""
    mesh, _ = read_mesh(path, fmt, labels)
    return mesh


def load_labels(path) -> np.ndarray:
    path = Path(path)
    try:
        return np.array([int(line) for line in path.read_text(encoding="utf-8").split()], dtype=np.int64)
    except ValueError:
        raise MeshParseError(f"{path}: labels must be one integer per line")


def save_mesh(mesh: Mesh, path, fmt: Optional[str] = None, binary: bool = False) -> Path:
    """
    Write a mesh; labels go to a sidecar (OBJ) or a vertex property (PLY).

    Args:
        mesh: Mesh to write
        path: Destination file
        fmt: 'obj' or 'ply'; detected from the extension when omitted
        binary: Write binary little-endian PLY instead of ASCII
    """
    path = Path(path)
    fmt = detect_format(path, fmt)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)

    out = trimesh.Trimesh(vertices=round_significant(mesh.vertices), faces=mesh.faces, process=False)
    if fmt == "obj":
        out.export(file_obj=str(path), file_type="obj", include_normals=False, include_color=False,
                   include_texture=False, digits=FLOAT_DIGITS)
        if mesh.labels is not None:
            labels_path_for(path).write_text("".join(f"{int(l)}\n" for l in mesh.labels), encoding="utf-8")
    else:
        if mesh.labels is not None:
            out.vertex_attributes["label"] = np.asarray(mesh.labels, dtype=np.int32)
        out.export(file_obj=str(path), file_type="ply", encoding="binary" if binary else "ascii",
                   vertex_normal=False, include_attributes=True)

    logger.debug(f"Saved {path}: {mesh.num_vertices} vertices, {mesh.num_faces} faces")
    return path
