"""
Mesh and point-cloud containers plus the measurements taken on them.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Unordered 3D samples with optional integer labels."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        labels = None
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != points.shape[0]:
                raise ValueError(f"{labels.shape[0]} labels for {points.shape[0]} points")
            labels = _frozen(labels)
        object.__setattr__(self, "points", _frozen(points))
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.points.shape[0] == 0


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh; vertex order carries correspondence and must be preserved."""

    vertices: np.ndarray
    faces: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= vertices.shape[0]):
            raise ValueError(f"Face index out of range for {vertices.shape[0]} vertices")
        labels = None
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != vertices.shape[0]:
                raise ValueError(f"{labels.shape[0]} labels for {vertices.shape[0]} vertices")
            labels = _frozen(labels)
        object.__setattr__(self, "vertices", _frozen(vertices))
        object.__setattr__(self, "faces", _frozen(faces))
        object.__setattr__(self, "labels", labels)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices) -> "Mesh":
        """Same connectivity and labels, new positions."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise ValueError(f"Vertex array shape {vertices.shape} does not match {self.vertices.shape}")
        return Mesh(vertices, self.faces, self.labels)

    def with_labels(self, labels) -> "Mesh":
        return Mesh(self.vertices, self.faces, labels)

    def flipped(self) -> "Mesh":
        """Reverse the winding of every face."""
        return Mesh(self.vertices, self.faces[:, ::-1], self.labels)

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner coordinates."""
        return self.vertices[self.faces]

    def face_cross(self) -> np.ndarray:
        tri = self.triangles()
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        """Unit normals; zero for degenerate faces."""
        cross = self.face_cross()
        norm = np.linalg.norm(cross, axis=1, keepdims=True)
        return np.divide(cross, norm, out=np.zeros_like(cross), where=norm > 0.0)

    def to_point_cloud(self) -> PointCloud:
        return PointCloud(self.vertices, self.labels)


def normalize_to_unit(mesh: Mesh) -> Tuple[Mesh, float, np.ndarray]:
    """
    Center the bounding box at the origin and scale its longest side to 1.

    Returns:
        (normalized mesh, scale, offset) with original = normalized * scale + offset
    """
    if mesh.num_vertices == 0:
        raise ValueError("Cannot normalize an empty mesh")

    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    offset = 0.5 * (lo + hi)
    scale = float(np.max(hi - lo))
    if scale <= 0.0:
        raise ValueError("Mesh has zero extent: all vertices coincide")

    return mesh.with_vertices((mesh.vertices - offset) / scale), scale, offset


def signed_volume(mesh: Mesh) -> float:
    """Divergence-theorem volume; positive for closed outward-oriented meshes."""
    if mesh.num_faces == 0:
        return 0.0
    tri = mesh.triangles()
    return float(np.sum(np.linalg.det(tri)) / 6.0)


def edge_lengths(mesh: Mesh) -> Tuple[np.ndarray, np.ndarray]:
    """
    Undirected edges of the triangle graph.

    Returns:
        (edges, lengths): (E, 2) sorted index pairs in lexicographic order, (E,) lengths
    """
    if mesh.num_faces == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    f = mesh.faces
    pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    pairs = np.sort(pairs, axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    edges = np.unique(pairs, axis=0)
    lengths = np.linalg.norm(mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]], axis=1)
    return edges, lengths


def sample_surface_with_faces(mesh: Mesh, n: int, seed: Optional[int] = 0) -> Tuple[PointCloud, np.ndarray]:
    """Area-weighted surface samples together with the face each came from."""
    if n < 1:
        raise ValueError(f"Sample count must be >= 1, got {n}")
    areas = mesh.face_areas() if mesh.num_faces else np.zeros(0)
    total = float(areas.sum())
    if total <= 0.0:
        raise ValueError("Mesh has no non-degenerate triangle to sample")

    rng = np.random.default_rng(seed)
    face_ids = rng.choice(mesh.num_faces, size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)

    tri = mesh.vertices[mesh.faces[face_ids]]
    points = np.einsum("nk,nkd->nd", bary, tri)

    labels = None
    if mesh.labels is not None:
        corner = np.argmin(np.linalg.norm(tri - points[:, None, :], axis=2), axis=1)
        labels = mesh.labels[mesh.faces[face_ids, corner]]

    return PointCloud(points, labels), face_ids


def sample_surface(mesh: Mesh, n: int, seed: Optional[int] = 0) -> PointCloud:
    """
    Draw ``n`` points uniformly over the surface area.

    Args:
        mesh: Source mesh
        n: Number of samples
        seed: RNG seed; equal seeds give bitwise-equal samples

    Returns:
        PointCloud: Samples with labels from the closest face corner
    """
    cloud, _ = sample_surface_with_faces(mesh, n, seed)
    return cloud
