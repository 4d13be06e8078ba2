"""
Toy shapes for smoke training, verification and the acceptance scenarios.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import trimesh

from flowmorph.geometry.mesh import Mesh

logger = logging.getLogger(__name__)

SEAT_LABEL = 1
LEG_LABEL = 0


def from_trimesh(tm: "trimesh.Trimesh", labels=None) -> Mesh:
    return Mesh(np.asarray(tm.vertices, dtype=np.float64), np.asarray(tm.faces, dtype=np.int64), labels)


def unit_cube() -> Mesh:
    """Axis-aligned cube [0,1]^3 with 8 vertices and outward faces."""
    tm = trimesh.creation.box(extents=(1.0, 1.0, 1.0))
    tm.apply_translation((0.5, 0.5, 0.5))
    return from_trimesh(tm)


def icosphere(level: int = 2, radius: float = 1.0) -> Mesh:
    return from_trimesh(trimesh.creation.icosphere(subdivisions=level, radius=radius))


def box(extents: Sequence[float], subdivisions: int = 0) -> Mesh:
    """Centered box, optionally subdivided so it can bend smoothly."""
    tm = trimesh.creation.box(extents=tuple(float(e) for e in extents))
    for _ in range(subdivisions):
        tm = tm.subdivide()
    return from_trimesh(tm)


def stretched_box(stretch: float = 1.8, subdivisions: int = 1) -> Mesh:
    return box((0.5 * stretch, 0.5, 0.5), subdivisions)


def overfit_pair(subdivisions: int = 2) -> Tuple[Mesh, Mesh]:
    """Sphere and stretched box sized to fit the unit box."""
    return icosphere(subdivisions, radius=0.4), stretched_box(1.6, subdivisions=2)


def labeled_box(height: float, width: float = 0.6, depth: float = 0.6,
                seat_fraction: float = 0.35, subdivisions: int = 2) -> Mesh:
    """
    Box standing on the xy-plane centre with a labeled top region.

    Vertices above ``1 - seat_fraction`` of the height carry SEAT_LABEL, the
    rest LEG_LABEL.
    """
    base = box((width, depth, height), subdivisions)
    z = base.vertices[:, 2]
    relative = (z - z.min()) / max(z.max() - z.min(), 1e-12)
    labels = np.where(relative >= 1.0 - seat_fraction, SEAT_LABEL, LEG_LABEL)
    return base.with_labels(labels)


def labeled_box_family(count: int, seed: Optional[int] = 0, subdivisions: int = 2) -> List[Mesh]:
    """Labeled boxes whose aspect ratio and seat proportion vary."""
    rng = np.random.default_rng(seed)
    shapes = []
    for _ in range(count):
        height = rng.uniform(0.5, 1.0)
        width = rng.uniform(0.4, 0.8)
        seat = rng.uniform(0.25, 0.45)
        shapes.append(labeled_box(height, width, width, seat, subdivisions))
    return shapes


def bending_limb(angle: float = 0.0, length: float = 0.8, radius: float = 0.12,
                 sections: int = 16, subdivisions: int = 2) -> Mesh:
    """
    Closed cylinder along z, bent by ``angle`` radians about a hinge at mid-length.

    Vertex order is independent of ``angle`` so two limbs are corresponded.
    """
    tm = trimesh.creation.cylinder(radius=radius, height=length, sections=sections)
    for _ in range(subdivisions):
        tm = tm.subdivide()
    vertices = np.asarray(tm.vertices, dtype=np.float64).copy()

    upper = vertices[:, 2] > 0.0
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    vertices[upper] = vertices[upper] @ rot.T
    return Mesh(vertices, np.asarray(tm.faces, dtype=np.int64))


def flat_grid(n: int = 4, size: float = 1.0) -> Mesh:
    """Triangulated square grid in the z=0 plane."""
    xs = np.linspace(0.0, size, n + 1)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    vertices = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return Mesh(vertices, faces)
