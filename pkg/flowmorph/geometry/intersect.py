"""
Triangle-triangle intersection counting for self-intersection checks.

Pairs that share a vertex index are adjacent and skipped. The predicate is a
separating-axis test over the coordinate axes, both face normals, the nine
edge cross products and the six in-plane edge normals, with an epsilon of
1e-10. A median-split bounding volume hierarchy proposes candidate pairs.
"""

import logging
from typing import List, Tuple

import numpy as np

from flowmorph.geometry.mesh import Mesh

logger = logging.getLogger(__name__)

EPS = 1e-10
_AXIS_MIN_NORM = 1e-14
_CHUNK = 4096


def _separating_axes(ta: np.ndarray, tb: np.ndarray) -> np.ndarray:
    """(P, 20, 3) candidate axes for P triangle pairs."""
    ea = np.roll(ta, -1, axis=1) - ta  # (P, 3, 3) edges
    eb = np.roll(tb, -1, axis=1) - tb
    na = np.cross(ea[:, 0], ea[:, 1])
    nb = np.cross(eb[:, 0], eb[:, 1])

    cross_edges = np.cross(ea[:, :, None, :], eb[:, None, :, :]).reshape(-1, 9, 3)
    inplane_a = np.cross(na[:, None, :], ea)
    inplane_b = np.cross(nb[:, None, :], eb)
    coord = np.broadcast_to(np.eye(3), (ta.shape[0], 3, 3))

    axes = np.concatenate([coord, na[:, None], nb[:, None], cross_edges, inplane_a, inplane_b], axis=1)
    norms = np.linalg.norm(axes, axis=2, keepdims=True)
    return np.divide(axes, norms, out=np.zeros_like(axes), where=norms > _AXIS_MIN_NORM)


def triangles_intersect(ta: np.ndarray, tb: np.ndarray, eps: float = EPS) -> np.ndarray:
    """
    Closed-triangle intersection predicate for paired batches.

    Args:
        ta, tb: (P, 3, 3) triangle corners

    Returns:
        np.ndarray: (P,) bool, True where no axis separates the pair by more than eps
    """
    ta = np.asarray(ta, dtype=np.float64).reshape(-1, 3, 3)
    tb = np.asarray(tb, dtype=np.float64).reshape(-1, 3, 3)
    if ta.shape[0] == 0:
        return np.zeros(0, dtype=bool)

    axes = _separating_axes(ta, tb)
    pa = np.einsum("pad,pkd->pak", axes, ta)  # (P, axes, corners)
    pb = np.einsum("pad,pkd->pak", axes, tb)
    separated = (pa.max(axis=2) < pb.min(axis=2) - eps) | (pb.max(axis=2) < pa.min(axis=2) - eps)
    # zero (degenerate) axes project everything to 0 and never separate
    return ~np.any(separated, axis=1)


def _share_vertex(faces: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    fa = faces[pairs[:, 0]]
    fb = faces[pairs[:, 1]]
    return np.any(fa[:, :, None] == fb[:, None, :], axis=(1, 2))


def _count_pairs(mesh: Mesh, pairs: np.ndarray) -> int:
    if pairs.shape[0] == 0:
        return 0
    pairs = pairs[~_share_vertex(mesh.faces, pairs)]
    tri = mesh.triangles()
    total = 0
    for start in range(0, pairs.shape[0], _CHUNK):
        chunk = pairs[start:start + _CHUNK]
        total += int(np.count_nonzero(triangles_intersect(tri[chunk[:, 0]], tri[chunk[:, 1]])))
    return total


class BoundingVolumeHierarchy:
    """Median-split AABB tree over a set of boxes."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray, leaf_size: int = 8):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.leaf_size = leaf_size
        # node arrays: box bounds, children (-1 for leaves), item range in self.order
        self.node_lo: List[np.ndarray] = []
        self.node_hi: List[np.ndarray] = []
        self.children: List[Tuple[int, int]] = []
        self.ranges: List[Tuple[int, int]] = []
        self.order = np.arange(self.lo.shape[0])
        if self.lo.shape[0]:
            self._build()

    def _build(self) -> None:
        centers = 0.5 * (self.lo + self.hi)
        stack = [(0, self.order.shape[0], self._new_node(0, self.order.shape[0]))]
        while stack:
            start, end, node = stack.pop()
            if end - start <= self.leaf_size:
                continue
            items = self.order[start:end]
            axis = int(np.argmax(self.node_hi[node] - self.node_lo[node]))
            ranked = items[np.argsort(centers[items, axis], kind="stable")]
            self.order[start:end] = ranked
            mid = start + (end - start) // 2
            left = self._new_node(start, mid)
            right = self._new_node(mid, end)
            self.children[node] = (left, right)
            stack.append((start, mid, left))
            stack.append((mid, end, right))

    def _new_node(self, start: int, end: int) -> int:
        items = self.order[start:end]
        self.node_lo.append(self.lo[items].min(axis=0))
        self.node_hi.append(self.hi[items].max(axis=0))
        self.children.append((-1, -1))
        self.ranges.append((start, end))
        return len(self.children) - 1

    def _overlap(self, a: int, b: int) -> bool:
        return bool(np.all(self.node_lo[a] <= self.node_hi[b]) and np.all(self.node_lo[b] <= self.node_hi[a]))

    def _leaf_pairs(self, a: int, b: int) -> np.ndarray:
        ia = self.order[self.ranges[a][0]:self.ranges[a][1]]
        ib = self.order[self.ranges[b][0]:self.ranges[b][1]]
        i, j = np.meshgrid(ia, ib, indexing="ij")
        i, j = i.ravel(), j.ravel()
        keep = i < j if a == b else i != j
        i, j = i[keep], j[keep]
        hit = np.all(self.lo[i] <= self.hi[j], axis=1) & np.all(self.lo[j] <= self.hi[i], axis=1)
        lo_idx, hi_idx = np.minimum(i[hit], j[hit]), np.maximum(i[hit], j[hit])
        return np.stack([lo_idx, hi_idx], axis=1)

    def self_overlaps(self) -> np.ndarray:
        """(P, 2) index pairs i < j whose boxes overlap."""
        if not self.children:
            return np.zeros((0, 2), dtype=np.int64)

        found = []
        stack = [(0, 0)]
        while stack:
            a, b = stack.pop()
            la, ra = self.children[a]
            if a == b:
                if la < 0:
                    found.append(self._leaf_pairs(a, a))
                else:
                    stack.extend([(la, la), (ra, ra), (la, ra)])
                continue
            if not self._overlap(a, b):
                continue
            lb, rb = self.children[b]
            if la < 0 and lb < 0:
                found.append(self._leaf_pairs(a, b))
            elif la < 0 or (lb >= 0 and self._size(b) > self._size(a)):
                stack.extend([(a, lb), (a, rb)])
            else:
                stack.extend([(la, b), (ra, b)])

        if not found:
            return np.zeros((0, 2), dtype=np.int64)
        return np.unique(np.concatenate(found, axis=0).astype(np.int64), axis=0)

    def _size(self, node: int) -> int:
        start, end = self.ranges[node]
        return end - start


def count_triangle_intersections(mesh: Mesh, eps: float = EPS) -> int:
    """Number of non-adjacent intersecting triangle pairs."""
    if mesh.num_faces < 2:
        return 0
    tri = mesh.triangles()
    bvh = BoundingVolumeHierarchy(tri.min(axis=1) - eps, tri.max(axis=1) + eps)
    return _count_pairs(mesh, bvh.self_overlaps())


def count_triangle_intersections_bruteforce(mesh: Mesh) -> int:
    """Same count over every face pair; O(F^2)."""
    if mesh.num_faces < 2:
        return 0
    i, j = np.triu_indices(mesh.num_faces, k=1)
    return _count_pairs(mesh, np.stack([i, j], axis=1))
