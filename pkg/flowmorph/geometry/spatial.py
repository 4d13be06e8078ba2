"""
Exact nearest-neighbour queries and Chamfer distances.
"""

import logging
from typing import Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from flowmorph.geometry.mesh import PointCloud

logger = logging.getLogger(__name__)

CHAMFER_VARIANTS = ("sq_l2_train", "l1_eval")

# relative gap below which the two best kd-tree candidates are re-resolved exactly
_TIE_RTOL = 1e-9


def _as_points(cloud: Union[PointCloud, np.ndarray]) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


class SpatialIndex:
    """
    Nearest-neighbour index over a fixed point set.

    Distances are recomputed exactly after the kd-tree lookup, and near-ties
    are resolved by exhaustive comparison so that the result always equals
    brute force with ties going to the lowest index.
    """

    def __init__(self, cloud: Union[PointCloud, np.ndarray]):
        self.points = np.array(_as_points(cloud), dtype=np.float64)
        self.points.setflags(write=False)
        if self.points.shape[0] == 0:
            raise ValueError("Cannot index an empty point set")
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, queries) -> Tuple[np.ndarray, np.ndarray]:
        """
        Args:
            queries: (M, 3) query points

        Returns:
            (indices, squared distances), both (M,)
        """
        q = _as_points(queries)
        if q.shape[0] == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)

        k = min(2, len(self))
        _, idx = self._tree.query(q, k=k)
        idx = np.asarray(idx, dtype=np.int64).reshape(q.shape[0], k)

        sq = np.sum((self.points[idx] - q[:, None, :]) ** 2, axis=2)
        best = idx[:, 0].copy()
        best_sq = sq[:, 0].copy()

        if k == 2:
            # rows where the runner-up is (nearly) as close, or misordered by the tree
            close = sq[:, 1] <= sq[:, 0] * (1.0 + _TIE_RTOL) + 1e-300
            for row in np.flatnonzero(close):
                best[row], best_sq[row] = self._exact(q[row], np.sqrt(sq[row, 0]))

        return best, best_sq

    def _exact(self, point: np.ndarray, radius: float) -> Tuple[int, float]:
        candidates = self._tree.query_ball_point(point, r=radius * (1.0 + 1e-6) + 1e-12)
        candidates = np.array(sorted(candidates), dtype=np.int64)
        if candidates.size == 0:
            candidates = np.arange(len(self))
        d = np.sum((self.points[candidates] - point) ** 2, axis=1)
        pick = int(np.argmin(d))  # argmin returns the first (lowest index) minimum
        return int(candidates[pick]), float(d[pick])


def brute_force_nearest(points, queries) -> Tuple[np.ndarray, np.ndarray]:
    """O(MN) nearest neighbours with lowest-index ties."""
    p = _as_points(points)
    q = _as_points(queries)
    d = np.sum((q[:, None, :] - p[None, :, :]) ** 2, axis=2)
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(q.shape[0]), idx]


def chamfer(a: Union[PointCloud, np.ndarray], b: Union[PointCloud, np.ndarray],
            variant: str = "sq_l2_train") -> float:
    """
    Symmetric Chamfer distance.

    Args:
        a, b: Non-empty point sets
        variant: 'sq_l2_train' (sum of mean squared distances) or
            'l1_eval' (half the sum of mean distances)
    """
    if variant not in CHAMFER_VARIANTS:
        raise ValueError(f"Unknown Chamfer variant: {variant}")
    pa, pb = _as_points(a), _as_points(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ValueError("Chamfer distance needs non-empty point sets")

    _, d_ab = SpatialIndex(pb).query(pa)
    _, d_ba = SpatialIndex(pa).query(pb)

    if variant == "sq_l2_train":
        return float(np.mean(d_ab) + np.mean(d_ba))
    return float(0.5 * (np.mean(np.sqrt(d_ab)) + np.mean(np.sqrt(d_ba))))
