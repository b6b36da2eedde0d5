"""Spatial indexing, PCA normals and the Difference-of-Normals operator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from pointacl.types import InvalidInput, PointCloud

DEFAULT_R1 = 0.05
DEFAULT_R2 = 0.20
FALLBACK_NEIGHBORS = 8


class NormalUndefined(InvalidInput):
    """A normal cannot be estimated because the cloud has fewer than 3 points."""


class SpatialIndex:
    """Static kd-tree over the points of a cloud.

    Radius queries are inclusive (``dist <= r``) and return sorted indices so
    results compare directly against an exhaustive scan.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return self.points.shape[0]

    def radius_query(self, p, r: float) -> np.ndarray:
        idx = self._tree.query_ball_point(np.asarray(p, dtype=np.float64), r)
        return np.array(sorted(idx), dtype=np.int64)

    def radius_query_all(self, r: float) -> list[np.ndarray]:
        """Neighbors within ``r`` of every indexed point."""
        lists = self._tree.query_ball_point(self.points, r)
        return [np.array(sorted(ix), dtype=np.int64) for ix in lists]

    def knn_query(self, p, k: int) -> np.ndarray:
        k = min(k, len(self))
        _, idx = self._tree.query(np.asarray(p, dtype=np.float64), k=k)
        return np.atleast_1d(idx).astype(np.int64)


def build_index(cloud: PointCloud) -> SpatialIndex:
    if len(cloud) < 1:
        raise InvalidInput("cannot index an empty cloud")
    return SpatialIndex(cloud.points)


def radius_query(index: SpatialIndex, p, r: float) -> np.ndarray:
    return index.radius_query(p, r)


def _support(index: SpatialIndex, point_idx: int, r: float, neighbors=None) -> np.ndarray:
    nbrs = index.radius_query(index.points[point_idx], r) if neighbors is None else neighbors
    if len(nbrs) < 3:
        nbrs = index.knn_query(index.points[point_idx], FALLBACK_NEIGHBORS)
    return nbrs


def _smallest_eigvec(cov: np.ndarray) -> np.ndarray:
    _, vecs = np.linalg.eigh(cov)
    n = vecs[..., :, 0]
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _covariance(pts: np.ndarray) -> np.ndarray:
    d = pts - pts.mean(axis=0)
    return d.T @ d


def estimate_normal(cloud: PointCloud, index: SpatialIndex, point_idx: int, r: float) -> np.ndarray:
    """Unit normal at one point from the PCA of its radius-``r`` neighborhood.

    Neighborhoods with fewer than 3 points fall back to the 8 nearest
    neighbors. The sign of the result is arbitrary.
    """
    if r <= 0:
        raise InvalidInput(f"support radius must be positive, got {r}")
    if len(cloud) < 3:
        raise NormalUndefined(f"normal needs at least 3 points, cloud has {len(cloud)}")
    nbrs = _support(index, point_idx, r)
    return _smallest_eigvec(_covariance(cloud.points[nbrs]))


def estimate_normals(cloud: PointCloud, r: float, index: SpatialIndex | None = None) -> np.ndarray:
    """Normals for every point, shape (N, 3)."""
    if r <= 0:
        raise InvalidInput(f"support radius must be positive, got {r}")
    if len(cloud) < 3:
        raise NormalUndefined(f"normal needs at least 3 points, cloud has {len(cloud)}")
    index = index or build_index(cloud)
    pts = cloud.points
    covs = np.empty((len(cloud), 3, 3))
    for i, nbrs in enumerate(index.radius_query_all(r)):
        covs[i] = _covariance(pts[_support(index, i, r, nbrs)])
    return _smallest_eigvec(covs)


@dataclass(frozen=True)
class DoNField:
    radii: tuple[float, float]
    diffs: np.ndarray
    magnitudes: np.ndarray

    def __len__(self):
        return self.magnitudes.shape[0]


def don_field(cloud: PointCloud, r1: float = DEFAULT_R1, r2: float = DEFAULT_R2) -> DoNField:
    """Per-point half difference between the small- and large-radius normals.

    The large-radius normal is flipped onto the hemisphere of the small-radius
    one first, so flat regions give a zero field regardless of PCA sign.
    """
    if not 0 < r1 < r2:
        raise InvalidInput(f"radii must satisfy 0 < r1 < r2, got r1={r1}, r2={r2}")
    index = build_index(cloud)
    n1 = estimate_normals(cloud, r1, index)
    n2 = estimate_normals(cloud, r2, index)
    flip = np.einsum("ij,ij->i", n1, n2) < 0
    n2[flip] *= -1.0
    diffs = (n1 - n2) / 2.0
    mags = np.linalg.norm(diffs, axis=1)
    diffs.setflags(write=False)
    mags.setflags(write=False)
    return DoNField((float(r1), float(r2)), diffs, mags)


def keep_count(n: int, keep_fraction: float) -> int:
    # guard against 0.7 * 10 == 7.000000000000001
    return max(1, math.ceil(keep_fraction * n - 1e-9))


def high_difference_indices(field: DoNField, keep_fraction: float) -> np.ndarray:
    """Sorted indices of the ceil(c*N) largest magnitudes, ties to lower index."""
    if not 0 < keep_fraction < 1:
        raise InvalidInput(f"keep fraction must lie in (0, 1), got {keep_fraction}")
    n = len(field)
    order = np.lexsort((np.arange(n), -field.magnitudes))
    return np.sort(order[: keep_count(n, keep_fraction)])


def select_high_difference(cloud: PointCloud, field: DoNField, keep_fraction: float) -> PointCloud:
    if len(field) != len(cloud):
        raise InvalidInput(f"field has {len(field)} entries but cloud has {len(cloud)} points")
    idx = high_difference_indices(field, keep_fraction)
    return PointCloud(cloud.points[idx], label=cloud.label, id=cloud.id)
