"""Shared data types."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class InvalidInput(ValueError):
    """Raised when an operation receives input that violates its contract."""


@dataclass(frozen=True)
class PointCloud:
    """N ordered 3D points (meters) with an optional class label in 1..k."""

    points: np.ndarray
    label: Optional[int] = None
    id: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInput(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise InvalidInput("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise InvalidInput("point cloud has non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.label is not None:
            lab = int(self.label)
            if lab < 1:
                raise InvalidInput(f"labels start at 1, got {self.label}")
            object.__setattr__(self, "label", lab)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, label=self.label, id=self.id)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.label == other.label
            and self.id == other.id
            and self.points.shape == other.points.shape
            and bool(np.array_equal(self.points, other.points))
        )

    __hash__ = None
