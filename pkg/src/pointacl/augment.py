"""Stochastic augmentation family used to build the two contrastive views.

Operations are applied in a fixed order: rotation, translation, scale, crop,
cutout, jitter, dropout, down-sampling (or re-sampling up to the target
count) and normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from pointacl.types import PointCloud


@dataclass(frozen=True)
class AugmentBounds:
    """Sampling ranges; every key can be overridden from the training config."""

    max_angle_deg: float = 15.0
    max_translation: float = 0.10
    scale_min: float = 0.8
    scale_max: float = 1.25
    crop_volume_min: float = 0.6
    crop_volume_max: float = 1.0
    aspect_min: float = 0.75
    aspect_max: float = 1.33
    cutout_min: float = 0.1
    cutout_max: float = 0.4
    cutout_prob: float = 0.5
    jitter_max: float = 0.05
    dropout_max: float = 0.7


@dataclass(frozen=True)
class Cuboid:
    """Axis-aligned box in coordinates relative to the cloud's bounding box (0..1)."""

    center: tuple[float, float, float]
    extents: tuple[float, float, float]

    def contains(self, pts: np.ndarray) -> np.ndarray:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        rel = (pts - lo) / span
        c, e = np.asarray(self.center), np.asarray(self.extents) / 2
        return np.all((rel >= c - e) & (rel <= c + e), axis=1)


@dataclass(frozen=True)
class AugmentationSpec:
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0
    crop: Optional[Cuboid] = None
    cutout: Optional[Cuboid] = None
    jitter: float = 0.0
    dropout_ratio: float = 0.0
    target_count: int = 0
    normalize: bool = False
    seed: int = 0
    # crop/cutout fallbacks taken while applying this spec; diagnostics only
    warnings: list = field(default_factory=list, compare=False, repr=False)


def identity_spec(target_count: int) -> AugmentationSpec:
    return AugmentationSpec(target_count=target_count)


def _sample_crop(rng: np.random.Generator, b: AugmentBounds) -> Cuboid:
    volume = rng.uniform(b.crop_volume_min, b.crop_volume_max)
    base = volume ** (1 / 3)
    lo, hi = math.log(b.aspect_min), math.log(b.aspect_max)
    for _ in range(32):
        ax, ay = np.exp(rng.uniform(lo, hi, size=2))
        ext = np.array([base * ax, base * ay, base / (ax * ay)])
        ratios = ext / base
        if np.all(ext <= 1.0) and np.all((ratios >= b.aspect_min) & (ratios <= b.aspect_max)):
            break
    else:
        ext = np.full(3, base)
    center = rng.uniform(ext / 2, 1 - ext / 2)
    return Cuboid(tuple(center.tolist()), tuple(ext.tolist()))


def sample_spec(
    rng_seed: int,
    target_count: int = 256,
    normalize: bool = True,
    bounds: AugmentBounds = AugmentBounds(),
) -> AugmentationSpec:
    rng = np.random.default_rng(rng_seed)
    b = bounds
    rotation = rng.uniform(-b.max_angle_deg, b.max_angle_deg, size=3)
    translation = rng.uniform(-b.max_translation, b.max_translation, size=3)
    # log-uniform keeps the scale distribution symmetric around 1
    scale = float(np.exp(rng.uniform(math.log(b.scale_min), math.log(b.scale_max))))
    crop = _sample_crop(rng, b)
    cutout = None
    if rng.uniform() < b.cutout_prob:
        ext = rng.uniform(b.cutout_min, b.cutout_max, size=3)
        cutout = Cuboid(tuple(rng.uniform(0, 1, size=3).tolist()), tuple(ext.tolist()))
    dropout = float(rng.uniform(0, b.dropout_max))
    return AugmentationSpec(
        rotation=tuple(rotation.tolist()),
        translation=tuple(translation.tolist()),
        scale=scale,
        crop=crop,
        cutout=cutout,
        jitter=b.jitter_max,
        dropout_ratio=dropout,
        target_count=target_count,
        normalize=normalize,
        seed=int(rng.integers(2**63 - 1)),
    )


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rz @ Ry @ Rx for per-axis angles in degrees."""
    ax, ay, az = np.radians(angles_deg)
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def normalize_points(pts: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale so the farthest point sits on the unit sphere."""
    centered = pts - pts.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    return centered / radius if radius > 0 else centered


def resample_indices(m: int, target: int, rng: np.random.Generator) -> np.ndarray:
    """Pick ``target`` of ``m`` source indices; re-sample with replacement when short."""
    if m == target:
        return np.arange(m)
    if m > target:
        return np.sort(rng.choice(m, size=target, replace=False))
    extra = rng.integers(0, m, size=target - m)
    return np.concatenate([np.arange(m), extra])


def apply_indexed(cloud: PointCloud, spec: AugmentationSpec) -> tuple[PointCloud, np.ndarray]:
    """Like :func:`apply` but also returns the source index of every output point."""
    rng = np.random.default_rng(spec.seed)
    pts = cloud.points
    src = np.arange(len(cloud))
    target = spec.target_count or len(cloud)

    if any(spec.rotation):
        pts = pts @ rotation_matrix(spec.rotation).T
    if any(spec.translation):
        extent = pts.max(axis=0) - pts.min(axis=0)
        pts = pts + np.asarray(spec.translation) * extent
    if spec.scale != 1.0:
        pts = pts * spec.scale
    if spec.crop is not None:
        keep = spec.crop.contains(pts)
        if keep.any():
            pts, src = pts[keep], src[keep]
        else:
            spec.warnings.append("crop")
    if spec.cutout is not None:
        keep = ~spec.cutout.contains(pts)
        if keep.any():
            pts, src = pts[keep], src[keep]
        else:
            spec.warnings.append("cutout")
    if spec.jitter > 0:
        mag = rng.uniform(0, spec.jitter, size=pts.shape)
        sign = rng.choice([-1.0, 1.0], size=pts.shape)
        pts = pts + mag * sign
    if spec.dropout_ratio > 0:
        n_drop = min(int(math.floor(spec.dropout_ratio * len(pts))), len(pts) - 1)
        if n_drop > 0:
            keep = np.sort(rng.choice(len(pts), size=len(pts) - n_drop, replace=False))
            pts, src = pts[keep], src[keep]
    pick = resample_indices(len(pts), target, rng)
    pts, src = pts[pick], src[pick]
    if spec.normalize:
        pts = normalize_points(pts)
    return PointCloud(pts, label=cloud.label, id=cloud.id), src


def apply(cloud: PointCloud, spec: AugmentationSpec) -> PointCloud:
    return apply_indexed(cloud, spec)[0]
