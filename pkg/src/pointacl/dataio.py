"""Synthetic shape datasets, plain-text XYZ files and stratified splits.

Every synthetic shape is built analytically inside the unit sphere centered at
the origin, so noise-free samples lie exactly on their surface. Noisy samples
are shrunk back inside the unit sphere when noise pushes them out.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from pointacl.types import InvalidInput, PointCloud

SHAPES = ("sphere", "cube", "cylinder", "cone", "torus", "crease", "pyramid", "capsule")
SHAPE_ALIASES = {"two-plane-crease": "crease"}


class ParseError(InvalidInput):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


@dataclass
class Dataset:
    samples: list[PointCloud]
    class_names: list[str]
    split: str = "all"

    def __len__(self):
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def points(self) -> np.ndarray:
        return np.stack([s.points for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


# -- surface samplers ------------------------------------------------------
# Each sampler returns (points, params); params feed the matching distance fn.


def _disk(rng, n, radius, z):
    r = radius * np.sqrt(rng.uniform(size=n))
    th = rng.uniform(0, 2 * np.pi, size=n)
    return np.column_stack([r * np.cos(th), r * np.sin(th), np.full(n, z)])


def _split_counts(rng, n, areas):
    areas = np.asarray(areas, dtype=float)
    return rng.multinomial(n, areas / areas.sum())


def _sample_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True), {}


def _sample_cube(rng, n):
    e = rng.uniform(0.85, 1.15, size=3)
    e = e / np.linalg.norm(e)
    areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]] * 2
    counts = _split_counts(rng, n, areas)
    chunks = []
    for face, m in enumerate(counts):
        axis, sign = face % 3, 1.0 if face < 3 else -1.0
        p = rng.uniform(-e, e, size=(m, 3))
        p[:, axis] = sign * e[axis]
        chunks.append(p)
    return np.concatenate(chunks), {"half": e}


def _sample_cylinder(rng, n):
    ratio = rng.uniform(0.7, 1.4)  # half-height / radius
    rho = 1.0 / math.sqrt(1 + ratio**2)
    eta = ratio * rho
    counts = _split_counts(rng, n, [2 * np.pi * rho * 2 * eta, np.pi * rho**2, np.pi * rho**2])
    th = rng.uniform(0, 2 * np.pi, size=counts[0])
    side = np.column_stack([rho * np.cos(th), rho * np.sin(th), rng.uniform(-eta, eta, size=counts[0])])
    pts = np.concatenate([side, _disk(rng, counts[1], rho, eta), _disk(rng, counts[2], rho, -eta)])
    return pts, {"rho": rho, "eta": eta}


def _sample_cone(rng, n):
    ratio = rng.uniform(0.8, 1.6)  # height / base radius
    rho, height = 1.0, ratio
    scale = 1.0 / math.sqrt(rho**2 + (height / 2) ** 2)
    rho, height = rho * scale, height * scale
    zb, zt = -height / 2, height / 2
    slant = math.hypot(rho, height)
    counts = _split_counts(rng, n, [np.pi * rho * slant, np.pi * rho**2])
    # lateral area element grows linearly with distance from the apex
    t = np.sqrt(rng.uniform(size=counts[0]))
    th = rng.uniform(0, 2 * np.pi, size=counts[0])
    lateral = np.column_stack([t * rho * np.cos(th), t * rho * np.sin(th), zt - t * height])
    pts = np.concatenate([lateral, _disk(rng, counts[1], rho, zb)])
    return pts, {"rho": rho, "zb": zb, "zt": zt}


def _sample_torus(rng, n):
    ratio = rng.uniform(0.25, 0.45)  # minor / major
    big = 1.0 / (1 + ratio)
    small = ratio * big
    # rejection on the tube angle makes the density uniform in area
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out))
        u = rng.uniform(0, 2 * np.pi, size=m)
        v = rng.uniform(0, 2 * np.pi, size=m)
        w = rng.uniform(0, 1, size=m)
        keep = w <= (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out = np.concatenate([out, np.column_stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)])])
    return out[:n], {"big": big, "small": small}


def _sample_crease(rng, n):
    """Two square half-planes meeting at a right angle along a line parallel to y."""
    length, width = 1.0, rng.uniform(1.0, 1.4)
    scale = 1.0 / math.sqrt(2 * (length / 2) ** 2 + (width / 2) ** 2)
    length, width = length * scale, width * scale
    m = rng.binomial(n, 0.5)
    a = np.column_stack([rng.uniform(0, length, m), rng.uniform(-width / 2, width / 2, m), np.zeros(m)])
    b = np.column_stack([np.zeros(n - m), rng.uniform(-width / 2, width / 2, n - m), rng.uniform(0, length, n - m)])
    offset = np.array([length / 2, 0.0, length / 2])
    pts = np.concatenate([a, b]) - offset
    return pts, {"length": length, "width": width, "offset": offset}


def _pyramid_faces(a, zb, zt):
    apex = np.array([0.0, 0.0, zt])
    c = [np.array(v, float) for v in ((a, a, zb), (-a, a, zb), (-a, -a, zb), (a, -a, zb))]
    return apex, c


def _sample_pyramid(rng, n):
    ratio = rng.uniform(0.9, 1.6)  # height / base half-side
    a, height = 1.0, ratio
    scale = 1.0 / math.sqrt(2 * a**2 + (height / 2) ** 2)
    a, height = a * scale, height * scale
    zb, zt = -height / 2, height / 2
    apex, corners = _pyramid_faces(a, zb, zt)
    tri_area = 0.5 * np.linalg.norm(np.cross(corners[0] - apex, corners[1] - apex))
    counts = _split_counts(rng, n, [tri_area] * 4 + [4 * a * a])
    chunks = []
    for i in range(4):
        u, v = rng.uniform(size=(2, counts[i]))
        flip = u + v > 1
        u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
        p, q = corners[i] - apex, corners[(i + 1) % 4] - apex
        chunks.append(apex + u[:, None] * p + v[:, None] * q)
    base = rng.uniform(-a, a, size=(counts[4], 3))
    base[:, 2] = zb
    chunks.append(base)
    return np.concatenate(chunks), {"a": a, "zb": zb, "zt": zt}


def _sample_capsule(rng, n):
    ratio = rng.uniform(0.5, 1.5)  # half-length of the straight part / radius
    rho = 1.0 / (1 + ratio)
    eta = ratio * rho
    counts = _split_counts(rng, n, [2 * np.pi * rho * 2 * eta, 4 * np.pi * rho**2])
    th = rng.uniform(0, 2 * np.pi, size=counts[0])
    side = np.column_stack([rho * np.cos(th), rho * np.sin(th), rng.uniform(-eta, eta, size=counts[0])])
    caps, _ = _sample_sphere(rng, counts[1])
    caps = caps * rho
    caps[:, 2] += np.where(caps[:, 2] >= 0, eta, -eta)
    return np.concatenate([side, caps]), {"rho": rho, "eta": eta}


# -- analytic distance to each surface --------------------------------------


def _segment_dist_2d(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0, 1)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def _dist_sphere(p, _):
    return np.abs(np.linalg.norm(p, axis=1) - 1.0)


def _dist_cube(p, prm):
    q = np.abs(p) - prm["half"]
    outside = np.linalg.norm(np.maximum(q, 0), axis=1)
    return np.where(q.max(axis=1) > 0, outside, -q.max(axis=1))


def _dist_cylinder(p, prm):
    q = np.column_stack([np.hypot(p[:, 0], p[:, 1]) - prm["rho"], np.abs(p[:, 2]) - prm["eta"]])
    return np.where(q.max(axis=1) > 0, np.linalg.norm(np.maximum(q, 0), axis=1), -q.max(axis=1))


def _dist_cone(p, prm):
    s = np.column_stack([np.hypot(p[:, 0], p[:, 1]), p[:, 2]])
    rho, zb, zt = prm["rho"], prm["zb"], prm["zt"]
    base = _segment_dist_2d(s, np.array([0.0, zb]), np.array([rho, zb]))
    slant = _segment_dist_2d(s, np.array([rho, zb]), np.array([0.0, zt]))
    return np.minimum(base, slant)


def _dist_torus(p, prm):
    ring = np.hypot(p[:, 0], p[:, 1]) - prm["big"]
    return np.abs(np.hypot(ring, p[:, 2]) - prm["small"])


def _dist_rect(p, origin, u, v, lu, lv):
    d = p - origin
    a = np.clip(d @ u, 0, lu)
    b = np.clip(d @ v, 0, lv)
    return np.linalg.norm(d - a[:, None] * u - b[:, None] * v, axis=1)


def _dist_crease(p, prm):
    L, W, off = prm["length"], prm["width"], prm["offset"]
    o = np.array([0.0, -W / 2, 0.0]) - off
    ex, ey, ez = np.eye(3)
    return np.minimum(_dist_rect(p, o, ex, ey, L, W), _dist_rect(p, o, ez, ey, L, W))


def _dist_triangle(p, a, b, c):
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    h = (p - a) @ n
    proj = p - h[:, None] * n
    inside = np.ones(len(p), dtype=bool)
    for u, v in ((a, b), (b, c), (c, a)):
        inside &= (np.cross(v - u, proj - u) @ n) >= -1e-12
    edge = np.min(
        [_segment_dist_3d(p, a, b), _segment_dist_3d(p, b, c), _segment_dist_3d(p, c, a)], axis=0
    )
    return np.where(inside, np.abs(h), edge)


def _segment_dist_3d(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0, 1)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def _dist_pyramid(p, prm):
    a, zb, zt = prm["a"], prm["zb"], prm["zt"]
    apex, c = _pyramid_faces(a, zb, zt)
    faces = [(apex, c[i], c[(i + 1) % 4]) for i in range(4)] + [(c[0], c[1], c[2]), (c[0], c[2], c[3])]
    return np.min([_dist_triangle(p, *f) for f in faces], axis=0)


def _dist_capsule(p, prm):
    z = np.clip(p[:, 2], -prm["eta"], prm["eta"])
    axis_pt = np.column_stack([np.zeros(len(p)), np.zeros(len(p)), z])
    return np.abs(np.linalg.norm(p - axis_pt, axis=1) - prm["rho"])


_SAMPLERS: dict[str, Callable] = {
    "sphere": _sample_sphere, "cube": _sample_cube, "cylinder": _sample_cylinder,
    "cone": _sample_cone, "torus": _sample_torus, "crease": _sample_crease,
    "pyramid": _sample_pyramid, "capsule": _sample_capsule,
}  # fmt: skip
_DISTANCES: dict[str, Callable] = {
    "sphere": _dist_sphere, "cube": _dist_cube, "cylinder": _dist_cylinder,
    "cone": _dist_cone, "torus": _dist_torus, "crease": _dist_crease,
    "pyramid": _dist_pyramid, "capsule": _dist_capsule,
}  # fmt: skip


def canonical_shape(name: str) -> str:
    key = SHAPE_ALIASES.get(name.strip().lower(), name.strip().lower())
    if key not in _SAMPLERS:
        raise InvalidInput(f"unknown shape {name!r}; choose from {', '.join(SHAPES)}")
    return key


def sample_shape(name: str, n_points: int, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """Noise-free surface sample in a random point order, plus the shape parameters."""
    pts, prm = _SAMPLERS[canonical_shape(name)](rng, n_points)
    return pts[rng.permutation(len(pts))], prm


def surface_distance(name: str, points: np.ndarray, params: dict) -> np.ndarray:
    return _DISTANCES[canonical_shape(name)](np.asarray(points, float), params)


def crease_line_distance(points: np.ndarray, params: dict) -> np.ndarray:
    """Distance from each point to the fold line of a crease sample."""
    off = params["offset"]
    d = np.asarray(points) + off
    return np.hypot(d[:, 0], d[:, 2])


def fit_unit_sphere(pts: np.ndarray) -> np.ndarray:
    radius = np.linalg.norm(pts, axis=1).max()
    return pts / radius if radius > 1.0 else pts


def _make_sample(name, label, idx, n_points, noise_sigma, seed) -> PointCloud:
    rng = np.random.default_rng([seed, label, idx])
    pts, _ = sample_shape(name, n_points, rng)
    if noise_sigma > 0:
        pts = fit_unit_sphere(pts + rng.normal(0.0, noise_sigma, size=pts.shape))
    return PointCloud(pts, label=label, id=f"{name}_{idx:04d}")


def generate_synthetic(
    classes, per_class: int, n_points: int, noise_sigma: float = 0.01, seed: int = 0
) -> Dataset:
    names = [canonical_shape(c) for c in classes]
    if per_class < 1:
        raise InvalidInput("per_class must be at least 1")
    if n_points < 1:
        raise InvalidInput("n_points must be at least 1")
    samples = [
        _make_sample(name, label, i, n_points, noise_sigma, seed)
        for label, name in enumerate(names, start=1)
        for i in range(per_class)
    ]
    return Dataset(samples, names)


# -- XYZ files ---------------------------------------------------------------


def save_xyz(cloud: PointCloud, path) -> Path:
    path = Path(path)
    lines = [" ".join(f"{v:.17g}" for v in row) for row in cloud.points]
    if cloud.label is not None:
        lines.append(f"#label {cloud.label}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_xyz(path, id: str | None = None) -> PointCloud:
    path = Path(path)
    rows, label = [], None
    for line_no, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#label"):
            try:
                label = int(line.split()[1])
            except (IndexError, ValueError):
                raise ParseError(path, line_no, f"bad label line {raw!r}") from None
            continue
        if line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(path, line_no, f"expected 3 coordinates, found {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise ParseError(path, line_no, f"non-numeric coordinate in {raw!r}") from None
    if not rows:
        raise InvalidInput(f"{path}: no points in file")
    return PointCloud(np.array(rows), label=label, id=id if id is not None else path.stem)


MANIFEST = "manifest.csv"


def save_dataset(ds: Dataset, out_dir) -> Path:
    """One XYZ file per sample plus ``manifest.csv`` (id, file, label)."""
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    with open(out / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "file", "label"])
        for s in ds.samples:
            rel = f"clouds/{s.id}.xyz"
            save_xyz(s, out / rel)
            w.writerow([s.id, rel, s.label])
    (out / "classes.txt").write_text("\n".join(ds.class_names) + "\n")
    return out / MANIFEST


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST if root.is_dir() else root
    base = manifest.parent
    samples = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            cloud = load_xyz(base / row["file"], id=row["id"])
            label = int(row["label"]) if row.get("label") not in (None, "") else cloud.label
            samples.append(PointCloud(cloud.points, label=label, id=row["id"]))
    names_file = base / "classes.txt"
    if names_file.exists():
        names = names_file.read_text().split()
    else:
        k = max((s.label or 0) for s in samples)
        names = [f"class{i}" for i in range(1, k + 1)]
    return Dataset(samples, names)


# -- splitting ---------------------------------------------------------------


def split(ds: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified, seed-deterministic train/test split."""
    if not 0 < test_fraction < 1:
        raise InvalidInput(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(ds.samples):
        by_class.setdefault(s.label, []).append(i)
    train_idx, test_idx = [], []
    for label in sorted(by_class, key=lambda v: (v is None, v)):
        idx = by_class[label]
        if len(idx) == 1:
            warnings.warn(f"class {label} has a single sample; keeping it in the training split")
            train_idx += idx
            continue
        perm = [idx[j] for j in rng.permutation(len(idx))]
        n_test = min(max(1, round(test_fraction * len(idx))), len(idx) - 1)
        test_idx += sorted(perm[:n_test])
        train_idx += sorted(perm[n_test:])
    pick = lambda ids: [ds.samples[i] for i in sorted(ids)]  # noqa: E731
    return (
        replace(ds, samples=pick(train_idx), split="train"),
        replace(ds, samples=pick(test_idx), split="test"),
    )
