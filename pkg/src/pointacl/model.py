"""Permutation-invariant point encoder, projection head and linear classifier.

The encoder is a shared per-point MLP (3 -> 64 -> 128 -> F, ReLU after every
layer) followed by a max-pool over points. All derivatives are written out by
hand so they can be checked against finite differences in float64.

Shapes: a batch of clouds is ``(B, N, 3)``; ``h`` is ``(B, F)``; ``z`` is
``(B, Z)``; logits are ``(B, k)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import sparse

from pointacl.types import InvalidInput, PointCloud

ENCODER_KEYS = ("enc1.w", "enc1.b", "enc2.w", "enc2.b", "enc3.w", "enc3.b")
PROJECTOR_KEYS = ("proj1.w", "proj1.b", "proj2.w", "proj2.b")
HEAD_KEYS = ("head.w", "head.b")
ALL_KEYS = ENCODER_KEYS + PROJECTOR_KEYS + HEAD_KEYS

CHECKPOINT_FORMAT = "pointacl-checkpoint-v1"
HIDDEN1, HIDDEN2, PROJ_HIDDEN = 64, 128, 64


@dataclass
class ModelParams:
    arrays: dict[str, np.ndarray]
    feature_dim: int
    proj_dim: int
    num_classes: int
    n_points: int

    def __getitem__(self, key):
        return self.arrays[key]

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.arrays.items()},
            self.feature_dim,
            self.proj_dim,
            self.num_classes,
            self.n_points,
        )

    def shapes(self) -> dict[str, tuple]:
        f, z, k = self.feature_dim, self.proj_dim, self.num_classes
        return {
            "enc1.w": (3, HIDDEN1), "enc1.b": (HIDDEN1,),
            "enc2.w": (HIDDEN1, HIDDEN2), "enc2.b": (HIDDEN2,),
            "enc3.w": (HIDDEN2, f), "enc3.b": (f,),
            "proj1.w": (f, PROJ_HIDDEN), "proj1.b": (PROJ_HIDDEN,),
            "proj2.w": (PROJ_HIDDEN, z), "proj2.b": (z,),
            "head.w": (f, k), "head.b": (k,),
        }  # fmt: skip

    def validate(self):
        for key, shape in self.shapes().items():
            arr = self.arrays.get(key)
            if arr is None or arr.shape != shape:
                got = None if arr is None else arr.shape
                raise InvalidInput(f"parameter {key} has shape {got}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInput(f"parameter {key} has non-finite entries")

    def digest(self, keys=ALL_KEYS) -> str:
        """sha256 over the raw bytes of the selected arrays."""
        h = hashlib.sha256()
        for key in keys:
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.arrays[key]).tobytes())
        return h.hexdigest()


def init_params(seed: int, F: int = 128, Z: int = 32, k: int = 3, n_points: int = 256) -> ModelParams:
    """He-normal weights and uniform(+-1/sqrt(fan_in)) biases."""
    if min(F, Z, k) < 1:
        raise InvalidInput(f"dimensions must be positive, got F={F}, Z={Z}, k={k}")
    rng = np.random.default_rng(seed)
    params = ModelParams({}, F, Z, k, n_points)
    for key, shape in params.shapes().items():
        fan_in = shape[0] if key.endswith(".w") else params.shapes()[key[:-1] + "w"][0]
        if key.endswith(".w"):
            params.arrays[key] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            params.arrays[key] = rng.uniform(-bound, bound, size=shape)
    return params


@dataclass
class Activations:
    """Everything the backward pass needs from one forward pass."""

    x: np.ndarray
    a1: np.ndarray
    r1: np.ndarray
    a2: np.ndarray
    r2: np.ndarray
    a3: np.ndarray
    argmax: np.ndarray
    h: np.ndarray
    q1: Optional[np.ndarray] = None
    s1: Optional[np.ndarray] = None


@dataclass
class FeatureBundle:
    h: np.ndarray
    z: Optional[np.ndarray]
    cache: Optional[Activations]


def _relu(a):
    return np.maximum(a, 0.0)


def project(params: ModelParams, h: np.ndarray, cache: Activations | None = None) -> np.ndarray:
    q1 = h @ params["proj1.w"] + params["proj1.b"]
    s1 = _relu(q1)
    if cache is not None:
        cache.q1, cache.s1 = q1, s1
    return s1 @ params["proj2.w"] + params["proj2.b"]


def encode_batch(params: ModelParams, x: np.ndarray, with_projection: bool = True) -> FeatureBundle:
    """Forward pass for a ``(B, N, 3)`` array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise InvalidInput(f"expected a (B, N, 3) batch, got {x.shape}")
    if x.shape[1] != params.n_points:
        raise InvalidInput(f"encoder expects {params.n_points} points, got {x.shape[1]}")
    a1 = x @ params["enc1.w"] + params["enc1.b"]
    r1 = _relu(a1)
    a2 = r1 @ params["enc2.w"] + params["enc2.b"]
    r2 = _relu(a2)
    a3 = r2 @ params["enc3.w"] + params["enc3.b"]
    # argmax returns the first maximal index, which is the tie rule
    arg = np.argmax(a3, axis=1)
    h = _relu(np.take_along_axis(a3, arg[:, None, :], axis=1)[:, 0, :])
    cache = Activations(x, a1, r1, a2, r2, a3, arg, h)
    z = project(params, h, cache) if with_projection else None
    return FeatureBundle(h, z, cache)


def encode(params: ModelParams, cloud: PointCloud) -> FeatureBundle:
    """Single-cloud forward pass; ``h`` and ``z`` are 1-D."""
    b = encode_batch(params, cloud.points[None])
    return FeatureBundle(b.h[0], b.z[0], b.cache)


def classify(params: ModelParams, h: np.ndarray) -> np.ndarray:
    return h @ params["head.w"] + params["head.b"]


def predict(params: ModelParams, h: np.ndarray) -> np.ndarray:
    """Class ids in 1..k (first index wins ties)."""
    return np.argmax(classify(params, h), axis=-1) + 1


def gradients(
    params: ModelParams,
    bundle: FeatureBundle,
    dh: np.ndarray | None = None,
    dz: np.ndarray | None = None,
    dlogits: np.ndarray | None = None,
    need_params: bool = True,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Reverse-mode derivatives of ``<dh, h> + <dz, z> + <dlogits, logits>``.

    Returns the gradient with respect to every parameter (zeros for heads the
    functional does not touch) and with respect to the input coordinates.
    Max-pool routes each channel's gradient to its first argmax point.
    """
    c = bundle.cache
    if c is None:
        raise InvalidInput("feature bundle carries no retained activations")
    B, N, _ = c.x.shape

    def as_batch(g):
        return None if g is None else np.asarray(g, dtype=np.float64).reshape(B, -1)

    dh, dz, dlogits = as_batch(dh), as_batch(dz), as_batch(dlogits)
    grads: dict[str, np.ndarray] = {}
    if need_params:
        grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    g_h = np.zeros_like(c.h) if dh is None else dh.copy()

    if dz is not None:
        if c.s1 is None:
            raise InvalidInput("projection activations were not retained")
        ds1 = dz @ params["proj2.w"].T
        dq1 = ds1 * (c.q1 > 0)
        if need_params:
            grads["proj2.w"] = c.s1.T @ dz
            grads["proj2.b"] = dz.sum(axis=0)
            grads["proj1.w"] = c.h.T @ dq1
            grads["proj1.b"] = dq1.sum(axis=0)
        g_h += dq1 @ params["proj1.w"].T
    if dlogits is not None:
        if need_params:
            grads["head.w"] = c.h.T @ dlogits
            grads["head.b"] = dlogits.sum(axis=0)
        g_h += dlogits @ params["head.w"].T

    F = c.h.shape[1]
    b_idx = np.repeat(np.arange(B), F)
    p_idx = c.argmax.reshape(-1)
    # gradient of the max-pooled pre-activation, nonzero only where ReLU is active
    v = (g_h * (c.h > 0)).reshape(-1)
    w3 = params["enc3.w"]
    if need_params:
        r2_sel = c.r2[b_idx, p_idx]  # (B*F, H2)
        grads["enc3.w"] = (r2_sel * v[:, None]).reshape(B, F, -1).sum(axis=0).T
        grads["enc3.b"] = v.reshape(B, F).sum(axis=0)
    # each (cloud, channel) feeds exactly one point, so the scatter is a sparse product
    route = sparse.csr_matrix((v, (b_idx * N + p_idx, np.arange(B * F))), shape=(B * N, B * F))
    dr2 = (route @ np.tile(w3.T, (B, 1))).reshape(B, N, -1)
    da2 = dr2 * (c.a2 > 0)
    dr1 = da2 @ params["enc2.w"].T
    da1 = dr1 * (c.a1 > 0)
    if need_params:
        grads["enc2.w"] = c.r1.reshape(B * N, -1).T @ da2.reshape(B * N, -1)
        grads["enc2.b"] = da2.sum(axis=(0, 1))
        grads["enc1.w"] = c.x.reshape(B * N, 3).T @ da1.reshape(B * N, -1)
        grads["enc1.b"] = da1.sum(axis=(0, 1))
    dx = da1 @ params["enc1.w"].T
    if bundle.h.ndim == 1:
        dx = dx[0]
    return grads, dx


def save_checkpoint(params: ModelParams, path) -> Path:
    """Write an ``.npz`` container; see README for the layout."""
    path = Path(path)
    header = np.array(
        [params.feature_dim, params.proj_dim, params.num_classes, params.n_points], dtype=np.int64
    )
    payload = {"format": np.array(CHECKPOINT_FORMAT), "dims": header}
    payload.update({k: np.ascontiguousarray(params.arrays[k]) for k in ALL_KEYS})
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path) -> ModelParams:
    with np.load(Path(path), allow_pickle=False) as data:
        fmt = str(data["format"])
        if fmt != CHECKPOINT_FORMAT:
            raise InvalidInput(f"unsupported checkpoint format {fmt!r}")
        f, z, k, n = (int(v) for v in data["dims"])
        params = ModelParams({key: data[key].copy() for key in ALL_KEYS}, f, z, k, n)
    params.validate()
    return params
