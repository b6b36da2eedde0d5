"""Untargeted iterative l-inf sign-gradient attacks on point coordinates.

Two objectives are supported: the divergence between the encoder features of
an anchor cloud and the perturbed cloud (no labels needed), and the
cross-entropy of the linear classifier (labels needed).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from pointacl.loss import cross_entropy, kld_rows_grad
from pointacl.model import ModelParams, classify, encode_batch, gradients
from pointacl.types import InvalidInput, PointCloud

FEATURE_KLD = "feature-kld"
SUPERVISED_CE = "supervised-ce"
MODE_ALIASES = {"kld": FEATURE_KLD, "ce": SUPERVISED_CE, FEATURE_KLD: FEATURE_KLD, SUPERVISED_CE: SUPERVISED_CE}


@dataclass(frozen=True)
class AttackConfig:
    """l-inf budget (meters), iteration count and step rule.

    ``step_size`` defaults to ``epsilon / steps``. ``representation`` picks the
    feature the divergence is measured on: ``"h"`` (unprojected) or ``"z"``.
    """

    epsilon: float = 0.01
    steps: int = 7
    step_size: Optional[float] = None
    mode: str = FEATURE_KLD
    init_scale: float = 0.1
    representation: str = "h"

    def __post_init__(self):
        object.__setattr__(self, "mode", MODE_ALIASES.get(self.mode, self.mode))
        if self.mode not in (FEATURE_KLD, SUPERVISED_CE):
            raise InvalidInput(f"unknown attack mode {self.mode!r}")
        if self.epsilon < 0:
            raise InvalidInput(f"epsilon must be non-negative, got {self.epsilon}")
        if self.steps < 0:
            raise InvalidInput(f"steps must be non-negative, got {self.steps}")
        if self.steps > 0 and self.step_size is not None and not self.step_size > 0:
            raise InvalidInput("step_size must be positive when steps > 0")
        if not 0 <= self.init_scale <= 1:
            raise InvalidInput(f"init_scale must lie in [0, 1], got {self.init_scale}")
        if self.representation not in ("h", "z"):
            raise InvalidInput(f"representation must be 'h' or 'z', got {self.representation!r}")

    @property
    def step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.epsilon / self.steps if self.steps else 0.0

    def with_(self, **changes) -> "AttackConfig":
        return replace(self, **changes)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _ifgm(start: np.ndarray, cfg: AttackConfig, grad_fn, rng, on_step=None) -> np.ndarray:
    eps = cfg.epsilon
    if cfg.steps == 0 or eps == 0:
        # a no-op attack returns the input untouched, random start included
        return start.copy()
    bound = cfg.init_scale * eps
    delta = rng.uniform(-bound, bound, size=start.shape) if bound > 0 else np.zeros_like(start)
    x = start + delta
    for it in range(cfg.steps):
        g = grad_fn(x)
        delta = np.clip(delta + cfg.step * np.sign(g), -eps, eps)
        x = start + delta
        if on_step is not None:
            on_step(it, x, delta)
    return x


def feature_divergence_gradients(
    params: ModelParams, anchor_feat: np.ndarray, x: np.ndarray, representation: str = "h",
    need_params: bool = True,
) -> tuple[np.ndarray, dict, np.ndarray]:
    """Per-sample KL(anchor || e(x)) with gradients of their sum; the anchor is held fixed."""
    use_z = representation == "z"
    bundle = encode_batch(params, x, with_projection=use_z)
    feat = bundle.z if use_z else bundle.h
    kl, _, d_feat = kld_rows_grad(anchor_feat, feat)
    kw = {"dz": d_feat} if use_z else {"dh": d_feat}
    grads, dx = gradients(params, bundle, need_params=need_params, **kw)
    return kl, grads, dx


def feature_divergence_grad(
    params: ModelParams, anchor_feat: np.ndarray, x: np.ndarray, representation: str = "h"
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample KL(anchor || e(x)) and its gradient w.r.t. ``x``."""
    kl, _, dx = feature_divergence_gradients(params, anchor_feat, x, representation, need_params=False)
    return kl, dx


def anchor_features(params: ModelParams, anchors: np.ndarray, representation: str = "h") -> np.ndarray:
    bundle = encode_batch(params, anchors, with_projection=representation == "z")
    return bundle.z if representation == "z" else bundle.h


def feature_attack_batch(
    params: ModelParams,
    anchors: np.ndarray,
    starts: np.ndarray,
    cfg: AttackConfig,
    seed=0,
    on_step: Callable | None = None,
) -> np.ndarray:
    """Batched :func:`ifgm_feature` over ``(B, N, 3)`` arrays."""
    anchors = np.asarray(anchors, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.float64)
    if anchors.shape != starts.shape:
        raise InvalidInput(f"anchor shape {anchors.shape} differs from start shape {starts.shape}")
    target = anchor_features(params, anchors, cfg.representation) if cfg.steps else None

    def grad_fn(x):
        return feature_divergence_grad(params, target, x, cfg.representation)[1]

    return _ifgm(starts, cfg, grad_fn, _rng(seed), on_step)


def ifgm_feature(
    params: ModelParams, anchor: PointCloud, start: PointCloud, cfg: AttackConfig, seed=0, on_step=None
) -> PointCloud:
    """Perturb ``start`` within the l-inf ball to maximize the feature divergence from ``anchor``."""
    if cfg.mode != FEATURE_KLD:
        raise InvalidInput(f"ifgm_feature needs mode {FEATURE_KLD!r}, got {cfg.mode!r}")
    if len(anchor) != len(start):
        raise InvalidInput(f"anchor has {len(anchor)} points but start has {len(start)}")
    x = feature_attack_batch(params, anchor.points[None], start.points[None], cfg, seed, on_step)
    return start.with_points(x[0])


def supervised_loss_gradients(
    params: ModelParams, x: np.ndarray, labels: np.ndarray, need_params: bool = True
) -> tuple[np.ndarray, dict, np.ndarray]:
    """Per-sample cross-entropy with gradients of the summed loss."""
    bundle = encode_batch(params, x, with_projection=False)
    ce, d_logits = cross_entropy(classify(params, bundle.h), labels)
    grads, dx = gradients(params, bundle, dlogits=d_logits, need_params=need_params)
    return ce, grads, dx


def supervised_loss_grad(params: ModelParams, x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy and its gradient w.r.t. ``x``."""
    ce, _, dx = supervised_loss_gradients(params, x, labels, need_params=False)
    return ce, dx


def supervised_attack_batch(
    params: ModelParams, x: np.ndarray, labels, cfg: AttackConfig, seed=0, on_step=None
) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    x = np.asarray(x, dtype=np.float64)
    if labels.shape != (x.shape[0],):
        raise InvalidInput("need exactly one label per cloud")

    def grad_fn(xa):
        return supervised_loss_grad(params, xa, labels)[1]

    return _ifgm(x, cfg, grad_fn, _rng(seed), on_step)


def ifgm_supervised(
    params: ModelParams, cloud: PointCloud, label: int | None, cfg: AttackConfig, seed=0, on_step=None
) -> PointCloud:
    """Ascend the classifier's cross-entropy at ``label`` within the l-inf ball."""
    if cfg.mode != SUPERVISED_CE:
        raise InvalidInput(f"ifgm_supervised needs mode {SUPERVISED_CE!r}, got {cfg.mode!r}")
    label = cloud.label if label is None else label
    if label is None:
        raise InvalidInput("supervised attack needs a label")
    x = supervised_attack_batch(params, cloud.points[None], [label], cfg, seed, on_step)
    return cloud.with_points(x[0])


def attack_batch(params: ModelParams, x: np.ndarray, labels, cfg: AttackConfig, seed=0) -> np.ndarray:
    """Dispatch on ``cfg.mode``; the feature attack uses the clean input as its anchor."""
    if cfg.mode == SUPERVISED_CE:
        return supervised_attack_batch(params, x, labels, cfg, seed)
    return feature_attack_batch(params, x, x, cfg, seed)
