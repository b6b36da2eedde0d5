"""Contrastive (NT-Xent) losses, feature-space KL divergence and the total objective.

NT-Xent here is a sum over every anchor in the batch, with the denominator
running over all other views (positives included). The KL terms are means
over objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pointacl.types import InvalidInput

_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidInput(f"temperature must be positive, got {self.temperature}")
        if self.alpha < 0 or self.beta < 0:
            raise InvalidInput("alpha and beta must be non-negative")


def log_softmax(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=-1, keepdims=True)
    shifted = a - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kld_rows(h_a: np.ndarray, h_b: np.ndarray) -> np.ndarray:
    """Row-wise KL(softmax(h_a) || softmax(h_b))."""
    lp, lq = log_softmax(np.asarray(h_a, float)), log_softmax(np.asarray(h_b, float))
    return np.sum(np.exp(lp) * (lp - lq), axis=-1)


def kld_features(h_a: np.ndarray, h_b: np.ndarray) -> float:
    return float(kld_rows(h_a, h_b))


def kld_rows_grad(h_a: np.ndarray, h_b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Values plus gradients of each row's divergence w.r.t. ``h_a`` and ``h_b``."""
    lp, lq = log_softmax(h_a), log_softmax(h_b)
    p, q = np.exp(lp), np.exp(lq)
    # log-ratio equals (h_a - h_b) up to a per-row constant, which cancels below
    ratio = lp - lq
    kl = np.sum(p * ratio, axis=-1)
    d_a = p * (ratio - kl[..., None])
    d_b = q - p
    return kl, d_a, d_b


def _check_views(views: np.ndarray) -> np.ndarray:
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 3:
        raise InvalidInput(f"views must be shaped (B, m, d), got {views.shape}")
    B, m, _ = views.shape
    if m < 2:
        raise InvalidInput("need at least two views per object")
    if B * m < 3:
        raise InvalidInput("batch has no negatives")
    return views


def _nt_xent_terms(views: np.ndarray, t: float):
    B, m, d = views.shape
    z = views.reshape(B * m, d)
    norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), _NORM_FLOOR)
    u = z / norms
    sim = (u @ u.T) / t
    n = B * m
    off = ~np.eye(n, dtype=bool)
    owner = np.repeat(np.arange(B), m)
    positive = (owner[:, None] == owner[None, :]) & off
    masked = np.where(off, sim, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    lse = (row_max + np.log(np.exp(masked - row_max).sum(axis=1, keepdims=True)))[:, 0]
    # per-anchor: sum over positives of (lse - sim); every summand >= 0
    per_anchor = np.sum(np.where(positive, lse[:, None] - sim, 0.0), axis=1)
    return per_anchor, (z, norms, u, sim, masked, lse, positive)


def nt_xent_multiview(views: np.ndarray, t: float = 0.5) -> float:
    """Multi-view NT-Xent over a ``(B, m, d)`` batch of projected views."""
    per_anchor, _ = _nt_xent_terms(_check_views(views), t)
    return float(np.sum(per_anchor))


def nt_xent_multiview_grad(views: np.ndarray, t: float = 0.5) -> tuple[float, np.ndarray]:
    views = _check_views(views)
    B, m, d = views.shape
    per_anchor, (z, norms, u, sim, masked, lse, positive) = _nt_xent_terms(views, t)
    soft = np.exp(masked - lse[:, None])
    d_sim = (m - 1) * soft - positive
    d_u = (d_sim + d_sim.T) @ u / t
    d_z = (d_u - u * np.sum(u * d_u, axis=1, keepdims=True)) / norms
    return float(np.sum(per_anchor)), d_z.reshape(B, m, d)


def nt_xent_pair(z_i: np.ndarray, z_j: np.ndarray, t: float = 0.5) -> float:
    """Two-view NT-Xent; ``z_i`` and ``z_j`` are ``(B, d)`` with B >= 2."""
    z_i, z_j = np.asarray(z_i, float), np.asarray(z_j, float)
    if z_i.shape != z_j.shape or z_i.ndim != 2:
        raise InvalidInput("z_i and z_j must both be (B, d)")
    if z_i.shape[0] < 2:
        raise InvalidInput("pair loss needs B >= 2 so every anchor has a negative")
    return nt_xent_multiview(np.stack([z_i, z_j], axis=1), t)


@dataclass
class ObjectiveResult:
    value: float
    contrastive: float
    kld_clean_adv: float
    kld_adv_hd: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


VIEW_ORDER = ("z1", "z2", "z_hd", "z_adv")


def objective(z1, z2, z_hd, z_adv, h1, h_adv, h_hd, cfg: LossConfig) -> ObjectiveResult:
    """Four-view contrastive loss plus the two weighted feature divergences.

    Gradients are returned for every z and h input under the same names.
    """
    views = np.stack([z1, z2, z_hd, z_adv], axis=1)
    cl, d_views = nt_xent_multiview_grad(views, cfg.temperature)
    kl1, d_h1, d_hadv1 = kld_rows_grad(np.asarray(h1, float), np.asarray(h_adv, float))
    kl2, d_hadv2, d_hhd = kld_rows_grad(np.asarray(h_adv, float), np.asarray(h_hd, float))
    B = views.shape[0]
    k1, k2 = float(np.mean(kl1)), float(np.mean(kl2))
    grads = {name: d_views[:, i] for i, name in enumerate(VIEW_ORDER)}
    grads["h1"] = cfg.alpha * d_h1 / B
    grads["h_adv"] = (cfg.alpha * d_hadv1 + cfg.beta * d_hadv2) / B
    grads["h_hd"] = cfg.beta * d_hhd / B
    value = cl + cfg.alpha * k1 + cfg.beta * k2
    return ObjectiveResult(value, cl, k1, k2, grads)


def total_loss(z1, z2, z_hd, z_adv, h1, h_adv, h_hd, cfg: LossConfig) -> float:
    return objective(z1, z2, z_hd, z_adv, h1, h_adv, h_hd, cfg).value


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy and its gradient w.r.t. the logits; labels are 1..k."""
    lp = log_softmax(logits)
    idx = np.asarray(labels, dtype=np.int64) - 1
    rows = np.arange(lp.shape[0])
    loss = -lp[rows, idx]
    d = np.exp(lp)
    d[rows, idx] -= 1.0
    return loss, d
