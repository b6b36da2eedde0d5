"""Pretraining, linear / adversarial finetuning and robust evaluation."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pointacl import attack as atk
from pointacl.attack import AttackConfig
from pointacl.augment import apply as augment_apply
from pointacl.augment import resample_indices, sample_spec
from pointacl.config import TrainConfig
from pointacl.geometry import don_field, high_difference_indices
from pointacl.loss import LossConfig, ObjectiveResult, cross_entropy, kld_rows, nt_xent_multiview_grad, objective
from pointacl.model import (
    ENCODER_KEYS,
    HEAD_KEYS,
    PROJECTOR_KEYS,
    ModelParams,
    classify,
    encode_batch,
    gradients,
    init_params,
)
from pointacl.types import InvalidInput, PointCloud

log = logging.getLogger(__name__)

THREADS_ENV = "POINTACL_THREADS"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _parallel_map(fn, items):
    n = _threads()
    if n == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


class Adam:
    """Adam over a subset of named arrays, with cosine learning-rate decay."""

    def __init__(self, keys: Sequence[str], lr: float, total_steps: int,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.keys = tuple(keys)
        self.lr, self.total = lr, max(1, total_steps)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def rate(self) -> float:
        return 0.5 * self.lr * (1 + math.cos(math.pi * min(self.t, self.total) / self.total))

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]):
        lr = self.rate()
        self.t += 1
        for k in self.keys:
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m, v = np.zeros_like(g), np.zeros_like(g)
            else:
                v = self.v[k]
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.b1**self.t)
            v_hat = v / (1 - self.b2**self.t)
            params.arrays[k] = params.arrays[k] - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return lr


# -- data preparation --------------------------------------------------------


def fit_count(points: np.ndarray, n: int, seed) -> np.ndarray:
    """Sub- or re-sample a point array to exactly ``n`` rows."""
    if len(points) == n:
        return points
    return points[resample_indices(len(points), n, np.random.default_rng(seed))]


def high_difference_views(clouds: Sequence[PointCloud], cfg: TrainConfig) -> np.ndarray:
    """Per-object high-difference clouds, resized to the encoder input size."""

    def one(item):
        i, cloud = item
        field_ = don_field(cloud, cfg.r1, cfg.r2)
        idx = high_difference_indices(field_, cfg.keep_fraction)
        return fit_count(cloud.points[idx], cfg.n_points, [cfg.seed, 7, i])

    return np.stack(_parallel_map(one, list(enumerate(clouds))))


def stack_points(clouds: Sequence[PointCloud], n_points: int, seed: int = 0) -> np.ndarray:
    return np.stack([fit_count(c.points, n_points, [seed, 11, i]) for i, c in enumerate(clouds)])


def augmented_pair(clouds: Sequence[PointCloud], cfg: TrainConfig, rng: np.random.Generator):
    seeds = rng.integers(0, 2**63 - 1, size=(len(clouds), 2))

    def one(item):
        cloud, (si, sj) = item
        xi = augment_apply(cloud, sample_spec(int(si), cfg.n_points, True, cfg.augment))
        xj = augment_apply(cloud, sample_spec(int(sj), cfg.n_points, True, cfg.augment))
        return xi.points, xj.points

    pairs = _parallel_map(one, list(zip(clouds, seeds)))
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) >= 2:
            yield idx


# -- pretraining -------------------------------------------------------------


@dataclass
class PretrainResult:
    params: ModelParams
    loss_curve: list[dict] = field(default_factory=list)


def view_objective(
    params: ModelParams, xi: np.ndarray, xj: np.ndarray, x_hd: np.ndarray, x_adv: np.ndarray,
    loss_cfg: LossConfig, representation: str = "h",
) -> tuple[ObjectiveResult, dict, np.ndarray]:
    """Four-view objective with gradients for every parameter and every input coordinate.

    ``dx`` is ``(4B, N, 3)`` in the order xi, xj, x_hd, x_adv. With
    ``representation="z"`` the divergence terms are taken on projected features.
    """
    B = xi.shape[0]
    bundle = encode_batch(params, np.concatenate([xi, xj, x_hd, x_adv]))
    z = [bundle.z[k * B : (k + 1) * B] for k in range(4)]
    h = [bundle.h[k * B : (k + 1) * B] for k in range(4)]
    use_z = representation == "z"
    feats = z if use_z else h
    res = objective(z[0], z[1], z[2], z[3], feats[0], feats[3], feats[2], loss_cfg)
    g = res.grads
    dz = np.concatenate([g["z1"], g["z2"], g["z_hd"], g["z_adv"]])
    d_feat = np.concatenate([g["h1"], np.zeros_like(g["h1"]), g["h_hd"], g["h_adv"]])
    if use_z:
        grads, dx = gradients(params, bundle, dz=dz + d_feat)
    else:
        grads, dx = gradients(params, bundle, dh=d_feat, dz=dz)
    return res, grads, dx


def pretrain_step(
    params: ModelParams, xi: np.ndarray, xj: np.ndarray, x_hd: np.ndarray, cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[dict, dict]:
    """Attack, forward all views, and return (gradients, loss record) for one mini-batch."""
    B = xi.shape[0]
    if cfg.contrastive_views == 2:
        bundle = encode_batch(params, np.concatenate([xi, xj]))
        views = np.stack([bundle.z[:B], bundle.z[B:]], axis=1)
        value, d_views = nt_xent_multiview_grad(views, cfg.temperature)
        dz = np.concatenate([d_views[:, 0], d_views[:, 1]])
        grads, _ = gradients(params, bundle, dz=dz)
        return grads, {"total": value, "contrastive": value, "kld_clean_adv": 0.0, "kld_adv_hd": 0.0}

    # the attack is data generation; no gradient flows through its inner loop
    x_adv = atk.feature_attack_batch(params, xi, xi, cfg.attack, rng)
    hd = xi if cfg.hd_view == "clean" else x_hd
    res, grads, _ = view_objective(params, xi, xj, hd, x_adv, cfg.loss, cfg.attack.representation)
    record = {
        "total": res.value,
        "contrastive": res.contrastive,
        "kld_clean_adv": res.kld_clean_adv,
        "kld_adv_hd": res.kld_adv_hd,
    }
    return grads, record


def pretrain(
    data: Sequence[PointCloud], cfg: TrainConfig, num_classes: int | None = None,
    hd_views: np.ndarray | None = None,
) -> PretrainResult:
    """Adversarial contrastive pretraining of the encoder and projection head."""
    clouds = list(data)
    if not clouds:
        raise InvalidInput("pretraining needs a non-empty dataset")
    k = num_classes or max((c.label or 1) for c in clouds)
    params = init_params(cfg.seed, cfg.feature_dim, cfg.proj_dim, k, cfg.n_points)
    if hd_views is None:
        needs_hd = cfg.contrastive_views == 4 and cfg.hd_view == "don"
        hd_views = high_difference_views(clouds, cfg) if needs_hd else None
    rng = np.random.default_rng([cfg.seed, 1])
    n_batches = sum(1 for s in range(0, len(clouds), cfg.batch_size) if len(clouds) - s >= 2)
    opt = Adam(ENCODER_KEYS + PROJECTOR_KEYS, cfg.learning_rate, cfg.epochs * n_batches)
    result = PretrainResult(params)
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(clouds), cfg.batch_size, rng):
            batch = [clouds[i] for i in idx]
            xi, xj = augmented_pair(batch, cfg, rng)
            x_hd = hd_views[idx] if hd_views is not None else None
            grads, record = pretrain_step(params, xi, xj, x_hd, cfg, rng)
            if not math.isfinite(record["total"]):
                raise TrainingDiverged(step, record["total"])
            record.update(step=step, epoch=epoch, lr=opt.step(params, grads))
            result.loss_curve.append(record)
            step += 1
        if result.loss_curve:
            log.info("epoch %d loss %.4f", epoch, result.loss_curve[-1]["total"])
    return result


# -- finetuning --------------------------------------------------------------


def features(params: ModelParams, x: np.ndarray, chunk: int = 64) -> np.ndarray:
    return np.concatenate(
        [encode_batch(params, x[s : s + chunk], with_projection=False).h for s in range(0, len(x), chunk)]
    )


def fit_linear_head(
    weight: np.ndarray, bias: np.ndarray, h: np.ndarray, labels: np.ndarray,
    epochs: int, lr: float, batch_size: int = 16, seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Mini-batch Adam on the cross-entropy of a linear head over fixed features."""
    head = ModelParams({"head.w": weight.copy(), "head.b": bias.copy()}, h.shape[1], 0, weight.shape[1], 0)
    rng = np.random.default_rng([seed, 3])
    n_batches = math.ceil(len(h) / batch_size)
    opt = Adam(HEAD_KEYS, lr, epochs * n_batches)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(h))
        total = 0.0
        for s in range(0, len(h), batch_size):
            idx = order[s : s + batch_size]
            logits = h[idx] @ head["head.w"] + head["head.b"]
            ce, d = cross_entropy(logits, labels[idx])
            d = d / len(idx)
            opt.step(head, {"head.w": h[idx].T @ d, "head.b": d.sum(axis=0)})
            total += float(ce.sum())
        curve.append(total / len(h))
    return head["head.w"], head["head.b"], curve


def linear_finetune(
    params: ModelParams, data: Sequence[PointCloud], epochs: int, lr: float,
    batch_size: int = 16, seed: int = 0,
) -> ModelParams:
    """Train only the linear head on frozen encoder features."""
    out = params.copy()
    if epochs == 0:
        return out
    x = stack_points(data, params.n_points, seed)
    labels = np.array([c.label for c in data], dtype=np.int64)
    w, b, _ = fit_linear_head(out["head.w"], out["head.b"], features(params, x), labels, epochs, lr, batch_size, seed)
    out.arrays["head.w"], out.arrays["head.b"] = w, b
    return out


@dataclass
class FinetuneResult:
    params: ModelParams
    clean_loss: list[float] = field(default_factory=list)
    adv_loss: list[float] = field(default_factory=list)


def adversarial_full_finetune(
    params: ModelParams, data: Sequence[PointCloud], epochs: int, lr: float,
    attack_cfg: AttackConfig, batch_size: int = 16, seed: int = 0,
) -> FinetuneResult:
    """Train encoder and head on each batch plus its supervised I-FGM counterpart."""
    if attack_cfg.mode != atk.SUPERVISED_CE:
        raise InvalidInput("adversarial finetuning needs a supervised-ce attack")
    out = params.copy()
    x_all = stack_points(data, params.n_points, seed)
    y_all = np.array([c.label for c in data], dtype=np.int64)
    rng = np.random.default_rng([seed, 5])
    n_batches = sum(1 for s in range(0, len(data), batch_size) if len(data) - s >= 2)
    opt = Adam(ENCODER_KEYS + HEAD_KEYS, lr, epochs * n_batches)
    result = FinetuneResult(out)
    for _ in range(epochs):
        clean_sum = adv_sum = 0.0
        count = 0
        for idx in _batches(len(data), batch_size, rng):
            x, y = x_all[idx], y_all[idx]
            x_adv = atk.supervised_attack_batch(out, x, y, attack_cfg, rng)
            bundle = encode_batch(out, np.concatenate([x, x_adv]), with_projection=False)
            yy = np.concatenate([y, y])
            ce, d = cross_entropy(classify(out, bundle.h), yy)
            grads, _ = gradients(out, bundle, dlogits=d / len(yy))
            opt.step(out, grads)
            clean_sum += float(ce[: len(y)].sum())
            adv_sum += float(ce[len(y) :].sum())
            count += len(y)
        result.clean_loss.append(clean_sum / max(count, 1))
        result.adv_loss.append(adv_sum / max(count, 1))
    return result


# -- evaluation --------------------------------------------------------------


@dataclass
class Metrics:
    standard_accuracy: float
    robust_accuracy: float
    per_class: dict[int, dict[str, float]]
    loss_curve: list[float] = field(default_factory=list)
    clean_pred: np.ndarray | None = None
    adv_pred: np.ndarray | None = None
    labels: np.ndarray | None = None
    linf_used: np.ndarray | None = None
    ids: list[str] = field(default_factory=list)


def predict_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(classify(params, features(params, x)), axis=1) + 1


def evaluate(
    params: ModelParams, data: Sequence[PointCloud], eval_attack: AttackConfig,
    seed: int = 0, chunk: int = 64,
) -> Metrics:
    """Clean and adversarial accuracy on the same samples.

    The supervised attack is the usual protocol; a feature-kld attack gives the
    label-free variant.
    """
    x = stack_points(data, params.n_points, seed)
    y = np.array([c.label for c in data], dtype=np.int64)
    rng = np.random.default_rng([seed, 9])
    x_adv = np.concatenate([
        atk.attack_batch(params, x[s : s + chunk], y[s : s + chunk], eval_attack, rng)
        for s in range(0, len(x), chunk)
    ])
    clean = predict_batch(params, x)
    adv = predict_batch(params, x_adv)
    per_class = {}
    for label in sorted(set(y.tolist())):
        m = y == label
        per_class[label] = {
            "count": int(m.sum()),
            "standard_accuracy": float(np.mean(clean[m] == label)),
            "robust_accuracy": float(np.mean(adv[m] == label)),
        }
    return Metrics(
        float(np.mean(clean == y)), float(np.mean(adv == y)), per_class,
        clean_pred=clean, adv_pred=adv, labels=y,
        linf_used=np.abs(x_adv - x).max(axis=(1, 2)), ids=[c.id for c in data],
    )


def mean_feature_divergence(params: ModelParams, data: Sequence[PointCloud], attack_cfg: AttackConfig, seed: int = 0) -> float:
    """Mean KL(e(x) || e(x_adv)) under the unsupervised feature attack."""
    x = stack_points(data, params.n_points, seed)
    x_adv = atk.feature_attack_batch(params, x, x, attack_cfg.with_(representation="h"), np.random.default_rng([seed, 13]))
    return float(np.mean(kld_rows(features(params, x), features(params, x_adv))))

