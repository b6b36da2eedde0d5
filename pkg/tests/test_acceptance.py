"""Acceptance suite: one test (or group of tests) per numbered criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; a verdict line per
criterion is printed in the terminal summary.
"""

import time

import numpy as np
import pytest

import fd_oracle
from oracles import kld_py, nt_xent_loop
from pointacl import attack as atk
from pointacl.attack import AttackConfig
from pointacl.augment import rotation_matrix
from pointacl.cli import route
from pointacl.config import TrainConfig
from pointacl.dataio import crease_line_distance, generate_synthetic, sample_shape, split
from pointacl.geometry import DEFAULT_R1, DEFAULT_R2, build_index, don_field, high_difference_indices, radius_query
from pointacl.loss import LossConfig, kld_features, kld_rows, nt_xent_multiview, nt_xent_pair
from pointacl.model import init_params
from pointacl.pipeline import evaluate, high_difference_views, linear_finetune, pretrain, view_objective
from pointacl.types import PointCloud

criterion = pytest.mark.acceptance


# -- 1: gradients against central differences ----------------------------------

N, F, B, Z = 32, 16, 4, 8
FD_TOL = 1e-4


def _total_loss_instance(i):
    rng = np.random.default_rng([101, i])
    params = init_params(1000 + i, F, Z, 3, N)
    views = rng.uniform(-1, 1, size=(4, B, N, 3))
    cfg = LossConfig(rng.uniform(0.2, 1.0), rng.uniform(0, 2), rng.uniform(0, 2))
    rep = "hz"[i % 2]
    res, grads, dx = view_objective(params, *views, cfg, rep)
    head = fd_oracle.FourViewHead(B, cfg.temperature, cfg.alpha, cfg.beta, rep)
    return fd_oracle.check(params, views.reshape(4 * B, N, 3), head, grads, dx)


def _attack_instance(i, objective):
    rng = np.random.default_rng([202, i])
    params = init_params(2000 + i, F, Z, 3, N)
    x = rng.uniform(-1, 1, size=(B, N, 3))
    if objective == "ce":
        labels = rng.integers(1, 4, size=B)
        _, grads, dx = atk.supervised_loss_gradients(params, x, labels)
        head = fd_oracle.CrossEntropyHead(labels)
    else:
        # an anchor independent of x keeps the divergence gradient well above
        # the truncation error of the stencil
        anchor = atk.anchor_features(params, rng.uniform(-1, 1, size=x.shape), objective)
        _, grads, dx = atk.feature_divergence_gradients(params, anchor, x, objective)
        head = fd_oracle.DivergenceHead(anchor, objective)
    return fd_oracle.check(params, x, head, grads, dx)


@criterion(1, "gradient correctness against central differences")
def test_c1_gradients_match_finite_differences():
    t0 = time.process_time()
    worst = {}
    checked = skipped = extrapolated = 0
    cases = [("total_loss", i) for i in range(20)] + [(obj, i) for obj in ("h", "z", "ce") for i in range(20)]
    for name, i in cases:
        rep = _total_loss_instance(i) if name == "total_loss" else _attack_instance(i, name)
        worst[name] = max(worst.get(name, 0.0), rep.max_error)
        checked += rep.checked
        skipped += rep.skipped
        extrapolated += rep.extrapolated
    elapsed = time.process_time() - t0
    print(f"worst relative error {worst}; {checked} coordinates checked ({extrapolated} via two-step"
          f" extrapolation), {skipped} skipped at kinks; {elapsed:.1f}s")
    assert max(worst.values()) < FD_TOL
    assert skipped < 0.1 * (checked + skipped)
    assert elapsed < 120


# -- 2: loss oracles ---------------------------------------------------------------


@criterion(2, "loss functions against brute-force oracles")
def test_c2_losses_match_oracles():
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(100):
        b, d, m = rng.integers(2, 9), rng.integers(2, 17), rng.integers(2, 6)
        t = rng.uniform(0.05, 2.0)
        scale = 10.0 ** rng.uniform(-2, 2)
        zi, zj = rng.normal(size=(2, b, d)) * scale
        views = rng.normal(size=(b, m, d)) * scale
        ha, hb = rng.normal(size=(2, b, d)) * rng.uniform(0.1, 5)

        pair = nt_xent_pair(zi, zj, t)
        worst = max(worst, abs(pair - nt_xent_loop(np.stack([zi, zj], 1), t)))
        worst = max(worst, abs(nt_xent_multiview(views, t) - nt_xent_loop(views, t)))
        rows = kld_rows(ha, hb)
        worst = max(worst, max(abs(r - kld_py(a, c)) for r, a, c in zip(rows, ha, hb)))
        worst = max(worst, abs(kld_features(ha[0], hb[0]) - kld_py(ha[0], hb[0])))
        assert pair == nt_xent_multiview(np.stack([zi, zj], 1), t), f"m=2 reduction not bitwise on batch {trial}"
    print(f"worst absolute deviation {worst:.3g}")
    assert worst <= 1e-12


# -- 3: geometry -------------------------------------------------------------------


def _plane(n, rng):
    return PointCloud(np.column_stack([rng.uniform(-1, 1, size=(n, 2)), np.zeros(n)]))


@criterion(3, "geometry oracles")
def test_c3_geometry():
    t0 = time.process_time()
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(1, 2001))
        pts = rng.normal(size=(n, 3)) * rng.uniform(0.1, 2)
        index = build_index(PointCloud(pts))
        for _ in range(5):
            p = pts[rng.integers(n)] if rng.random() < 0.5 else rng.normal(size=3)
            r = rng.uniform(0.01, 1.5)
            scan = np.flatnonzero(np.sqrt(((pts - p) ** 2).sum(axis=1)) <= r)
            assert radius_query(index, p, r).tolist() == scan.tolist()

    for _ in range(3):
        plane = _plane(2000, rng)
        mags = don_field(plane, DEFAULT_R1, DEFAULT_R2).magnitudes
        interior = np.abs(plane.points[:, :2]).max(axis=1) <= 1 - DEFAULT_R2
        assert mags[interior].max() < 0.05

    near = []
    for _ in range(5):
        pts, prm = sample_shape("crease", 2048, rng)
        kept = high_difference_indices(don_field(PointCloud(pts), DEFAULT_R1, DEFAULT_R2), 0.1)
        near.append(np.mean(crease_line_distance(pts[kept], prm) <= 2 * DEFAULT_R1))
    print(f"fraction of kept points near the crease: {np.round(near, 3).tolist()}")
    assert min(near) >= 0.6

    for keep in (0.1, 0.5, 0.75):
        pts, _ = sample_shape("crease", 1024, rng)
        pts = pts + rng.normal(scale=0.005, size=pts.shape)
        base = don_field(PointCloud(pts), DEFAULT_R1, DEFAULT_R2)
        R = rotation_matrix(rng.uniform(-180, 180, 3))
        turned = don_field(PointCloud(pts @ R.T + rng.normal(size=3)), DEFAULT_R1, DEFAULT_R2)
        a = set(high_difference_indices(base, keep).tolist())
        b = set(high_difference_indices(turned, keep).tolist())
        # only points whose magnitude ties the cut-off may swap sides
        cut = np.sort(base.magnitudes)[::-1][len(a) - 1]
        tied = set(np.flatnonzero(np.abs(base.magnitudes - cut) <= 1e-9).tolist())
        assert (a ^ b) <= tied
    elapsed = time.process_time() - t0
    print(f"geometry checks took {elapsed:.1f}s")
    assert elapsed < 180


# -- 4: attack contracts -------------------------------------------------------------


@criterion(4, "attack contracts")
def test_c4_budget_fuzz():
    params = init_params(4, F, Z, 3, N)
    rng = np.random.default_rng(44)
    for run in range(1000):
        eps = float(10.0 ** rng.uniform(-4, -0.5))
        steps = int(rng.integers(1, 8))
        step_size = None if rng.random() < 0.5 else float(eps * rng.uniform(0.05, 3))
        mode = "kld" if run % 2 else "ce"
        cfg = AttackConfig(eps, steps, step_size, mode, float(rng.uniform(0, 1)), "hz"[run % 3 == 0])
        x = rng.uniform(-1, 1, size=(int(rng.integers(1, 3)), N, 3)) * rng.uniform(0.1, 10)
        labels = rng.integers(1, 4, size=len(x))
        seen = []

        def on_step(it, xa, delta):
            seen.append(it)
            assert np.abs(delta).max() <= eps
            assert np.abs(xa - x).max() <= eps * (1 + 1e-12) + np.spacing(np.abs(x).max())

        if mode == "ce":
            atk.supervised_attack_batch(params, x, labels, cfg, seed=run, on_step=on_step)
        else:
            atk.feature_attack_batch(params, x, x, cfg, seed=run, on_step=on_step)
        assert seen == list(range(steps))


@criterion(4, "attack contracts")
def test_c4_zero_steps_identity():
    params = init_params(5, F, Z, 3, N)
    rng = np.random.default_rng(45)
    for run in range(50):
        x = rng.normal(size=(3, N, 3))
        for cfg in (AttackConfig(0.05, 0), AttackConfig(0.05, 0, mode="ce"), AttackConfig(0.05, 0, init_scale=0.0)):
            out = atk.attack_batch(params, x, [1, 2, 3], cfg, seed=run)
            assert out.tobytes() == x.tobytes()


@criterion(4, "attack contracts")
def test_c4_feature_attack_beats_random_search():
    params = init_params(6, 128, 32, 3, 256)
    eps, wins, corner_wins = 0.01, 0, 0
    cfg = AttackConfig(eps, 7)
    for trial in range(100):
        rng = np.random.default_rng([46, trial])
        x = rng.uniform(-1, 1, size=(1, 256, 3))
        anchor = atk.anchor_features(params, x)
        adv = atk.feature_attack_batch(params, x, x, cfg, seed=trial)
        kl_attack = kld_rows(anchor, atk.anchor_features(params, adv))[0]
        anchors = np.repeat(anchor, 50, 0)
        uniform = rng.uniform(-eps, eps, size=(50, 256, 3))
        wins += kl_attack >= kld_rows(anchors, atk.anchor_features(params, x + uniform)).max()
        # corners of the box spend the full budget on every coordinate; reported only
        corners = rng.choice([-eps, eps], size=(50, 256, 3))
        corner_wins += kl_attack >= kld_rows(anchors, atk.anchor_features(params, x + corners)).max()
    print(f"feature attack beat the best of 50 uniform perturbations in {wins}/100 trials"
          f" (best of 50 box corners: {corner_wins}/100)")
    assert wins >= 90


# -- 5 to 8: desk-scale benchmark ---------------------------------------------------
#
# Three classes, 256 points, batch 16, three seeds. Every arm shares the data,
# split and high-difference views of its seed; only the pretraining recipe
# differs. The test split is deliberately large (64 clouds per class) so one
# misclassified cloud moves the accuracy by half a point rather than three.

BENCH_CLASSES = ["sphere", "cube", "cylinder"]
BENCH_SEEDS = (0, 1, 2)
TRAIN_PER_CLASS, TEST_PER_CLASS = 36, 64
EVAL = AttackConfig(0.02, 7, mode="ce", init_scale=0.0)
STEP_GRID = (1, 3, 5, 10, 20)
EPS_GRID = (0.005, 0.01, 0.02, 0.04)
ARMS = {
    "baseline": dict(alpha=0.0, beta=0.0, contrastive_views=2, attack=AttackConfig(0.2, 0)),
    "pointacl": {},
    "alpha1_beta0": dict(beta=0.0),
    "alpha0_beta0": dict(alpha=0.0, beta=0.0),
    "use_z": dict(attack=AttackConfig(0.2, 7, representation="z")),
}


def _run_arm(cfg, train, test, hd):
    t0 = time.process_time()
    params = pretrain(train.samples, cfg, num_classes=len(BENCH_CLASSES), hd_views=hd).params
    probe = linear_finetune(params, train.samples, cfg.finetune_epochs, cfg.finetune_lr,
                            cfg.finetune_batch_size, cfg.seed)
    m = evaluate(probe, test.samples, EVAL, seed=cfg.seed)
    return probe, {"sa": m.standard_accuracy, "ra": m.robust_accuracy, "cpu": time.process_time() - t0}


@pytest.fixture(scope="module")
def benchmark():
    per_class = TRAIN_PER_CLASS + TEST_PER_CLASS
    results = {arm: [] for arm in ARMS}
    steps_curve, eps_curve = [], []
    for seed in BENCH_SEEDS:
        ds = generate_synthetic(BENCH_CLASSES, per_class, 256, 0.01, seed)
        train, test = split(ds, TEST_PER_CLASS / per_class, seed)
        base = TrainConfig(epochs=20, batch_size=16, n_points=256, seed=seed)
        t0 = time.process_time()
        hd = high_difference_views(train.samples, base)
        hd_cpu = time.process_time() - t0
        for arm, changes in ARMS.items():
            probe, row = _run_arm(base.with_(**changes), train, test, hd if arm != "baseline" else None)
            if arm != "baseline":
                row["cpu"] += hd_cpu
            results[arm].append(row)
            if arm == "pointacl":
                steps_curve.append([evaluate(probe, test.samples, EVAL.with_(steps=k), seed=seed).robust_accuracy
                                    for k in STEP_GRID])
                eps_curve.append([evaluate(probe, test.samples, EVAL.with_(epsilon=e, steps=5), seed=seed)
                                  .robust_accuracy for e in EPS_GRID])
    summary = {
        arm: {k: float(np.mean([r[k] for r in rows])) for k in ("sa", "ra", "cpu")} for arm, rows in results.items()
    }
    print("\nbenchmark (3-seed means; per-seed RA in brackets)")
    for arm, rows in results.items():
        s = summary[arm]
        print(f"  {arm:13s} SA {100 * s['sa']:6.2f}  RA {100 * s['ra']:6.2f}  "
              f"{[round(100 * r['ra'], 1) for r in rows]}  cpu {s['cpu']:.0f}s/seed")
    return {
        "summary": summary,
        "per_seed": results,
        "steps": np.mean(steps_curve, axis=0),
        "eps": np.mean(eps_curve, axis=0),
    }


@criterion(5, "robust accuracy gain over plain contrastive pretraining")
def test_c5_pointacl_beats_plain_contrastive(benchmark):
    s = benchmark["summary"]
    gain = 100 * (s["pointacl"]["ra"] - s["baseline"]["ra"])
    sa_drop = 100 * (s["baseline"]["sa"] - s["pointacl"]["sa"])
    cpu = sum(r["cpu"] for arm in ("pointacl", "baseline") for r in benchmark["per_seed"][arm])
    print(f"RA gain {gain:+.2f} points, SA drop {sa_drop:+.2f} points, {cpu:.0f}s CPU for both arms")
    assert cpu <= 15 * 60
    assert sa_drop <= 10
    assert gain >= 10


@criterion(6, "ablation order of the divergence weights")
def test_c6_divergence_weight_ablation(benchmark):
    s = benchmark["summary"]
    ra11, ra10, ra00 = (100 * s[a]["ra"] for a in ("pointacl", "alpha1_beta0", "alpha0_beta0"))
    print(f"RA(1,1) {ra11:.2f}  RA(1,0) {ra10:.2f}  RA(0,0) {ra00:.2f}")
    assert ra11 >= ra10
    assert ra10 >= ra00 - 1.0


@criterion(7, "attacks on unprojected features beat attacks on projections")
def test_c7_unprojected_attack_representation(benchmark):
    s = benchmark["summary"]
    gap = 100 * (s["pointacl"]["ra"] - s["use_z"]["ra"])
    print(f"RA(use h) - RA(use z) = {gap:+.2f} points")
    assert gap >= 3


@criterion(8, "robust accuracy trends in attack steps and budget")
def test_c8_attack_strength_trends(benchmark):
    steps, eps = 100 * benchmark["steps"], 100 * benchmark["eps"]
    print(f"RA over steps {dict(zip(STEP_GRID, steps.round(2)))}")
    print(f"RA over budget {dict(zip(EPS_GRID, eps.round(2)))}")
    assert np.all(np.diff(steps) <= 1.0)
    assert np.all(np.diff(eps) < 0)


# -- 9: determinism of the command-line pipeline ---------------------------------------

PIPELINE_CFG = """\
n_points = 64
feature_dim = 32
proj_dim = 16
batch_size = 8
epochs = 2
finetune_epochs = 5
"""


def _run_pipeline(root):
    root.mkdir()
    (root / "cfg.txt").write_text(PIPELINE_CFG)
    data, run = str(root / "data"), str(root / "run")
    steps = [
        ["gen-data", "--classes", "sphere,cube,crease", "--per-class", "8", "--points", "128", "--seed", "7", "--out", data],
        ["pretrain", "--config", str(root / "cfg.txt"), "--data", data, "--out", run, "--seed", "7"],
        ["finetune", "--checkpoint", f"{run}/pretrained.npz", "--mode", "linear"],
        ["attack-eval", "--checkpoint", f"{run}/finetuned_linear.npz", "--report", str(root / "metrics.csv")],
    ]
    for argv in steps:
        assert route(argv) == 0, argv
    return [(root / "metrics.csv").read_bytes(), (root / "run" / "pretrain_loss.csv").read_bytes()]


@criterion(9, "pipeline determinism")
def test_c9_pipeline_is_bitwise_reproducible(tmp_path):
    first = _run_pipeline(tmp_path / "a")
    second = _run_pipeline(tmp_path / "b")
    assert first[0].count(b"\n") == 1 + 6
    assert first == second
