import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, kld_py, nt_xent_loop, relative_error
from pointacl.loss import (
    LossConfig,
    cross_entropy,
    kld_features,
    kld_rows,
    nt_xent_multiview,
    nt_xent_multiview_grad,
    nt_xent_pair,
    objective,
    total_loss,
)
from pointacl.types import InvalidInput


def test_pair_matches_loop():
    rng = np.random.default_rng(0)
    for _ in range(10):
        zi, zj = rng.normal(size=(2, 5, 4))
        expected = nt_xent_loop(np.stack([zi, zj], 1), 0.5)
        assert abs(nt_xent_pair(zi, zj, 0.5) - expected) < 1e-12 * max(1, abs(expected))


def test_pair_is_multiview_with_two_views():
    rng = np.random.default_rng(1)
    zi, zj = rng.normal(size=(2, 6, 8))
    assert nt_xent_pair(zi, zj, 0.3) == nt_xent_multiview(np.stack([zi, zj], 1), 0.3)


def test_two_objects_identical_views():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    t = 0.5
    # each anchor sees its twin at cos 1 and two negatives at cos 0
    per_anchor = -math.log(math.exp(2) / (math.exp(2) + 2))
    assert nt_xent_pair(z, z, t) == pytest.approx(4 * per_anchor, rel=1e-12)


def test_zero_vector_is_finite():
    rng = np.random.default_rng(2)
    zi, zj = rng.normal(size=(2, 3, 4))
    zi[0] = 0.0
    assert np.isfinite(nt_xent_pair(zi, zj))


def test_too_small_batches():
    with pytest.raises(InvalidInput):
        nt_xent_pair(np.ones((1, 3)), np.ones((1, 3)))
    with pytest.raises(InvalidInput):
        nt_xent_multiview(np.ones((2, 1, 3)))


def test_multiview_matches_loop():
    rng = np.random.default_rng(3)
    views = rng.normal(size=(3, 4, 5))
    expected = nt_xent_loop(views, 0.2)
    assert abs(nt_xent_multiview(views, 0.2) - expected) < 1e-12 * abs(expected)


def test_multiview_gradient():
    rng = np.random.default_rng(4)
    views = rng.normal(size=(3, 4, 5))
    _, g = nt_xent_multiview_grad(views, 0.5)
    for idx in np.ndindex(views.shape):
        fd = central_difference(lambda: nt_xent_multiview(views, 0.5), views, idx, 1e-5)
        assert relative_error(g[idx], fd, 1e-6) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.integers(2, 4))
def test_multiview_nonnegative_and_permutation_invariant(seed, B, m):
    rng = np.random.default_rng(seed)
    views = rng.normal(size=(B, m, 6))
    value = nt_xent_multiview(views, 0.5)
    assert value >= 0
    perm = rng.permutation(B)
    assert abs(nt_xent_multiview(views[perm], 0.5) - value) < 1e-9 * max(1, value)


def test_kld_hand_case():
    a, b = np.array([0.0, math.log(3.0)]), np.zeros(2)
    expected = 0.25 * math.log(0.5) + 0.75 * math.log(1.5)
    assert kld_features(a, b) == pytest.approx(expected, abs=1e-15)


def test_kld_identity_and_shift():
    rng = np.random.default_rng(5)
    h = rng.normal(size=16)
    assert abs(kld_features(h, h)) < 1e-15
    g = rng.normal(size=16)
    assert abs(kld_features(h + 3.7, g) - kld_features(h, g)) < 1e-12


def test_kld_matches_loop():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(2, 7, 12)) * 2
    got = kld_rows(a, b)
    for row in range(7):
        assert abs(got[row] - kld_py(a[row], b[row])) < 1e-12


def _objective_inputs(rng, B=4, Z=5, F=6):
    zs = list(rng.normal(size=(4, B, Z)))
    hs = list(rng.normal(size=(3, B, F)))
    return zs, hs


def test_objective_gradients():
    rng = np.random.default_rng(7)
    zs, hs = _objective_inputs(rng)
    cfg = LossConfig(0.5, 0.7, 1.3)
    res = objective(*zs, *hs, cfg)
    names = ["z1", "z2", "z_hd", "z_adv", "h1", "h_adv", "h_hd"]
    arrays = zs + hs
    for name, arr in zip(names, arrays):
        for idx in np.ndindex(arr.shape):
            fd = central_difference(lambda: total_loss(*zs, *hs, cfg), arr, idx, 1e-5)
            assert relative_error(res.grads[name][idx], fd, 1e-6) < 1e-5, name


def test_objective_decomposition():
    rng = np.random.default_rng(8)
    zs, hs = _objective_inputs(rng)
    res = objective(*zs, *hs, LossConfig(0.5, 2.0, 3.0))
    assert res.value == pytest.approx(res.contrastive + 2 * res.kld_clean_adv + 3 * res.kld_adv_hd, rel=1e-14)
    plain = objective(*zs, *hs, LossConfig(0.5, 0.0, 0.0))
    assert plain.value == plain.contrastive


def test_loss_config_validation():
    with pytest.raises(InvalidInput):
        LossConfig(temperature=0.0)
    with pytest.raises(InvalidInput):
        LossConfig(alpha=-1.0)


def test_cross_entropy():
    logits = np.array([[2.0, 0.5, -1.0], [0.0, 0.0, 0.0]])
    loss, d = cross_entropy(logits, [1, 3])
    e = np.exp(logits[0])
    assert loss[0] == pytest.approx(-math.log(e[0] / e.sum()), rel=1e-14)
    assert loss[1] == pytest.approx(math.log(3), rel=1e-14)
    assert np.allclose(d.sum(axis=1), 0, atol=1e-15)


@pytest.mark.parametrize("B", [2, 3, 7])
def test_identical_views_uniform_similarity(B):
    z = np.tile([0.6, -0.8, 0.0], (B, 1))
    assert nt_xent_pair(z, z, 0.5) == pytest.approx(2 * B * math.log(2 * B - 1), rel=1e-12)


def test_rescaling_views_changes_nothing():
    rng = np.random.default_rng(9)
    views = rng.normal(size=(5, 4, 6))
    scale = rng.uniform(0.1, 10, size=(5, 4, 1))
    assert nt_xent_multiview(views * scale, 0.4) == pytest.approx(nt_xent_multiview(views, 0.4), abs=1e-9)
    zi, zj = views[:, 0], views[:, 1]
    assert nt_xent_pair(10 * zi, 10 * zj) == pytest.approx(nt_xent_pair(zi, zj), abs=1e-9)


def test_isolated_objects_closed_form():
    # two objects, each with four identical views, mutually orthogonal; t = 1
    B, m = 2, 4
    views = np.zeros((B, m, 3))
    views[0, :, 0] = 2.0
    views[1, :, 2] = 0.5
    per_term = -math.log(math.e / (3 * math.e + (B * m - 4)))
    assert nt_xent_multiview(views, 1.0) == pytest.approx(B * m * (m - 1) * per_term, rel=1e-12)


def test_equal_features_leave_contrastive_only():
    rng = np.random.default_rng(11)
    zs, _ = _objective_inputs(rng)
    h = rng.normal(size=(4, 6))
    res = objective(*zs, h, h.copy(), h.copy(), LossConfig(0.5, 1.0, 1.0))
    assert res.value == res.contrastive


def test_total_loss_component_sum():
    rng = np.random.default_rng(12)
    for _ in range(10):
        zs, hs = _objective_inputs(rng)
        h1, h_adv, h_hd = hs
        expected = (
            nt_xent_loop(np.stack(zs, 1), 0.5)
            + np.mean([kld_py(a, b) for a, b in zip(h1, h_adv)])
            + np.mean([kld_py(a, b) for a, b in zip(h_adv, h_hd)])
        )
        assert total_loss(*zs, *hs, LossConfig(0.5, 1.0, 1.0)) == pytest.approx(expected, rel=1e-12)
