import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csrlab import analysis, autodiff as ad, data, defense, losses, model, spectral
from csrlab.attacks import AttackConfig


@pytest.fixture(scope="module")
def setup():
    enc = model.Encoder.initialize(model.Architecture(), seed=6)
    anchors = model.init_anchors(6, 64, seed=6)
    ds = data.generate(1, seed=7)
    return enc, anchors, ds.floats(), ds.labels


# --- ROC -------------------------------------------------------------------


def test_roc_examples():
    # pairs (0.9,0.7) (0.9,0.85) (0.8,0.7) are ordered, (0.8,0.85) is not; no ties
    assert analysis.roc_auc([0.9, 0.8], [0.7, 0.85]).auc == 0.75
    assert analysis.roc_auc([0.9, 0.8], [0.7, 0.8]).auc == 0.875
    assert analysis.roc_auc([0.9, 0.95], [0.1, 0.2]).auc == 1.0
    same = [0.3, 0.5, 0.5, 0.9]
    assert abs(analysis.roc_auc(same, same).auc - 0.5) < 1e-9
    with pytest.raises(ValueError):
        analysis.roc_auc([], [0.1])


def test_roc_points_monotone():
    rng = np.random.default_rng(0)
    roc = analysis.roc_auc(rng.random(30), rng.random(20))
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
    assert (roc.fpr[0], roc.tpr[0], roc.fpr[-1], roc.tpr[-1]) == (0, 0, 1, 1)
    assert roc.thresholds[0] == -np.inf and roc.thresholds[-1] == np.inf


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=25), st.lists(st.integers(0, 6), min_size=1, max_size=25))
def test_roc_equals_pairwise_statistic(b, a):
    b = np.array(b) / 6
    a = np.array(a) / 6
    assert analysis.roc_auc(b, a).auc == analysis.pairwise_auc(b, a)


def test_roc_exhaustive_small():
    vals = [0.0, 0.5, 1.0]
    for nb, na in [(1, 1), (2, 1), (1, 2), (2, 2)]:
        for b in itertools.product(vals, repeat=nb):
            for a in itertools.product(vals, repeat=na):
                assert analysis.roc_auc(b, a).auc == analysis.pairwise_auc(b, a)


def test_calibrate_tau():
    cal = analysis.calibrate_tau([0.9, 0.95, 0.97], [0.2, 0.4, 0.5])
    assert 0.5 < cal.tau < 0.9 and cal.youden == 1.0
    # ties in J go to the smaller threshold
    assert cal.tau == pytest.approx(0.7)


def test_calibrate_tau_degenerate(caplog):
    cal = analysis.calibrate_tau([0.5, 0.7], [0.5, 0.7])
    assert cal.youden == 0 and cal.degenerate
    assert "indistinguishable" in caplog.text
    cal = analysis.calibrate_tau([0.6, 0.6], [0.6])
    assert cal.degenerate and cal.tau == 0.6


def test_calibration_reproduces_roc_auc():
    rng = np.random.default_rng(3)
    b, a = rng.normal(0.9, 0.05, 40), rng.normal(0.7, 0.1, 40)
    assert analysis.calibrate_tau(b, a).roc.auc == analysis.roc_auc(b, a).auc


# --- consistency curves ----------------------------------------------------


def test_consistency_curve(setup):
    enc, _, x, _ = setup
    pops = {"benign": x, "noise": analysis.gaussian_noise(x, 4 / 255)}
    curves = analysis.consistency_curve(enc, pops, [2.0, 8.0, 1e6])
    for c in curves:
        assert c.mean[-1] == pytest.approx(1.0, abs=1e-4)
        assert np.all(c.mean <= 1 + 1e-6) and np.all(c.mean >= -1)
        assert np.all(np.diff(c.mean) >= -1e-3)
    with pytest.raises(ValueError):
        analysis.consistency_curve(enc, {"empty": x[:0]}, [2.0])
    with pytest.raises(ValueError):
        analysis.consistency_curve(enc, pops, [4.0, 2.0])


def test_default_radii():
    r = analysis.default_radii(64)
    assert len(r) == 8 and r[0] == pytest.approx(2.0) and r[-1] == pytest.approx(32.0)


def test_gaussian_noise_sigma():
    x = np.full((4, 64, 64, 3), 0.5, np.float32)
    n = analysis.gaussian_noise(x, 0.03, seed=1) - x
    assert n.std() == pytest.approx(0.03 / np.sqrt(3), rel=0.02)


# --- SGM -------------------------------------------------------------------


def test_sgm_constant_loss_is_zero(setup):
    enc, anchors, x, y = setup
    grid = analysis.sgm_heatmap(enc, anchors, x, y, loss_kind="constant")
    assert np.all(grid.values == 0)
    with pytest.raises(ValueError):
        analysis.sgm_heatmap(enc, anchors, x[:0], y[:0])


def test_sgm_symmetry_and_nonnegative(setup):
    enc, anchors, x, y = setup
    grid = analysis.sgm_heatmap(enc, anchors, x, y)
    assert np.all(grid.values >= 0) and grid.count == len(x)
    np.testing.assert_allclose(grid.mirrored(), grid.values, rtol=1e-4, atol=1e-8)
    assert 0 < grid.mass_outside(0.25) < 1


def test_sgm_amplitude_finite_differences(setup):
    enc, anchors, x, y = setup
    enc64, anc64 = enc.astype(np.float64), anchors.astype(np.float64)
    img, label = x[0].astype(np.float64), y[:1]

    def loss(image):
        return losses.ce_untargeted(enc64.forward(image[None]), anc64, labels=label).item()

    _, g = ad.grad(lambda t: ad.reduce_sum(losses.ce_untargeted(enc64.forward(ad.reshape(t, (1, 64, 64, 3))),
                                                                 anc64, labels=label)), img, dtype=np.float64)
    analytic = analysis.amplitude_gradient(img, g)
    rng = np.random.default_rng(0)
    coords = [tuple(c) for c in np.stack([rng.integers(0, 64, 20), rng.integers(0, 64, 20),
                                          rng.integers(0, 3, 20)], axis=1)]
    numeric = analysis.amplitude_finite_difference(loss, img, coords, step=1e-5)
    picked = np.array([analytic[c] for c in coords])
    err = np.abs(picked - numeric) / np.maximum(np.maximum(np.abs(picked), np.abs(numeric)), 1e-8)
    assert err.max() < 1e-2


# --- bands -----------------------------------------------------------------


def test_band_sweep_shape_and_zero_column(setup):
    enc, _, x, _ = setup
    table = analysis.band_drift_sweep(enc, x[:2], [0, 8, 32], [0, 2 / 255, 4 / 255], AttackConfig(steps=2))
    assert table.shape == (2, 3)
    assert np.all(table[:, 0] == 0)
    assert np.all(table >= 0) and np.all(table <= 2)
    with pytest.raises(ValueError):
        analysis.band_drift_sweep(enc, x[:2], [0, 8], [4 / 255, 2 / 255])


# --- gradient conflict -----------------------------------------------------


def test_gradient_conflict_basics(setup):
    enc, _, x, _ = setup
    with pytest.raises(ValueError):
        analysis.gradient_conflict(enc, x[0], np.zeros_like(x[0]), 5.0)
    d = np.random.default_rng(1).uniform(-1, 1, x[:3].shape).astype(np.float32) * (2 / 255)
    cos = analysis.gradient_conflict(enc, x[:3], d, 5.0)
    assert np.all(np.abs(cos) <= 1)


def test_conflict_sign_on_filter_invariant_inputs(setup):
    # for a flat image G x = x, so f(x) = f(Gx) and the first-order term is -||J P delta||^2 <= 0
    enc = setup[0]
    rng = np.random.default_rng(11)
    x = np.broadcast_to(rng.uniform(0.2, 0.8, (60, 1, 1, 1)), (60, 64, 64, 3)).astype(np.float32).copy()
    d = rng.choice([-1.0, 1.0], size=x.shape).astype(np.float32) / 255
    d = spectral.band_project(d, spectral.band_mask(64, 64, 8, 64))
    d = np.asarray(getattr(d, "data", d), np.float32)
    cos = analysis.gradient_conflict(enc, x, d, 40 * 64 / 224)
    assert np.mean(cos < 0) >= 0.95


def test_similarity_gradient_matches_finite_differences(setup):
    enc, _, x, _ = setup
    enc64 = enc.astype(np.float64)
    img = x[:1].astype(np.float64)

    def l_sim(t):
        diff = ad.subtract(enc64.forward(t), enc64.forward(spectral.lowpass_unclamped(t, 5.0)))
        return ad.scale(ad.reduce_sum(ad.multiply(diff, diff)), 0.5)

    assert ad.grad_check(l_sim, img, step=1e-6, n_samples=24) < 1e-3
    g = analysis.similarity_gradient(enc64, img, 5.0)
    np.testing.assert_allclose(g, ad.grad(l_sim, img, dtype=np.float64)[1], rtol=1e-8, atol=1e-12)


# --- robust accuracy -------------------------------------------------------


def test_robust_eval_identity_cases(setup):
    enc, anchors, x, y = setup
    rec = analysis.robust_accuracy_eval(enc, anchors, "none", x, x, y)
    assert rec.clean_acc == rec.robust_acc
    clean = float(np.mean(model.predict(enc, anchors, x) == y))
    rec = analysis.robust_accuracy_eval(enc, anchors, "csr", x, x, y, defense.DefenseConfig(tau=1e-9))
    assert rec.clean_acc == clean and rec.gate_fpr == 0
    assert len(rec.row()) == len(analysis.METRIC_COLUMNS)
    with pytest.raises(ValueError):
        analysis.apply_defense(enc, x, "bogus", defense.DefenseConfig())
