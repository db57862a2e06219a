import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csrlab import autodiff as ad
from csrlab import data, losses, model


@pytest.fixture(scope="module")
def small():
    enc = model.Encoder.initialize(model.Architecture(), seed=3)
    anchors = model.init_anchors(6, 64, seed=3)
    imgs = data.generate(2, seed=5).floats()
    return enc, anchors, imgs


def test_embeddings_unit_norm_and_deterministic(small):
    enc, _, x = small
    z1, z2 = enc.embed(x), enc.embed(x)
    assert np.array_equal(z1, z2)
    np.testing.assert_allclose(np.linalg.norm(z1, axis=1), 1, atol=1e-5)


def test_patch_divisibility():
    enc = model.Encoder.initialize(model.Architecture(), seed=0)
    with pytest.raises(ValueError):
        enc.embed(np.zeros((1, 60, 60, 3), np.float32))


def test_zero_shot_probs_examples():
    z = np.array([[1.0, 0.0]])
    assert np.allclose(model.zero_shot_probs(z, model.ClassAnchors(np.array([[0.6, 0.8]]), 10)), [[1.0]])
    same = model.ClassAnchors(np.tile([[0.0, 1.0]], (4, 1)), 10)
    np.testing.assert_allclose(model.zero_shot_probs(z, same), 0.25)
    flat = model.ClassAnchors(np.eye(2), 0.0)
    np.testing.assert_allclose(model.zero_shot_probs(z, flat), 0.5)


def test_classify_examples():
    anchors = model.ClassAnchors(np.eye(3), 10)
    assert model.classify(np.array([[0.0, 1.0, 0.0]]), anchors)[0] == 1
    tie = np.array([[np.sqrt(0.5), np.sqrt(0.5), 0.0]])
    assert model.classify(tie, anchors)[0] == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_simplex_and_tau_invariance(seed, factor):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((50, 8))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    a = rng.standard_normal((5, 8))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    p = model.zero_shot_probs(z, model.ClassAnchors(a, 10))
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1, atol=1e-6)
    assert np.array_equal(model.classify(z, model.ClassAnchors(a, 10)),
                          model.classify(z, model.ClassAnchors(a, 10 * factor)))


def test_anchor_norm_validated():
    with pytest.raises(ValueError):
        model.ClassAnchors(np.ones((2, 3)), 10)


def test_input_gradient_constant_and_finite_difference(small):
    enc, anchors, x = small
    _, g = model.loss_and_input_grad(enc, anchors, x[:2], "constant")
    assert np.all(g == 0)
    with pytest.raises(ValueError):
        model.loss_and_input_grad(enc, anchors, x[:2], "no-such-loss")
    enc64, anc64 = enc.astype(np.float64), anchors.astype(np.float64)

    def loss(t):
        return ad.reduce_sum(losses.ce_untargeted(enc64.forward(t), anc64, labels=[2]))

    assert ad.grad_check(loss, x[:1].astype(np.float64), step=1e-6, n_samples=32) < 1e-3


def test_cosine_gradient_is_tangent():
    rng = np.random.default_rng(0)
    c = rng.standard_normal(16)
    c /= np.linalg.norm(c)
    u = rng.standard_normal(16)
    z = u / np.linalg.norm(u)
    # gradient of cos(z, c) with respect to the pre-normalized vector u
    _, g = ad.grad(lambda t: ad.dot(ad.l2_normalize(t), c), u, dtype=np.float64)
    assert abs(np.dot(g, z)) < 1e-10


def test_training_preconditions():
    ds = data.generate(10, seed=0)
    with pytest.raises(ValueError):
        model.train(ds.floats(), ds.labels)


def test_lr_zero_leaves_parameters_unchanged():
    ds = data.generate(50, seed=0, classes=2)
    cfg = model.TrainConfig(epochs=1, lr=0.0, seed=4)
    enc, anchors, _ = model.train(ds.floats(), ds.labels, cfg)
    init = model.Encoder.initialize(model.Architecture(), 4)
    for k in init.params:
        assert np.array_equal(enc.params[k], init.params[k])
    assert np.array_equal(anchors.vectors, model.init_anchors(2, 64, 4).vectors)


def test_training_deterministic_and_loss_decreases(tmp_path):
    ds = data.generate(50, seed=0, classes=2)
    cfg = model.TrainConfig(epochs=3, seed=1)
    e1, a1, h1 = model.train(ds.floats(), ds.labels, cfg)
    e2, a2, _ = model.train(ds.floats(), ds.labels, cfg)
    model.save_checkpoint(tmp_path / "a.ckpt", e1, a1)
    model.save_checkpoint(tmp_path / "b.ckpt", e2, a2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    smooth = np.convolve(h1.step_loss, np.ones(10) / 10, mode="valid")
    assert smooth[-1] < smooth[0]
    np.testing.assert_allclose(np.linalg.norm(a1.vectors, axis=1), 1, atol=1e-5)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    ds = data.generate(50, seed=0, classes=2)
    with pytest.raises(model.DivergenceError) as err:
        model.train(ds.floats(), ds.labels, model.TrainConfig(epochs=2, lr=1e30))
    assert err.value.step >= 0


def test_checkpoint_roundtrip(tmp_path, small):
    enc, anchors, x = small
    p = tmp_path / "m.ckpt"
    model.save_checkpoint(p, enc, anchors, {"seed": 3})
    enc2, anchors2, meta = model.load_checkpoint(p)
    assert meta["seed"] == "3"
    for k in enc.params:
        assert np.array_equal(enc.params[k], enc2.params[k])
    assert np.array_equal(enc.embed(x), enc2.embed(x))
    assert np.array_equal(anchors.vectors, anchors2.vectors)


def test_checkpoint_rejects_corruption(tmp_path, small):
    enc, anchors, _ = small
    p = tmp_path / "m.ckpt"
    model.save_checkpoint(p, enc, anchors)
    raw = p.read_bytes()
    p.write_bytes(raw.replace(b"arch_hash: ", b"arch_hash: 0", 1))
    with pytest.raises(model.CheckpointError):
        model.load_checkpoint(p)
    p.write_bytes(raw + b"\0")
    with pytest.raises(model.CheckpointError):
        model.load_checkpoint(p)


def test_counters(small):
    enc, anchors, x = small
    model.counters.reset()
    enc.embed(x[:3])
    model.loss_and_input_grad(enc, anchors, x[:2], "ce-untargeted", labels=[0, 1])
    assert (model.counters.forwards, model.counters.backwards) == (5, 2)


# --- dataset ---------------------------------------------------------------


def test_generate_deterministic_and_interleaved():
    a, b = data.generate(3, seed=9), data.generate(3, seed=9)
    assert np.array_equal(a.images, b.images) and a.names == b.names
    assert a.labels.tolist() == list(range(6)) * 3
    assert a.images.dtype == np.uint8 and a.images.shape == (18, 64, 64, 3)
    assert not np.array_equal(a.images, data.generate(3, seed=9, split="test").images)


def test_ppm_roundtrip(tmp_path):
    ds = data.generate(2, seed=1, size=32)
    data.save_dataset(ds, tmp_path)
    back = data.load_dataset(tmp_path)
    assert np.array_equal(back.images, ds.images) and back.labels.tolist() == ds.labels.tolist()
    (tmp_path / "c.ppm").write_bytes(b"P6\n# comment\n2 1\n255\n" + bytes(range(6)))
    assert data.read_ppm(tmp_path / "c.ppm").reshape(-1).tolist() == list(range(6))


# --- losses ----------------------------------------------------------------


def test_plain_losses():
    assert losses.loss_ce_untargeted(np.array([0.0, 1.0]), 1) == pytest.approx(0, abs=1e-9)
    assert losses.loss_ce_untargeted(np.full(4, 0.25), 2) == pytest.approx(np.log(4), abs=1e-9)
    s = [0.9, 0.5, 0.3, 0.2, 0.1]
    assert losses.loss_dlr_targeted(s, 0, 1) == pytest.approx(-0.4 / 0.65, abs=1e-4)
    assert losses.loss_dlr_targeted([0.4, 0.4, 0.1, 0.0], 0, 1) == 0
    assert losses.loss_dlr_targeted(np.add(s, 3.0), 0, 1) == pytest.approx(losses.loss_dlr_targeted(s, 0, 1))
    with pytest.raises(ValueError):
        losses.loss_dlr_targeted([0.1, 0.2, 0.3], 0, 1)
    with pytest.raises(ZeroDivisionError):
        losses.loss_dlr_targeted([0.5, 0.5, 0.5, 0.5], 0, 1)
    a = np.array([0.6, 0.8])
    assert losses.loss_cross_modal(a, a) == pytest.approx(1)
    assert losses.loss_cross_modal(-a, a) == pytest.approx(-1)
    assert losses.loss_cross_modal(np.array([0.8, -0.6]), a) == pytest.approx(0)
    assert losses.loss_label_free(a, a) == pytest.approx(1)
    assert losses.loss_label_free(-a, a) == pytest.approx(-1)


def test_targeted_loss_decreases_toward_target():
    rng = np.random.default_rng(0)
    anchors = rng.standard_normal((4, 8))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    z0 = rng.standard_normal(8)
    z0 /= np.linalg.norm(z0)
    values = []
    for t in np.linspace(0, 1, 10):
        z = (1 - t) * z0 + t * anchors[2]
        z /= np.linalg.norm(z)
        values.append(losses.loss_ce_targeted(model.zero_shot_probs(z[None], model.ClassAnchors(anchors, 10))[0], 2))
    assert np.all(np.diff(values) < 0)


def test_rectification_loss_examples():
    z = np.array([1.0, 0.0])
    perp = np.array([0.0, 1.0])
    assert losses.rectification_loss(z, z, perp) == pytest.approx(1.0)
    assert losses.rectification_loss(z, z, z) == pytest.approx(0.0)
    w = np.array([0.6, 0.8])
    assert losses.rectification_loss(z, w, z, lam=0) == pytest.approx(0.6)


def test_tape_objectives_agree_with_plain_ones():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((5, 8))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    anchors = model.ClassAnchors(a, 10)
    z = rng.standard_normal((3, 8))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    zt = ad.Tensor(z)
    y, t = np.array([0, 1, 2]), np.array([3, 4, 0])
    probs = model.zero_shot_probs(z, anchors)
    ce = losses.ce_untargeted(zt, anchors, labels=y).data
    np.testing.assert_allclose(ce, [losses.loss_ce_untargeted(p, k) for p, k in zip(probs, y)], rtol=1e-5)
    dlr = losses.dlr_targeted(zt, anchors, labels=y, targets=t).data
    np.testing.assert_allclose(dlr, [losses.loss_dlr_targeted(zz @ a.T, k, kt) for zz, k, kt in zip(z, y, t)],
                               rtol=1e-4)
