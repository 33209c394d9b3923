import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlsl.model import (
    ClsHead,
    Pass,
    SegNet,
    ShapeError,
    StaleCacheError,
    TrainingDiverged,
    digest,
    forward_cls,
    forward_seg,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from oracles import fd_probe, gradcheck_fixture, objective, scalar_head_forward, scalar_seg_forward


def zeroed(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def test_zero_weights_give_uniform_probs():
    net = SegNet.init(5, rng=0)
    net = net.with_params(zeroed(net.params))
    probs, latent = forward_seg(net, np.random.default_rng(0).random((7, 9, 3)))
    np.testing.assert_allclose(probs, 0.2, rtol=0, atol=1e-15)
    assert latent.shape == (7, 9, 16)


def test_zero_head_gives_half():
    head = ClsHead.init(16, 4, rng=0)
    head = head.with_params(zeroed(head.params))
    np.testing.assert_array_equal(forward_cls(head, np.ones((5, 5, 16))), 0.5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(1, 9), w=st.integers(1, 9))
def test_probs_are_normalized(seed, h, w):
    rng = np.random.default_rng(seed)
    net = SegNet.init(int(rng.integers(1, 7)), 4, int(rng.integers(0, 3)), rng=rng)
    probs, _ = forward_seg(net, rng.random((h, w, 3)))
    assert probs.shape[:2] == (h, w)
    assert (probs >= 0).all() and (probs <= 1).all()
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-9)


def test_seg_forward_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    net = SegNet.init(3, 4, 2, rng=rng)
    img = rng.random((8, 8, 3))
    probs, latent = forward_seg(net, img)
    ref_probs, ref_latent = scalar_seg_forward(net, img)
    np.testing.assert_allclose(probs, ref_probs, rtol=0, atol=1e-12)
    np.testing.assert_allclose(latent, ref_latent, rtol=0, atol=1e-12)


def test_head_forward_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    head = ClsHead.init(4, 3, depth=5, hidden=4, rng=rng)
    latent = rng.random((6, 5, 4))
    np.testing.assert_allclose(forward_cls(head, latent), scalar_head_forward(head, latent), rtol=0, atol=1e-12)


def test_gap_of_constant_latent():
    # with identity-like 1x1 conv and zero 3x3 off-centre taps, GAP sees the constant
    head = ClsHead.init(2, 2, depth=2, hidden=2, rng=0)
    p = zeroed(head.params)
    p["c1.w"][0, 0] = np.eye(2)
    p["c2.w"][1, 1] = np.eye(2)
    p["fc1.w"] = np.eye(2)
    p["fc2.w"] = np.eye(2)
    head = head.with_params(p)
    s = forward_cls(head, np.full((4, 4, 2), 0.3))
    np.testing.assert_allclose(s, 1 / (1 + np.exp(-0.3)), rtol=1e-12)


def test_channel_mismatch_errors():
    net = SegNet.init(3, rng=0)
    with pytest.raises(ShapeError):
        net.predict(np.zeros((4, 4, 2)))
    head = ClsHead.init(16, 3, rng=0)
    with pytest.raises(ShapeError):
        head.predict(np.zeros((4, 4, 8)))


def test_translation_equivariance_interior():
    rng = np.random.default_rng(4)
    net = SegNet.init(3, 4, 2, rng=rng)
    img = rng.random((12, 12, 3))
    shifted = np.roll(img, 2, axis=0)
    p0, _ = forward_seg(net, img)
    p1, _ = forward_seg(net, shifted)
    # receptive field radius is 2: rows 4..9 see neither the wrapped rows nor a different border
    np.testing.assert_allclose(p1[4:10], p0[2:8], rtol=0, atol=1e-12)


def test_zero_upstream_gives_zero_grads():
    net, head, images, *_ = gradcheck_fixture()
    p = Pass(net, head, images)
    seg, hd = p.backward(np.zeros_like(p.probs), np.zeros_like(p.scores))
    assert all(not g.any() for g in seg.values())
    assert all(not g.any() for g in hd.values())


@pytest.mark.parametrize("term", ["seg", "masked", "bce", "composite"])
def test_gradients_match_finite_differences(term):
    net, head, images, labels, pseudo, weak, rng = gradcheck_fixture(seed=7)
    targets, lam = {
        "seg": (labels, 0.0),
        "masked": (pseudo, 0.0),
        "bce": (None, 1.0),
        "composite": (labels, 0.5),
    }[term]
    results = fd_probe(net, head, images, targets, weak, lam, n_probe=40, rng=rng)
    worst = max(results, key=lambda r: r[-1])
    assert worst[-1] < 1e-4, worst


def test_single_sgd_step_descends():
    net, head, images, labels, _, weak, _ = gradcheck_fixture(seed=3)
    before, seg, hd = objective(net, head, images, labels, weak, 0.5)
    net2 = net.with_params(sgd_step(net.params, seg, 1e-3))
    head2 = head.with_params(sgd_step(head.params, hd, 1e-3))
    after, _, _ = objective(net2, head2, images, labels, weak, 0.5)
    assert after < before


def test_stale_cache_detected():
    net, head, images, *_ = gradcheck_fixture()
    p = Pass(net, head, images)
    with pytest.raises(StaleCacheError):
        p.backward(np.zeros_like(p.probs), images=images + 1e-3)
    net.params["proj.b"] = net.params["proj.b"] + 1.0
    with pytest.raises(StaleCacheError):
        p.backward(np.zeros_like(p.probs))


def test_sgd_step_arithmetic():
    out = sgd_step({"p": np.array([1.0])}, {"p": np.array([2.0])}, 0.1)
    np.testing.assert_allclose(out["p"], [0.8])
    same = sgd_step({"p": np.array([1.0])}, {"p": np.array([2.0])}, 0.0)
    assert same["p"][0] == 1.0


def test_sgd_step_rejects_non_finite():
    with pytest.raises(TrainingDiverged):
        sgd_step({"p": np.zeros(2)}, {"p": np.array([0.0, np.nan])}, 0.1)
    with pytest.raises(ShapeError):
        sgd_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, 0.1)


def test_init_is_seeded_and_bounded():
    a, b = SegNet.init(4, rng=9), SegNet.init(4, rng=9)
    assert digest(a) == digest(b)
    w = a.params["conv1.w"]
    assert np.abs(w).max() <= 1 / np.sqrt(9 * 16)
    assert not a.params["conv0.b"].any()


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    net = SegNet.init(6, 8, 2, rng=rng)
    head = ClsHead.init(net.latent_channels, 6, 8, 4, rng=rng)
    save_checkpoint(tmp_path / "m.bin", net, head, seed=11)
    net2, head2, header = load_checkpoint(tmp_path / "m.bin")
    assert digest(net, head) == digest(net2, head2)
    assert header["seed"] == 11 and header["C"] == 6 and header["F"] == 8
    img = rng.random((5, 5, 3))
    np.testing.assert_array_equal(net.predict(img), net2.predict(img))


def test_checkpoint_without_head(tmp_path):
    net = SegNet.init(3, 4, 1, rng=0)
    save_checkpoint(tmp_path / "m.bin", net)
    _, head, _ = load_checkpoint(tmp_path / "m.bin")
    assert head is None


def test_checkpoint_rejects_foreign_file(tmp_path):
    from mlsl.grid import write_framed

    write_framed(tmp_path / "x.bin", {"format": "other"}, b"")
    with pytest.raises(ValueError, match="not an mlsl checkpoint"):
        load_checkpoint(tmp_path / "x.bin")
