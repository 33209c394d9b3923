import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlsl.grid import IGNORE
from mlsl.model import SegNet
from mlsl.pwl import (
    ClassSizeStats,
    PwlConfig,
    class_fraction,
    compute_source_stats,
    generate_pwl,
    source_image_labels,
)
from mlsl.sisc import SiscConfig, sisc_labels
from oracles import brute_source_stats


def test_hand_evaluated_class_size():
    a = np.array([[1, 0], [0, 0]])
    b = np.array([[1, 1], [1, 0]])
    stats = compute_source_stats([a, b], 3)
    assert stats.m[1] == 0.5
    assert stats.m[2] == 0.0 and stats.presence_counts[2] == 0
    assert stats.n_images == 2


def test_class_filling_one_image():
    stats = compute_source_stats([np.zeros((3, 3), int), np.ones((2, 2), int)], 2)
    assert stats.m[1] == 1.0 and stats.presence_counts[1] == 1


def test_mixed_image_sizes_use_per_image_fraction():
    stats = compute_source_stats([np.array([[0, 1]]), np.array([[1, 1, 1, 0]])], 2)
    assert stats.m[1] == pytest.approx((1 / 2 + 3 / 4) / 2, abs=0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_stats_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 6))
    h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    maps = [rng.integers(-1, c, size=(h, w)) for _ in range(int(rng.integers(1, 9)))]
    stats = compute_source_stats(maps, c)
    m, presence = brute_source_stats([x.tolist() for x in maps], c)
    assert stats.m.tolist() == m
    assert stats.presence_counts.tolist() == presence
    assert (stats.m >= 0).all() and (stats.m <= 1).all()


def test_class_fraction_examples():
    assert class_fraction(np.full((2, 2), IGNORE), 3).tolist() == [0, 0, 0]
    assert class_fraction(np.array([[0, 0], [0, 1]]), 3).tolist() == [0.75, 0.25, 0.0]
    lab = np.random.default_rng(0).integers(-1, 4, size=(5, 7))
    ref = [sum(1 for v in lab.ravel() if v == i) / 35 for i in range(4)]
    assert class_fraction(lab, 4).tolist() == ref


def test_generate_pwl_examples():
    assert generate_pwl(np.array([0.1, 0.001]), np.array([0.5, 0.5]), 0.05).tolist() == [1, 0]
    h = np.array([0.0, 1e-9, 0.3])
    assert generate_pwl(h, np.array([0.2, 0.2, 0.2]), 0.0).tolist() == [0, 1, 1]
    # unseen source class: threshold 0
    assert generate_pwl(np.array([0.01, 0.0]), np.array([0.0, 0.0]), 0.05).tolist() == [1, 0]
    # strict inequality at equality
    assert generate_pwl(np.array([0.025]), np.array([0.5]), 0.05).tolist() == [0]
    assert PwlConfig().eta == 0.05


def test_pwl_config_validation():
    with pytest.raises(ValueError):
        PwlConfig(eta=-0.1)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 100_000), e1=st.floats(0, 1), e2=st.floats(0, 1))
def test_pwl_monotone_in_eta(seed, e1, e2):
    rng = np.random.default_rng(seed)
    h, m = rng.random(6), rng.random(6)
    lo, hi = sorted((e1, e2))
    assert (generate_pwl(h, m, hi) <= generate_pwl(h, m, lo)).all()


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 100_000), k=st.integers(-6, 6))
def test_pwl_scale_invariance(seed, k):
    # power-of-two scaling is exact in binary floating point
    rng = np.random.default_rng(seed)
    h, m = rng.random(6), rng.random(6)
    s = 2.0**k
    assert (generate_pwl(h * s, m * s, 0.05) == generate_pwl(h, m, 0.05)).all()


def test_source_image_labels():
    assert source_image_labels(np.array([[0, 3], [3, 0]]), 5).tolist() == [1, 0, 0, 1, 0]
    assert source_image_labels(np.full((2, 2), IGNORE), 3).tolist() == [0, 0, 0]
    lab = np.random.default_rng(1).integers(-1, 6, size=(4, 4))
    assert source_image_labels(lab, 6).tolist() == [int(any(v == i for v in lab.ravel())) for i in range(6)]


def test_full_portion_fraction_sums_to_labeled_share():
    net = SegNet.init(4, 4, 1, rng=2)
    img = np.random.default_rng(2).random((10, 10, 3))
    labels, _, _ = sisc_labels(net.predict, img, SiscConfig(k=3, patch_h=5, patch_w=5), 1.0)
    frac = class_fraction(labels, 4)
    assert frac.sum() == pytest.approx(1.0 - np.mean(labels == IGNORE))
    assert frac.sum() <= 1.0


def test_stats_json_roundtrip(tmp_path):
    stats = compute_source_stats([np.array([[0, 1], [2, 2]])], 4)
    stats.save(tmp_path / "s.json", "abc")
    back = ClassSizeStats.load(tmp_path / "s.json")
    assert back.m.tolist() == stats.m.tolist()
    assert back.presence_counts.tolist() == [1, 1, 1, 0]
    import json

    doc = json.loads((tmp_path / "s.json").read_text())
    assert set(doc) == {"C", "N", "m", "presence_counts", "source_manifest_hash"}
