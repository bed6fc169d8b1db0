import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_cameras, random_feature_maps, random_scene, reference_lift
from semsplat.core import Camera, FeatureMap, GaussianScene
from semsplat.lifter import LiftAccumulator, accumulate_view, finalize, lift
from semsplat.raster import ViewWeights, marginal_weights


def records(view, idx, w):
    idx = np.asarray(idx)
    zeros = np.zeros(len(idx), dtype=np.int64)
    return ViewWeights(view, idx, np.asarray(w, dtype=float), zeros, zeros)


def fmap(view, values):
    return FeatureMap(view, 1, np.asarray(values, dtype=float).reshape(1, 1, -1))


def test_accumulate_empty_records():
    acc = LiftAccumulator.zeros(3, 2)
    out = accumulate_view(acc, ViewWeights.empty(0), fmap(0, [1, 2]))
    assert not out.sum_w.any() and not out.sum_wf.any() and not out.sum_wf2.any()


def test_accumulate_one_record():
    out = accumulate_view(LiftAccumulator.zeros(1, 2), records(0, [0], [0.5]), fmap(0, [1, 2]))
    np.testing.assert_array_equal(out.sum_w, [0.5])
    np.testing.assert_array_equal(out.sum_wf, [[0.5, 1.0]])
    np.testing.assert_array_equal(out.sum_wf2, [[0.5, 2.0]])


def test_accumulate_linear():
    rec, fm = records(0, [0], [0.5]), fmap(0, [1, 2])
    once = accumulate_view(LiftAccumulator.zeros(1, 2), rec, fm)
    twice = accumulate_view(once, rec, fm)
    np.testing.assert_array_equal(twice.sum_wf, 2 * once.sum_wf)
    np.testing.assert_array_equal(twice.sum_wf2, 2 * once.sum_wf2)


def test_accumulate_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        accumulate_view(LiftAccumulator.zeros(1, 3), records(0, [0], [0.5]), fmap(0, [1, 2]))


def test_finalize_single_view():
    acc = accumulate_view(LiftAccumulator.zeros(1, 2), records(0, [0], [0.5]), fmap(0, [1, 2]))
    f = finalize(acc, 1)
    np.testing.assert_array_equal(f.features, [[1, 2]])
    np.testing.assert_array_equal(f.variance, [[0, 0]])


def test_finalize_two_views():
    acc = LiftAccumulator.zeros(1, 1)
    acc = accumulate_view(acc, records(0, [0], [1.0]), fmap(0, [2.0]))
    acc = accumulate_view(acc, records(1, [0], [3.0]), fmap(1, [6.0]))
    f = finalize(acc, 1)
    assert f.features[0, 0] == pytest.approx(5.0, abs=1e-12)
    assert f.variance[0, 0] == pytest.approx(3.0, abs=1e-12)


@given(st.lists(st.floats(1e-3, 1.0), min_size=1, max_size=6),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3))
@settings(max_examples=100, deadline=None)
def test_finalize_identical_samples_zero_variance(ws, feature):
    acc = LiftAccumulator.zeros(1, 3)
    for v, w in enumerate(ws):
        acc = accumulate_view(acc, records(v, [0], [w]), fmap(v, feature))
    f = finalize(acc, 1)
    assert np.all(f.variance >= 0)
    np.testing.assert_allclose(f.variance, 0, atol=1e-12 * (1 + max(abs(x) for x in feature)) ** 2)


def test_finalize_invalid_rows():
    acc = LiftAccumulator.zeros(2, 2)
    acc.sum_w[1] = 1e-7
    acc.sum_wf[1] = 1e-7
    f = finalize(acc, 2)
    assert list(f.valid) == [False, False]
    assert not f.features.any() and not f.variance.any()
    assert f.check(2) == []


def single_cam():
    return Camera(100, 100, 8, 8, 16, 16)


def test_lift_one_camera_centered():
    scene = GaussianScene([[0, 0, 2]], [[1, 0, 0, 0]], [[0.05] * 3], [0.9], [[0.5] * 3])
    data = np.arange(16 * 16 * 2, dtype=float).reshape(16, 16, 2)
    f = lift(scene, [single_cam()], [FeatureMap(0, 1, data)], 1)
    np.testing.assert_array_equal(f.features[0], data[8, 8])
    assert f.valid[0]


def test_lift_invisible_is_invalid():
    scene = GaussianScene([[0, 0, -2]], [[1, 0, 0, 0]], [[0.05] * 3], [0.9], [[0.5] * 3])
    f = lift(scene, [single_cam()], [FeatureMap(0, 1, np.ones((16, 16, 2)))], 1)
    assert not f.valid[0] and f.weight_mass[0] == 0


def test_lift_missing_view():
    scene = GaussianScene([[0, 0, 2]], [[1, 0, 0, 0]], [[0.05] * 3], [0.9], [[0.5] * 3])
    with pytest.raises(KeyError, match=r"view\(s\) \[1\]"):
        lift(scene, [single_cam(), single_cam()], [FeatureMap(0, 1, np.ones((16, 16, 2)))], 1)


@pytest.mark.parametrize("seed", range(10))
def test_lift_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 10)
    cams = random_cameras(rng, 4)
    maps = random_feature_maps(rng, cams, 5)
    f = lift(scene, cams, maps, 1)
    feats, var, mass, valid = reference_lift(scene, cams, maps)
    np.testing.assert_array_equal(f.valid, valid)
    np.testing.assert_allclose(f.features, feats, atol=1e-6)
    np.testing.assert_allclose(f.variance, var, atol=1e-6)
    np.testing.assert_allclose(f.weight_mass, mass, atol=1e-6)


def samples_per_gaussian(scene, cams, maps):
    out = [[] for _ in range(len(scene))]
    for v, cam in enumerate(cams):
        rec = marginal_weights(scene, cam, v)
        for i, px, py in zip(rec.index, rec.px, rec.py):
            out[i].append(maps[v].data[py, px])
    return out


@pytest.mark.parametrize("seed", range(5))
def test_lift_convexity_and_scaling(seed):
    rng = np.random.default_rng(50 + seed)
    scene = random_scene(rng, 10)
    cams = random_cameras(rng, 4)
    maps = random_feature_maps(rng, cams, 3)
    f = lift(scene, cams, maps, 1)
    for i, s in enumerate(samples_per_gaussian(scene, cams, maps)):
        if not s:
            continue
        s = np.array(s)
        assert np.all(f.features[i] >= s.min(0) - 1e-12) and np.all(f.features[i] <= s.max(0) + 1e-12)
        if len(s) == 1:
            assert not f.variance[i].any()
    c = -2.5
    scaled = lift(scene, cams, [FeatureMap(m.view_id, 1, c * m.data) for m in maps], 1)
    np.testing.assert_allclose(scaled.features, c * f.features, atol=1e-12)
    np.testing.assert_allclose(scaled.variance, c * c * f.variance, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_lift_view_order_invariant(seed):
    rng = np.random.default_rng(70 + seed)
    scene = random_scene(rng, 10)
    cams = random_cameras(rng, 4)
    maps = random_feature_maps(rng, cams, 3)
    a = lift(scene, cams, maps, 1)
    order = [2, 0, 3, 1]
    b = lift(scene, {v: cams[v] for v in order}, [maps[v] for v in order[::-1]], 1)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.variance, b.variance)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 1))
@settings(max_examples=100, deadline=None)
def test_popoviciu_bound(x, y, w):
    acc = LiftAccumulator.zeros(1, 1)
    acc = accumulate_view(acc, records(0, [0], [w]), fmap(0, [x]))
    acc = accumulate_view(acc, records(1, [0], [w]), fmap(1, [y]))
    var = finalize(acc, 1).variance[0, 0]
    assert 0 <= var <= (x - y) ** 2 / 4 + 1e-12
