import numpy as np
import pytest

from semsplat.core import validate_scene
from semsplat.evaluate import segment_3d, queries_for
from semsplat.lifter import lift
from semsplat.raster import marginal_weights
from semsplat.synth import (SynthConfig, corrupt_maps, generate_benchmark, generate_scene, interior_mask,
                            label_regions, random_prototypes, render_gt_feature_maps, render_label_weights,
                            ring_cameras, train_views)
from semsplat.synth import test_views as held_out_views


def small(**kw):
    base = dict(n_gaussians=400, n_classes=4, n_views=8, width=48, height=48, focal=48.0, feature_dim=16)
    base.update(kw)
    return SynthConfig(**base)


def test_two_class_scene():
    scene, truth, cams = generate_scene(small(n_classes=2, n_gaussians=100))
    assert set(truth.labels_at(1)) == {0, 1}
    assert np.all(np.isfinite(scene.bbox[0])) and np.all(np.isfinite(scene.bbox[1]))
    assert validate_scene(scene) == []


def test_same_seed_same_scene():
    a, ta, _ = generate_scene(small(seed=4))
    b, tb, _ = generate_scene(small(seed=4))
    assert a == b
    np.testing.assert_array_equal(ta.labels, tb.labels)
    c, _, _ = generate_scene(small(seed=5))
    assert not a == c


def test_ring_radius():
    cams = ring_cameras(SynthConfig(n_views=8))
    for cam in cams:
        assert np.linalg.norm(cam.center) == pytest.approx(4.0, abs=1e-12)
        np.testing.assert_allclose(cam.to_camera([[0, 0, 0]])[0, :2], 0, atol=1e-12)


def test_view_split():
    assert train_views(6) == [0, 2, 4] and held_out_views(6) == [1, 3, 5]


def test_every_gaussian_visible_twice():
    cfg = small()
    scene, _, cams = generate_scene(cfg)
    counts = np.zeros(len(scene), int)
    trained = np.zeros(len(scene), int)
    for v, cam in enumerate(cams):
        idx = marginal_weights(scene, cam, v).index
        counts[idx] += 1
        trained[idx] += v % 2 == 0
    assert counts.min() >= 2 and trained.min() >= 1


def test_visibility_unreachable():
    with pytest.raises(RuntimeError, match="more views"):
        generate_scene(small(n_views=1))


@pytest.mark.parametrize("seed", range(3))
def test_tree_and_prototypes(seed):
    cfg = small(seed=seed)
    _, truth, _ = generate_scene(cfg)
    assert truth.tree_violations() == 0
    for g in (1, 2, 3):
        P = truth.prototypes[g]
        assert P.shape == (cfg.n_labels(g), cfg.feature_dim)
        np.testing.assert_allclose(np.linalg.norm(P, axis=1), 1, atol=1e-6)
        cos = P @ P.T
        assert np.max(cos[~np.eye(len(P), dtype=bool)]) < 0.8


def test_prototypes_impossible():
    with pytest.raises(ValueError):
        random_prototypes(5, 1, np.random.default_rng(0))


def test_single_class_maps_are_parallel():
    cfg = small(n_classes=2, parts_per_class=1, subparts_per_part=1)
    scene, truth, cams = generate_scene(cfg)
    truth.labels[:] = 0
    truth.prototypes[1] = np.eye(2, cfg.feature_dim)
    for fm in render_gt_feature_maps(scene, truth, cams[:2], 1):
        covered = np.linalg.norm(fm.data, axis=2) > 0
        assert covered.any()
        assert not fm.data[covered][:, 1:].any()
        assert np.all(fm.data[covered][:, 0] > 0)


def test_empty_scene_maps_are_zero():
    cfg = small(n_gaussians=0)
    scene, truth, cams = generate_scene(cfg)
    for fm in render_gt_feature_maps(scene, truth, cams, 2):
        assert not fm.data.any()


def test_label_regions_four_connected():
    cov = np.zeros((3, 3, 2))
    cov[0, 0, 0] = cov[1, 1, 0] = 1.0  # diagonal neighbours: two regions
    cov[2, :, 1] = 1.0
    dom, regions = label_regions(cov)
    assert dom[0, 1] == -1
    assert [k for k, _ in regions] == [0, 0, 1]


@pytest.fixture(scope="module")
def bench():
    cfg = small(n_gaussians=2000, width=64, height=64, focal=64.0, seed=1)
    scene, truth, cams = generate_scene(cfg)
    cov = {g: render_label_weights(scene, truth, cams, g) for g in (1, 2, 3)}
    maps = {g: render_gt_feature_maps(scene, truth, cams, g, cov[g]) for g in (1, 2, 3)}
    return cfg, scene, truth, cams, cov, maps


def test_rho_zero_is_identity(bench):
    cfg, scene, truth, cams, cov, maps = bench
    out = corrupt_maps(maps[1], truth, cfg, cov[1])
    for a, b in zip(maps[1], out):
        np.testing.assert_array_equal(a.data, b.data)


def test_rho_one_swaps_everything():
    cfg = small(n_classes=2, parts_per_class=1, subparts_per_part=1, noise_rate=1.0, seed=2)
    scene, truth, cams = generate_scene(cfg)
    cov = render_label_weights(scene, truth, cams, 1)
    clean = render_gt_feature_maps(scene, truth, cams, 1, cov)
    noisy = corrupt_maps(clean, truth, cfg, cov)
    P = truth.prototypes[1]
    for fm, c in zip(noisy, cov):
        dom, _ = label_regions(c)
        # the dominant label's share moves to the other class, which already owns the rest
        expect = c.sum(axis=2)[..., None] * P[1 - np.maximum(dom, 0)]
        np.testing.assert_allclose(fm.data, expect, atol=1e-12)


@pytest.mark.parametrize("mode", ["blend", "dropout"])
def test_other_modes_change_maps(mode):
    cfg = small(noise_rate=1.0, noise_mode=mode)
    scene, truth, cams = generate_scene(cfg)
    cov = render_label_weights(scene, truth, cams[:1], 1)
    clean = render_gt_feature_maps(scene, truth, cams[:1], 1, cov)
    (noisy,) = corrupt_maps(clean, truth, cfg, cov)
    if mode == "dropout":
        pure = (cov[0] > 0).sum(axis=2) == 1
        assert pure.any() and not noisy.data[pure].any()
        assert np.all(np.linalg.norm(noisy.data, axis=2) <= np.linalg.norm(clean[0].data, axis=2) + 1e-12)
    else:
        assert not np.allclose(noisy.data, clean[0].data)


def test_corruption_is_seeded(bench):
    cfg, scene, truth, cams, cov, maps = bench
    noisy_cfg = small(noise_rate=0.5, seed=1)
    a = corrupt_maps(maps[2], truth, noisy_cfg, cov[2])
    b = corrupt_maps(maps[2], truth, noisy_cfg, cov[2])
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)


@pytest.mark.parametrize("g", [1, 2, 3])
def test_clean_lift_recovers_labels(bench, g):
    cfg, scene, truth, cams, cov, maps = bench
    field = lift(scene, cams, maps[g], g)
    inner = interior_mask(scene, truth, cams, g) & field.valid
    assert inner.sum() >= 50
    pred = segment_3d(field, queries_for(truth.prototypes[g], g))
    assert np.mean(pred[inner] == truth.labels_at(g)[inner]) >= 0.99
    var_norm = np.linalg.norm(field.variance[inner], axis=1)
    assert np.mean(var_norm < 1e-3) >= 0.99


def scene_mean_variance(cfg, rho):
    from dataclasses import replace
    b = generate_benchmark(replace(cfg, noise_rate=rho))
    f = lift(b.scene, b.train, [b.noisy[1][v] for v in b.train], 1)
    return float(np.linalg.norm(f.variance[f.valid], axis=1).mean())


def test_variance_grows_with_noise():
    cfg = small(n_gaussians=500, n_views=12)
    assert scene_mean_variance(cfg, 0.3) > scene_mean_variance(cfg, 0.0)


def test_variance_monotone_in_rho_over_seeds():
    rhos = [0.0, 0.1, 0.3, 0.5]
    means = np.mean([[scene_mean_variance(small(seed=s), r) for r in rhos] for s in range(5)], axis=0)
    assert np.all(np.diff(means) >= 0)


def test_benchmark_views():
    b = generate_benchmark(small(noise_rate=0.3))
    assert sorted(b.train) == [0, 2, 4, 6] and sorted(b.test) == [1, 3, 5, 7]
    assert len(b.noisy[3]) == 8 and b.noisy[3][0].data.shape == (48, 48, 16)
