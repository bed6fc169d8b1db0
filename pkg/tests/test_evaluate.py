import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semsplat.core import Camera, GaussianScene, SemanticField
from semsplat.evaluate import (UNASSIGNED, Query, ablation_grid, evaluate, gt_regions, localize, miou,
                               queries_for, relevance_from_features, relevance_map, segment_3d)
from semsplat.synth import SynthConfig, generate_benchmark
from semsplat.lifter import lift
from semsplat.trainer import TrainConfig


def field_of(features, valid=None, g=1):
    f = np.asarray(features, dtype=float)
    valid = np.ones(len(f), bool) if valid is None else np.asarray(valid)
    f = np.where(valid[:, None], f, 0.0)
    return SemanticField(g, f, np.zeros_like(f), valid.astype(float), valid)


def test_miou_identity():
    ious, m = miou([0, 1, 2, 2], [0, 1, 2, 2], 4)
    assert m == 1.0
    assert np.isnan(ious[3]) and np.all(ious[:3] == 1)


def test_miou_disjoint():
    assert miou([1, 1, 0, 0], [0, 0, 1, 1], 2)[1] == 0.0


def test_miou_set_arithmetic():
    ious, m = miou([0, 1, 1, 1], [0, 0, 1, 1], 2)
    np.testing.assert_allclose(ious, [1 / 2, 2 / 3])
    assert m == pytest.approx(7 / 12)


def test_miou_unassigned_counts_against():
    ious, _ = miou([UNASSIGNED, 0], [0, 0], 1)
    assert ious[0] == 0.5


@given(st.lists(st.integers(0, 3), min_size=1, max_size=40), st.randoms(use_true_random=False),
       st.permutations(range(4)))
@settings(max_examples=100, deadline=None)
def test_miou_relabel_invariant(truth, rnd, perm):
    truth = np.array(truth)
    pred = np.array([rnd.randrange(4) for _ in truth])
    perm = np.array(perm)
    assert miou(perm[pred], perm[truth], 4)[1] == pytest.approx(miou(pred, truth, 4)[1])


def test_segment_exact_prototype():
    P = np.eye(3)
    assert list(segment_3d(field_of(P[[2, 0, 1]]), queries_for(P, 1))) == [2, 0, 1]


def test_segment_ties_lowest_id():
    P = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert list(segment_3d(field_of([[2.0, 0.1]]), queries_for(P, 1))) == [0]


def test_segment_invalid_unassigned():
    out = segment_3d(field_of(np.eye(2), valid=[True, False]), queries_for(np.eye(2), 1))
    assert list(out) == [0, UNASSIGNED]


def test_segment_matches_cosine_table():
    rng = np.random.default_rng(0)
    F, P = rng.standard_normal((3, 5)), rng.standard_normal((4, 5))
    table = [[np.dot(f, p) / (np.linalg.norm(f) * np.linalg.norm(p)) for p in P] for f in F]
    assert list(segment_3d(field_of(F), queries_for(P, 1))) == [int(np.argmax(r)) for r in table]


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_segment_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    F, P = rng.standard_normal((6, 4)), rng.standard_normal((3, 4))
    scale = rng.uniform(0.01, 100, (6, 1))
    q = queries_for(P, 1)
    np.testing.assert_array_equal(segment_3d(field_of(F), q), segment_3d(field_of(F * scale), q))


def test_query_rejects_zero():
    with pytest.raises(ValueError):
        Query(np.zeros(3), 0, 1)


def test_localize_indicator():
    region = np.zeros((4, 4), bool)
    region[1:3, 1:3] = True
    assert localize(region.astype(float), region)


def test_localize_miss():
    region = np.zeros((4, 4), bool)
    region[0, 0] = True
    rel = np.zeros((4, 4))
    rel[3, 3] = 1
    assert not localize(rel, region)


@pytest.mark.parametrize("first_in_region", [True, False])
def test_localize_uniform(first_in_region):
    region = np.zeros((3, 3), bool)
    region[0 if first_in_region else 2, 0] = True
    assert localize(np.ones((3, 3)), region) == first_in_region


def test_localize_empty_region():
    with pytest.raises(ValueError):
        localize(np.ones((2, 2)), np.zeros((2, 2), bool))


def one_gaussian_view():
    scene = GaussianScene([[0, 0, 2]], [[1, 0, 0, 0]], [[0.1] * 3], [0.9], [[0.5] * 3])
    return scene, Camera(32, 32, 8, 8, 16, 16)


def test_relevance_same_prototype():
    scene, cam = one_gaussian_view()
    rel = relevance_map(scene, cam, field_of([[0.0, 2.0, 0.0]]), Query(np.array([0, 1.0, 0]), 0, 1))
    assert rel[8, 8] == pytest.approx(1.0)
    assert rel[0, 0] == -1.0


def test_relevance_orthogonal():
    scene, cam = one_gaussian_view()
    rel = relevance_map(scene, cam, field_of([[1.0, 0, 0]]), Query(np.array([0, 1.0, 0]), 0, 1))
    assert rel[8, 8] == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_relevance_bounded(seed):
    rng = np.random.default_rng(seed)
    img = rng.standard_normal((4, 4, 3)) * rng.uniform(0, 1e3)
    img[0, 0] = 0
    rel = relevance_from_features(img, rng.standard_normal(3))
    assert np.all((rel >= -1) & (rel <= 1))


def test_gt_regions_threshold():
    cov = np.zeros((2, 2, 2))
    cov[0, 0, 1] = 0.9
    cov[1, 1, 0] = 0.3
    regions = gt_regions(cov, min_coverage=0.5)
    assert list(regions) == [1] and regions[1][0, 0]
    assert sorted(gt_regions(cov)) == [0, 1]


@pytest.fixture(scope="module")
def tiny_bench():
    cfg = SynthConfig(n_gaussians=600, n_classes=3, n_views=6, width=40, height=40, focal=48.0,
                      feature_dim=8, noise_rate=0.0, seed=3)
    b = generate_benchmark(cfg)
    fields = {g: lift(b.scene, b.train, [b.noisy[g][v] for v in b.train], g) for g in (1, 2, 3)}
    return b, fields


def test_evaluate_report(tiny_bench):
    b, fields = tiny_bench
    test = b.test
    rep = evaluate(fields, b.truth, b.scene, test, {g: {v: b.coverage[g][v] for v in test} for g in fields},
                   {v: b.rasters[v] for v in test}, config={"seed": 3})
    assert rep.miou > 0.8 and 0 <= rep.macc <= 1 and rep.per_granularity[1].n_queries > 0
    text = rep.to_text()
    assert text.startswith("miou=") and "config.seed=3" in text
    assert all("=" in line for line in text.splitlines())


def test_ablation_on_clean_data(tiny_bench):
    b, fields = tiny_bench
    cfg = TrainConfig(epochs=4, hidden=32, blocks=1, batch_size=256)
    a = ablation_grid(b.scene, fields, b.truth, cfg)
    assert set(a.rows) == {"a", "b", "c"}
    lines = a.lines()
    assert lines[1].startswith("raw") and len(lines) == 5
    again = ablation_grid(b.scene, fields, b.truth, cfg)
    assert again.baseline.to_text() == a.baseline.to_text()
    assert again.to_text() == a.to_text()
