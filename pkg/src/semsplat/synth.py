"""Labeled synthetic scenes with controllable multi-view feature inconsistency.

Scenes are K ellipsoidal shells of surface Gaussians ("objects"). Each shell
is cut into parts by planes along one axis and parts into subparts along a
second axis, so the three label levels form a tree. Every class at every level
owns a unit prototype feature. Ground-truth maps alpha-blend prototypes; the
corruption step then rewrites whole connected label regions in single views,
the way a 2D segmenter mislabels a segment in some views but not others.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .core import GRANULARITIES, Camera, FeatureMap, GaussianScene
from .raster import Raster, marginal_weights, project_arrays, rasterize

NOISE_MODES = ("swap_class", "blend", "dropout")
MAX_PROTOTYPE_COSINE = 0.8
MAX_VISIBILITY_ATTEMPTS = 100
# residual transmittance above which background bleeds into a pixel
INTERIOR_MAX_TRANSMITTANCE = 0.05


@dataclass(frozen=True)
class SynthConfig:
    n_gaussians: int = 5000
    n_classes: int = 8
    n_views: int = 16
    width: int = 128
    height: int = 128
    feature_dim: int = 64
    parts_per_class: int = 2
    subparts_per_part: int = 2
    noise_rate: float = 0.0
    noise_mode: str = "swap_class"
    seed: int = 0
    camera_radius: float = 4.0
    camera_elevation_deg: float = 20.0
    focal: float = 128.0
    object_radius: float = 0.25
    gaussian_scale: float = 0.03

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_gaussians < 0 or self.n_views < 1:
            raise ValueError("n_gaussians must be >= 0 and n_views >= 1")
        if self.parts_per_class < 1 or self.subparts_per_part < 1:
            raise ValueError("parts_per_class and subparts_per_part must be >= 1")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")

    def n_labels(self, granularity: int) -> int:
        return {1: self.n_classes,
                2: self.n_classes * self.parts_per_class,
                3: self.n_classes * self.parts_per_class * self.subparts_per_part}[granularity]


@dataclass
class GroundTruth:
    labels: np.ndarray  # (N, 3) label per granularity, column g-1
    prototypes: Dict[int, np.ndarray]  # granularity -> (K_g, D) unit rows

    def labels_at(self, granularity: int) -> np.ndarray:
        return self.labels[:, granularity - 1]

    def n_labels(self, granularity: int) -> int:
        return len(self.prototypes[granularity])

    @property
    def dim(self) -> int:
        return next(iter(self.prototypes.values())).shape[1]

    def tree_violations(self) -> int:
        """Number of finer labels that map to more than one coarser label."""
        bad = 0
        for fine, coarse in ((2, 1), (3, 2)):
            f, c = self.labels_at(fine), self.labels_at(coarse)
            for lab in np.unique(f):
                bad += len(np.unique(c[f == lab])) > 1
        return bad


def train_views(n_views: int) -> List[int]:
    return list(range(0, n_views, 2))


def test_views(n_views: int) -> List[int]:
    return list(range(1, n_views, 2))


def random_prototypes(k: int, d: int, rng: np.random.Generator,
                      max_cos: float = MAX_PROTOTYPE_COSINE, attempts: int = 10000) -> np.ndarray:
    protos = np.zeros((0, d))
    for _ in range(attempts):
        if len(protos) == k:
            return protos
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        if len(protos) == 0 or np.max(protos @ v) < max_cos:
            protos = np.vstack([protos, v])
    if len(protos) == k:
        return protos
    raise ValueError(f"cannot draw {k} prototypes in {d} dimensions with pairwise cosine < {max_cos}")


def ring_cameras(config: SynthConfig) -> List[Camera]:
    """Cameras on a ring around the origin; elevation alternates in pairs so
    both the even (train) and odd (test) subsets see above and below."""
    cams = []
    for i in range(config.n_views):
        az = 2 * np.pi * i / config.n_views
        el = np.deg2rad(config.camera_elevation_deg) * (1 if (i // 2) % 2 == 0 else -1)
        eye = config.camera_radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera.look_at(eye, np.zeros(3), (0.0, 0.0, 1.0), config.focal, config.focal,
                                   config.width, config.height))
    return cams


def _random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return np.where(q[:, :1] < 0, -q, q)


def _object_centers(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    half = 1.0 - 1.3 * config.object_radius
    min_sep = 2.3 * config.object_radius
    for _ in range(1000):
        centers = []
        for _ in range(100 * config.n_classes):
            c = rng.uniform(-half, half, 3)
            if all(np.linalg.norm(c - o) >= min_sep for o in centers):
                centers.append(c)
                if len(centers) == config.n_classes:
                    return np.array(centers)
    raise ValueError("cannot place non-overlapping objects; reduce n_classes or object_radius")


class _Objects:
    """Shell geometry and label-splitting axes for every object."""

    def __init__(self, config: SynthConfig, rng: np.random.Generator):
        K = config.n_classes
        self.config = config
        self.centers = _object_centers(config, rng)
        self.radii = config.object_radius * rng.uniform(0.8, 1.2, (K, 3))
        self.part_axis = np.zeros((K, 3))
        self.sub_axis = np.zeros((K, 3))
        for k in range(K):
            a = rng.standard_normal(3)
            a /= np.linalg.norm(a)
            b = rng.standard_normal(3)
            b -= (b @ a) * a
            b /= np.linalg.norm(b)
            self.part_axis[k], self.sub_axis[k] = a, b
        self.colors = rng.uniform(0.1, 0.9, (K, 3))

    def sample(self, obj: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        d = rng.standard_normal((len(obj), 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.centers[obj] + d * self.radii[obj]

    def labels(self, obj: np.ndarray, mu: np.ndarray) -> np.ndarray:
        cfg = self.config
        P, S = cfg.parts_per_class, cfg.subparts_per_part
        rel = (mu - self.centers[obj]) / self.radii[obj]
        t1 = np.einsum("ij,ij->i", rel, self.part_axis[obj])
        t2 = np.einsum("ij,ij->i", rel, self.sub_axis[obj])
        part = np.clip(np.floor((t1 + 1) / 2 * P), 0, P - 1).astype(np.int64)
        sub = np.clip(np.floor((t2 + 1) / 2 * S), 0, S - 1).astype(np.int64)
        part_label = obj * P + part
        return np.stack([obj, part_label, part_label * S + sub], axis=1)


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _visibility(scene: GaussianScene, cams: Sequence[Camera]) -> np.ndarray:
    counts = np.zeros((len(scene), 2), dtype=np.int64)  # [all views, train views]
    train = set(train_views(len(cams)))
    for v, cam in enumerate(cams):
        rec = marginal_weights(scene, cam, v)
        counts[rec.index, 0] += 1
        if v in train:
            counts[rec.index, 1] += 1
    return counts


def generate_scene(config: SynthConfig) -> Tuple[GaussianScene, GroundTruth, List[Camera]]:
    """Build a scene whose every Gaussian is observed (weight >= tau_w) in at
    least two views, at least one of them a training (even) view.

    Values are rounded to float32 so the scene survives a file round trip
    unchanged.
    """
    rng = np.random.default_rng([config.seed, 0])
    objs = _Objects(config, rng)
    N, K = config.n_gaussians, config.n_classes
    obj = np.sort(np.arange(N) % K)
    mu = objs.sample(obj, rng)
    quat = _random_rotations(N, rng)
    scale = config.gaussian_scale * np.exp(rng.normal(0.0, 0.25, (N, 3)))
    opacity = rng.uniform(0.5, 0.95, N)
    rgb = np.clip(0.75 * objs.colors[obj] + rng.uniform(0, 0.25, (N, 3)), 0, 1)
    cams = ring_cameras(config)
    cams = [replace(c, rotation=_f32(c.rotation), translation=_f32(c.translation)) for c in cams]
    bbox = (-np.ones(3), np.ones(3))

    def build():
        return GaussianScene(_f32(mu), _f32(quat), _f32(scale), _f32(opacity), _f32(rgb), bbox)

    scene = build()
    for _ in range(MAX_VISIBILITY_ATTEMPTS):
        vis = _visibility(scene, cams)
        bad = np.flatnonzero((vis[:, 0] < 2) | (vis[:, 1] < 1))
        if not len(bad):
            break
        mu[bad] = objs.sample(obj[bad], rng)
        scene = build()
    else:
        raise RuntimeError(f"{len(bad)} Gaussians are observed in fewer than two views after "
                           f"{MAX_VISIBILITY_ATTEMPTS} attempts; use more views")
    q = np.linalg.norm(scene.quat, axis=1, keepdims=True)
    scene = GaussianScene(scene.mu, _f32(scene.quat / q), scene.scale, scene.opacity, scene.rgb, bbox)
    labels = objs.labels(obj, scene.mu)
    protos = {g: random_prototypes(config.n_labels(g), config.feature_dim,
                                   np.random.default_rng([config.seed, 1, g]))
              for g in GRANULARITIES}
    protos = {g: _f32(p) for g, p in protos.items()}
    return scene, GroundTruth(labels, protos), cams


def render_label_weights(scene: GaussianScene, truth: GroundTruth, cams: Sequence[Camera],
                         granularity: int, rasters: Sequence[Raster] | None = None) -> List[np.ndarray]:
    """Per view, the (H, W, K_g) blend weight each label contributes to each pixel."""
    K = truth.n_labels(granularity)
    onehot = np.zeros((len(scene), K))
    onehot[np.arange(len(scene)), truth.labels_at(granularity)] = 1.0
    out = []
    for v, cam in enumerate(cams):
        r = rasters[v] if rasters is not None else rasterize(scene, cam)
        out.append(np.asarray(r.weight_matrix() @ onehot).reshape(cam.height, cam.width, K))
    return out


def render_gt_feature_maps(scene: GaussianScene, truth: GroundTruth, cams: Sequence[Camera],
                           granularity: int, coverage: Sequence[np.ndarray] | None = None
                           ) -> List[FeatureMap]:
    if coverage is None:
        coverage = render_label_weights(scene, truth, cams, granularity)
    P = truth.prototypes[granularity]
    return [FeatureMap(v, granularity, cov @ P) for v, cov in enumerate(coverage)]


def label_regions(coverage: np.ndarray) -> Tuple[np.ndarray, List[Tuple[int, np.ndarray]]]:
    """Dominant-label map (-1 = background) and its 4-connected regions as
    (label, boolean mask) pairs, ordered by label then scan order."""
    total = coverage.sum(axis=2)
    dom = np.where(total > 0, np.argmax(coverage, axis=2), -1)
    regions = []
    for k in np.unique(dom):
        if k < 0:
            continue
        comp, n = ndimage.label(dom == k)
        for c in range(1, n + 1):
            regions.append((int(k), comp == c))
    return dom, regions


def corrupt_maps(maps: Sequence[FeatureMap], truth: GroundTruth, config: SynthConfig,
                 coverage: Sequence[np.ndarray]) -> List[FeatureMap]:
    """Independently per (view, connected label region), with probability
    ``noise_rate``, rewrite that label's contribution inside the region.

    ``coverage`` holds the per-view label weights the maps were rendered from.
    """
    rho = config.noise_rate
    if rho == 0:
        return [FeatureMap(m.view_id, m.granularity, m.data.copy()) for m in maps]
    out = []
    for fm, cov in zip(maps, coverage):
        g = fm.granularity
        P = truth.prototypes[g]
        K = len(P)
        rng = np.random.default_rng([config.seed, 2, g, fm.view_id])
        data = fm.data.copy()
        _, regions = label_regions(cov)
        for k, mask in regions:
            if rng.random() >= rho:
                continue
            other = int(rng.integers(K - 1))
            other += other >= k
            if config.noise_mode == "swap_class":
                new = P[other]
            elif config.noise_mode == "blend":
                new = 0.5 * P[k] + 0.5 * P[other]
            else:
                new = np.zeros_like(P[k])
            data[mask] += cov[mask, k][:, None] * (new - P[k])
        out.append(FeatureMap(fm.view_id, g, data))
    return out


def interior_mask(scene: GaussianScene, truth: GroundTruth, cams: Sequence[Camera],
                  granularity: int, views: Sequence[int] | None = None,
                  rasters: Dict[int, Raster] | None = None) -> np.ndarray:
    """Gaussians whose center pixel, in every view that observes them, blends
    only Gaussians of their own label and is saturated (background share at
    most INTERIOR_MAX_TRANSMITTANCE). Everything else is a boundary Gaussian."""
    labels = truth.labels_at(granularity)
    views = range(len(cams)) if views is None else views
    interior = np.ones(len(scene), dtype=bool)
    seen = np.zeros(len(scene), dtype=bool)
    for v in views:
        cam = cams[v]
        proj = project_arrays(scene, cam)
        r = rasters[v] if rasters is not None else rasterize(scene, cam, proj)
        rec = marginal_weights(scene, cam, v, raster=r, proj=proj)
        if not len(rec):
            continue
        npix = cam.height * cam.width
        lab = labels[r.index]
        lo = np.full(npix, np.iinfo(np.int64).max)
        hi = np.full(npix, -1)
        np.minimum.at(lo, r.pixel, lab)
        np.maximum.at(hi, r.pixel, lab)
        pix = rec.py * cam.width + rec.px
        own = labels[rec.index]
        ok = (lo[pix] == own) & (hi[pix] == own) & (r.transmittance[pix] <= INTERIOR_MAX_TRANSMITTANCE)
        interior[rec.index] &= ok
        seen[rec.index] = True
    return interior & seen


def generate_benchmark(config: SynthConfig):
    """Scene, truth, cameras, and per-granularity (clean, corrupted) maps and label coverage."""
    scene, truth, cams = generate_scene(config)
    rasters = [rasterize(scene, cam) for cam in cams]
    clean, noisy, coverage = {}, {}, {}
    for g in GRANULARITIES:
        coverage[g] = render_label_weights(scene, truth, cams, g, rasters)
        clean[g] = render_gt_feature_maps(scene, truth, cams, g, coverage[g])
        noisy[g] = corrupt_maps(clean[g], truth, config, coverage[g])
    return Benchmark(config, scene, truth, cams, rasters, clean, noisy, coverage)


@dataclass
class Benchmark:
    config: SynthConfig
    scene: GaussianScene
    truth: GroundTruth
    cams: List[Camera]
    rasters: List[Raster]
    clean: Dict[int, List[FeatureMap]]
    noisy: Dict[int, List[FeatureMap]]
    coverage: Dict[int, List[np.ndarray]]

    @property
    def train(self) -> Dict[int, Camera]:
        return {v: self.cams[v] for v in train_views(len(self.cams))}

    @property
    def test(self) -> Dict[int, Camera]:
        return {v: self.cams[v] for v in test_views(len(self.cams))}
