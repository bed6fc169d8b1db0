"""Segmentation and localization metrics for semantic fields, and the ablation grid."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .core import Camera, GaussianScene, SemanticField
from .raster import Raster, rasterize, render_features

UNASSIGNED = -1
RELEVANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class Query:
    prototype: np.ndarray
    label_id: int
    granularity: int

    def __post_init__(self):
        p = np.asarray(self.prototype, dtype=np.float64)
        if not np.linalg.norm(p) > 0:
            raise ValueError("query prototype must have nonzero norm")
        object.__setattr__(self, "prototype", p)


def queries_for(prototypes: np.ndarray, granularity: int) -> List[Query]:
    return [Query(p, k, granularity) for k, p in enumerate(prototypes)]


def _unit_rows(x: np.ndarray, floor: float = 0.0) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > floor, n, 1.0)


def cosine_table(features: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    return _unit_rows(np.asarray(features, dtype=np.float64)) @ _unit_rows(np.asarray(prototypes, dtype=np.float64)).T


def relevance_from_features(img: np.ndarray, prototype: np.ndarray) -> np.ndarray:
    """Cosine of each rendered pixel feature with ``prototype``; -1 where the
    rendered feature is (numerically) empty."""
    n = np.linalg.norm(img, axis=-1)
    q = prototype / np.linalg.norm(prototype)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = (img @ q) / n
    return np.where(n < RELEVANCE_FLOOR, -1.0, np.clip(rel, -1.0, 1.0))


def relevance_map(scene: GaussianScene, cam: Camera, field: SemanticField, query: Query,
                  raster: Raster | None = None) -> np.ndarray:
    if raster is None:
        raster = rasterize(scene, cam)
    feats = np.where(field.valid[:, None], field.features, 0.0)
    return relevance_from_features(render_features(raster, feats), query.prototype)


def segment_3d(field: SemanticField, queries: Sequence[Query]) -> np.ndarray:
    """Per-Gaussian argmax-cosine label; invalid rows are UNASSIGNED.

    np.argmax returns the first maximum, so ties go to the lowest label id."""
    order = sorted(queries, key=lambda q: q.label_id)
    P = np.stack([q.prototype for q in order])
    ids = np.array([q.label_id for q in order])
    labels = ids[np.argmax(cosine_table(field.features, P), axis=1)] if len(field) else np.zeros(0, int)
    return np.where(field.valid, labels, UNASSIGNED)


def miou(pred: np.ndarray, truth: np.ndarray, k_classes: int):
    """Per-class IoU (NaN for classes absent from both) and their mean."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    ious = np.full(k_classes, np.nan)
    for k in range(k_classes):
        p, t = pred == k, truth == k
        union = np.count_nonzero(p | t)
        if union:
            ious[k] = np.count_nonzero(p & t) / union
    present = ~np.isnan(ious)
    return ious, float(ious[present].mean()) if present.any() else float("nan")


def localize(relevance: np.ndarray, gt_region: np.ndarray) -> bool:
    """Hit iff the first (row-major) maximum of ``relevance`` lies in ``gt_region``."""
    region = np.asarray(gt_region, dtype=bool)
    if not region.any():
        raise ValueError("localization needs a nonempty ground-truth region")
    flat = int(np.argmax(relevance))
    return bool(region.reshape(-1)[flat])


def mean_cosine_to_prototype(field: SemanticField, prototypes: np.ndarray, labels: np.ndarray) -> float:
    """Mean cosine of every Gaussian's feature with its true class prototype
    (zero features, including invalid rows, score 0)."""
    f = np.where(field.valid[:, None], field.features, 0.0)
    P = _unit_rows(np.asarray(prototypes, dtype=np.float64))
    return float(np.mean(np.sum(_unit_rows(f, 1e-12) * P[labels], axis=1)))


@dataclass
class GranularityReport:
    granularity: int
    iou: np.ndarray
    miou: float
    macc: float
    cosine: float
    n_queries: int = 0


@dataclass
class EvalReport:
    per_granularity: Dict[int, GranularityReport]
    config: Dict[str, object] = field(default_factory=dict)

    @property
    def miou(self) -> float:
        return float(np.mean([r.miou for r in self.per_granularity.values()]))

    @property
    def macc(self) -> float:
        vals = [r.macc for r in self.per_granularity.values() if not np.isnan(r.macc)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def cosine(self) -> float:
        return float(np.mean([r.cosine for r in self.per_granularity.values()]))

    @property
    def per_class_iou(self) -> Dict[int, np.ndarray]:
        return {g: r.iou for g, r in self.per_granularity.items()}

    def lines(self) -> List[str]:
        out = [f"miou={self.miou:.6f}", f"macc={self.macc:.6f}", f"cosine={self.cosine:.6f}"]
        for g, r in sorted(self.per_granularity.items()):
            out += [f"g{g}.miou={r.miou:.6f}", f"g{g}.macc={r.macc:.6f}",
                    f"g{g}.cosine={r.cosine:.6f}", f"g{g}.queries={r.n_queries}"]
            out += [f"g{g}.iou.{k}={v:.6f}" for k, v in enumerate(r.iou) if not np.isnan(v)]
        out += [f"config.{k}={v}" for k, v in sorted(self.config.items())]
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def gt_regions(coverage: np.ndarray, min_coverage: float = 0.0) -> Dict[int, np.ndarray]:
    """Pixels whose dominant ground-truth label is k (with total opacity above
    ``min_coverage``), keyed by label.

    The default keeps faint silhouette pixels: their rendered feature points
    in the same direction as the object's interior, so excluding them would
    turn cosine ties into misses."""
    total = coverage.sum(axis=2)
    dom = np.where(total > min_coverage, np.argmax(coverage, axis=2), -1)
    return {int(k): dom == k for k in np.unique(dom) if k >= 0}


def evaluate_field(field: SemanticField, prototypes: np.ndarray, labels: np.ndarray,
                   scene: GaussianScene | None = None, cams: Mapping[int, Camera] | None = None,
                   coverage: Mapping[int, np.ndarray] | None = None,
                   rasters: Mapping[int, Raster] | None = None) -> GranularityReport:
    """3D segmentation metrics plus, when views are supplied, localization accuracy
    over every (view, class present in view) query."""
    g = field.granularity
    K = len(prototypes)
    pred = segment_3d(field, queries_for(prototypes, g))
    iou, m = miou(pred, labels, K)
    hits, n = 0, 0
    if cams is not None and coverage is not None:
        feats = np.where(field.valid[:, None], field.features, 0.0)
        P = _unit_rows(np.asarray(prototypes, dtype=np.float64))
        for v in sorted(cams):
            r = rasters[v] if rasters is not None else rasterize(scene, cams[v])
            img = render_features(r, feats)
            for k, region in gt_regions(coverage[v]).items():
                hits += localize(relevance_from_features(img, P[k]), region)
                n += 1
    macc = hits / n if n else float("nan")
    return GranularityReport(g, iou, m, macc, mean_cosine_to_prototype(field, prototypes, labels), n)


def evaluate(fields: Mapping[int, SemanticField], truth, scene: GaussianScene | None = None,
             cams: Mapping[int, Camera] | None = None,
             coverage: Mapping[int, Mapping[int, np.ndarray]] | None = None,
             rasters: Mapping[int, Raster] | None = None,
             config: Optional[Dict[str, object]] = None) -> EvalReport:
    """Evaluate one field per granularity against a synthetic ground truth."""
    reps = {}
    for g in sorted(fields):
        reps[g] = evaluate_field(fields[g], truth.prototypes[g], truth.labels_at(g), scene, cams,
                                 None if coverage is None else coverage[g], rasters)
    return EvalReport(reps, dict(config or {}))


ABLATION_ROWS = {
    "a": ("variance", "independent"),
    "b": ("equal", "shared"),
    "c": ("variance", "shared"),
}


@dataclass
class AblationReport:
    baseline: EvalReport
    rows: Dict[str, EvalReport]

    def lines(self) -> List[str]:
        out = [f"{'row':<9}{'weighting':<10}{'granularity':<13}{'mIoU':>8}{'mAcc':>8}{'cos':>8}",
               f"{'raw':<9}{'-':<10}{'-':<13}{self.baseline.miou:8.4f}{self.baseline.macc:8.4f}"
               f"{self.baseline.cosine:8.4f}"]
        for name, rep in self.rows.items():
            wm, gm = ABLATION_ROWS[name]
            out.append(f"{name + ')':<9}{wm:<10}{gm:<13}{rep.miou:8.4f}{rep.macc:8.4f}{rep.cosine:8.4f}")
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def ablation_grid(scene: GaussianScene, fields: Mapping[int, SemanticField], truth, config,
                  cams: Mapping[int, Camera] | None = None,
                  coverage: Mapping[int, Mapping[int, np.ndarray]] | None = None,
                  rasters: Mapping[int, Raster] | None = None) -> AblationReport:
    """Train the three weighting/granularity configurations on the same lifted
    fields and seed, and evaluate each next to the raw lifted baseline."""
    from dataclasses import replace

    from .trainer import regularize_all, train

    kw = dict(scene=scene, cams=cams, coverage=coverage, rasters=rasters)
    baseline = evaluate(fields, truth, **kw)
    rows = {}
    for name, (wm, gm) in ABLATION_ROWS.items():
        cfg = replace(config, weighting_mode=wm, granularity_mode=gm)
        result = train(scene, fields, cfg)
        rows[name] = evaluate(regularize_all(result, scene, fields), truth, **kw)
    return AblationReport(baseline, rows)
