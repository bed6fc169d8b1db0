"""Training-free lifting of 2D feature maps onto Gaussians.

Each Gaussian receives the weighted mean of the features sampled at its
projected center over the views that observe it, using its marginal blend
weight in each view. The weighted second moment gives a per-dimension
variance that serves as a confidence score.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Sequence, Union

import numpy as np

from .core import TAU_MASS, Camera, FeatureMap, GaussianScene, SemanticField, check_granularity
from .raster import ViewWeights, marginal_weights


@dataclass
class LiftAccumulator:
    sum_w: np.ndarray  # (N,)
    sum_wf: np.ndarray  # (N, D)
    sum_wf2: np.ndarray  # (N, D)

    @classmethod
    def zeros(cls, n: int, d: int) -> "LiftAccumulator":
        return cls(np.zeros(n), np.zeros((n, d)), np.zeros((n, d)))

    @property
    def dim(self) -> int:
        return self.sum_wf.shape[1]

    def copy(self) -> "LiftAccumulator":
        return LiftAccumulator(self.sum_w.copy(), self.sum_wf.copy(), self.sum_wf2.copy())

    def merge(self, other: "LiftAccumulator") -> "LiftAccumulator":
        return LiftAccumulator(self.sum_w + other.sum_w, self.sum_wf + other.sum_wf,
                               self.sum_wf2 + other.sum_wf2)


def accumulate_view(acc: LiftAccumulator, records: ViewWeights, fmap: FeatureMap) -> LiftAccumulator:
    """Add one view's weighted samples; returns a new accumulator."""
    if fmap.dim != acc.dim:
        raise ValueError(f"feature dimension mismatch: map for view {fmap.view_id} has D={fmap.dim}, "
                         f"accumulator has D={acc.dim}")
    out = acc.copy()
    if not len(records):
        return out
    if records.view_id != fmap.view_id:
        raise ValueError(f"weights for view {records.view_id} paired with feature map of view {fmap.view_id}")
    F = np.asarray(fmap.data[records.py, records.px], dtype=np.float64)
    w = records.weight
    # indices are unique within one view
    out.sum_w[records.index] += w
    out.sum_wf[records.index] += w[:, None] * F
    out.sum_wf2[records.index] += w[:, None] * F * F
    return out


def finalize(acc: LiftAccumulator, granularity: int, tau_mass: float = TAU_MASS) -> SemanticField:
    valid = acc.sum_w >= tau_mass
    feats = np.zeros_like(acc.sum_wf)
    var = np.zeros_like(acc.sum_wf2)
    w = acc.sum_w[valid, None]
    feats[valid] = acc.sum_wf[valid] / w
    var[valid] = np.maximum(acc.sum_wf2[valid] / w - feats[valid] ** 2, 0.0)
    return SemanticField(granularity, feats, var, acc.sum_w.copy(), valid)


def _as_view_dict(cams: Union[Mapping[int, Camera], Sequence[Camera]]) -> Dict[int, Camera]:
    if isinstance(cams, Mapping):
        return {int(k): v for k, v in cams.items()}
    return dict(enumerate(cams))


def view_weights(scene: GaussianScene, cams) -> Dict[int, ViewWeights]:
    """Marginal weights for every view; reusable across granularities."""
    return {v: marginal_weights(scene, cam, v) for v, cam in sorted(_as_view_dict(cams).items())}


def lift(scene: GaussianScene, cams, fmaps: Iterable[FeatureMap], granularity: int,
         weights: Mapping[int, ViewWeights] | None = None) -> SemanticField:
    """Lift the feature maps of one granularity onto ``scene``.

    ``cams`` is a sequence (position = view id) or a mapping view id -> Camera;
    only those views are used. Views are folded in ascending view id.
    """
    granularity = check_granularity(granularity)
    views = _as_view_dict(cams)
    by_view: Dict[int, FeatureMap] = {}
    for fm in fmaps:
        if fm.granularity == granularity and fm.view_id in views:
            by_view[fm.view_id] = fm
    missing = sorted(set(views) - set(by_view))
    if missing:
        raise KeyError(f"no granularity-{granularity} feature map for view(s) {missing}")
    if not views:
        raise ValueError("lift needs at least one view")
    dims = {fm.dim for fm in by_view.values()}
    if len(dims) != 1:
        raise ValueError(f"feature maps disagree on feature dimension: {sorted(dims)}")
    acc = LiftAccumulator.zeros(len(scene), dims.pop())
    for v in sorted(views):
        cam, fm = views[v], by_view[v]
        if not fm.matches(cam):
            raise ValueError(f"feature map for view {v} is {fm.height}x{fm.width}, "
                             f"camera is {cam.height}x{cam.width}")
        rec = weights[v] if weights is not None else marginal_weights(scene, cam, v)
        acc = accumulate_view(acc, rec, fm)
    return finalize(acc, granularity)
