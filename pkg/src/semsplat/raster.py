"""Projection of Gaussians into a pinhole view and front-to-back alpha compositing.

Pixel ``(px, py)`` is sampled at image coordinate ``(px, py)``; a projected
center ``u`` maps to pixel ``floor(u + 0.5)`` clamped to the image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .core import Camera, FeatureMap, GaussianScene, SemanticField

LOWPASS = 0.3  # px^2 added to the projected covariance diagonal
ALPHA_MAX = 0.99
T_MIN = 1e-4  # compositing stops once transmittance falls below this
TAU_W = 1e-4  # minimum marginal weight for a view to count as observing a Gaussian
FOOTPRINT_SIGMA = 3.0


@dataclass(frozen=True)
class ProjectedGaussian:
    index: int
    u: np.ndarray
    depth: float
    cov2d: np.ndarray
    opacity: float

    @property
    def conic(self) -> np.ndarray:
        return np.linalg.inv(self.cov2d)

    def mahalanobis2(self, p) -> float:
        d = np.asarray(p, dtype=np.float64) - self.u
        return float(d @ self.conic @ d)

    def overlaps(self, p) -> bool:
        return self.mahalanobis2(p) <= FOOTPRINT_SIGMA ** 2

    def alpha_at(self, p, alpha_max: float = ALPHA_MAX) -> float:
        a = self.opacity * np.exp(-0.5 * self.mahalanobis2(p))
        return float(min(max(a, 0.0), alpha_max))


@dataclass
class Projection:
    """Visible Gaussians of one view in depth order (ties by index)."""

    index: np.ndarray  # (K,) scene indices
    u: np.ndarray  # (K, 2)
    depth: np.ndarray  # (K,)
    cov2d: np.ndarray  # (K, 2, 2)
    opacity: np.ndarray  # (K,)

    def __len__(self) -> int:
        return len(self.index)

    @property
    def conic(self) -> np.ndarray:
        a, b, c = self.cov2d[:, 0, 0], self.cov2d[:, 0, 1], self.cov2d[:, 1, 1]
        det = a * c - b * b
        inv = np.empty_like(self.cov2d)
        inv[:, 0, 0] = c / det
        inv[:, 0, 1] = inv[:, 1, 0] = -b / det
        inv[:, 1, 1] = a / det
        return inv

    def as_list(self) -> List[ProjectedGaussian]:
        return [ProjectedGaussian(int(self.index[k]), self.u[k], float(self.depth[k]),
                                  self.cov2d[k], float(self.opacity[k]))
                for k in range(len(self))]


def center_pixels(u: np.ndarray, cam: Camera) -> Tuple[np.ndarray, np.ndarray]:
    px = np.clip(np.floor(u[:, 0] + 0.5), 0, cam.width - 1).astype(np.int64)
    py = np.clip(np.floor(u[:, 1] + 0.5), 0, cam.height - 1).astype(np.int64)
    return px, py


def project_arrays(scene: GaussianScene, cam: Camera) -> Projection:
    t = cam.to_camera(scene.mu)
    z = t[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ux = cam.fx * t[:, 0] / z + cam.cx
        uy = cam.fy * t[:, 1] / z + cam.cy
    keep = (z >= cam.znear) & (ux >= 0) & (ux < cam.width) & (uy >= 0) & (uy < cam.height)
    idx = np.nonzero(keep)[0]
    idx = idx[np.lexsort((idx, z[idx]))]
    tx, ty, tz = t[idx, 0], t[idx, 1], z[idx]
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * tx / tz ** 2
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * ty / tz ** 2
    M = J @ cam.rotation
    cov3 = scene.covariances()[idx]
    cov2 = M @ cov3 @ np.swapaxes(M, 1, 2)
    cov2 = 0.5 * (cov2 + np.swapaxes(cov2, 1, 2))
    cov2[:, 0, 0] += LOWPASS
    cov2[:, 1, 1] += LOWPASS
    u = np.stack([ux[idx], uy[idx]], axis=1)
    return Projection(idx, u, tz, cov2, scene.opacity[idx].copy())


def project(scene: GaussianScene, cam: Camera) -> List[ProjectedGaussian]:
    """Visible Gaussians (in front of znear, center inside the image), sorted by depth."""
    return project_arrays(scene, cam).as_list()


def weights_at_pixel(projected: Sequence[ProjectedGaussian], pixel,
                     alpha_max: float = ALPHA_MAX) -> List[Tuple[int, float]]:
    """Front-to-back weights ``alpha_i * T_i`` of the Gaussians overlapping ``pixel``.

    ``projected`` must already be in depth order.
    """
    out = []
    T = 1.0
    for g in projected:
        if not g.overlaps(pixel):
            continue
        if T < T_MIN:
            break
        a = g.alpha_at(pixel, alpha_max)
        out.append((g.index, a * T))
        T = T * (1.0 - a)
    return out


@dataclass
class Raster:
    """All (pixel, Gaussian) overlap pairs of one view with their blend weights.

    Pairs are ordered by pixel, then depth. Pairs skipped by early termination
    are not stored.
    """

    height: int
    width: int
    n_gaussians: int
    pixel: np.ndarray  # flat pixel id py * width + px
    index: np.ndarray  # scene index
    rank: np.ndarray  # position in the view's depth order
    alpha: np.ndarray
    weight: np.ndarray
    transmittance: np.ndarray  # (H*W,) residual after the last blended Gaussian

    def weight_matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weight, (self.pixel, self.index)),
                             shape=(self.height * self.width, self.n_gaussians))

    def coverage(self) -> np.ndarray:
        """Total blend weight per pixel, (H, W)."""
        return np.bincount(self.pixel, weights=self.weight,
                           minlength=self.height * self.width).reshape(self.height, self.width)


def _footprint_pairs(proj: Projection, cam: Camera):
    """Enumerate pixels inside every Gaussian's 3-sigma ellipse."""
    r = FOOTPRINT_SIGMA
    ext_x = r * np.sqrt(proj.cov2d[:, 0, 0])
    ext_y = r * np.sqrt(proj.cov2d[:, 1, 1])
    x0 = np.clip(np.ceil(proj.u[:, 0] - ext_x), 0, cam.width - 1).astype(np.int64)
    x1 = np.clip(np.floor(proj.u[:, 0] + ext_x), 0, cam.width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(proj.u[:, 1] - ext_y), 0, cam.height - 1).astype(np.int64)
    y1 = np.clip(np.floor(proj.u[:, 1] + ext_y), 0, cam.height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    rank = np.repeat(np.arange(len(proj)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[rank] + local % nx[rank]
    py = y0[rank] + local // nx[rank]
    dx = px - proj.u[rank, 0]
    dy = py - proj.u[rank, 1]
    conic = proj.conic
    m2 = (conic[rank, 0, 0] * dx * dx + 2 * conic[rank, 0, 1] * dx * dy
          + conic[rank, 1, 1] * dy * dy)
    keep = m2 <= r * r
    return rank[keep], px[keep], py[keep], m2[keep]


def rasterize(scene: GaussianScene, cam: Camera, proj: Projection | None = None) -> Raster:
    if proj is None:
        proj = project_arrays(scene, cam)
    npix = cam.height * cam.width
    rank, px, py, m2 = _footprint_pairs(proj, cam)
    pixel = py * cam.width + px
    order = np.lexsort((rank, pixel))
    rank, pixel, m2 = rank[order], pixel[order], m2[order]
    alpha = np.minimum(proj.opacity[rank] * np.exp(-0.5 * m2), ALPHA_MAX)

    # Composite one depth layer at a time across all pixels: the per-pixel
    # product order is exactly that of weights_at_pixel.
    starts = np.flatnonzero(np.r_[True, pixel[1:] != pixel[:-1]]) if len(pixel) else np.zeros(0, int)
    seg_len = np.diff(np.r_[starts, len(pixel)])
    layer = np.arange(len(pixel)) - np.repeat(starts, seg_len)
    by_layer = np.argsort(layer, kind="stable")
    layer_bounds = np.searchsorted(layer[by_layer], np.arange(layer.max() + 2 if len(layer) else 1))
    T = np.ones(npix)
    weight = np.zeros(len(pixel))
    blended = np.zeros(len(pixel), dtype=bool)
    for k in range(len(layer_bounds) - 1):
        sel = by_layer[layer_bounds[k]:layer_bounds[k + 1]]
        pix = pixel[sel]
        Tb = T[pix]
        live = Tb >= T_MIN
        sel, pix, Tb = sel[live], pix[live], Tb[live]
        a = alpha[sel]
        weight[sel] = a * Tb
        blended[sel] = True
        T[pix] = Tb * (1.0 - a)
    return Raster(cam.height, cam.width, len(scene), pixel[blended], proj.index[rank[blended]],
                  rank[blended], alpha[blended], weight[blended], T)


@dataclass(frozen=True)
class WeightRecord:
    gaussian_index: int
    view_id: int
    weight: float


@dataclass
class ViewWeights:
    """Marginal weights of the Gaussians observed in one view, with the pixel
    each weight was evaluated at (where the feature is sampled too)."""

    view_id: int
    index: np.ndarray
    weight: np.ndarray
    px: np.ndarray
    py: np.ndarray

    def __len__(self) -> int:
        return len(self.index)

    def __iter__(self) -> Iterator[WeightRecord]:
        for i, w in zip(self.index.tolist(), self.weight.tolist()):
            yield WeightRecord(i, self.view_id, w)

    @classmethod
    def empty(cls, view_id: int = 0) -> "ViewWeights":
        z = np.zeros(0, dtype=np.int64)
        return cls(view_id, z, np.zeros(0), z, z)


def marginal_weights(scene: GaussianScene, cam: Camera, view_id: int = 0,
                     raster: Raster | None = None, proj: Projection | None = None,
                     tau_w: float = TAU_W) -> ViewWeights:
    """Each visible Gaussian's blend weight at its own center pixel.

    Gaussians whose weight falls below ``tau_w`` are treated as unobserved in
    this view and dropped.
    """
    if proj is None:
        proj = project_arrays(scene, cam)
    if raster is None:
        raster = rasterize(scene, cam, proj)
    if not len(proj):
        return ViewWeights.empty(view_id)
    px, py = center_pixels(proj.u, cam)
    n_vis = len(proj)
    keys = raster.pixel * n_vis + raster.rank
    query = (py * cam.width + px) * n_vis + np.arange(n_vis)
    pos = np.minimum(np.searchsorted(keys, query), max(len(keys) - 1, 0))
    found = (keys[pos] == query) if len(keys) else np.zeros(n_vis, dtype=bool)
    w = np.where(found, raster.weight[pos] if len(keys) else 0.0, 0.0)
    keep = w >= tau_w
    order = np.argsort(proj.index[keep], kind="stable")
    return ViewWeights(view_id, proj.index[keep][order], w[keep][order],
                       px[keep][order], py[keep][order])


def render_features(raster: Raster, features: np.ndarray) -> np.ndarray:
    """Alpha-blend per-Gaussian rows of ``features`` into an (H, W, D) image."""
    img = raster.weight_matrix() @ np.asarray(features, dtype=np.float64)
    return np.asarray(img).reshape(raster.height, raster.width, -1)


def render_feature_map(scene: GaussianScene, cam: Camera, field: SemanticField,
                       view_id: int = 0, raster: Raster | None = None) -> FeatureMap:
    if raster is None:
        raster = rasterize(scene, cam)
    feats = np.where(field.valid[:, None], field.features, 0.0)
    return FeatureMap(view_id, field.granularity, render_features(raster, feats))
