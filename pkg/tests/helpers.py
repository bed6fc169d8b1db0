"""Random small scenes and scalar reference implementations used as oracles.

The references here never call into the package's vectorized paths: they
project with per-Gaussian scalar math and composite every overlapping
Gaussian with no early termination.
"""

import math

import numpy as np

from semsplat.core import Camera, FeatureMap, GaussianScene
from semsplat.net import RegularizerModel


def random_scene(rng, n, spread=0.6, scale=(0.05, 0.2)):
    mu = rng.uniform(-spread, spread, (n, 3))
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    s = rng.uniform(*scale, (n, 3))
    op = rng.uniform(0.2, 0.99, n)
    rgb = rng.uniform(0, 1, (n, 3))
    return GaussianScene(mu, q, s, op, rgb)


def random_cameras(rng, m, size=16, radius=3.0):
    cams = []
    for _ in range(m):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        up = (0.0, 0.0, 1.0) if abs(d[2]) < 0.9 else (1.0, 0.0, 0.0)
        f = size * rng.uniform(0.9, 1.4)
        cams.append(Camera.look_at(radius * d, np.zeros(3), up, f, f, size, size))
    return cams


def random_feature_maps(rng, cams, dim, granularity=1):
    return [FeatureMap(v, granularity, rng.standard_normal((c.height, c.width, dim)))
            for v, c in enumerate(cams)]


def _rotmat(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def reference_project(scene, cam):
    """List of (index, u, depth, conic, opacity) for visible Gaussians, in depth order."""
    out = []
    for i in range(len(scene)):
        t = cam.rotation @ scene.mu[i] + cam.translation
        if t[2] < cam.znear:
            continue
        u = np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])
        if not (0 <= u[0] < cam.width and 0 <= u[1] < cam.height):
            continue
        R = _rotmat(scene.quat[i])
        cov3 = R @ np.diag(scene.scale[i] ** 2) @ R.T
        J = np.array([[cam.fx / t[2], 0, -cam.fx * t[0] / t[2] ** 2],
                      [0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2]])
        cov2 = J @ cam.rotation @ cov3 @ cam.rotation.T @ J.T + 0.3 * np.eye(2)
        out.append((i, u, t[2], np.linalg.inv(cov2), scene.opacity[i]))
    out.sort(key=lambda r: (r[2], r[0]))
    return out


def reference_pixel_weights(projected, px, py):
    """Composite every overlapping Gaussian at pixel (px, py), no early stop."""
    T = 1.0
    out = {}
    for i, u, _, conic, op in projected:
        d = np.array([px, py], dtype=float) - u
        m2 = d @ conic @ d
        if m2 > 9.0:
            continue
        a = min(op * math.exp(-0.5 * m2), 0.99)
        out[i] = a * T
        T *= 1 - a
    return out, T


def reference_marginal_weights(scene, cam):
    """index -> (weight at own center pixel, px, py); no visibility threshold."""
    proj = reference_project(scene, cam)
    out = {}
    for i, u, *_ in proj:
        px = min(max(int(math.floor(u[0] + 0.5)), 0), cam.width - 1)
        py = min(max(int(math.floor(u[1] + 0.5)), 0), cam.height - 1)
        w, _ = reference_pixel_weights(proj, px, py)
        out[i] = (w.get(i, 0.0), px, py)
    return out


def reference_lift(scene, cams, fmaps, tau_w=1e-4, tau_mass=1e-6):
    """Weighted mean and variance by an explicit loop over views and Gaussians."""
    n, d = len(scene), fmaps[0].dim
    feats, var, mass, valid = np.zeros((n, d)), np.zeros((n, d)), np.zeros(n), np.zeros(n, bool)
    samples = [[] for _ in range(n)]
    for v, cam in enumerate(cams):
        for i, (w, px, py) in reference_marginal_weights(scene, cam).items():
            if w >= tau_w:
                samples[i].append((w, fmaps[v].data[py, px].astype(float)))
    for i in range(n):
        sw = sum(w for w, _ in samples[i])
        mass[i] = sw
        if sw >= tau_mass:
            valid[i] = True
            mean = sum(w * f for w, f in samples[i]) / sw
            second = sum(w * f * f for w, f in samples[i]) / sw
            feats[i] = mean
            var[i] = np.maximum(second - mean ** 2, 0)
    return feats, var, mass, valid


def random_model(rng, cfg):
    return RegularizerModel(cfg, 0.5 * rng.standard_normal(cfg.n_params))


def preactivations(model, x):
    L = model.layers
    zs = [x @ L["w_in"].T + L["b_in"]]
    h = np.maximum(zs[0], 0)
    for k in range(model.config.blocks):
        z = h @ L[f"w1_{k}"].T + L[f"b1_{k}"]
        zs.append(z)
        h = h + np.maximum(z, 0) @ L[f"w2_{k}"].T + L[f"b2_{k}"]
    return np.concatenate([z.ravel() for z in zs])


def kink_free_case(rng, cfg, batch, margin=1e-3):
    """Random float64 model and inputs with every pre-activation at least
    ``margin`` away from the ReLU kink (resampled otherwise)."""
    for _ in range(1000):
        model = random_model(rng, cfg)
        x = rng.standard_normal((batch, 15))
        if np.abs(preactivations(model, x)).min() >= margin:
            return model, x
    raise RuntimeError("could not draw a kink-free case")


def fd_check(model, x, upstream, n_params=200, delta=1e-4, rng=None):
    _, cache = model.forward(x, keep=True)
    grad = model.backward(cache, upstream)
    idx = (rng or np.random.default_rng(0)).choice(model.config.n_params,
                                                   min(n_params, model.config.n_params), replace=False)
    worst = 0.0
    for j in idx:
        p = model.params.copy()
        model.params[j] = p[j] + delta
        up = np.sum(upstream * model.forward(x))
        model.params[j] = p[j] - delta
        down = np.sum(upstream * model.forward(x))
        model.params[:] = p
        fd = (up - down) / (2 * delta)
        worst = max(worst, abs(fd - grad[j]) / max(abs(fd), abs(grad[j]), 1e-8))
    return worst


def finite_difference(fn, x, delta=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += delta
        down[idx] -= delta
        g[idx] = (fn(up) - fn(down)) / (2 * delta)
    return g
