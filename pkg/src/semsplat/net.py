"""Conditional residual MLP mapping Gaussian attributes plus a granularity
scalar to a semantic feature vector, with exact reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .core import GaussianScene, check_granularity

IN_DIM = 15
# input channel layout
POS = slice(0, 3)
OPACITY = 3
QUAT = slice(4, 8)
LOG_SCALE = slice(8, 11)
RGB = slice(11, 14)
GRAN = 14


@dataclass(frozen=True)
class MlpConfig:
    in_dim: int = IN_DIM
    hidden: int = 256
    blocks: int = 3
    out_dim: int = 512

    def __post_init__(self):
        for name in ("in_dim", "hidden", "out_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")

    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        H = self.hidden
        shapes = [("w_in", (H, self.in_dim)), ("b_in", (H,))]
        for k in range(self.blocks):
            shapes += [(f"w1_{k}", (H, H)), (f"b1_{k}", (H,)),
                       (f"w2_{k}", (H, H)), (f"b2_{k}", (H,))]
        shapes += [("w_out", (self.out_dim, H)), ("b_out", (self.out_dim,))]
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())


@dataclass
class NormStats:
    """Per-channel affine normalization, x_norm = (x_raw - shift) / scale."""

    shift: np.ndarray = field(default_factory=lambda: np.zeros(IN_DIM))
    scale: np.ndarray = field(default_factory=lambda: np.ones(IN_DIM))

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=np.float64).reshape(IN_DIM)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(IN_DIM)
        if np.any(self.scale <= 0):
            raise ValueError("normalization scales must be positive")

    @classmethod
    def from_scene(cls, scene: GaussianScene) -> "NormStats":
        shift = np.zeros(IN_DIM)
        scale = np.ones(IN_DIM)
        lo, hi = scene.bbox
        shift[POS] = 0.5 * (lo + hi)
        scale[POS] = np.maximum(0.5 * (hi - lo), 1e-6)
        if len(scene):
            ls = np.log(scene.scale)
            shift[LOG_SCALE] = ls.mean(axis=0)
            scale[LOG_SCALE] = np.maximum(ls.std(axis=0), 1e-6)
        # float32-representable so checkpoints reload bit-identically
        return cls(shift.astype(np.float32), scale.astype(np.float32))


def raw_inputs(scene: GaussianScene, granularity: int) -> np.ndarray:
    g = check_granularity(granularity)
    n = len(scene)
    x = np.empty((n, IN_DIM))
    x[:, POS] = scene.mu
    x[:, OPACITY] = scene.opacity
    q = scene.quat / np.linalg.norm(scene.quat, axis=1, keepdims=True)
    x[:, QUAT] = np.where(q[:, :1] < 0, -q, q)
    x[:, LOG_SCALE] = np.log(scene.scale)
    x[:, RGB] = scene.rgb
    x[:, GRAN] = g - 2
    return x


def encode_scene(scene: GaussianScene, granularity: int, stats: NormStats) -> np.ndarray:
    """Normalized (N, 15) network inputs for every Gaussian at one granularity."""
    return (raw_inputs(scene, granularity) - stats.shift) / stats.scale


def encode_input(g, granularity: int, stats: NormStats) -> np.ndarray:
    return encode_scene(GaussianScene.from_gaussians([g]), granularity, stats)[0]


class RegularizerModel:
    """Parameters live in one flat vector; per-layer arrays are views into it."""

    def __init__(self, config: MlpConfig, params: np.ndarray, norm_stats: NormStats | None = None,
                 seed: int = 0):
        params = np.asarray(params)
        if params.ndim != 1 or params.size != config.n_params:
            raise ValueError(f"expected {config.n_params} parameters, got {params.size}")
        self.config = config
        self.params = params
        self.norm_stats = norm_stats if norm_stats is not None else NormStats()
        self.seed = int(seed)

    @property
    def dtype(self):
        return self.params.dtype

    def unflatten(self, flat: np.ndarray) -> Dict[str, np.ndarray]:
        out, off = {}, 0
        for name, shape in self.config.layout():
            n = int(np.prod(shape))
            out[name] = flat[off:off + n].reshape(shape)
            off += n
        return out

    @property
    def layers(self) -> Dict[str, np.ndarray]:
        return self.unflatten(self.params)

    def copy(self) -> "RegularizerModel":
        return RegularizerModel(self.config, self.params.copy(), self.norm_stats, self.seed)

    def astype(self, dtype) -> "RegularizerModel":
        return RegularizerModel(self.config, self.params.astype(dtype), self.norm_stats, self.seed)

    def forward(self, inputs: np.ndarray, keep: bool = False):
        """Map (B, in_dim) inputs to (B, out_dim).

        With ``keep=True`` also returns the activation cache ``backward`` needs.
        """
        x = np.asarray(inputs, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.config.in_dim:
            raise ValueError(f"inputs must be (B, {self.config.in_dim}), got {x.shape}")
        L = self.layers
        h = np.maximum(x @ L["w_in"].T + L["b_in"], 0)
        cache = [x, h]
        for k in range(self.config.blocks):
            a = np.maximum(h @ L[f"w1_{k}"].T + L[f"b1_{k}"], 0)
            h = h + a @ L[f"w2_{k}"].T + L[f"b2_{k}"]
            cache += [a, h]
        out = h @ L["w_out"].T + L["b_out"]
        return (out, cache) if keep else out

    def backward(self, cache: list, upstream: np.ndarray) -> np.ndarray:
        """Gradient of sum(upstream * output) with respect to the flat parameters."""
        x = cache[0]
        g = np.asarray(upstream, dtype=self.dtype)
        if g.shape != (x.shape[0], self.config.out_dim):
            raise ValueError(f"upstream must be ({x.shape[0]}, {self.config.out_dim}), got {g.shape}")
        L = self.layers
        grad = np.zeros_like(self.params)
        G = self.unflatten(grad)
        h = cache[-1]
        G["w_out"][...] = g.T @ h
        G["b_out"][...] = g.sum(axis=0)
        dh = g @ L["w_out"]
        for k in reversed(range(self.config.blocks)):
            a, h_in = cache[2 + 2 * k], cache[1 + 2 * k]
            G[f"w2_{k}"][...] = dh.T @ a
            G[f"b2_{k}"][...] = dh.sum(axis=0)
            da = (dh @ L[f"w2_{k}"]) * (a > 0)
            G[f"w1_{k}"][...] = da.T @ h_in
            G[f"b1_{k}"][...] = da.sum(axis=0)
            dh = dh + da @ L[f"w1_{k}"]
        dz = dh * (cache[1] > 0)
        G["w_in"][...] = dz.T @ x
        G["b_in"][...] = dz.sum(axis=0)
        return grad

    def predict(self, scene: GaussianScene, granularity: int, batch: int = 8192) -> np.ndarray:
        x = encode_scene(scene, granularity, self.norm_stats)
        if not len(x):
            return np.zeros((0, self.config.out_dim))
        return np.concatenate([self.forward(x[i:i + batch]) for i in range(0, len(x), batch)])


def init_params(config: MlpConfig, seed: int, norm_stats: NormStats | None = None,
                dtype=np.float32) -> RegularizerModel:
    """He-initialized weights; residual output layers start at zero so every
    block is the identity, biases start at zero."""
    rng = np.random.default_rng(seed)
    model = RegularizerModel(config, np.zeros(config.n_params, dtype=dtype), norm_stats, seed)
    L = model.layers
    H = config.hidden
    L["w_in"][...] = rng.standard_normal((H, config.in_dim)) * np.sqrt(2.0 / config.in_dim)
    for k in range(config.blocks):
        L[f"w1_{k}"][...] = rng.standard_normal((H, H)) * np.sqrt(2.0 / H)
    L["w_out"][...] = rng.standard_normal((config.out_dim, H)) * np.sqrt(1.0 / H)
    return model
