"""Variance-weighted regression of lifted semantics onto the conditional MLP."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .core import GaussianScene, SemanticField
from .net import MlpConfig, NormStats, RegularizerModel, encode_scene, init_params

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
WEIGHTING_MODES = ("equal", "variance")
GRANULARITY_MODES = ("shared", "independent")


@dataclass
class TrainConfig:
    gamma: float = 5.0
    lambda_cos: float = 1.0
    epsilon: float = 1e-8
    lr: float = 1e-3
    batch_size: int = 4096
    epochs: int = 50
    seed: int = 0
    weighting_mode: str = "variance"
    granularity_mode: str = "shared"
    hidden: int = 256
    blocks: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.gamma < 0 or self.lambda_cos < 0 or self.epsilon < 0:
            raise ValueError("gamma, lambda_cos and epsilon must be non-negative")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr and batch_size must be positive, epochs non-negative")
        if self.weighting_mode not in WEIGHTING_MODES:
            raise ValueError(f"weighting_mode must be one of {WEIGHTING_MODES}")
        if self.granularity_mode not in GRANULARITY_MODES:
            raise ValueError(f"granularity_mode must be one of {GRANULARITY_MODES}")


def variance_weights(field: SemanticField, gamma: float, epsilon: float = 1e-8) -> np.ndarray:
    """Confidence weight exp(-gamma * v~) per Gaussian, where v~ is the L2 norm of
    the variance vector min-max normalized over the valid rows. Invalid rows get 0."""
    p = np.zeros(len(field))
    valid = field.valid
    if not valid.any():
        return p
    v = np.linalg.norm(field.variance[valid], axis=1)
    vt = (v - v.min()) / (v.max() - v.min() + epsilon)
    p[valid] = np.exp(-gamma * vt)
    return p


def _row_losses(targets: np.ndarray, preds: np.ndarray, lambda_cos: float):
    """Per-row loss terms and their gradients with respect to ``preds``."""
    f = np.asarray(targets, dtype=np.float64)
    fh = np.asarray(preds, dtype=np.float64)
    if f.shape != fh.shape or f.ndim != 2:
        raise ValueError(f"targets {f.shape} and preds {fh.shape} must be matching (B, D)")
    diff = fh - f
    mse = np.einsum("ij,ij->i", diff, diff)
    grad = 2.0 * diff
    nf = np.linalg.norm(f, axis=1)
    nh = np.linalg.norm(fh, axis=1)
    ok = (nf >= NORM_FLOOR) & (nh >= NORM_FLOOR)
    if not ok.all():
        log.warning("cosine term skipped for %d row(s) with near-zero norm", int((~ok).sum()))
    cos = np.zeros(len(f))
    if ok.any():
        fo, ho, nfo, nho = f[ok], fh[ok], nf[ok, None], nh[ok, None]
        c = np.einsum("ij,ij->i", fo, ho)[:, None] / (nfo * nho)
        cos[ok] = c[:, 0]
        # d cos / d fh = f/(|f||fh|) - cos * fh/|fh|^2
        grad[ok] += -lambda_cos * (fo / (nfo * nho) - c * ho / nho ** 2)
    per_row = mse + lambda_cos * np.where(ok, 1.0 - cos, 0.0)
    return per_row, grad


def loss_weighted(targets, preds, p, lambda_cos: float) -> Tuple[float, np.ndarray]:
    """Mean over the batch of p_i * (squared error + lambda_cos * (1 - cosine))."""
    per_row, grad = _row_losses(targets, preds, lambda_cos)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape[0] != per_row.shape[0]:
        raise ValueError("weight vector length does not match batch size")
    B = len(per_row)
    return float(np.dot(p, per_row) / B), grad * (p[:, None] / B)


def loss_equal(targets, preds, lambda_cos: float) -> Tuple[float, np.ndarray]:
    per_row, grad = _row_losses(targets, preds, lambda_cos)
    B = len(per_row)
    return float(per_row.sum() / B), grad / B


class Adam:
    def __init__(self, n: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float32):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n, dtype=dtype)
        self.v = np.zeros(n, dtype=dtype)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        params -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(params.dtype)


@dataclass
class Samples:
    inputs: np.ndarray  # (S, 15)
    targets: np.ndarray  # (S, D)
    weights: np.ndarray  # (S,)
    granularity: np.ndarray  # (S,)
    index: np.ndarray  # (S,) Gaussian index

    def __len__(self) -> int:
        return len(self.index)

    def take(self, sel) -> "Samples":
        return Samples(self.inputs[sel], self.targets[sel], self.weights[sel],
                       self.granularity[sel], self.index[sel])

    @staticmethod
    def concat(parts: Sequence["Samples"]) -> "Samples":
        return Samples(*(np.concatenate([getattr(s, k) for s in parts])
                         for k in ("inputs", "targets", "weights", "granularity", "index")))


def build_samples(scene: GaussianScene, field: SemanticField, stats: NormStats,
                  config: TrainConfig) -> Samples:
    rows = np.flatnonzero(field.valid)
    if not len(rows):
        raise ValueError(f"no valid lifted samples at granularity {field.granularity}")
    if config.weighting_mode == "variance":
        p = variance_weights(field, config.gamma, config.epsilon)[rows]
    else:
        p = np.ones(len(rows))
    x = encode_scene(scene, field.granularity, stats)[rows]
    return Samples(x, field.features[rows], p, np.full(len(rows), field.granularity), rows)


@dataclass
class EpochRecord:
    epoch: int
    granularities: List[int]
    mean_loss: float
    mean_p: float
    model: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    models: Dict[int, RegularizerModel]  # granularity -> model; shared mode maps all three to one
    history: List[EpochRecord] = field(default_factory=list)

    @property
    def shared(self) -> bool:
        return len({id(m) for m in self.models.values()}) == 1

    def model_for(self, granularity: int) -> RegularizerModel:
        return self.models[granularity]

    def log_lines(self) -> List[str]:
        return [r.to_json() for r in self.history]


def fit(model: RegularizerModel, samples: Samples, config: TrainConfig,
        rng: np.random.Generator, tag: int = 0) -> List[EpochRecord]:
    """Optimize ``model`` in place with Adam over shuffled mini-batches."""
    opt = Adam(model.config.n_params, config.lr, config.beta1, config.beta2, config.adam_eps,
               dtype=model.dtype)
    grans = sorted(set(samples.granularity.tolist()))
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            b = order[start:start + config.batch_size]
            out, cache = model.forward(samples.inputs[b], keep=True)
            loss, dout = loss_weighted(samples.targets[b], out, samples.weights[b], config.lambda_cos)
            grad = model.backward(cache, dout)
            if not np.all(np.isfinite(grad)):
                raise FloatingPointError(f"non-finite gradient at epoch {epoch}")
            opt.step(model.params, grad)
            total += loss * len(b)
            count += len(b)
        history.append(EpochRecord(epoch, grans, total / count, float(samples.weights.mean()), tag))
    return history


def train(scene: GaussianScene, fields: Union[Sequence[SemanticField], Mapping[int, SemanticField]],
          config: TrainConfig, out_dim: int | None = None) -> TrainResult:
    """Fit the regularizer on lifted fields (one per granularity)."""
    if isinstance(fields, Mapping):
        fields = [fields[g] for g in sorted(fields)]
    fields = list(fields)
    if not fields:
        raise ValueError("train needs at least one semantic field")
    dims = {f.dim for f in fields}
    if len(dims) != 1:
        raise ValueError(f"semantic fields disagree on feature dimension: {sorted(dims)}")
    D = dims.pop() if out_dim is None else out_dim
    stats = NormStats.from_scene(scene)
    mcfg = MlpConfig(hidden=config.hidden, blocks=config.blocks, out_dim=D)
    per_gran = {f.granularity: build_samples(scene, f, stats, config) for f in fields}
    rng = np.random.default_rng([config.seed, 1])
    result = TrainResult({})
    if config.granularity_mode == "shared":
        model = init_params(mcfg, config.seed, stats)
        result.history = fit(model, Samples.concat([per_gran[g] for g in sorted(per_gran)]),
                             config, rng)
        result.models = {g: model for g in per_gran}
    else:
        for g in sorted(per_gran):
            model = init_params(mcfg, config.seed, stats)
            result.history += fit(model, per_gran[g], config, rng, tag=g)
            result.models[g] = model
    for rec in result.history:
        log.debug("epoch %d model %d loss %.6g", rec.epoch, rec.model, rec.mean_loss)
    return result


def regularize_field(model: RegularizerModel, scene: GaussianScene, granularity: int,
                     weight_mass: np.ndarray | None = None) -> SemanticField:
    """Replace the lifted field with the model's predictions for every Gaussian."""
    feats = model.predict(scene, granularity).astype(np.float64)
    n = len(scene)
    return SemanticField(granularity, feats, np.zeros_like(feats),
                         np.zeros(n) if weight_mass is None else weight_mass,
                         np.ones(n, dtype=bool))


def regularize_all(result: TrainResult, scene: GaussianScene,
                   lifted: Mapping[int, SemanticField]) -> Dict[int, SemanticField]:
    return {g: regularize_field(result.model_for(g), scene, g, lifted[g].weight_mass)
            for g in sorted(lifted)}
