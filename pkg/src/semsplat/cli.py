"""Command-line pipeline: synth -> lift -> regularize -> eval, plus ablate.

All subcommands share one run directory (``--out``)::

    config.json               resolved run configuration
    scene.ply  cameras.json   scene and views
    truth/                    synthetic labels and prototypes
    features/                 observed 2D feature maps + manifest.json
    lifted/field_g{g}.nrgt    lifted fields (training views only)
    model/*.nrgm              regularizer checkpoint(s)
    regularized/field_g{g}.nrgt
    loss_log.jsonl
    eval/report_{lifted,regularized}.txt, eval/relevance/*.pgm
    ablation.txt
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import formats
from .core import GRANULARITIES, require_valid
from .evaluate import ablation_grid, evaluate, relevance_from_features
from .lifter import lift, view_weights
from .raster import rasterize, render_features
from .synth import (SynthConfig, corrupt_maps, generate_scene, render_gt_feature_maps,
                    render_label_weights, test_views, train_views)
from .trainer import TrainConfig, regularize_all, train

log = logging.getLogger("semsplat")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # synthetic scene
    n_gaussians: int = 5000
    n_classes: int = 8
    n_views: int = 16
    width: int = 128
    height: int = 128
    focal: float = 128.0
    feature_dim: int = 64
    parts_per_class: int = 2
    subparts_per_part: int = 2
    noise_rate: float = 0.3
    noise_mode: str = "swap_class"
    camera_radius: float = 4.0
    camera_elevation_deg: float = 20.0
    object_radius: float = 0.25
    gaussian_scale: float = 0.03
    # training
    gamma: float = 5.0
    lambda_cos: float = 1.0
    epsilon: float = 1e-8
    lr: float = 1e-3
    batch_size: int = 4096
    epochs: int = 50
    weighting_mode: str = "variance"
    granularity_mode: str = "shared"
    hidden: int = 256
    blocks: int = 3
    # run
    seed: int = 0
    threads: int = 1
    relevance_rasters: bool = False
    out: str = "run"

    def synth(self) -> SynthConfig:
        keys = {f.name for f in fields(SynthConfig)}
        return SynthConfig(**{k: v for k, v in asdict(self).items() if k in keys})

    def train(self) -> TrainConfig:
        keys = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in keys})

    def validate(self) -> "RunConfig":
        try:
            self.synth()
            self.train()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    @classmethod
    def from_sources(cls, path: Optional[str], overrides: Dict[str, object]) -> "RunConfig":
        values: Dict[str, object] = {}
        if path:
            try:
                data = json.loads(Path(path).read_text())
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {path}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError("config file must hold a JSON object")
            known = {f.name: f for f in fields(cls)}
            unknown = sorted(set(data) - set(known))
            if unknown:
                raise ConfigError(f"unknown config keys: {unknown}")
            values.update(data)
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            cfg = cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        for f in fields(cls):
            v = getattr(cfg, f.name)
            want = {"int": int, "float": float, "str": str, "bool": bool}[f.type]
            if want is float and isinstance(v, int) and not isinstance(v, bool):
                setattr(cfg, f.name, float(v))
            elif not isinstance(v, want) or (want is int and isinstance(v, bool)):
                raise ConfigError(f"config key {f.name} must be {f.type}, got {v!r}")
        return cfg.validate()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


class Run:
    """Paths inside one run directory."""

    def __init__(self, root):
        self.root = Path(root)

    scene = property(lambda self: self.root / "scene.ply")
    cameras = property(lambda self: self.root / "cameras.json")
    truth = property(lambda self: self.root / "truth")
    features = property(lambda self: self.root / "features")
    manifest = property(lambda self: self.root / "features" / "manifest.json")
    loss_log = property(lambda self: self.root / "loss_log.jsonl")
    eval_dir = property(lambda self: self.root / "eval")
    ablation = property(lambda self: self.root / "ablation.txt")

    def field(self, kind: str, g: int) -> Path:
        return self.root / kind / f"field_g{g}.nrgt"

    def checkpoint(self, g: Optional[int] = None) -> Path:
        return self.root / "model" / ("shared.nrgm" if g is None else f"granularity_{g}.nrgm")


class Summary:
    def __init__(self):
        self.metrics: List[str] = []
        self.timings: Dict[str, float] = {}

    def add(self, key: str, value) -> None:
        self.metrics.append(f"{key}={value:.6f}" if isinstance(value, float) else f"{key}={value}")

    def time(self, stage: str, seconds: float) -> None:
        self.timings[stage] = self.timings.get(stage, 0.0) + seconds

    def emit(self, stream=None) -> None:
        stream = stream or sys.stdout
        for line in self.metrics:
            print(line, file=stream)
        for stage, sec in self.timings.items():
            print(f"time.{stage}={sec:.3f}s", file=stream)


def _timed(summary: Summary, stage: str):
    class _T:
        def __enter__(self):
            self.t = time.perf_counter()

        def __exit__(self, *exc):
            summary.time(stage, time.perf_counter() - self.t)

    return _T()


def stage_synth(cfg: RunConfig, run: Run, summary: Summary) -> None:
    scfg = cfg.synth()
    with _timed(summary, "synth"):
        scene, truth, cams = generate_scene(scfg)
        rasters = [rasterize(scene, cam) for cam in cams]
        maps = []
        for g in GRANULARITIES:
            cov = render_label_weights(scene, truth, cams, g, rasters)
            maps += corrupt_maps(render_gt_feature_maps(scene, truth, cams, g, cov), truth, scfg, cov)
        formats.write_scene(run.scene, scene)
        formats.write_cameras(run.cameras, cams)
        formats.write_truth(run.truth, truth)
        formats.write_feature_maps(run.features, maps)
    summary.add("synth.gaussians", len(scene))
    summary.add("synth.views", len(cams))


def _load_scene_and_cams(run: Run):
    scene = formats.read_scene(run.scene)
    require_valid(scene)
    return scene, formats.read_cameras(run.cameras)


def stage_lift(cfg: RunConfig, run: Run, summary: Summary, manifest: Optional[str] = None) -> None:
    scene, cams = _load_scene_and_cams(run)
    with _timed(summary, "lift"):
        maps = formats.ingest_external_features(run.features, manifest or run.manifest, cams=cams)
        train_cams = {v: cams[v] for v in train_views(len(cams))}
        weights = view_weights(scene, train_cams)
        for g in GRANULARITIES:
            field = lift(scene, train_cams, maps, g, weights)
            formats.write_field(run.field("lifted", g), field)
            summary.add(f"lift.g{g}.valid_fraction", float(field.valid.mean()) if len(field) else 0.0)


def stage_regularize(cfg: RunConfig, run: Run, summary: Summary) -> None:
    scene, _ = _load_scene_and_cams(run)
    lifted = {g: formats.read_field(run.field("lifted", g), g) for g in GRANULARITIES}
    with _timed(summary, "regularize"):
        result = train(scene, lifted, cfg.train())
        if result.shared:
            formats.write_checkpoint(run.checkpoint(), result.model_for(1))
        else:
            for g in GRANULARITIES:
                formats.write_checkpoint(run.checkpoint(g), result.model_for(g))
        for g, field in regularize_all(result, scene, lifted).items():
            formats.write_field(run.field("regularized", g), field)
        formats.write_lines(run.loss_log, result.log_lines())
    if result.history:
        summary.add("train.final_loss", result.history[-1].mean_loss)


def stage_eval(cfg: RunConfig, run: Run, summary: Summary) -> None:
    scene, cams = _load_scene_and_cams(run)
    truth = formats.read_truth(run.truth)
    if len(truth.labels) != len(scene):
        raise formats.DimensionMismatchError("ground truth and scene disagree on Gaussian count", run.truth)
    with _timed(summary, "eval"):
        test = {v: cams[v] for v in test_views(len(cams))}
        rasters = {v: rasterize(scene, cam) for v, cam in test.items()}
        coverage = {g: dict(zip(test, render_label_weights(scene, truth, list(test.values()), g,
                                                           [rasters[v] for v in test])))
                    for g in GRANULARITIES}
        for kind in ("lifted", "regularized"):
            if not run.field(kind, 1).exists():
                if kind == "lifted":
                    raise FileNotFoundError(f"missing lifted field: {run.field(kind, 1)}")
                continue
            flds = {g: formats.read_field(run.field(kind, g), g) for g in GRANULARITIES}
            rep = evaluate(flds, truth, scene, test, coverage, rasters, config={"field": kind})
            formats.write_lines(run.eval_dir / f"report_{kind}.txt", rep.lines())
            summary.add(f"{kind}.miou", rep.miou)
            summary.add(f"{kind}.macc", rep.macc)
            summary.add(f"{kind}.cosine", rep.cosine)
            if cfg.relevance_rasters:
                _write_relevance(run, kind, flds, truth, test, rasters)


def _write_relevance(run: Run, kind: str, flds, truth, test, rasters) -> None:
    for g, field in flds.items():
        feats = np.where(field.valid[:, None], field.features, 0.0)
        for v in test:
            img = render_features(rasters[v], feats)
            for k, proto in enumerate(truth.prototypes[g]):
                path = run.eval_dir / "relevance" / kind / f"g{g}_v{v:03d}_c{k:02d}.pgm"
                formats.write_pgm(path, relevance_from_features(img, proto))


def stage_ablate(cfg: RunConfig, run: Run, summary: Summary) -> None:
    stage_synth(cfg, run, summary)
    stage_lift(cfg, run, summary)
    scene, cams = _load_scene_and_cams(run)
    truth = formats.read_truth(run.truth)
    lifted = {g: formats.read_field(run.field("lifted", g), g) for g in GRANULARITIES}
    with _timed(summary, "ablate"):
        test = {v: cams[v] for v in test_views(len(cams))}
        rasters = {v: rasterize(scene, cam) for v, cam in test.items()}
        coverage = {g: dict(zip(test, render_label_weights(scene, truth, list(test.values()), g,
                                                           [rasters[v] for v in test])))
                    for g in GRANULARITIES}
        rep = ablation_grid(scene, lifted, truth, cfg.train(), test, coverage, rasters)
        formats.write_lines(run.ablation, rep.lines())
    summary.add("ablate.raw.miou", rep.baseline.miou)
    for name, r in rep.rows.items():
        summary.add(f"ablate.{name}.miou", r.miou)
        summary.add(f"ablate.{name}.macc", r.macc)


def stage_pipeline(cfg: RunConfig, run: Run, summary: Summary) -> None:
    stage_synth(cfg, run, summary)
    stage_lift(cfg, run, summary)
    stage_regularize(cfg, run, summary)
    stage_eval(cfg, run, summary)


STAGES = {
    "synth": stage_synth,
    "lift": stage_lift,
    "regularize": stage_regularize,
    "eval": stage_eval,
    "ablate": stage_ablate,
    "pipeline": stage_pipeline,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of run settings; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--gamma", type=float)
    common.add_argument("--lambda-cos", dest="lambda_cos", type=float)
    common.add_argument("--noise-rate", dest="noise_rate", type=float)
    common.add_argument("--noise-mode", dest="noise_mode", choices=["swap_class", "blend", "dropout"])
    common.add_argument("--weighting", dest="weighting_mode", choices=["equal", "variance"])
    common.add_argument("--granularity-mode", dest="granularity_mode", choices=["shared", "independent"])
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--n-gaussians", dest="n_gaussians", type=int)
    common.add_argument("--n-views", dest="n_views", type=int)
    common.add_argument("--feature-dim", dest="feature_dim", type=int)
    common.add_argument("--out", help="run directory")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads (1 = reproducible)")
    common.add_argument("--relevance-rasters", dest="relevance_rasters", action="store_const",
                        const=True, help="eval: also write relevance maps as PGM")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="semsplat", description="Lift multi-view semantic features onto 3D Gaussians "
                "and regularize them with a variance-weighted conditional MLP.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate a synthetic scene, cameras, truth and feature maps")
    lp = sub.add_parser("lift", parents=[common], help="lift feature maps onto the Gaussians (training views)")
    lp.add_argument("--manifest", help="feature manifest (default: <out>/features/manifest.json)")
    sub.add_parser("regularize", parents=[common], help="train the regularizer and write regularized fields")
    sub.add_parser("eval", parents=[common], help="3D mIoU and held-out-view localization accuracy")
    sub.add_parser("ablate", parents=[common], help="variance-weighting x shared-granularity ablation grid")
    sub.add_parser("pipeline", parents=[common], help="synth, lift, regularize and eval in one go")
    return p


OVERRIDE_KEYS = ("seed", "gamma", "lambda_cos", "noise_rate", "noise_mode", "weighting_mode",
                 "granularity_mode", "epochs", "batch_size", "n_gaussians", "n_views", "feature_dim",
                 "out", "threads", "relevance_rasters")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.from_sources(args.config, {k: getattr(args, k) for k in OVERRIDE_KEYS})
    except ConfigError as exc:
        print(f"semsplat: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    run = Run(cfg.out)
    summary = Summary()
    try:
        formats.atomic_write_text(run.root / "config.json", cfg.to_json())
        log.info("resolved config: %s", json.dumps(asdict(cfg), sort_keys=True))
        with threadpool_limits(cfg.threads):
            if args.command == "lift" and args.manifest:
                stage_lift(cfg, run, summary, args.manifest)
            else:
                STAGES[args.command](cfg, run, summary)
    except (formats.FormatError, OSError, KeyError) as exc:
        print(f"semsplat: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"semsplat: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    summary.emit()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
