"""On-disk formats.

* Tensor files (``.nrgt``): magic ``NRGT``, u32 version, u32 rank, rank x u32
  dims, float32 payload; all little-endian, row-major.
* Scenes: binary little-endian PLY with float32 vertex properties
  x y z opacity rot_0..rot_3 scale_0..scale_2 red green blue. Opacity is
  post-activation and scales are linear standard deviations; the bounding
  box rides along in a ``comment bbox`` header line.
* Checkpoints (``.nrgm``): magic ``NRGM``, u32 version, u32 in_dim hidden
  blocks out_dim, i64 seed, 15 float32 shifts, 15 float32 scales, u64 count,
  float32 parameters, then a u32 CRC32 over every preceding byte.
* Cameras: JSON list, one object per view.

Every writer goes through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import warnings
import zlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Mapping, Sequence, Union

import numpy as np

from .core import Camera, FeatureMap, GaussianScene, SemanticField, check_granularity
from .net import IN_DIM, MlpConfig, NormStats, RegularizerModel

PathLike = Union[str, os.PathLike]

TENSOR_MAGIC = b"NRGT"
TENSOR_VERSION = 1
CHECKPOINT_MAGIC = b"NRGM"
CHECKPOINT_VERSION = 1
PLY_PROPERTIES = ("x", "y", "z", "opacity", "rot_0", "rot_1", "rot_2", "rot_3",
                  "scale_0", "scale_1", "scale_2", "red", "green", "blue")
MIN_SCALE = 1e-6


class FormatError(ValueError):
    kind = "format"

    def __init__(self, message: str, path: PathLike | None = None):
        self.path = None if path is None else str(path)
        super().__init__(f"{path}: {message}" if path is not None else message)


class TruncatedFileError(FormatError):
    kind = "truncated"


class MagicMismatchError(FormatError):
    kind = "magic"


class VersionMismatchError(FormatError):
    kind = "version"


class ChecksumError(FormatError):
    kind = "crc"


class NonFiniteError(FormatError):
    kind = "non-finite"


class DimensionMismatchError(FormatError):
    kind = "dimension"


class UnmatchedViewError(FormatError):
    kind = "unmatched-view"


class ConventionWarning(UserWarning):
    """Values look like another exporter's parameterization (logit opacity, log scale)."""


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _read(path: PathLike) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


# tensors

def tensor_bytes(array: np.ndarray) -> bytes:
    a = np.ascontiguousarray(array, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, a.ndim)
    return head + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def parse_tensor(buf: bytes, path: PathLike | None = None) -> np.ndarray:
    if len(buf) < 12:
        raise TruncatedFileError("file shorter than the tensor header", path)
    if buf[:4] != TENSOR_MAGIC:
        raise MagicMismatchError(f"expected magic {TENSOR_MAGIC!r}, found {buf[:4]!r}", path)
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != TENSOR_VERSION:
        raise VersionMismatchError(f"unsupported tensor version {version}", path)
    off = 12 + 4 * rank
    if len(buf) < off:
        raise TruncatedFileError("file ends inside the dimension list", path)
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    need = 4 * int(np.prod(dims, dtype=np.int64))
    if len(buf) - off < need:
        raise TruncatedFileError(f"payload has {len(buf) - off} bytes, dims {dims} need {need}", path)
    if len(buf) - off > need:
        raise FormatError(f"{len(buf) - off - need} trailing bytes after payload", path)
    a = np.frombuffer(buf, dtype="<f4", count=need // 4, offset=off).reshape(dims)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("non-finite values in tensor payload", path)
    return a.astype(np.float32)


def write_tensor(path: PathLike, array: np.ndarray) -> None:
    atomic_write_bytes(path, tensor_bytes(array))


def read_tensor(path: PathLike) -> np.ndarray:
    return parse_tensor(_read(path), path)


# scenes

def scene_bytes(scene: GaussianScene) -> bytes:
    lo, hi = scene.bbox
    header = ["ply", "format binary_little_endian 1.0",
              "comment bbox " + " ".join(repr(float(v)) for v in (*lo, *hi)),
              f"element vertex {len(scene)}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    cols = np.concatenate([scene.mu, scene.opacity[:, None], scene.quat, scene.scale, scene.rgb], axis=1)
    return ("\n".join(header) + "\n").encode("ascii") + np.ascontiguousarray(cols, dtype="<f4").tobytes()


def parse_scene(buf: bytes, path: PathLike | None = None) -> GaussianScene:
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n"):
        raise MagicMismatchError("not a PLY file", path)
    if end < 0:
        raise TruncatedFileError("PLY header is not terminated", path)
    lines = buf[:end].decode("ascii", errors="replace").splitlines()
    body = buf[end + len(b"end_header\n"):]
    n, props, bbox, fmt_ok = None, [], None, False
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise VersionMismatchError(f"unsupported PLY format {' '.join(parts[1:])}", path)
            fmt_ok = True
        elif parts[0] == "comment" and len(parts) == 8 and parts[1] == "bbox":
            bbox = np.array([float(v) for v in parts[2:]])
        elif parts[0] == "element":
            if parts[1] != "vertex" or n is not None:
                raise FormatError(f"unexpected element {parts[1]!r}", path)
            n = int(parts[2])
        elif parts[0] == "property":
            if parts[1] not in ("float", "float32"):
                raise FormatError(f"property {parts[-1]} has unsupported type {parts[1]}", path)
            props.append(parts[2])
    if not fmt_ok or n is None:
        raise FormatError("PLY header lacks format or vertex element", path)
    missing = [p for p in PLY_PROPERTIES if p not in props]
    if missing:
        raise FormatError(f"missing vertex properties {missing}", path)
    need = 4 * len(props) * n
    if len(body) < need:
        raise TruncatedFileError(f"vertex data has {len(body)} bytes, need {need}", path)
    if len(body) > need:
        raise FormatError(f"{len(body) - need} trailing bytes after vertex data", path)
    raw = np.frombuffer(body, dtype="<f4").reshape(n, len(props)).astype(np.float64)
    if not np.all(np.isfinite(raw)):
        raise NonFiniteError("non-finite vertex values", path)
    col = {name: raw[:, props.index(name)] for name in PLY_PROPERTIES}
    mu = np.stack([col["x"], col["y"], col["z"]], axis=1)
    quat = np.stack([col[f"rot_{k}"] for k in range(4)], axis=1)
    scale = np.stack([col[f"scale_{k}"] for k in range(3)], axis=1)
    rgb = np.stack([col["red"], col["green"], col["blue"]], axis=1)
    opacity = col["opacity"]

    def warn(prop, what):
        warnings.warn(f"{path}: property {prop} {what}; expected post-activation opacity and "
                      f"linear scales", ConventionWarning, stacklevel=3)

    if np.any((opacity < 0) | (opacity > 1)):
        warn("opacity", "outside [0, 1] (logit convention?)")
    for k in range(3):
        if np.any(scale[:, k] <= 0):
            warn(f"scale_{k}", "non-positive (log-scale convention?)")
    for name in ("red", "green", "blue"):
        if np.any((col[name] < 0) | (col[name] > 1)):
            warn(name, "outside [0, 1] (SH coefficient convention?)")
    qn = np.linalg.norm(quat, axis=1, keepdims=True)
    fix = (np.abs(qn - 1) > 1e-6) & (qn > 0)
    quat = np.where(fix, quat / np.where(qn > 0, qn, 1), quat)
    scale = np.maximum(scale, MIN_SCALE)
    bb = None if bbox is None else (bbox[:3], bbox[3:])
    return GaussianScene(mu, quat, scale, opacity, rgb, bb)


def write_scene(path: PathLike, scene: GaussianScene) -> None:
    atomic_write_bytes(path, scene_bytes(scene))


def read_scene(path: PathLike) -> GaussianScene:
    return parse_scene(_read(path), path)


# cameras

def cameras_json(cams: Sequence[Camera]) -> str:
    out = []
    for v, c in enumerate(cams):
        out.append({"view_id": v, "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                    "width": c.width, "height": c.height, "znear": c.znear,
                    "rotation": c.rotation.reshape(-1).tolist(),
                    "translation": c.translation.tolist()})
    return json.dumps(out, indent=1) + "\n"


def write_cameras(path: PathLike, cams: Sequence[Camera]) -> None:
    atomic_write_text(path, cameras_json(cams))


def read_cameras(path: PathLike) -> List[Camera]:
    try:
        items = json.loads(Path(path).read_text())
        cams = []
        for k, d in enumerate(items):
            if d["view_id"] != k:
                raise FormatError(f"camera entries must be listed by view_id; entry {k} has {d['view_id']}", path)
            cams.append(Camera(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                               np.reshape(d["rotation"], (3, 3)), d["translation"], d["znear"]))
        return cams
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed camera file: {exc}", path) from exc


# feature maps

def feature_map_path(root: PathLike, view_id: int, granularity: int) -> Path:
    return Path(root) / f"g{granularity}_v{view_id:03d}.nrgt"


def write_feature_maps(root: PathLike, maps: Iterable[FeatureMap]) -> Path:
    """Write maps plus a ``manifest.json`` listing them; returns the manifest path."""
    root = Path(root)
    entries = []
    for fm in sorted(maps, key=lambda m: (m.granularity, m.view_id)):
        p = feature_map_path(root, fm.view_id, fm.granularity)
        write_tensor(p, fm.data)
        entries.append({"view_id": fm.view_id, "granularity": fm.granularity, "path": p.name})
    manifest = root / "manifest.json"
    atomic_write_text(manifest, json.dumps({"maps": entries}, indent=1) + "\n")
    return manifest


def _manifest_entries(root: Path, manifest) -> List[dict]:
    if isinstance(manifest, (str, os.PathLike)):
        mpath = Path(manifest)
        if not mpath.is_absolute() and not mpath.exists():
            mpath = root / mpath
        try:
            data = json.loads(mpath.read_text())
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"manifest not found: {mpath}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed manifest: {exc}", mpath) from exc
        manifest = data["maps"] if isinstance(data, dict) else data
    return list(manifest)


def ingest_external_features(root: PathLike, manifest, view_ids: Iterable[int] | None = None,
                             cams: Mapping[int, Camera] | Sequence[Camera] | None = None
                             ) -> List[FeatureMap]:
    """Load externally extracted feature maps listed in ``manifest``.

    ``manifest`` is a JSON path or a list of ``{view_id, granularity, path}``
    entries, paths relative to ``root``. With ``cams`` (or ``view_ids``), every
    entry must name a known view and each map must match its camera's size;
    (view, granularity) pairs with no map are logged as missing.
    """
    import logging

    root = Path(root)
    entries = _manifest_entries(root, manifest)
    if cams is not None:
        cam_map = dict(cams) if isinstance(cams, Mapping) else dict(enumerate(cams))
        view_ids = cam_map.keys()
    else:
        cam_map = None
    known = None if view_ids is None else set(int(v) for v in view_ids)
    loaded = []
    for e in entries:
        v, g = int(e["view_id"]), check_granularity(int(e["granularity"]))
        p = Path(e["path"])
        p = p if p.is_absolute() else root / p
        if known is not None and v not in known:
            raise UnmatchedViewError(f"feature map for unknown view_id {v}", p)
        if not p.exists():
            raise FileNotFoundError(f"feature map file not found: {p}")
        data = read_tensor(p)
        if data.ndim != 3:
            raise DimensionMismatchError(f"expected H x W x D tensor, got shape {data.shape}", p)
        if cam_map is not None and data.shape[:2] != (cam_map[v].height, cam_map[v].width):
            raise DimensionMismatchError(f"map is {data.shape[0]}x{data.shape[1]}, camera {v} is "
                                         f"{cam_map[v].height}x{cam_map[v].width}", p)
        loaded.append((v, g, p, data))
    if loaded:
        dims = Counter(d.shape[2] for _, _, _, d in loaded)
        common = dims.most_common(1)[0][0]
        odd = [(p, d.shape[2]) for _, _, p, d in loaded if d.shape[2] != common]
        if odd:
            p, d = odd[0]
            raise DimensionMismatchError(f"feature dimension {d} differs from {common} used by the "
                                         f"other maps", p)
    maps = [FeatureMap(v, g, d.astype(np.float64)) for v, g, _, d in loaded]
    if known is not None:
        have = {(m.view_id, m.granularity) for m in maps}
        grans = sorted({m.granularity for m in maps})
        missing = [(v, g) for v in sorted(known) for g in grans if (v, g) not in have]
        if missing:
            logging.getLogger(__name__).warning("missing (view, granularity) feature maps: %s", missing)
    return maps


def read_feature_maps(root: PathLike, manifest: PathLike = "manifest.json",
                      cams=None) -> List[FeatureMap]:
    return ingest_external_features(root, manifest, cams=cams)


# semantic fields

def field_array(field: SemanticField) -> np.ndarray:
    return np.concatenate([field.features, field.variance, field.weight_mass[:, None],
                           field.valid[:, None].astype(np.float64)], axis=1)


def write_field(path: PathLike, field: SemanticField) -> None:
    """Stored as an (N, 2D + 2) tensor: features | variance | weight mass | valid."""
    write_tensor(path, field_array(field))


def read_field(path: PathLike, granularity: int) -> SemanticField:
    a = read_tensor(path).astype(np.float64)
    if a.ndim != 2 or a.shape[1] < 4 or a.shape[1] % 2:
        raise DimensionMismatchError(f"semantic field tensor has shape {a.shape}", path)
    d = (a.shape[1] - 2) // 2
    valid = a[:, -1]
    if np.any((valid != 0) & (valid != 1)):
        raise FormatError("valid column must hold 0 or 1", path)
    return SemanticField(granularity, a[:, :d], a[:, d:2 * d], a[:, -2], valid.astype(bool))


# checkpoints

_CKPT_HEAD = struct.Struct("<4sIIIIIq")


def checkpoint_bytes(model: RegularizerModel) -> bytes:
    c = model.config
    out = _CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, c.in_dim, c.hidden, c.blocks,
                          c.out_dim, model.seed)
    out += np.asarray(model.norm_stats.shift, dtype="<f4").tobytes()
    out += np.asarray(model.norm_stats.scale, dtype="<f4").tobytes()
    out += struct.pack("<Q", c.n_params)
    out += np.asarray(model.params, dtype="<f4").tobytes()
    return out + struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)


def parse_checkpoint(buf: bytes, path: PathLike | None = None) -> RegularizerModel:
    fixed = _CKPT_HEAD.size + 8 * IN_DIM + 8
    if len(buf) < 8:
        raise TruncatedFileError("file shorter than the checkpoint header", path)
    if buf[:4] != CHECKPOINT_MAGIC:
        raise MagicMismatchError(f"expected magic {CHECKPOINT_MAGIC!r}, found {buf[:4]!r}", path)
    if len(buf) < fixed:
        raise TruncatedFileError("file shorter than the checkpoint header", path)
    _, version, in_dim, hidden, blocks, out_dim, seed = _CKPT_HEAD.unpack_from(buf, 0)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}", path)
    off = _CKPT_HEAD.size
    shift = np.frombuffer(buf, "<f4", IN_DIM, off).astype(np.float64)
    scale = np.frombuffer(buf, "<f4", IN_DIM, off + 4 * IN_DIM).astype(np.float64)
    (count,) = struct.unpack_from("<Q", buf, off + 8 * IN_DIM)
    need = fixed + 4 * count + 4
    if len(buf) < need:
        raise TruncatedFileError(f"checkpoint has {len(buf)} bytes, header promises {need}", path)
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after checkpoint", path)
    (crc,) = struct.unpack_from("<I", buf, need - 4)
    if zlib.crc32(buf[:need - 4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch; checkpoint is corrupt", path)
    if in_dim != IN_DIM:
        raise DimensionMismatchError(f"checkpoint in_dim {in_dim} != {IN_DIM}", path)
    config = MlpConfig(in_dim, hidden, blocks, out_dim)
    if count != config.n_params:
        raise DimensionMismatchError(f"{count} parameters stored, config needs {config.n_params}", path)
    params = np.frombuffer(buf, "<f4", count, fixed).astype(np.float32)
    if not (np.all(np.isfinite(params)) and np.all(np.isfinite(shift)) and np.all(np.isfinite(scale))):
        raise NonFiniteError("non-finite values in checkpoint", path)
    return RegularizerModel(config, params, NormStats(shift, scale), seed)


def write_checkpoint(path: PathLike, model: RegularizerModel) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model))


def read_checkpoint(path: PathLike) -> RegularizerModel:
    return parse_checkpoint(_read(path), path)


# ground truth

@dataclass
class TruthPaths:
    root: Path

    @property
    def labels(self) -> Path:
        return self.root / "labels.nrgt"

    def prototypes(self, g: int) -> Path:
        return self.root / f"prototypes_g{g}.nrgt"


def write_truth(root: PathLike, truth) -> None:
    p = TruthPaths(Path(root))
    write_tensor(p.labels, truth.labels)
    for g, P in sorted(truth.prototypes.items()):
        write_tensor(p.prototypes(g), P)


def read_truth(root: PathLike):
    from .synth import GroundTruth

    p = TruthPaths(Path(root))
    labels = read_tensor(p.labels)
    if labels.ndim != 2 or labels.shape[1] != 3:
        raise DimensionMismatchError(f"labels tensor has shape {labels.shape}", p.labels)
    protos = {g: read_tensor(p.prototypes(g)).astype(np.float64) for g in (1, 2, 3)}
    dims = {P.shape[1] for P in protos.values()}
    if len(dims) != 1:
        raise DimensionMismatchError(f"prototype dimensions disagree: {sorted(dims)}", p.root)
    return GroundTruth(labels.astype(np.int64), protos)


# rasters

def pgm_bytes(values: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> bytes:
    """8-bit binary PGM of ``values`` mapped linearly from [lo, hi] to [0, 255]."""
    v = np.clip((np.asarray(values, dtype=np.float64) - lo) / (hi - lo), 0, 1)
    px = np.floor(v * 255 + 0.5).astype(np.uint8)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def ppm_bytes(rgb: np.ndarray) -> bytes:
    """8-bit binary PPM of an (H, W, 3) image with values in [0, 1]."""
    px = np.floor(np.clip(np.asarray(rgb, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)
    h, w, _ = px.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def write_pgm(path: PathLike, values: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> None:
    atomic_write_bytes(path, pgm_bytes(values, lo, hi))


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    atomic_write_bytes(path, ppm_bytes(rgb))


def write_lines(path: PathLike, lines: Iterable[str]) -> None:
    atomic_write_text(path, "".join(line + "\n" for line in lines))
