"""On-disk formats: complex float32 binaries with JSON sidecars, maps, CSV tables.

Complex binaries are little-endian float32 pairs (re, im) in C order. Every
binary has a ``.json`` sidecar with its dims and the hash of the config
that produced it.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import AcquisitionConfig, FieldConstants, InvalidArgument, MapImage, Roi, SpectroDataset


class FormatError(ValueError):
    """File contents disagree with their sidecar."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_complex(path, arr: np.ndarray, sidecar: dict):
    """Write ``arr`` as interleaved float32 plus a sidecar with the same stem and ``.json``."""
    path = Path(path)
    arr = np.ascontiguousarray(arr, dtype="<c8")
    arr.tofile(path)
    meta = dict(sidecar)
    meta.update({"file": path.name, "dtype": "complex64-le", "shape": list(arr.shape)})
    write_json(path.with_suffix(".json"), meta)


def read_complex(path):
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    shape = tuple(meta["shape"])
    data = np.fromfile(path, dtype="<c8")
    if data.size != int(np.prod(shape)):
        raise FormatError(f"{path.name}: {data.size} samples on disk, sidecar says {shape}")
    return data.reshape(shape).astype(complex), meta


def save_dataset(path, ds: SpectroDataset, cfg: AcquisitionConfig, chash: str):
    write_complex(path, ds.fids, {
        "kind": "spectro_dataset",
        "dims": {"ny": ds.ny, "nx": ds.nx, "n_points": ds.fids.shape[-1]},
        "dwell_s": ds.dwell_s,
        "te_s": ds.te_s,
        "field": ds.field.to_dict(),
        "acquisition": cfg.to_dict(),
        "config_hash": chash,
        "meta": ds.meta,
    })


def load_dataset(path):
    data, meta = read_complex(path)
    if meta.get("kind") != "spectro_dataset":
        raise FormatError(f"{path} is not a spectroscopic dataset")
    n = data.shape[-1]
    if [meta["dims"][k] for k in ("ny", "nx", "n_points")] != list(data.shape):
        raise FormatError("dataset dims disagree with sidecar")
    ds = SpectroDataset(data, np.arange(n) * meta["dwell_s"], FieldConstants(**meta["field"]),
                        te_s=meta["te_s"], meta=meta.get("meta", {}))
    return ds, AcquisitionConfig.from_dict(meta["acquisition"]), meta


def _csv_text(header: Sequence[str], rows: Iterable, comment: Optional[str]) -> str:
    buf = _io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else repr(float(v))
    return v


def write_csv(path, header, rows, comment: Optional[str] = None):
    Path(path).write_text(_csv_text(header, rows, comment))


def read_csv(path):
    """Rows as dicts, skipping ``#`` comment lines."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def pgm_bytes(values: np.ndarray, valid: np.ndarray, lo: Optional[float] = None,
              hi: Optional[float] = None, comment: Optional[str] = None) -> bytes:
    """8-bit binary PGM preview; masked voxels are black, valid ones span 1..255."""
    v = np.asarray(values, dtype=float)
    valid = np.asarray(valid, bool)
    img = np.zeros(v.shape, dtype=np.uint8)
    if valid.any():
        lo = float(np.min(v[valid])) if lo is None else lo
        hi = float(np.max(v[valid])) if hi is None else hi
        span = hi - lo if hi > lo else 1.0
        img[valid] = 1 + np.round(254 * np.clip((v[valid] - lo) / span, 0, 1)).astype(np.uint8)
    head = "P5\n"
    if comment:
        head += f"# {comment}\n"
    head += f"{v.shape[1]} {v.shape[0]}\n255\n"
    return head.encode() + img.tobytes()


def write_map(prefix, m: MapImage, name: str, chash: str, unit: str = "%"):
    """Write ``prefix.f32`` (NaN where masked), ``prefix.pgm``, ``prefix.csv`` and sidecar."""
    prefix = Path(prefix)
    vals = np.where(m.valid, m.values, np.nan).astype("<f4")
    vals.tofile(prefix.with_suffix(".f32"))
    prefix.with_suffix(".pgm").write_bytes(pgm_bytes(m.values, m.valid,
                                                     comment=f"{name} config_hash={chash}"))
    rows = ((iy, ix, float(m.values[iy, ix])) for iy, ix in zip(*np.nonzero(m.valid)))
    write_csv(prefix.with_suffix(".csv"), ("iy", "ix", name), rows, f"config_hash={chash}")
    write_json(prefix.with_suffix(".json"), {
        "name": name, "unit": unit, "shape": list(m.values.shape), "dtype": "float32-le",
        "n_valid": int(m.valid.sum()), "config_hash": chash,
    })


def read_map(prefix) -> MapImage:
    prefix = Path(prefix)
    meta = read_json(prefix.with_suffix(".json"))
    vals = np.fromfile(prefix.with_suffix(".f32"), dtype="<f4").astype(float)
    vals = vals.reshape(meta["shape"])
    valid = np.isfinite(vals)
    return MapImage(vals, valid)


def rois_from_json(doc: dict, cfg: AcquisitionConfig) -> list:
    """ROIs from explicit voxel lists or mm-space rectangles/ellipses."""
    n = cfg.grid_n
    pos = cfg.voxel_positions_m() * 1e3
    xx, yy = np.meshgrid(pos, pos)
    out = []
    for r in doc["rois"]:
        if "voxels" in r:
            roi = Roi(r["label"], tuple(tuple(v) for v in r["voxels"]))
        else:
            (cx, cy), (sx, sy) = r["center_mm"], r["size_mm"]
            dx, dy = (xx - cx) / sx, (yy - cy) / sy
            if r["shape"] == "rect":
                inside = (np.abs(dx) <= 1) & (np.abs(dy) <= 1)
            elif r["shape"] == "ellipse":
                inside = dx * dx + dy * dy <= 1
            else:
                raise InvalidArgument(f"unknown ROI shape {r['shape']!r}")
            roi = Roi(r["label"], tuple(zip(*[a.tolist() for a in np.nonzero(inside)])))
        roi.check_inside(n, n)
        out.append(roi)
    return out
