"""Command-line pipeline: simulate, recon, analyze, quantify, stats, report.

Each stage reads the previous stage's directory and writes its own. Every
binary carries a JSON sidecar holding the resolved configuration and its
hash, which later stages reuse unless ``--config`` overrides it.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from . import analysis as an
from . import io as fio
from . import quantify as qf
from . import stats as st
from .acquisition import ConfigurationError, make_schedule, trajectory_arrays
from .model import AcquisitionConfig, EmptySignalError, InvalidArgument, MapImage
from .phantom import (PhantomSpec, RawKSpace, TissueParams, add_noise, forward_sample,
                      lipid_snr_sigma, rasterize_phantom)
from .recon import GriddingConfig, TrajectoryError, reconstruct

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

RAW_FILE = "raw.bin"
DATASET_FILE = "dataset.bin"
ROIS_FILE = "rois.json"
TRUTH_MAPS = ("imcl_share", "fat_fraction", "fiber_angle_rad", "b0_offset_hz", "label")


class ValidationError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- config

def _load_packaged(name: str):
    return json.loads(resources.files("imclmap").joinpath("data", name).read_text())


def validate(doc, schema_name: str, what: str):
    """Raise ValidationError naming the JSON path of the first offending key."""
    schema = _load_packaged(schema_name)
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(doc),
                    key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in e.absolute_path)
        raise ValidationError(f"{what}: {path}: {e.message}")


def _read_doc(path, what):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"{what}: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{what}: invalid JSON: {exc}") from None


def load_config(path: Optional[str]) -> dict:
    """Validated configuration with every optional section filled from the defaults."""
    doc = _load_packaged("default_config.json") if path is None else _read_doc(path, "config")
    validate(doc, "config.schema.json", "config")
    defaults = _load_packaged("default_config.json")
    cfg = {}
    for section, body in defaults.items():
        merged = dict(body)
        merged.update(doc.get(section, {}))
        cfg[section] = merged
    cfg["acquisition"]["field"] = {**defaults["acquisition"]["field"],
                                   **doc["acquisition"].get("field", {})}
    return cfg


def load_phantom(path: Optional[str]) -> dict:
    doc = _load_packaged("default_phantom.json") if path is None else _read_doc(path, "phantom")
    validate(doc, "phantom.schema.json", "phantom")
    return doc


def load_rois(path, cfg: AcquisitionConfig):
    doc = _read_doc(path, "rois")
    validate(doc, "rois.schema.json", "rois")
    return fio.rois_from_json(doc, cfg)


def _acq(cfg: dict) -> AcquisitionConfig:
    return AcquisitionConfig.from_dict(cfg["acquisition"])


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch
         else _dt.datetime.now(_dt.timezone.utc))
    return t.replace(microsecond=0).isoformat()


def write_manifest(out: Path, cfg_path, phantom_path, chash: str, stage: str):
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    fio.write_json(out / "manifest.json", {
        "stage": stage,
        "tool_version": __version__,
        "config_path": cfg_path,
        "phantom_path": phantom_path,
        "config_hash": chash,
        "created": _timestamp(),
        "outputs": {p.relative_to(out).as_posix(): fio.sha256_file(p) for p in files},
    })


def verify_manifest(out) -> list:
    """Paths whose content no longer matches the manifest."""
    out = Path(out)
    man = fio.read_json(out / "manifest.json")
    return [p for p, h in man["outputs"].items()
            if not (out / p).is_file() or fio.sha256_file(out / p) != h]


def _stage_config(sidecar: dict, override: Optional[str]) -> dict:
    return load_config(override) if override else sidecar["config"]


# ---------------------------------------------------------------- stages

def cmd_simulate(config_path, phantom_path, out, seed: int = 0, workers: int = 1) -> Path:
    cfg = load_config(config_path)
    ph_doc = load_phantom(phantom_path)
    chash = fio.config_hash(cfg)
    acq = _acq(cfg)
    spec = PhantomSpec.from_dict(ph_doc)
    spec.check_inside(acq)
    sim = cfg["simulation"]
    schedule = make_schedule(acq)
    grid = rasterize_phantom(spec, acq)
    raw = forward_sample(grid, schedule, acq, sim["freeze_readout_time"], sim["include_methyl"],
                         workers)
    sigma = 0.0
    if sim["snr"]:
        sigma = _kspace_sigma(spec, schedule, acq, sim)
        raw = add_noise(raw, sigma, seed)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fio.write_complex(out / RAW_FILE, raw.data, {
        "kind": "raw_kspace",
        "layout": "[arm][temporal][epoch][sample]",
        "dims": {"n_arms": schedule.n_arms, "n_temporal": schedule.n_temporal,
                 "n_epochs": schedule.n_epochs, "n_samples": len(schedule.arms[0]),
                 "n_spectral_points": acq.n_spectral_points},
        "schedule": schedule.to_dict(),
        "noise_sigma": sigma,
        "seed": seed,
        "config": cfg,
        "config_hash": chash,
    })
    truth = grid.truth_maps()
    for name in TRUTH_MAPS:
        v = truth[name]
        fio.write_map(out / f"truth_{name}", MapImage(np.nan_to_num(v), np.isfinite(v)),
                      name, chash, unit="")
    fio.write_json(out / "phantom.json", {**ph_doc, "config_hash": chash})
    rois = [{"label": r.name, "shape": r.shape, "center_mm": list(r.center_mm),
             "size_mm": list(r.size_mm)} for r in spec.regions if r.roi]
    fio.write_json(out / ROIS_FILE, {"rois": rois, "config_hash": chash})
    write_manifest(out, config_path, phantom_path, chash, "simulate")
    return out


def _kspace_sigma(spec: PhantomSpec, schedule, acq, sim) -> float:
    """k-space noise giving the reference region its lipid S/N after reconstruction.

    The reconstruction is a weighted sum over samples, so image noise is
    sigma_k * sqrt(sum w^2).
    """
    ref_name = sim.get("snr_reference_region")
    cands = [r for r in spec.regions if (r.name == ref_name if ref_name else r.roi)]
    if not cands:
        cands = list(spec.regions)
    if not cands:
        raise ValidationError("simulation.snr needs a phantom region to reference")
    params: TissueParams = cands[0].params
    sigma_img = lipid_snr_sigma(params, acq.time_axis(), acq.field, sim["snr"])
    _, _, w = trajectory_arrays(schedule)
    return float(sigma_img / np.sqrt(np.sum(w ** 2)))


def cmd_recon(raw_dir, out, config_path=None) -> Path:
    raw_dir = Path(raw_dir)
    data, meta = fio.read_complex(raw_dir / RAW_FILE)
    if meta.get("kind") != "raw_kspace":
        raise ValidationError(f"{raw_dir / RAW_FILE} is not a raw k-space file")
    cfg = _stage_config(meta, config_path)
    acq = _acq(cfg)
    schedule = make_schedule(acq)
    d = meta["dims"]
    want = (schedule.n_arms, schedule.n_temporal, schedule.n_epochs, len(schedule.arms[0]))
    got = (d["n_arms"], d["n_temporal"], d["n_epochs"], d["n_samples"])
    if data.shape != want or got != want:
        raise ValidationError(f"raw dims {data.shape} do not match the configuration {want}")
    if not np.all(np.isfinite(data)):
        raise NumericalFailure(f"{raw_dir / RAW_FILE} holds non-finite samples")
    raw = RawKSpace(data, schedule, acq, meta.get("noise_sigma", 0.0), meta.get("seed"))
    g = cfg["gridding"]
    ds = reconstruct(raw, GriddingConfig(g["oversampling"], g["width"], g["beta"]))
    chash = fio.config_hash(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fio.save_dataset(out / DATASET_FILE, ds, acq, chash)
    side = fio.read_json(out / "dataset.json")
    side["config"] = cfg
    side["source"] = {"raw_sha256": fio.sha256_file(raw_dir / RAW_FILE)}
    fio.write_json(out / "dataset.json", side)
    write_manifest(out, config_path, None, chash, "recon")
    return out


def _rois_or_default(rois_path, dataset_dir: Path, acq, warn=True):
    path = Path(rois_path) if rois_path else None
    if path is None:
        for cand in (dataset_dir / ROIS_FILE, dataset_dir.parent / "raw" / ROIS_FILE):
            if cand.is_file():
                path = cand
                break
    return load_rois(path, acq) if path else []


def cmd_analyze(dataset_dir, out, rois_path=None, config_path=None, workers: int = 1,
                dump_spectra: bool = False) -> Path:
    dataset_dir = Path(dataset_dir)
    ds, acq, meta = fio.load_dataset(dataset_dir / DATASET_FILE)
    cfg = _stage_config(meta, config_path)
    chash = fio.config_hash(cfg)
    settings = an.AnalysisSettings.from_dict(cfg["analysis"])
    maps = an.analyze_dataset(ds, settings, workers, keep_spectra=dump_spectra)
    rois = _rois_or_default(rois_path, dataset_dir, acq)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fio.write_map(out / "indicator", maps.indicator, "indicator_pct", chash)
    fio.write_map(out / "ff_csa", maps.ff_csa, "ff_csa_pct", chash)
    fio.write_csv(out / "masked.csv", ("iy", "ix", "reason"),
                  ((iy, ix, r) for (iy, ix), r in sorted(maps.reasons.items())),
                  f"config_hash={chash}")
    rows = []
    for roi in rois:
        for name, m in (("indicator_pct", maps.indicator), ("ff_csa_pct", maps.ff_csa)):
            try:
                mean, sd, n = an.roi_aggregate(m, roi)
                rows.append((roi.label, name, mean, sd, n, "ok"))
            except an.EmptyRoiError:
                print(f"warning: ROI {roi.label!r} has no valid {name} voxels; skipped",
                      file=sys.stderr)
                rows.append((roi.label, name, float("nan"), float("nan"), 0, "skipped"))
    fio.write_csv(out / "roi_summary.csv", ("roi", "metric", "mean", "sd", "n", "status"), rows,
                  f"config_hash={chash}")
    fio.write_json(out / ROIS_FILE, {
        "rois": [{"label": r.label, "voxels": [list(v) for v in r.indices]} for r in rois],
        "config_hash": chash})
    if dump_spectra and maps.spectra:
        sel = set()
        for roi in rois:
            sel |= set(roi.indices)
        sdir = out / "spectra"
        sdir.mkdir(exist_ok=True)
        for (iy, ix), spec in sorted(maps.spectra.items()):
            if sel and (iy, ix) not in sel:
                continue
            fio.write_csv(sdir / f"spectrum_{iy:03d}_{ix:03d}.csv", ("ppm", "amplitude"),
                          zip(spec.ppm.tolist(), spec.amplitudes.tolist()), f"config_hash={chash}")
    fio.write_json(out / "analysis.json", {"config": cfg, "config_hash": chash,
                                           "settings": settings.to_dict()})
    write_manifest(out, config_path, None, chash, "analyze")
    return out


def _truth_dir(dataset_dir: Path) -> Optional[Path]:
    cand = dataset_dir.parent / "raw"
    return cand if (cand / "truth_fiber_angle_rad.f32").is_file() else None


def cmd_quantify(dataset_dir, out, rois_path=None, config_path=None, workers: int = 1,
                 truth_dir=None) -> Path:
    dataset_dir = Path(dataset_dir)
    ds, acq, meta = fio.load_dataset(dataset_dir / DATASET_FILE)
    cfg = _stage_config(meta, config_path)
    chash = fio.config_hash(cfg)
    q = cfg["quantify"]
    rois = _rois_or_default(rois_path, dataset_dir, acq)
    if q["mask"] == "rois" and rois:
        mask = np.zeros((ds.ny, ds.nx), bool)
        for r in rois:
            mask |= r.mask(ds.ny, ds.nx)
    elif q["mask"] in ("rois", "lipid"):
        settings = an.AnalysisSettings.from_dict(cfg["analysis"])
        energy = np.zeros((ds.ny, ds.nx))
        for iy in range(ds.ny):
            for ix in range(ds.nx):
                va = an.analyze_fid(ds.fids[iy, ix], ds.dwell_s, ds.field, settings)
                energy[iy, ix] = va.indicator.band_energy
        mask = an.lipid_mask(energy, settings.min_band_energy_fraction)
    else:
        mask = np.ones((ds.ny, ds.nx), bool)
    mask &= np.any(ds.fids != 0, axis=-1)

    theta_map = None
    tdir = Path(truth_dir) if truth_dir else _truth_dir(dataset_dir)
    if q["use_truth_angles"] and tdir is not None:
        theta_map = fio.read_map(tdir / "truth_fiber_angle_rad").values
    theta = None if q["fiber_angle_deg"] is None else float(np.radians(q["fiber_angle_deg"]))
    model = qf.default_peak_model(theta, q["imcl_halfwidth_ppm"], q["emcl_halfwidth_ppm"])
    if theta_map is not None:
        theta_map = np.nan_to_num(theta_map)
    res = qf.fit_dataset(ds, mask, model, workers, theta_map=theta_map,
                         imcl_halfwidth_ppm=q["imcl_halfwidth_ppm"],
                         emcl_halfwidth_ppm=q["emcl_halfwidth_ppm"])

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fio.write_map(out / "imcl_pct", res.imcl_pct, "imcl_pct", chash)
    fio.write_map(out / "ff_fit", res.ff_fit, "ff_fit_pct", chash)
    fio.write_csv(out / "fits.csv", qf.FIT_TABLE_COLUMNS, qf.fit_table_rows(res.fits),
                  f"config_hash={chash}")
    fio.write_csv(out / "failures.csv", ("iy", "ix", "reason"),
                  ((iy, ix, r) for (iy, ix), r in sorted(res.failures.items())),
                  f"config_hash={chash}")
    fio.write_json(out / "quantify.json", {"config": cfg, "config_hash": chash,
                                           "n_fitted": len(res.fits),
                                           "n_failed": len(res.failures)})
    write_manifest(out, config_path, None, chash, "quantify")
    return out


# ---------------------------------------------------------------- stats / report

METRICS = (
    ("indicator_pct", "Apparent IMCL/EMCL content indicator (%)", "analysis", "indicator"),
    ("imcl_pct", "IMCL % (peak fit)", "quantify", "imcl_pct"),
    ("ff_fit_pct", "FF, peak fit (%)", "quantify", "ff_fit"),
    ("ff_csa_pct", "FF, CSA (%)", "analysis", "ff_csa"),
)


def _external_maps(path, shape) -> dict:
    """Voxel table with columns iy, ix, imcl_pct[, ff_pct] from an outside fitter."""
    rows = fio.read_csv(path)
    if not rows or not {"iy", "ix", "imcl_pct"} <= set(rows[0]):
        raise ValidationError(f"{path}: needs columns iy, ix, imcl_pct")
    out = {}
    for col, key in (("imcl_pct", "imcl_pct"), ("ff_pct", "ff_fit_pct")):
        if col not in rows[0]:
            continue
        v = np.full(shape, np.nan)
        for r in rows:
            v[int(r["iy"]), int(r["ix"])] = float(r[col])
        out[key] = MapImage(np.nan_to_num(v), np.isfinite(v))
    return out


def collect_maps(analysis_dir, quantify_dir=None, quant_table=None) -> dict:
    analysis_dir = Path(analysis_dir)
    maps = {}
    for key, _, src, stem in METRICS:
        if src == "analysis":
            maps[key] = fio.read_map(analysis_dir / stem)
    shape = maps["indicator_pct"].values.shape
    if quant_table:
        maps.update(_external_maps(quant_table, shape))
    elif quantify_dir:
        for key, _, src, stem in METRICS:
            if src == "quantify":
                maps[key] = fio.read_map(Path(quantify_dir) / stem)
    return maps


def compute_stats(maps: dict, rois: list, groups=None) -> dict:
    """Group comparison, Spearman matrix, regression and FF bias from voxel maps."""
    by_label = {r.label: r for r in rois}
    if groups:
        missing = [g for g in groups if g not in by_label]
        if missing:
            raise ValidationError(f"report groups not among the ROIs: {missing}")
        chosen = [by_label[g] for g in groups]
    else:
        chosen = rois[:2]
    valid = [r for r in chosen if an.roi_values(maps["indicator_pct"], r).size >= 2]
    if len(valid) < 2:
        raise ValidationError("the report needs two ROIs with at least two valid voxels each")
    ga, gb = valid

    table = []
    for key, label, _, _ in METRICS:
        if key not in maps:
            continue
        a, b = an.roi_values(maps[key], ga), an.roi_values(maps[key], gb)
        row = {"metric": key, "label": label,
               "mean_a": float(np.mean(a)) if a.size else float("nan"),
               "sd_a": float(np.std(a, ddof=1)) if a.size > 1 else float("nan"),
               "n_a": int(a.size),
               "mean_b": float(np.mean(b)) if b.size else float("nan"),
               "sd_b": float(np.std(b, ddof=1)) if b.size > 1 else float("nan"),
               "n_b": int(b.size), "t": float("nan"), "df": float("nan"),
               "p": float("nan"), "trend": ""}
        try:
            r = st.welch_t_test(a, b)
            row.update(t=r.statistic, df=r.df, p=r.p_value, trend=r.direction)
        except (st.InsufficientDataError, st.DegenerateDataError):
            pass
        table.append(row)

    sel = np.zeros(maps["indicator_pct"].values.shape, bool)
    for r in chosen:
        sel |= r.mask(*sel.shape)
    cols = {}
    for key, _, _, _ in METRICS:
        if key in maps:
            m = maps[key]
            cols[key] = np.where(m.valid & sel, m.values, np.nan)[sel]
    matrix = st.correlation_matrix(cols)

    scatter = []
    iy, ix = np.nonzero(sel)
    lab = {}
    for r in chosen:
        for v in r.indices:
            lab.setdefault(v, r.label)
    reg = None
    if "imcl_pct" in maps:
        ind, imcl = maps["indicator_pct"], maps["imcl_pct"]
        for y, x in zip(iy, ix):
            if ind.valid[y, x] and imcl.valid[y, x]:
                scatter.append((int(y), int(x), lab[(int(y), int(x))], float(imcl.values[y, x]),
                                float(ind.values[y, x])))
        if len(scatter) >= 2:
            try:
                reg = st.linreg([s[3] for s in scatter], [s[4] for s in scatter])
            except st.DegenerateDataError:
                reg = None

    bias = None
    if "ff_fit_pct" in maps:
        both = maps["ff_csa_pct"].valid & maps["ff_fit_pct"].valid & sel
        if both.any():
            d = maps["ff_csa_pct"].values[both] - maps["ff_fit_pct"].values[both]
            bias = {"mean_diff": float(np.mean(d)), "n": int(d.size)}
    return {"groups": (ga.label, gb.label), "table": table, "matrix": matrix,
            "scatter": scatter, "regression": reg, "ff_bias": bias}


def write_stats(res: dict, out: Path, chash: str):
    out.mkdir(parents=True, exist_ok=True)
    ga, gb = res["groups"]
    fio.write_csv(out / "fig3_table.csv",
                  ("metric", f"mean_{ga}", f"sd_{ga}", f"n_{ga}", f"mean_{gb}", f"sd_{gb}",
                   f"n_{gb}", "t", "df", "p", "trend"),
                  ((r["metric"], r["mean_a"], r["sd_a"], r["n_a"], r["mean_b"], r["sd_b"],
                    r["n_b"], r["t"], r["df"], r["p"], r["trend"]) for r in res["table"]),
                  f"config_hash={chash}")
    m = res["matrix"]
    rows = []
    for i, a in enumerate(m.names):
        for j, b in enumerate(m.names):
            rows.append((a, b, float(m.rho[i, j]), float(m.p[i, j]), int(m.n[i, j]),
                         int(m.significant[i, j])))
    fio.write_csv(out / "fig4_matrix.csv", ("row", "col", "rho", "p", "n", "significant"), rows,
                  f"config_hash={chash}")
    fio.write_csv(out / "scatter.csv", ("iy", "ix", "roi", "imcl_pct", "indicator_pct"),
                  res["scatter"], f"config_hash={chash}")


def _num(v, fmt="{:.2f}"):
    return "n/a" if v is None or not np.isfinite(v) else fmt.format(v)


def render_report(res: dict, chash: str) -> str:
    ga, gb = res["groups"]
    lines = ["# IMCL/EMCL mapping report", "", f"config hash: `{chash}`", "",
             f"## Group comparison: {ga} vs {gb}", "",
             f"| Metric | {ga} mean (SD) | {gb} mean (SD) | p (Welch) | {ga}→{gb} |",
             "|---|---|---|---|---|"]
    for r in res["table"]:
        star = "*" if np.isfinite(r["p"]) and r["p"] < 0.05 else ""
        lines.append(f"| {r['label']} | {_num(r['mean_a'])} ({_num(r['sd_a'])}) | "
                     f"{_num(r['mean_b'])} ({_num(r['sd_b'])}) | {_num(r['p'], '{:.3g}')}{star} | "
                     f"{r['trend']} |")
    lines += ["", "\\* p < 0.05, two-sided Welch t-test.", "",
              "## Spearman correlation matrix", "",
              "Coefficients in bold have p < 0.05.", ""]
    m = res["matrix"]
    lines.append("| | " + " | ".join(m.names) + " |")
    lines.append("|---" * (len(m.names) + 1) + "|")
    for i, a in enumerate(m.names):
        cells = []
        for j in range(len(m.names)):
            v = _num(m.rho[i, j], "{:.3f}")
            cells.append(f"**{v}**" if m.significant[i, j] else v)
        lines.append(f"| {a} | " + " | ".join(cells) + " |")
    lines += ["", "## Indicator vs IMCL %", ""]
    reg = res["regression"]
    if reg is None:
        lines.append("Regression unavailable (fewer than two paired voxels).")
    else:
        lines.append(f"indicator = {reg.slope:.4f} × IMCL% + {reg.intercept:.3f} "
                     f"(r² = {reg.r2:.3f}, n = {reg.n}); points in scatter.csv.")
    lines += ["", "## Fat fraction: CSA route vs peak fit", ""]
    bias = res["ff_bias"]
    if bias is None:
        lines.append("No voxels with both fat-fraction estimates.")
    else:
        high = bias["mean_diff"] > 0
        lines.append(f"The CSA route {'over' if high else 'under'}estimates FF relative to the "
                     f"peak fit by {abs(bias['mean_diff']):.2f} points on average "
                     f"(n = {bias['n']} voxels; bias sign {'+' if high else '-'}).")
        lines.append("")
        lines.append("Expected sign: +. The broad water line loses more of its Lorentzian "
                     "wings outside the water band than the narrow lipid lines lose outside "
                     "theirs, and in magnitude mode the water wings also leak into the lipid "
                     "band." + ("" if high else " This run shows the opposite sign."))
    return "\n".join(lines) + "\n"


def cmd_stats(analysis_dir, out, quantify_dir=None, rois_path=None, quant_table=None,
              config_path=None, write_report: bool = False) -> Path:
    analysis_dir = Path(analysis_dir)
    side = fio.read_json(analysis_dir / "analysis.json")
    cfg = _stage_config(side, config_path)
    chash = fio.config_hash(cfg)
    acq = _acq(cfg)
    rois = load_rois(rois_path or analysis_dir / ROIS_FILE, acq)
    if len(rois) < 2:
        raise ValidationError("at least two ROIs are required")
    maps = collect_maps(analysis_dir, quantify_dir, quant_table)
    res = compute_stats(maps, rois, cfg.get("report", {}).get("groups"))
    out = Path(out)
    write_stats(res, out, chash)
    if write_report:
        (out / "report.md").write_text(render_report(res, chash))
    write_manifest(out, config_path, None, chash, "report" if write_report else "stats")
    return out


def cmd_pipeline(config_path, phantom_path, out, seed: int = 0, workers: int = 1,
                 dump_spectra: bool = False) -> Path:
    out = Path(out)
    cmd_simulate(config_path, phantom_path, out / "raw", seed, workers)
    cmd_recon(out / "raw", out / "recon")
    cmd_analyze(out / "recon", out / "analysis", out / "raw" / ROIS_FILE, workers=workers,
                dump_spectra=dump_spectra)
    cmd_quantify(out / "recon", out / "quantify", out / "raw" / ROIS_FILE, workers=workers,
                 truth_dir=out / "raw")
    cmd_stats(out / "analysis", out / "report", out / "quantify", out / "raw" / ROIS_FILE,
              write_report=True)
    chash = fio.read_json(out / "raw" / "raw.json")["config_hash"]
    write_manifest(out, config_path, phantom_path, chash, "pipeline")
    return out


# ---------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imclmap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False, workers=False, dump=False):
        sp.add_argument("--config", help="configuration JSON (default: packaged or input sidecar)")
        sp.add_argument("--out", required=True, help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, default=0, help="noise seed")
        if workers:
            sp.add_argument("--workers", type=int, default=1, help="parallel workers")
        if dump:
            sp.add_argument("--dump-spectra", action="store_true",
                            help="write per-voxel registered spectra as CSV")
        return sp

    s = common(sub.add_parser("simulate", help="phantom -> raw spiral k-space"), True, True)
    s.add_argument("--phantom", help="phantom JSON (default: packaged GM/SM calf)")
    s = common(sub.add_parser("recon", help="raw k-space -> voxel FIDs"))
    s.add_argument("--raw", required=True, help="simulate output directory")
    s = common(sub.add_parser("analyze", help="indicator and CSA fat-fraction maps"),
               workers=True, dump=True)
    s.add_argument("--dataset", required=True, help="recon output directory")
    s.add_argument("--rois", help="ROI JSON")
    s = common(sub.add_parser("quantify", help="peak-fit IMCL %% and fat fraction"), workers=True)
    s.add_argument("--dataset", required=True, help="recon output directory")
    s.add_argument("--rois", help="ROI JSON")
    s.add_argument("--truth", help="simulate output directory holding truth maps")
    for name, hlp in (("stats", "group tests and correlation tables"),
                      ("report", "tables plus a markdown report")):
        s = common(sub.add_parser(name, help=hlp))
        s.add_argument("--analysis", required=True, help="analyze output directory")
        s.add_argument("--quantify", help="quantify output directory")
        s.add_argument("--quant-table", help="external voxel table (iy, ix, imcl_pct[, ff_pct])")
        s.add_argument("--rois", help="ROI JSON (default: the analysis ROIs)")
    s = common(sub.add_parser("pipeline", help="all stages"), True, True, True)
    s.add_argument("--phantom", help="phantom JSON")
    return p


def run(args) -> None:
    c = args.command
    if c == "simulate":
        cmd_simulate(args.config, args.phantom, args.out, args.seed, args.workers)
    elif c == "recon":
        cmd_recon(args.raw, args.out, args.config)
    elif c == "analyze":
        cmd_analyze(args.dataset, args.out, args.rois, args.config, args.workers,
                    args.dump_spectra)
    elif c == "quantify":
        cmd_quantify(args.dataset, args.out, args.rois, args.config, args.workers, args.truth)
    elif c in ("stats", "report"):
        cmd_stats(args.analysis, args.out, args.quantify, args.rois, args.quant_table,
                  args.config, write_report=c == "report")
    elif c == "pipeline":
        cmd_pipeline(args.config, args.phantom, args.out, args.seed, args.workers,
                     args.dump_spectra)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except (EmptySignalError, NumericalFailure, np.linalg.LinAlgError, FloatingPointError,
            st.DegenerateDataError, st.InsufficientDataError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, InvalidArgument, ConfigurationError, TrajectoryError,
            fio.FormatError, an.EmptyRoiError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
