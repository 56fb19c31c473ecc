"""Cumulative-sum indicator, CSA fat fraction, masks and ROI summaries."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import spectral
from .model import (EmptySignalError, FieldConstants, InvalidArgument, MapImage, Roi,
                    SpectralAxis, SpectroDataset, band_indices)

INDICATOR_BAND_PPM = (1.1, 1.7)
INDICATOR_PPM = 1.40
LIPID_BAND_PPM = (0.8, 2.3)
WATER_BAND_PPM = spectral.WATER_BAND_PPM


class EmptyRoiError(ValueError):
    pass


@dataclass(frozen=True)
class CsaCurve:
    ppm: np.ndarray
    values: np.ndarray
    band_energy: float
    valid: bool

    def value_at(self, ppm: float) -> float:
        """Curve value at the bin nearest ``ppm``; ties go to the lower-ppm bin."""
        return float(self.values[int(np.argmin(np.abs(self.ppm - ppm)))])


@dataclass(frozen=True)
class IndicatorResult:
    indicator_pct: float
    band_energy: float
    valid: bool
    reason: str = ""


@dataclass(frozen=True)
class FatFractionResult:
    ff_pct: float
    valid: bool
    reason: str = ""


def csa_curve(spec: spectral.RegisteredSpectrum, band=INDICATOR_BAND_PPM) -> CsaCurve:
    """Normalised cumulative sum of amplitudes across the band, in ascending ppm."""
    idx = band_indices(spec.ppm, *band)
    order = np.argsort(spec.ppm[idx], kind="stable")
    ppm = spec.ppm[idx][order]
    csum = np.cumsum(spec.amplitudes[idx][order])
    total = csum[-1]
    if not total > 0:
        return CsaCurve(ppm, np.zeros_like(csum), 0.0, False)
    return CsaCurve(ppm, csum / total, float(total), True)


def apparent_content_indicator(spec: spectral.RegisteredSpectrum, band=INDICATOR_BAND_PPM,
                               at_ppm: float = INDICATOR_PPM) -> IndicatorResult:
    """Percentage of band amplitude accumulated from the band's low edge up to 1.40 ppm."""
    curve = csa_curve(spec, band)
    if not curve.valid:
        return IndicatorResult(float("nan"), 0.0, False, "zero band energy")
    return IndicatorResult(100.0 * curve.value_at(at_ppm), curve.band_energy, True)


def ff_from_csa(conventional: np.ndarray, axis: SpectralAxis, registration_offset_hz: float,
                field: FieldConstants = FieldConstants(), lipid_band=LIPID_BAND_PPM,
                water_band=WATER_BAND_PPM) -> FatFractionResult:
    """Fat fraction from band sums of a registered conventional spectrum.

    ``conventional`` is normally the magnitude spectrum; a phased absorption
    spectrum from :func:`spectral.phased_absorption` is also accepted.
    """
    ppm = spectral.registered_axis(axis, registration_offset_hz, field)
    lipid = float(conventional[band_indices(ppm, *lipid_band)].sum())
    water = float(conventional[band_indices(ppm, *water_band)].sum())
    if not lipid + water > 0:
        return FatFractionResult(float("nan"), False, "zero total")
    return FatFractionResult(100.0 * lipid / (lipid + water), True)


def lipid_mask(band_energy: np.ndarray, min_band_energy_fraction: float = 0.1) -> np.ndarray:
    """Keep voxels whose band energy reaches a fraction of the non-zero median."""
    e = np.nan_to_num(np.asarray(band_energy, dtype=float))
    nz = e[e > 0]
    if nz.size == 0:
        return np.zeros(e.shape, dtype=bool)
    return e >= min_band_energy_fraction * np.median(nz)


def roi_aggregate(m: MapImage, roi: Roi):
    """Mean, sample SD and count over the valid voxels of ``roi``."""
    sel = roi.mask(m.ny, m.nx) & m.valid
    vals = m.values[sel]
    if vals.size == 0:
        raise EmptyRoiError(f"ROI {roi.label!r} has no valid voxels")
    sd = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
    return float(np.mean(vals)), sd, int(vals.size)


def roi_values(m: MapImage, roi: Roi) -> np.ndarray:
    sel = roi.mask(m.ny, m.nx) & m.valid
    return m.values[sel]


@dataclass(frozen=True)
class AnalysisSettings:
    lb_hz: float = spectral.DEFAULT_LB_HZ
    zerofill: int = spectral.DEFAULT_ZEROFILL
    mode: str = "absorption"
    baseline: bool = True
    band_ppm: tuple = INDICATOR_BAND_PPM
    indicator_ppm: float = INDICATOR_PPM
    lipid_band_ppm: tuple = LIPID_BAND_PPM
    water_band_ppm: tuple = WATER_BAND_PPM
    min_band_energy_fraction: float = 0.1
    min_dominance: float = 0.5
    ff_mode: str = "absorption"

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "AnalysisSettings":
        d = dict(d or {})
        for k in ("band_ppm", "lipid_band_ppm", "water_band_ppm"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class VoxelAnalysis:
    indicator: IndicatorResult
    ff: FatFractionResult
    dominance: float
    water_offset_hz: float
    spectrum: Optional[spectral.RegisteredSpectrum] = None


def analyze_fid(fid, dwell_s: float, field: FieldConstants,
                settings: AnalysisSettings = AnalysisSettings(), keep_spectrum: bool = False):
    try:
        reg = spectral.magnitude_fid_spectrum(fid, dwell_s, settings.lb_hz, settings.zerofill,
                                              field, settings.mode, settings.baseline)
    except EmptySignalError:
        nan = float("nan")
        return VoxelAnalysis(IndicatorResult(nan, 0.0, False, "empty signal"),
                             FatFractionResult(nan, False, "empty signal"), 0.0, nan)
    ind = apparent_content_indicator(reg, settings.band_ppm, settings.indicator_ppm)
    if settings.ff_mode == "absorption":
        conv, axis = spectral.phased_absorption(fid, dwell_s, reg.water_offset_hz, settings.lb_hz,
                                                settings.zerofill, field)
    elif settings.ff_mode == "magnitude":
        conv, axis = spectral.conventional_magnitude_spectrum(fid, dwell_s, settings.lb_hz,
                                                              settings.zerofill, field)
    else:
        raise InvalidArgument(f"unknown ff_mode {settings.ff_mode!r}")
    ff = ff_from_csa(conv, axis, reg.water_offset_hz, field, settings.lipid_band_ppm,
                     settings.water_band_ppm)
    return VoxelAnalysis(ind, ff, reg.dominance_ratio, reg.water_offset_hz,
                         reg if keep_spectrum else None)


@dataclass
class AnalysisMaps:
    indicator: MapImage
    ff_csa: MapImage
    band_energy: np.ndarray
    dominance: np.ndarray
    water_offset_hz: np.ndarray
    reasons: dict
    spectra: Optional[dict] = None


def analyze_dataset(ds: SpectroDataset, settings: AnalysisSettings = AnalysisSettings(),
                    workers: int = 1, keep_spectra: bool = False) -> AnalysisMaps:
    """Per-voxel indicator and CSA fat fraction maps with validity masks."""
    ny, nx = ds.ny, ds.nx
    dwell = ds.dwell_s

    def row(iy):
        return [analyze_fid(ds.fids[iy, ix], dwell, ds.field, settings, keep_spectra)
                for ix in range(nx)]

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(row, range(ny)))
    else:
        rows = [row(iy) for iy in range(ny)]

    ind = np.full((ny, nx), np.nan)
    ff = np.full((ny, nx), np.nan)
    energy = np.zeros((ny, nx))
    dom = np.zeros((ny, nx))
    off = np.full((ny, nx), np.nan)
    ind_ok = np.zeros((ny, nx), bool)
    ff_ok = np.zeros((ny, nx), bool)
    reasons = {}
    spectra = {} if keep_spectra else None
    for iy, r in enumerate(rows):
        for ix, va in enumerate(r):
            ind[iy, ix] = va.indicator.indicator_pct
            energy[iy, ix] = va.indicator.band_energy
            ind_ok[iy, ix] = va.indicator.valid
            ff[iy, ix] = va.ff.ff_pct
            ff_ok[iy, ix] = va.ff.valid
            dom[iy, ix] = va.dominance
            off[iy, ix] = va.water_offset_hz
            if not va.indicator.valid:
                reasons[(iy, ix)] = va.indicator.reason
            if keep_spectra and va.spectrum is not None:
                spectra[(iy, ix)] = va.spectrum

    lip = lipid_mask(energy, settings.min_band_energy_fraction)
    dominant = dom >= settings.min_dominance
    for iy, ix in zip(*np.nonzero(ind_ok & ~lip)):
        reasons[(iy, ix)] = "low band energy"
    for iy, ix in zip(*np.nonzero(ind_ok & lip & ~dominant)):
        reasons[(iy, ix)] = "water not dominant"
    ind_valid = ind_ok & lip & dominant
    return AnalysisMaps(
        indicator=MapImage(np.where(ind_valid, ind, np.nan), ind_valid),
        ff_csa=MapImage(np.where(ff_ok & dominant, ff, np.nan), ff_ok & dominant),
        band_energy=energy,
        dominance=dom,
        water_offset_hz=off,
        reasons=reasons,
        spectra=spectra,
    )
