"""Core domain types, spectral axes and ppm/Hz conversions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class InvalidArgument(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class EmptySignalError(ValueError):
    """Raised when a time-domain signal carries no energy."""


@dataclass(frozen=True)
class FieldConstants:
    """Scanner field constants.

    ``hz_per_ppm`` is numerically equal to the Larmor frequency in MHz.
    """

    larmor_mhz: float = 123.25
    water_ref_ppm: float = 4.70

    def __post_init__(self):
        if not self.larmor_mhz > 0:
            raise InvalidArgument(f"larmor_mhz must be > 0, got {self.larmor_mhz}")
        if not 0 < self.water_ref_ppm < 10:
            raise InvalidArgument(f"water_ref_ppm must be in (0, 10), got {self.water_ref_ppm}")

    @property
    def hz_per_ppm(self) -> float:
        return float(self.larmor_mhz)

    def to_dict(self) -> dict:
        return {"larmor_mhz": self.larmor_mhz, "water_ref_ppm": self.water_ref_ppm}


@dataclass(frozen=True)
class AcquisitionConfig:
    """Geometry, interleaving and spectral timing of one simulated exam."""

    fov_mm: float = 200.0
    grid_n: int = 64
    n_spatial_interleaves: int = 22
    n_temporal_interleaves: int = 5
    n_spectral_points: int = 1024
    spectral_dwell_s: float = 0.5e-3
    tr_s: float = 2.0
    te_s: float = 0.002
    readout_duration_s: float = 2.0e-3
    samples_per_arm: Optional[int] = None
    field: FieldConstants = field(default_factory=FieldConstants)

    def __post_init__(self):
        n = self.grid_n
        if n < 2 or n & (n - 1):
            raise InvalidArgument(f"grid_n must be a power of two, got {n}")
        if not self.fov_mm > 0:
            raise InvalidArgument("fov_mm must be > 0")
        if not self.spectral_dwell_s > 0:
            raise InvalidArgument("spectral_dwell_s must be > 0")
        if self.n_spatial_interleaves < 1 or self.n_temporal_interleaves < 1:
            raise InvalidArgument("interleave counts must be >= 1")
        if self.n_spectral_points < 2:
            raise InvalidArgument("n_spectral_points must be >= 2")
        if not self.readout_duration_s > 0:
            raise InvalidArgument("readout_duration_s must be > 0")

    @property
    def fov_m(self) -> float:
        return self.fov_mm * 1e-3

    @property
    def k_max(self) -> float:
        """Largest k-space radius in 1/m."""
        return self.grid_n / (2.0 * self.fov_m)

    @property
    def n_turns(self) -> float:
        return self.grid_n / (2.0 * self.n_spatial_interleaves)

    @property
    def n_samples_per_arm(self) -> int:
        if self.samples_per_arm is not None:
            return int(self.samples_per_arm)
        return int(round(4 * self.grid_n * self.n_turns))

    @property
    def spectral_epoch_s(self) -> float:
        return self.n_temporal_interleaves * self.spectral_dwell_s

    @property
    def n_epochs(self) -> int:
        """Readouts per temporal interleaf needed to cover ``n_spectral_points``."""
        t = self.n_temporal_interleaves
        return -(-self.n_spectral_points // t)

    @property
    def voxel_mm(self) -> float:
        return self.fov_mm / self.grid_n

    def voxel_positions_m(self):
        """Voxel-centre coordinates along one axis, FFT-centred (index N/2 at 0)."""
        n = self.grid_n
        return (np.arange(n) - n // 2) * (self.fov_m / n)

    def time_axis(self) -> np.ndarray:
        return np.arange(self.n_spectral_points) * self.spectral_dwell_s

    def to_dict(self) -> dict:
        return {
            "fov_mm": self.fov_mm,
            "grid_n": self.grid_n,
            "n_spatial_interleaves": self.n_spatial_interleaves,
            "n_temporal_interleaves": self.n_temporal_interleaves,
            "n_spectral_points": self.n_spectral_points,
            "spectral_dwell_s": self.spectral_dwell_s,
            "tr_s": self.tr_s,
            "te_s": self.te_s,
            "readout_duration_s": self.readout_duration_s,
            "samples_per_arm": self.samples_per_arm,
            "field": self.field.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AcquisitionConfig":
        d = dict(d)
        fld = FieldConstants(**d.pop("field", {}))
        return cls(field=fld, **d)


@dataclass(frozen=True)
class SpectralAxis:
    n: int
    dwell_s: float
    freq_hz: np.ndarray
    ppm: np.ndarray

    @property
    def bandwidth_hz(self) -> float:
        return 1.0 / self.dwell_s


@dataclass
class SpectroDataset:
    """Grid of per-voxel complex FIDs sharing one time axis.

    ``fids`` has shape (ny, nx, n). The first sample sits at ``te_s`` in
    scanner time but at 0 on ``time_s``.
    """

    fids: np.ndarray
    time_s: np.ndarray
    field: FieldConstants
    te_s: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fids.ndim != 3:
            raise InvalidArgument("fids must have shape (ny, nx, n)")
        if self.fids.shape[-1] != len(self.time_s):
            raise InvalidArgument("time axis length does not match FID length")
        if self.time_s[0] != 0 or np.any(np.diff(self.time_s) <= 0):
            raise InvalidArgument("time_s must start at 0 and increase strictly")

    @property
    def ny(self) -> int:
        return self.fids.shape[0]

    @property
    def nx(self) -> int:
        return self.fids.shape[1]

    @property
    def dwell_s(self) -> float:
        return float(self.time_s[1] - self.time_s[0])


@dataclass
class MapImage:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.valid.shape:
            raise InvalidArgument("values and valid mask differ in shape")
        self.valid = self.valid.astype(bool)
        if not np.all(np.isfinite(self.values[self.valid])):
            raise InvalidArgument("map values must be finite where valid")

    @property
    def ny(self) -> int:
        return self.values.shape[0]

    @property
    def nx(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Roi:
    """Labelled voxel set; ``indices`` holds (iy, ix) pairs."""

    label: str
    indices: tuple

    def __post_init__(self):
        idx = [tuple(int(v) for v in p) for p in self.indices]
        if len(set(idx)) != len(idx):
            raise InvalidArgument(f"ROI {self.label!r} has duplicate voxels")
        object.__setattr__(self, "indices", tuple(idx))

    def check_inside(self, ny: int, nx: int):
        for iy, ix in self.indices:
            if not (0 <= iy < ny and 0 <= ix < nx):
                raise InvalidArgument(f"ROI {self.label!r} voxel {(iy, ix)} outside grid")

    def mask(self, ny: int, nx: int) -> np.ndarray:
        self.check_inside(ny, nx)
        m = np.zeros((ny, nx), dtype=bool)
        if self.indices:
            iy, ix = np.array(self.indices).T
            m[iy, ix] = True
        return m


def build_spectral_axis(n_points: int, dwell_s: float, field: FieldConstants) -> SpectralAxis:
    """Centred frequency axis over [-BW/2, BW/2) with matching ppm values.

    Positive offsets are upfield of water, so ppm falls as frequency rises
    and the DC bin maps to the water reference.
    """
    if n_points < 2:
        raise InvalidArgument("n_points must be >= 2")
    if not dwell_s > 0:
        raise InvalidArgument(f"dwell must be positive, got {dwell_s}")
    freq = np.fft.fftshift(np.fft.fftfreq(n_points, dwell_s))
    return SpectralAxis(n_points, dwell_s, freq, offset_hz_to_ppm(freq, field))


def ppm_to_offset_hz(ppm, field: FieldConstants):
    """Difference frequency (Hz) of a line at ``ppm``; positive upfield of water."""
    out = (field.water_ref_ppm - np.asarray(ppm, dtype=float)) * field.hz_per_ppm
    return float(out) if out.ndim == 0 else out


def offset_hz_to_ppm(offset_hz, field: FieldConstants):
    out = field.water_ref_ppm - np.asarray(offset_hz, dtype=float) / field.hz_per_ppm
    return float(out) if out.ndim == 0 else out


def band_indices(ppm: np.ndarray, ppm_lo: float, ppm_hi: float) -> np.ndarray:
    """Indices of bins whose centre ppm lies in the closed band [lo, hi].

    Accepts a ppm array or anything with a ``ppm`` attribute.
    """
    ppm = np.asarray(getattr(ppm, "ppm", ppm))
    if not ppm_lo < ppm_hi:
        raise InvalidArgument(f"empty band [{ppm_lo}, {ppm_hi}]")
    idx = np.flatnonzero((ppm >= ppm_lo) & (ppm <= ppm_hi))
    if idx.size == 0:
        raise InvalidArgument(f"no bins inside [{ppm_lo}, {ppm_hi}] ppm")
    return idx
