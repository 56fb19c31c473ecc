"""Per-voxel spectral preprocessing.

The modulus of a water-dominated FID oscillates at the difference
frequencies between water and every other line, so its Fourier transform
shows the lipid lines at fixed offsets from a water line pinned to 0 Hz,
regardless of the voxel's zero-order phase or B0 shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (EmptySignalError, FieldConstants, InvalidArgument, SpectralAxis,
                    band_indices, build_spectral_axis, offset_hz_to_ppm)

DEFAULT_LB_HZ = 5.0
DEFAULT_ZEROFILL = 2
WATER_BAND_PPM = (4.2, 5.2)
AMPLITUDE_MODES = ("absorption", "magnitude")


@dataclass(frozen=True)
class RegisteredSpectrum:
    """Non-negative spectrum of |FID| on the positive difference-frequency axis."""

    amplitudes: np.ndarray
    freq_hz: np.ndarray
    ppm: np.ndarray
    lb_hz: float
    zerofill: int
    dominance_ratio: float
    mode: str = "absorption"
    water_offset_hz: float = 0.0

    def __post_init__(self):
        if np.any(self.amplitudes < 0):
            raise InvalidArgument("amplitudes must be non-negative")

    def scaled(self, alpha: float) -> "RegisteredSpectrum":
        return RegisteredSpectrum(self.amplitudes * alpha, self.freq_hz, self.ppm, self.lb_hz,
                                  self.zerofill, self.dominance_ratio, self.mode,
                                  self.water_offset_hz)


def _check(fid, lb_hz, zerofill, min_len=64):
    fid = np.asarray(fid)
    if fid.ndim != 1 or fid.size < min_len:
        raise InvalidArgument(f"FID must be 1-D with at least {min_len} points")
    if lb_hz < 0:
        raise InvalidArgument("lb_hz must be >= 0")
    if zerofill not in (1, 2, 4):
        raise InvalidArgument("zerofill must be 1, 2 or 4")
    if not np.any(fid):
        raise EmptySignalError("FID is identically zero")
    return fid


def modulus_signal(fid, dwell_s: float, lb_hz: float = DEFAULT_LB_HZ, baseline: bool = True,
                   first_point: float = 0.5) -> np.ndarray:
    """Processed |s(t)| ready for the real FFT.

    The modulus is rounded to float32, the storage precision of datasets,
    so that a global phase factor applied in double precision cannot change
    the result.
    """
    m = np.abs(np.asarray(fid)).astype(np.float32).astype(np.float64)
    if baseline:
        m = m - m[-max(1, m.size // 10):].mean()
    t = np.arange(m.size) * dwell_s
    if lb_hz:
        m = m * np.exp(-np.pi * lb_hz * t)
    m[0] *= first_point
    return m


def magnitude_fid_spectrum(fid, dwell_s: float, lb_hz: float = DEFAULT_LB_HZ,
                           zerofill: int = DEFAULT_ZEROFILL,
                           field: FieldConstants = FieldConstants(), mode: str = "absorption",
                           baseline: bool = True, first_point: float = 0.5) -> RegisteredSpectrum:
    """Fourier transform of the FID modulus, giving a phase- and shift-registered spectrum.

    Parameters
    ----------
    fid : complex array, at least 64 points
    dwell_s : sampling interval
    lb_hz : exponential line broadening exp(-pi lb t)
    zerofill : 1, 2 or 4
    mode : ``"absorption"`` keeps the positive real part, ``"magnitude"``
        the modulus of the transform.
    baseline : subtract the mean of the last 10% of |s| first
    first_point : scale of the t=0 sample (0.5 removes the DFT baseline offset)
    """
    fid = _check(fid, lb_hz, zerofill)
    if mode not in AMPLITUDE_MODES:
        raise InvalidArgument(f"mode must be one of {AMPLITUDE_MODES}")
    m = modulus_signal(fid, dwell_s, lb_hz, baseline, first_point)
    nfft = m.size * zerofill
    x = np.fft.rfft(m, nfft)
    amp = np.clip(x.real, 0, None) if mode == "absorption" else np.abs(x)
    freq = np.fft.rfftfreq(nfft, dwell_s)
    return RegisteredSpectrum(
        amplitudes=amp,
        freq_hz=freq,
        ppm=offset_hz_to_ppm(freq, field),
        lb_hz=float(lb_hz),
        zerofill=int(zerofill),
        dominance_ratio=water_dominance_ratio(fid, dwell_s, field),
        mode=mode,
        water_offset_hz=estimate_water_offset_hz(fid, dwell_s, field),
    )


def conventional_spectrum(fid, dwell_s: float, lb_hz: float = DEFAULT_LB_HZ,
                          zerofill: int = DEFAULT_ZEROFILL, first_point: float = 0.5) -> np.ndarray:
    """Complex spectrum on the centred offset axis (positive = upfield of water)."""
    fid = np.asarray(fid, dtype=complex)
    t = np.arange(fid.size) * dwell_s
    s = np.conj(fid) * np.exp(-np.pi * lb_hz * t)
    s[0] *= first_point
    return np.fft.fftshift(np.fft.fft(s, fid.size * zerofill))


def conventional_magnitude_spectrum(fid, dwell_s: float, lb_hz: float = DEFAULT_LB_HZ,
                                    zerofill: int = DEFAULT_ZEROFILL,
                                    field: FieldConstants = FieldConstants(),
                                    first_point: float = 0.5):
    """Apodised, zero-filled magnitude spectrum with its (unregistered) axis."""
    fid = _check(fid, lb_hz, zerofill)
    spec = np.abs(conventional_spectrum(fid, dwell_s, lb_hz, zerofill, first_point))
    return spec, build_spectral_axis(spec.size, dwell_s, field)


def phased_absorption(fid, dwell_s: float, offset_hz: float, lb_hz: float = DEFAULT_LB_HZ,
                      zerofill: int = DEFAULT_ZEROFILL, field: FieldConstants = FieldConstants(),
                      window_ppm: float = 0.2):
    """Real part of the conventional spectrum after zero-order phasing on the water line.

    The phase is that of the complex sum over +-``window_ppm`` around
    ``offset_hz``, where the dispersion of a symmetric line cancels.
    Absorption tails fall as 1/f^2, so band sums are not inflated by the
    water line's wings.
    """
    fid = _check(fid, lb_hz, zerofill)
    x = conventional_spectrum(fid, dwell_s, lb_hz, zerofill)
    axis = build_spectral_axis(x.size, dwell_s, field)
    sel = np.abs(axis.freq_hz - offset_hz) <= window_ppm * field.hz_per_ppm
    return (x * np.exp(-1j * np.angle(x[sel].sum()))).real, axis


def water_dominance_ratio(fid, dwell_s: float, field: FieldConstants = FieldConstants(),
                          band=WATER_BAND_PPM) -> float:
    """Share of spectral energy within the water band of the conventional spectrum."""
    fid = np.asarray(fid)
    if not np.any(fid):
        return 0.0
    e = np.abs(conventional_spectrum(fid, dwell_s, 0.0, 2)) ** 2
    axis = build_spectral_axis(e.size, dwell_s, field)
    return float(e[band_indices(axis.ppm, *band)].sum() / e.sum())


def estimate_water_offset_hz(fid, dwell_s: float, field: FieldConstants = FieldConstants(),
                             search_ppm: float = 1.0) -> float:
    """Offset of the dominant line near the water reference, parabolic-interpolated.

    Returned on the conventional axis, so a water line at +b0 Hz gives -b0.
    """
    spec = np.abs(conventional_spectrum(fid, dwell_s, 2.0, 4))
    axis = build_spectral_axis(spec.size, dwell_s, field)
    idx = band_indices(axis.ppm, field.water_ref_ppm - search_ppm, field.water_ref_ppm + search_ppm)
    k = idx[np.argmax(spec[idx])]
    df = axis.freq_hz[1] - axis.freq_hz[0]
    if 0 < k < spec.size - 1:
        a, b, c = spec[k - 1], spec[k], spec[k + 1]
        den = a - 2 * b + c
        shift = 0.5 * (a - c) / den if den != 0 else 0.0
    else:
        shift = 0.0
    return float(axis.freq_hz[k] + shift * df)


def registered_axis(axis: SpectralAxis, offset_hz: float, field: FieldConstants) -> np.ndarray:
    """ppm values of a conventional axis after moving ``offset_hz`` to the water reference."""
    return offset_hz_to_ppm(axis.freq_hz - offset_hz, field)
