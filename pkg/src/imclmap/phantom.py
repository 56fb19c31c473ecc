"""Digital calf phantom and the Fourier forward model that samples it."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .acquisition import AcquisitionSchedule
from .model import AcquisitionConfig, FieldConstants, InvalidArgument, ppm_to_offset_hz

IMCL_PPM = 1.30
METHYL_PPM = 0.90
EMCL_SHIFT_MAX_PPM = 0.20
MAGIC_ANGLE_RAD = float(np.arccos(1 / np.sqrt(3)))


@dataclass(frozen=True)
class TissueParams:
    water_amp: float = 0.0
    water_t2s_s: float = 0.030
    imcl_amp: float = 0.0
    emcl_amp: float = 0.0
    lipid_t2s_s: float = 0.100
    fiber_angle_rad: float = 0.0
    b0_offset_hz: float = 0.0
    phase0_rad: float = 0.0

    def __post_init__(self):
        if min(self.water_amp, self.imcl_amp, self.emcl_amp) < 0:
            raise InvalidArgument("amplitudes must be >= 0")
        if not (self.water_t2s_s > 0 and self.lipid_t2s_s > 0):
            raise InvalidArgument("T2* must be > 0")
        if not 0 <= self.fiber_angle_rad <= np.pi / 2 + 1e-12:
            raise InvalidArgument("fiber angle must lie in [0, pi/2]")

    @classmethod
    def from_dict(cls, d: dict) -> "TissueParams":
        d = dict(d)
        if "fiber_angle_deg" in d:
            d["fiber_angle_rad"] = np.radians(d.pop("fiber_angle_deg"))
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    @property
    def imcl_share(self) -> float:
        tot = self.imcl_amp + self.emcl_amp
        return self.imcl_amp / tot if tot > 0 else float("nan")

    @property
    def fat_fraction(self) -> float:
        lip = self.imcl_amp + self.emcl_amp
        tot = lip + self.water_amp
        return lip / tot if tot > 0 else float("nan")


BACKGROUND = TissueParams()
_PARAM_NAMES = [f.name for f in fields(TissueParams)]


@dataclass(frozen=True)
class Region:
    """Rectangle or ellipse in mm, centred coordinates; ``size_mm`` holds half-axes."""

    name: str
    shape: str
    center_mm: tuple
    size_mm: tuple
    params: TissueParams
    roi: bool = False

    def contains(self, x_mm, y_mm):
        dx = (np.asarray(x_mm) - self.center_mm[0]) / self.size_mm[0]
        dy = (np.asarray(y_mm) - self.center_mm[1]) / self.size_mm[1]
        if self.shape == "rect":
            return (np.abs(dx) <= 1) & (np.abs(dy) <= 1)
        if self.shape == "ellipse":
            return dx * dx + dy * dy <= 1
        raise InvalidArgument(f"unknown region shape {self.shape!r}")


@dataclass(frozen=True)
class PhantomSpec:
    regions: tuple = ()
    background: TissueParams = BACKGROUND
    b0_gradient_hz_per_mm: tuple = (0.0, 0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        regions = tuple(
            Region(
                name=r["name"],
                shape=r["shape"],
                center_mm=tuple(r["center_mm"]),
                size_mm=tuple(r["size_mm"]),
                params=TissueParams.from_dict(r.get("params", {})),
                roi=bool(r.get("roi", False)),
            )
            for r in d.get("regions", [])
        )
        bg = TissueParams.from_dict(d["background"]) if "background" in d else BACKGROUND
        return cls(regions, bg, tuple(d.get("b0_gradient_hz_per_mm", (0.0, 0.0))))

    def check_inside(self, cfg: AcquisitionConfig):
        half = cfg.fov_mm / 2
        for r in self.regions:
            (cx, cy), (sx, sy) = r.center_mm, r.size_mm
            if abs(cx) + sx > half + 1e-9 or abs(cy) + sy > half + 1e-9:
                raise InvalidArgument(f"region {r.name!r} extends outside the FOV")


@dataclass
class PhantomGrid:
    """Per-voxel tissue parameters, each array shaped (ny, nx)."""

    params: dict
    labels: np.ndarray
    region_names: tuple

    @property
    def shape(self):
        return self.labels.shape

    def voxel(self, iy: int, ix: int) -> TissueParams:
        return TissueParams(**{k: float(v[iy, ix]) for k, v in self.params.items()})

    def truth_maps(self) -> dict:
        p = self.params
        lip = p["imcl_amp"] + p["emcl_amp"]
        tot = lip + p["water_amp"]
        with np.errstate(invalid="ignore", divide="ignore"):
            share = np.where(lip > 0, p["imcl_amp"] / np.where(lip > 0, lip, 1), np.nan)
            ff = np.where(tot > 0, lip / np.where(tot > 0, tot, 1), np.nan)
        return {
            "imcl_share": share,
            "fat_fraction": ff,
            "fiber_angle_rad": p["fiber_angle_rad"].copy(),
            "b0_offset_hz": p["b0_offset_hz"].copy(),
            "label": self.labels.astype(float),
        }

    def scaled(self, water=1.0, lipid=1.0) -> "PhantomGrid":
        p = {k: v.copy() for k, v in self.params.items()}
        p["water_amp"] *= water
        p["imcl_amp"] *= lipid
        p["emcl_amp"] *= lipid
        return PhantomGrid(p, self.labels.copy(), self.region_names)


@dataclass
class RawKSpace:
    """Complex samples indexed [arm][temporal interleaf][epoch][readout sample]."""

    data: np.ndarray
    schedule: AcquisitionSchedule
    cfg: AcquisitionConfig
    noise_sigma: float = 0.0
    rng_seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = self.schedule
        want = (s.n_arms, s.n_temporal, s.n_epochs, len(s.arms[0]))
        if self.data.shape != want:
            raise InvalidArgument(f"raw data shape {self.data.shape} != schedule {want}")


def emcl_shift_ppm(theta) -> float:
    """Orientation-dependent EMCL shift, 0.20 ppm * (3 cos^2 theta - 1) / 2."""
    c = np.cos(theta)
    out = EMCL_SHIFT_MAX_PPM * (3 * c * c - 1) / 2
    return float(out) if np.ndim(out) == 0 else out


def emcl_ppm(theta):
    return IMCL_PPM + emcl_shift_ppm(theta)


def rasterize_phantom(spec: PhantomSpec, cfg: AcquisitionConfig) -> PhantomGrid:
    """Assign each voxel the parameters of the last region containing its centre."""
    n = cfg.grid_n
    pos = cfg.voxel_positions_m() * 1e3
    xx, yy = np.meshgrid(pos, pos)
    params = {k: np.full((n, n), float(getattr(spec.background, k))) for k in _PARAM_NAMES}
    labels = np.zeros((n, n), dtype=np.int32)
    for idx, region in enumerate(spec.regions, start=1):
        inside = region.contains(xx, yy)
        for k in _PARAM_NAMES:
            params[k][inside] = getattr(region.params, k)
        labels[inside] = idx
    gx, gy = spec.b0_gradient_hz_per_mm
    if gx or gy:
        params["b0_offset_hz"] = params["b0_offset_hz"] + gx * xx + gy * yy
    names = ("background",) + tuple(r.name for r in spec.regions)
    return PhantomGrid(params, labels, names)


def voxel_lines(p: dict, field: FieldConstants, include_methyl: bool = False,
                methyl_ratio: float = 0.15):
    """Decompose voxel signals into damped complex exponentials.

    ``p`` maps TissueParams field names to arrays (or scalars). Returns
    ``(amps, rates)`` with trailing line axis; the signal of each voxel is
    sum(amps * exp(rates * t)).
    """
    b0 = np.asarray(p["b0_offset_hz"], dtype=float)
    phase = np.exp(1j * np.asarray(p["phase0_rad"], dtype=float))
    theta = np.asarray(p["fiber_angle_rad"], dtype=float)
    r_water = -1.0 / np.asarray(p["water_t2s_s"], dtype=float)
    r_lipid = -1.0 / np.asarray(p["lipid_t2s_s"], dtype=float)
    f_imcl = ppm_to_offset_hz(IMCL_PPM, field)
    f_emcl = ppm_to_offset_hz(emcl_ppm(theta), field)
    two_pi_i = 2j * np.pi
    amps = [p["water_amp"] * phase, p["imcl_amp"] * phase, p["emcl_amp"] * phase]
    rates = [
        r_water + two_pi_i * b0,
        r_lipid + two_pi_i * (b0 - f_imcl),
        r_lipid + two_pi_i * (b0 - f_emcl),
    ]
    if include_methyl:
        f_me_i = ppm_to_offset_hz(METHYL_PPM, field)
        f_me_e = ppm_to_offset_hz(METHYL_PPM + emcl_shift_ppm(theta), field)
        amps += [methyl_ratio * p["imcl_amp"] * phase, methyl_ratio * p["emcl_amp"] * phase]
        rates += [r_lipid + two_pi_i * (b0 - f_me_i), r_lipid + two_pi_i * (b0 - f_me_e)]
    amps = np.stack(np.broadcast_arrays(*[np.asarray(a, dtype=complex) for a in amps]), axis=-1)
    rates = np.stack(np.broadcast_arrays(*[np.asarray(r, dtype=complex) for r in rates]), axis=-1)
    return amps, rates


def synth_voxel_fid(params: TissueParams, time_s, field: FieldConstants,
                    include_methyl: bool = False) -> np.ndarray:
    """Three-line Lorentzian FID: water at 0 Hz, IMCL and EMCL upfield."""
    t = np.asarray(time_s, dtype=float)
    if t[0] != 0:
        raise InvalidArgument("time axis must start at 0")
    amps, rates = voxel_lines(params.to_dict(), field, include_methyl)
    return np.exp(np.outer(t, rates)) @ amps


def forward_sample(grid: PhantomGrid, schedule: AcquisitionSchedule, cfg: AcquisitionConfig,
                   freeze_readout_time: bool = False, include_methyl: bool = False,
                   workers: int = 1) -> RawKSpace:
    """Direct Fourier sum S(k, t) = sum_v s_v(t) exp(-i 2 pi k.r_v).

    Sample time is epoch start + temporal offset + within-readout time, the
    last term dropped when ``freeze_readout_time`` is set. Voxels with no
    signal are skipped.
    """
    n = cfg.grid_n
    pos = cfg.voxel_positions_m()
    xx, yy = np.meshgrid(pos, pos)
    amps, rates = voxel_lines(grid.params, cfg.field, include_methyl)
    amps = amps.reshape(n * n, -1)
    rates = rates.reshape(n * n, -1)
    active = np.flatnonzero(np.any(amps != 0, axis=1))
    n_s = len(schedule.arms[0])
    out = np.zeros((schedule.n_arms, schedule.n_temporal, schedule.n_epochs, n_s), complex)
    if active.size == 0:
        return RawKSpace(out, schedule, cfg)

    amps, rates = amps[active], rates[active]
    x, y = xx.ravel()[active], yy.ravel()[active]
    t0 = schedule.readout_start_times().ravel()
    # per-line voxel weights at every readout start: (lines, V, T*M)
    start = amps.T[:, :, None] * np.exp(rates.T[:, :, None] * t0[None, None, :])
    if freeze_readout_time:
        start = start.sum(axis=0, keepdims=True)

    def one_arm(a):
        arm = schedule.arms[a]
        enc = np.exp(-2j * np.pi * (np.outer(arm.kx, x) + np.outer(arm.ky, y)))
        if freeze_readout_time:
            s = enc @ start[0]
        else:
            s = sum((enc * np.exp(np.outer(arm.sample_times_s, rates[:, l]))) @ start[l]
                    for l in range(rates.shape[1]))
        out[a] = s.T.reshape(schedule.n_temporal, schedule.n_epochs, n_s)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(one_arm, range(schedule.n_arms)))
    else:
        for a in range(schedule.n_arms):
            one_arm(a)
    return RawKSpace(out, schedule, cfg)


def complex_noise(shape, sigma: float, seed) -> np.ndarray:
    """Circular complex Gaussian noise with per-channel standard deviation ``sigma``."""
    if sigma < 0:
        raise InvalidArgument(f"noise sigma must be >= 0, got {sigma}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return sigma * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def add_noise(raw: RawKSpace, sigma: float, seed) -> RawKSpace:
    if sigma < 0:
        raise InvalidArgument(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return replace(raw, data=raw.data.copy(), rng_seed=seed)
    data = raw.data + complex_noise(raw.data.shape, sigma, seed)
    return replace(raw, data=data, noise_sigma=float(sigma), rng_seed=seed)


def kspace_sigma_for_snr(raw: RawKSpace, snr: float) -> float:
    """Noise level putting the first k = 0 sample at ``snr`` times sigma."""
    s = raw.schedule
    k0 = np.argmin(np.abs(s.arms[0].k))
    return float(np.abs(raw.data[0, 0, 0, k0])) / snr


def lipid_snr_sigma(params: TissueParams, time_s, field: FieldConstants, snr: float) -> float:
    """Per-channel noise sigma giving the lipid signal a given spectral S/N.

    S/N follows the LCModel convention: maximum of the phased, noiseless
    methylene spectrum over twice the rms noise of the real spectrum.
    """
    t = np.asarray(time_s, dtype=float)
    lipid = replace(params, water_amp=0.0, b0_offset_hz=0.0, phase0_rad=0.0)
    fid = synth_voxel_fid(lipid, t, field)
    peak = np.fft.fft(np.conj(fid)).real.max()
    if not peak > 0:
        raise InvalidArgument("voxel carries no lipid signal")
    return float(peak / (2.0 * snr * np.sqrt(len(t))))
