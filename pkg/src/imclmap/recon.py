"""Kaiser-Bessel gridding reconstruction of spiral spectroscopic imaging data."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import i0

from .acquisition import AcquisitionSchedule, trajectory_arrays
from .model import AcquisitionConfig, InvalidArgument, SpectroDataset
from .phantom import RawKSpace


class TrajectoryError(ValueError):
    """Samples fall outside the gridding support."""


@dataclass(frozen=True)
class GriddingConfig:
    oversampling: float = 1.5
    width: float = 4.0
    beta: Optional[float] = None

    def __post_init__(self):
        if self.oversampling < 1:
            raise InvalidArgument("oversampling must be >= 1")
        if self.width < 2:
            raise InvalidArgument("kernel width must be >= 2")

    @property
    def kb_beta(self) -> float:
        if self.beta is not None:
            return float(self.beta)
        w, a = self.width, self.oversampling
        return float(np.pi * np.sqrt((w / a * (a - 0.5)) ** 2 - 0.8))

    def grid_size(self, n: int) -> int:
        g = int(np.ceil(self.oversampling * n))
        return g + (g % 2)

    def to_dict(self) -> dict:
        return {"oversampling": self.oversampling, "width": self.width, "beta": self.kb_beta}


def kaiser_bessel(d, width: float, beta: float) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    arg = 1.0 - (2.0 * d / width) ** 2
    return np.where(arg >= 0, i0(beta * np.sqrt(np.clip(arg, 0, None))), 0.0)


def kaiser_bessel_ft(x, width: float, beta: float) -> np.ndarray:
    """Continuous Fourier transform of :func:`kaiser_bessel`; x in cycles per cell."""
    z = np.sqrt((beta ** 2 - (np.pi * width * np.asarray(x, dtype=float)) ** 2).astype(complex))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(np.abs(z) < 1e-8, 1.0 + 0j, np.sinh(z) / z)
    return width * out.real


class Gridder:
    """Sparse convolution-gridding operator for a fixed trajectory.

    ``kx``/``ky`` are flat arrays of sample positions in 1/m.
    """

    def __init__(self, kx, ky, cfg: AcquisitionConfig, gcfg: GriddingConfig = GriddingConfig()):
        self.cfg, self.gcfg = cfg, gcfg
        self.n = cfg.grid_n
        self.g = gcfg.grid_size(self.n)
        kx, ky = np.ravel(kx), np.ravel(ky)
        scale = self.g / (2 * cfg.k_max)   # grid cells per 1/m
        ux, uy = kx * scale, ky * scale
        bad = np.flatnonzero((np.abs(ux) > self.g / 2 + 1e-9) | (np.abs(uy) > self.g / 2 + 1e-9))
        if bad.size:
            raise TrajectoryError(f"samples beyond the gridding support at indices {bad.tolist()}")
        self.n_samples = kx.size
        self.matrix = self._build(ux + self.g // 2, uy + self.g // 2)

    def _build(self, px, py):
        w, beta, g = self.gcfg.width, self.gcfg.kb_beta, self.g
        offs = np.arange(-int(np.ceil(w / 2)), int(np.ceil(w / 2)) + 2)
        cx = np.floor(px)[:, None] + offs[None, :]
        cy = np.floor(py)[:, None] + offs[None, :]
        wx = kaiser_bessel(cx - px[:, None], w, beta)
        wy = kaiser_bessel(cy - py[:, None], w, beta)
        vals = (wy[:, :, None] * wx[:, None, :]).reshape(self.n_samples, -1)
        rows = ((cy.astype(int) % g)[:, :, None] * g + (cx.astype(int) % g)[:, None, :])
        rows = rows.reshape(self.n_samples, -1)
        cols = np.repeat(np.arange(self.n_samples), vals.shape[1])
        keep = vals.ravel() != 0
        m = sp.coo_matrix((vals.ravel()[keep], (rows.ravel()[keep], cols[keep])),
                          shape=(g * g, self.n_samples))
        return m.tocsr()

    def grid(self, values: np.ndarray) -> np.ndarray:
        """Grid weighted sample values, shape (n_samples[, frames]) -> (G, G[, frames])."""
        v = np.asarray(values).reshape(self.n_samples, -1)
        out = self.matrix @ v
        return out.reshape((self.g, self.g) + np.shape(values)[1:])

    @cached_property
    def deapodization(self) -> np.ndarray:
        q = (np.arange(self.n) - self.n // 2) / self.g
        c = kaiser_bessel_ft(q, self.gcfg.width, self.gcfg.kb_beta)
        d = np.outer(c, c)
        return np.maximum(d, 1e-6 * d.max())


def grid_timepoint(raw_slice, arms, weights, gcfg: GriddingConfig, cfg: AcquisitionConfig,
                   gridder: Optional[Gridder] = None) -> np.ndarray:
    """Convolve weighted samples onto the oversampled Cartesian grid.

    ``raw_slice`` and ``weights`` have shape (n_arms, n_samples); extra
    trailing axes of ``raw_slice`` are gridded as independent frames.
    """
    if gridder is None:
        kx = np.stack([a.kx for a in arms])
        ky = np.stack([a.ky for a in arms])
        gridder = Gridder(kx, ky, cfg, gcfg)
    raw = np.asarray(raw_slice)
    w = np.asarray(weights).reshape(-1)
    flat = raw.reshape((w.size,) + raw.shape[2:])
    return gridder.grid(flat * w.reshape((-1,) + (1,) * (flat.ndim - 1)))


def ifft2_deapodize(kgrid: np.ndarray, gcfg: GriddingConfig, cfg: AcquisitionConfig) -> np.ndarray:
    """Centred inverse FFT, crop to the nominal FOV and divide out the kernel.

    ``kgrid`` is (G, G) or (G, G, frames); the result is (N, N) or (frames, N, N).
    """
    k = np.asarray(kgrid)
    g, n = k.shape[0], cfg.grid_n
    frames = k.ndim == 3
    if frames:
        k = np.moveaxis(k, -1, 0)
    img = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=(-2, -1))), axes=(-2, -1))
    img = img * (g * g)
    lo = g // 2 - n // 2
    img = img[..., lo:lo + n, lo:lo + n]
    q = (np.arange(n) - n // 2) / g
    c = kaiser_bessel_ft(q, gcfg.width, gcfg.kb_beta)
    d = np.outer(c, c)
    d = np.maximum(d, 1e-6 * d.max())
    return img / d


def dft_oracle_recon(raw_slice, arms, weights, cfg: AcquisitionConfig, chunk: int = 1024) -> np.ndarray:
    """Exact conjugate-phase image sum_j w_j S_j exp(+i 2 pi k_j . r).

    Extra trailing axes of ``raw_slice`` are treated as frames; output is
    (N, N) or (frames, N, N).
    """
    kx = np.concatenate([a.kx for a in arms])
    ky = np.concatenate([a.ky for a in arms])
    w = np.asarray(weights).reshape(-1)
    raw = np.asarray(raw_slice)
    extra = raw.shape[2:]
    data = raw.reshape(w.size, -1) * w[:, None]
    n = cfg.grid_n
    pos = cfg.voxel_positions_m()
    yy, xx = np.meshgrid(pos, pos, indexing="ij")
    x, y = xx.ravel(), yy.ravel()
    out = np.empty((n * n, data.shape[1]), complex)
    for s in range(0, n * n, chunk):
        e = np.exp(2j * np.pi * (np.outer(x[s:s + chunk], kx) + np.outer(y[s:s + chunk], ky)))
        out[s:s + chunk] = e @ data
    out = out.reshape((n, n) + extra)
    return np.moveaxis(out, -1, 0) if extra else out


def assemble_voxel_fids(stacks: Sequence[np.ndarray], schedule: AcquisitionSchedule,
                        cfg: AcquisitionConfig, meta: Optional[dict] = None) -> SpectroDataset:
    """Weave per-interleaf image series into FIDs at the effective dwell.

    ``stacks[j]`` has shape (n_epochs, ny, nx); sample m of interleaf j lands
    at FID index m * T + j.
    """
    t = schedule.n_temporal
    if len(stacks) != t:
        raise InvalidArgument(f"expected {t} image stacks, got {len(stacks)}")
    shapes = {np.shape(s) for s in stacks}
    if len(shapes) != 1:
        raise InvalidArgument(f"inconsistent image stack shapes {sorted(shapes)}")
    m, ny, nx = shapes.pop()
    if m != schedule.n_epochs:
        raise InvalidArgument(f"stack holds {m} epochs, schedule has {schedule.n_epochs}")
    woven = np.empty((ny, nx, m * t), complex)
    for j, s in enumerate(stacks):
        woven[:, :, j::t] = np.moveaxis(np.asarray(s), 0, -1)
    n = cfg.n_spectral_points
    time_s = np.arange(n) * cfg.spectral_dwell_s
    return SpectroDataset(woven[:, :, :n], time_s, cfg.field, te_s=cfg.te_s, meta=dict(meta or {}))


def reconstruct(raw: RawKSpace, gcfg: GriddingConfig = GriddingConfig()) -> SpectroDataset:
    """Grid every (temporal interleaf, epoch) frame and weave the result."""
    cfg, schedule = raw.cfg, raw.schedule
    kx, ky, w = trajectory_arrays(schedule)
    gridder = Gridder(kx, ky, cfg, gcfg)
    stacks = []
    for j in range(schedule.n_temporal):
        frames = np.moveaxis(raw.data[:, j], 1, -1)          # (arms, samples, epochs)
        kgrid = grid_timepoint(frames, schedule.arms, w, gcfg, cfg, gridder=gridder)
        stacks.append(ifft2_deapodize(kgrid, gcfg, cfg))
    meta = {"gridding": gcfg.to_dict(), "grid_size": gridder.g}
    return assemble_voxel_fids(stacks, schedule, cfg, meta)
