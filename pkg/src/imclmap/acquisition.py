"""Spiral trajectory design, interleaving schedule and density compensation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AcquisitionConfig, InvalidArgument


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class SpiralArm:
    """One interleaf of an Archimedean spiral.

    ``kx``/``ky`` are in 1/m; ``tau`` is the normalised readout parameter in
    [0, 1] and ``sample_times_s`` its mapping onto the readout window.
    """

    kx: np.ndarray
    ky: np.ndarray
    tau: np.ndarray
    sample_times_s: np.ndarray
    arm_index: int
    n_arms: int
    fov_m: float
    grid_n: int

    @property
    def k(self) -> np.ndarray:
        return self.kx + 1j * self.ky

    def __len__(self):
        return len(self.kx)


@dataclass(frozen=True)
class AcquisitionSchedule:
    arms: tuple
    temporal_offsets_s: np.ndarray
    spectral_epoch_s: float
    n_epochs: int

    @property
    def n_arms(self) -> int:
        return len(self.arms)

    @property
    def n_temporal(self) -> int:
        return len(self.temporal_offsets_s)

    def readout_start_times(self) -> np.ndarray:
        """Readout start times, shape (n_temporal, n_epochs)."""
        m = np.arange(self.n_epochs) * self.spectral_epoch_s
        return self.temporal_offsets_s[:, None] + m[None, :]

    def to_dict(self) -> dict:
        return {
            "n_arms": self.n_arms,
            "samples_per_arm": len(self.arms[0]),
            "temporal_offsets_s": [float(v) for v in self.temporal_offsets_s],
            "spectral_epoch_s": self.spectral_epoch_s,
            "n_epochs": self.n_epochs,
            "readout_duration_s": float(self.arms[0].sample_times_s[-1]),
        }


@dataclass(frozen=True)
class DensityWeights:
    w: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.w)) and np.all(self.w > 0)):
            raise InvalidArgument("density weights must be finite and positive")


def make_spiral_arm(cfg: AcquisitionConfig, arm_index: int) -> SpiralArm:
    """Constant-angular-velocity spiral k(tau) = k_max tau exp(i(2 pi n tau + rot))."""
    n_arms = cfg.n_spatial_interleaves
    if not 0 <= arm_index < n_arms:
        raise InvalidArgument(f"arm_index {arm_index} outside [0, {n_arms})")
    tau = np.linspace(0.0, 1.0, cfg.n_samples_per_arm)
    phase = 2 * np.pi * cfg.n_turns * tau + 2 * np.pi * arm_index / n_arms
    k = cfg.k_max * tau * np.exp(1j * phase)
    return SpiralArm(
        kx=k.real.copy(),
        ky=k.imag.copy(),
        tau=tau,
        sample_times_s=tau * cfg.readout_duration_s,
        arm_index=arm_index,
        n_arms=n_arms,
        fov_m=cfg.fov_m,
        grid_n=cfg.grid_n,
    )


def make_schedule(cfg: AcquisitionConfig) -> AcquisitionSchedule:
    epoch = cfg.spectral_epoch_s
    if cfg.readout_duration_s > epoch * (1 + 1e-12):
        raise ConfigurationError(
            f"readout of {cfg.readout_duration_s * 1e3:.3f} ms exceeds the "
            f"{epoch * 1e3:.3f} ms spectral epoch"
        )
    t = cfg.n_temporal_interleaves
    offsets = np.arange(t) * (epoch / t)
    arms = tuple(make_spiral_arm(cfg, i) for i in range(cfg.n_spatial_interleaves))
    return AcquisitionSchedule(arms, offsets, epoch, cfg.n_epochs)


def density_weights(arm: SpiralArm) -> DensityWeights:
    """Analytic density compensation w ~ |k| |d|k|/dtau|.

    Weights are k-space areas times the voxel area (fov/N)^2, so a full set
    of arms sums to the disk area pi/4 when k_max sits at Nyquist and a
    uniform object reconstructs at unit gain.
    """
    r = np.abs(arm.k)
    if len(r) < 2 or not np.any(r > 0):
        raise InvalidArgument("degenerate arm: every sample sits at k = 0")
    w = r * np.abs(np.gradient(r, arm.tau))
    nz = np.flatnonzero(w > 0)
    w[w <= 0] = w[nz[0]]
    voxel = arm.fov_m / arm.grid_n
    area = np.pi * (r.max() * voxel) ** 2 / arm.n_arms
    return DensityWeights(w * (area / w.sum()))


def trajectory_arrays(schedule: AcquisitionSchedule):
    """Stack arm coordinates and weights into (n_arms, n_samples) arrays."""
    kx = np.stack([a.kx for a in schedule.arms])
    ky = np.stack([a.ky for a in schedule.arms])
    w = np.stack([density_weights(a).w for a in schedule.arms])
    return kx, ky, w
