import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, strategies as hst

from imclmap.acquisition import make_schedule
from imclmap.model import AcquisitionConfig, FieldConstants, InvalidArgument
from imclmap.phantom import (MAGIC_ANGLE_RAD, PhantomSpec, TissueParams, add_noise,
                             complex_noise, emcl_ppm, emcl_shift_ppm, forward_sample,
                             lipid_snr_sigma, rasterize_phantom, synth_voxel_fid)

SMALL = AcquisitionConfig(grid_n=8, n_spatial_interleaves=4, n_temporal_interleaves=2,
                          n_spectral_points=8, spectral_dwell_s=2e-3, readout_duration_s=2e-3,
                          samples_per_arm=12)


def test_emcl_shift_examples():
    assert emcl_shift_ppm(0.0) == pytest.approx(0.20)
    assert emcl_ppm(0.0) == pytest.approx(1.50)
    assert emcl_shift_ppm(np.radians(54.7356)) == pytest.approx(0.0, abs=1e-6)
    assert emcl_shift_ppm(MAGIC_ANGLE_RAD) == pytest.approx(0.0, abs=1e-15)
    assert emcl_shift_ppm(np.pi / 2) == pytest.approx(-0.10)
    assert emcl_ppm(np.pi / 2) == pytest.approx(1.20)


@given(hst.floats(0, np.pi / 2))
def test_emcl_shift_even_and_max_at_zero(theta):
    assert emcl_shift_ppm(theta) <= emcl_shift_ppm(0.0) + 1e-15
    # even in cos(theta): theta and pi - theta give the same shift
    assert emcl_shift_ppm(np.pi - theta) == pytest.approx(emcl_shift_ppm(theta), abs=1e-15)


def test_tissue_params_validation():
    with pytest.raises(InvalidArgument):
        TissueParams(water_amp=-1)
    with pytest.raises(InvalidArgument):
        TissueParams(lipid_t2s_s=0)
    with pytest.raises(InvalidArgument):
        TissueParams(fiber_angle_rad=2.0)
    p = TissueParams.from_dict({"fiber_angle_deg": 90, "imcl_amp": 1, "emcl_amp": 3})
    assert p.fiber_angle_rad == pytest.approx(np.pi / 2)
    assert p.imcl_share == pytest.approx(0.25)


def _spec(regions, **kw):
    return PhantomSpec.from_dict({"regions": regions, **kw})


def test_rasterize_examples():
    cfg = AcquisitionConfig(grid_n=16)
    g = rasterize_phantom(_spec([]), cfg)
    assert all(np.all(v == 0) for k, v in g.params.items() if k.endswith("amp"))
    full = _spec([{"name": "all", "shape": "rect", "center_mm": [0, 0], "size_mm": [100, 100],
                   "params": {"water_amp": 2.0}}])
    g = rasterize_phantom(full, cfg)
    assert np.all(g.params["water_amp"] == 2.0)
    two = _spec([
        {"name": "a", "shape": "rect", "center_mm": [-20, 0], "size_mm": [40, 40], "params": {"water_amp": 1.0}},
        {"name": "b", "shape": "ellipse", "center_mm": [20, 0], "size_mm": [40, 40], "params": {"water_amp": 5.0}},
    ])
    g = rasterize_phantom(two, cfg)
    pos = cfg.voxel_positions_m() * 1e3
    xx, yy = np.meshgrid(pos, pos)
    in_a = (np.abs(xx + 20) <= 40) & (np.abs(yy) <= 40)
    in_b = ((xx - 20) / 40) ** 2 + (yy / 40) ** 2 <= 1
    assert np.all(g.params["water_amp"][in_b] == 5.0)
    assert np.all(g.params["water_amp"][in_a & ~in_b] == 1.0)
    assert np.all(g.labels[in_b] == 2)


def test_region_outside_fov_rejected():
    spec = _spec([{"name": "big", "shape": "rect", "center_mm": [90, 0], "size_mm": [20, 20]}])
    with pytest.raises(InvalidArgument):
        spec.check_inside(AcquisitionConfig())


def test_synth_examples(time_axis, field):
    assert np.all(synth_voxel_fid(TissueParams(), time_axis, field) == 0)
    p = TissueParams(water_amp=2.0, water_t2s_s=1e12, b0_offset_hz=10.0)
    s = synth_voxel_fid(p, time_axis, field)
    assert np.allclose(s, 2.0 * np.exp(2j * np.pi * 10 * time_axis), atol=1e-9)
    p = TissueParams(imcl_amp=1.0)
    s = synth_voxel_fid(p, time_axis, field)
    expect = np.exp(-2j * np.pi * 419.05 * time_axis - time_axis / 0.1)
    assert np.allclose(s, expect, atol=1e-12)
    with pytest.raises(InvalidArgument):
        synth_voxel_fid(p, time_axis + 1e-3, field)


def test_synth_matches_formula(time_axis, field):
    p = TissueParams(water_amp=1.0, water_t2s_s=0.03, imcl_amp=0.2, emcl_amp=0.3,
                     lipid_t2s_s=0.08, fiber_angle_rad=0.3, b0_offset_hz=-12.0, phase0_rad=0.7)
    t = time_axis
    fi = (4.70 - 1.30) * 123.25
    fe = (4.70 - emcl_ppm(0.3)) * 123.25
    expect = np.exp(1j * 0.7) * np.exp(2j * np.pi * -12.0 * t) * (
        np.exp(-t / 0.03) + 0.2 * np.exp(-2j * np.pi * fi * t - t / 0.08)
        + 0.3 * np.exp(-2j * np.pi * fe * t - t / 0.08))
    assert np.allclose(synth_voxel_fid(p, t, field), expect, rtol=1e-12, atol=1e-14)


def _random_grid(cfg, seed):
    rng = np.random.default_rng(seed)
    spec = _spec([{"name": f"r{i}", "shape": "ellipse",
                   "center_mm": rng.uniform(-40, 40, 2).tolist(),
                   "size_mm": rng.uniform(10, 40, 2).tolist(),
                   "params": {"water_amp": float(rng.uniform(0.5, 1)),
                              "imcl_amp": float(rng.uniform(0, 0.2)),
                              "emcl_amp": float(rng.uniform(0, 0.2)),
                              "b0_offset_hz": float(rng.uniform(-20, 20)),
                              "fiber_angle_deg": float(rng.uniform(0, 90))}} for i in range(3)])
    return rasterize_phantom(spec, cfg)


@pytest.mark.parametrize("freeze", [False, True])
def test_forward_matches_brute_force(freeze, field):
    cfg = SMALL
    sched = make_schedule(cfg)
    grid = _random_grid(cfg, 1)
    raw = forward_sample(grid, sched, cfg, freeze_readout_time=freeze)
    pos = cfg.voxel_positions_m()
    starts = sched.readout_start_times()
    rng = np.random.default_rng(0)
    for _ in range(25):
        a, j = rng.integers(sched.n_arms), rng.integers(sched.n_temporal)
        m, s = rng.integers(sched.n_epochs), rng.integers(len(sched.arms[0]))
        arm = sched.arms[a]
        t = starts[j, m] + (0.0 if freeze else arm.sample_times_s[s])
        total = 0j
        for iy in range(cfg.grid_n):
            for ix in range(cfg.grid_n):
                p = grid.voxel(iy, ix)
                sv = synth_voxel_fid(p, np.array([0.0, t]) if t > 0 else np.array([0.0]), field)[-1]
                total += sv * np.exp(-2j * np.pi * (arm.kx[s] * pos[ix] + arm.ky[s] * pos[iy]))
        assert raw.data[a, j, m, s] == pytest.approx(total, rel=1e-10, abs=1e-12)


def test_forward_examples():
    cfg = SMALL
    sched = make_schedule(cfg)
    zero = rasterize_phantom(_spec([]), cfg)
    assert np.all(forward_sample(zero, sched, cfg).data == 0)
    uni = rasterize_phantom(_spec([{"name": "u", "shape": "rect", "center_mm": [0, 0],
                                    "size_mm": [100, 100], "params": {"water_amp": 1.0}}]), cfg)
    raw = forward_sample(uni, sched, cfg, freeze_readout_time=True)
    t0 = sched.readout_start_times()
    # the first sample of every arm sits at k = 0
    expect = 64 * np.exp(-t0 / 0.030)
    assert np.allclose(raw.data[0, :, :, 0], expect, rtol=1e-12)
    one = _spec([{"name": "c", "shape": "rect", "center_mm": [0, 0], "size_mm": [1, 1],
                  "params": {"water_amp": 1.0}}])
    g = rasterize_phantom(one, cfg)
    assert g.params["water_amp"].sum() == 1.0
    raw = forward_sample(g, sched, cfg, freeze_readout_time=True)
    mag = np.abs(raw.data[:, 1, 2, :])
    assert np.allclose(mag, mag.flat[0], rtol=1e-12)


def test_forward_linearity():
    cfg = SMALL
    sched = make_schedule(cfg)
    ga, gb = _random_grid(cfg, 2), _random_grid(cfg, 3)
    # keep the non-amplitude parameters shared so the line sets coincide
    gb.params.update({k: ga.params[k] for k in ga.params if not k.endswith("amp")})
    gsum = ga.scaled()
    for k in ("water_amp", "imcl_amp", "emcl_amp"):
        gsum.params[k] = ga.params[k] + gb.params[k]
    ra, rb, rs = (forward_sample(g, sched, cfg) for g in (ga, gb, gsum))
    err = np.linalg.norm(rs.data - ra.data - rb.data) / np.linalg.norm(rs.data)
    assert err < 1e-10


def test_forward_workers_identical():
    cfg = SMALL
    sched = make_schedule(cfg)
    g = _random_grid(cfg, 4)
    a = forward_sample(g, sched, cfg, workers=1).data
    b = forward_sample(g, sched, cfg, workers=3).data
    assert np.array_equal(a, b)


def test_noise_examples():
    cfg = SMALL
    sched = make_schedule(cfg)
    raw = forward_sample(_random_grid(cfg, 5), sched, cfg)
    same = add_noise(raw, 0.0, 1)
    assert np.array_equal(same.data, raw.data) and same.data is not raw.data
    a, b = add_noise(raw, 0.3, 7), add_noise(raw, 0.3, 7)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, add_noise(raw, 0.3, 8).data)
    with pytest.raises(InvalidArgument):
        add_noise(raw, -1.0, 0)
    n = complex_noise(100_000, 1.0, 3)
    assert n.real.std() == pytest.approx(1.0, rel=0.01)
    assert n.imag.std() == pytest.approx(1.0, rel=0.01)


def test_lipid_snr_sigma_convention(time_axis, field):
    p = TissueParams(water_amp=1.0, imcl_amp=0.05, emcl_amp=0.05)
    sigma = lipid_snr_sigma(p, time_axis, field, 20.0)
    lipid = synth_voxel_fid(replace(p, water_amp=0.0), time_axis, field)
    peak = np.fft.fft(np.conj(lipid)).real.max()
    rng = np.random.default_rng(0)
    noise_spec = np.fft.fft(complex_noise((400, 1024), sigma, rng), axis=1).real
    assert peak / (2 * noise_spec.std()) == pytest.approx(20.0, rel=0.02)
    with pytest.raises(InvalidArgument):
        lipid_snr_sigma(TissueParams(water_amp=1.0), time_axis, field, 20.0)


def test_truth_maps_record_share():
    cfg = AcquisitionConfig(grid_n=16)
    g = rasterize_phantom(_spec([{"name": "m", "shape": "rect", "center_mm": [0, 0],
                                  "size_mm": [30, 30],
                                  "params": {"water_amp": 0.9, "imcl_amp": 0.03, "emcl_amp": 0.07}}]), cfg)
    t = g.truth_maps()
    inside = g.labels == 1
    assert np.allclose(t["imcl_share"][inside], 0.3)
    assert np.allclose(t["fat_fraction"][inside], 0.1)
    assert np.all(np.isnan(t["imcl_share"][~inside]))
