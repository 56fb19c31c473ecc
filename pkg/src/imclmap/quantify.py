"""Reference quantification by separable nonlinear least squares.

The FID is modelled as sum_k c_k exp((i 2 pi f_k - d_k) t). The complex
amplitudes are eliminated by linear least squares at every nonlinear
iterate (variable projection); frequencies and dampings are refined by a
damped Gauss-Newton iteration on the projected residual using Kaufman's
Jacobian approximation.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import spectral
from .model import (EmptySignalError, FieldConstants, InvalidArgument, MapImage, SpectroDataset,
                    ppm_to_offset_hz)
from .phantom import IMCL_PPM, emcl_ppm

ILL_CONDITIONED = 1e8


class UndefinedRatioError(ValueError):
    pass


@dataclass(frozen=True)
class LineSpec:
    """One Lorentzian line: start position and box bounds on position and damping."""

    name: str
    ppm: float
    ppm_lo: float
    ppm_hi: float
    damping_bounds: tuple = (1.0, 200.0)

    def __post_init__(self):
        lo, hi = self.damping_bounds
        if not (self.ppm_lo <= self.ppm <= self.ppm_hi and self.ppm_lo < self.ppm_hi):
            raise InvalidArgument(f"line {self.name!r}: start must lie inside its ppm window")
        if not 0 < lo < hi:
            raise InvalidArgument(f"line {self.name!r}: damping bounds must be positive and ordered")

    @classmethod
    def around(cls, name, ppm, halfwidth, damping_bounds=(1.0, 200.0)):
        return cls(name, ppm, ppm - halfwidth, ppm + halfwidth, damping_bounds)


@dataclass(frozen=True)
class PeakModel:
    lines: tuple
    global_shift_hz: float = 100.0

    def __post_init__(self):
        if not self.global_shift_hz > 0:
            raise InvalidArgument("global shift bound must be positive")
        if not self.lines:
            raise InvalidArgument("model needs at least one line")

    def index(self, name: str) -> int:
        for i, ln in enumerate(self.lines):
            if ln.name == name:
                return i
        raise KeyError(name)


def default_peak_model(theta: Optional[float] = None, imcl_halfwidth_ppm: float = 0.02,
                       emcl_halfwidth_ppm: float = 0.25) -> PeakModel:
    """Water / IMCL / EMCL model.

    IMCL is held near 1.30 ppm and EMCL may move up to ``emcl_halfwidth_ppm``
    from its orientation-predicted position. The two windows meet halfway
    between the IMCL position and the EMCL prior, which stops the labels
    from swapping; at the magic angle they overlap and the fit is flagged.
    Without a fibre angle the prior is 1.40 ppm, i.e. fibres assumed well
    below the magic angle.
    """
    emcl_prior = 1.40 if theta is None else float(emcl_ppm(theta))
    i_lo, i_hi = IMCL_PPM - imcl_halfwidth_ppm, IMCL_PPM + imcl_halfwidth_ppm
    e_lo, e_hi = emcl_prior - emcl_halfwidth_ppm, emcl_prior + emcl_halfwidth_ppm
    mid = 0.5 * (IMCL_PPM + emcl_prior)
    if emcl_prior > IMCL_PPM:
        i_hi, e_lo = min(i_hi, mid), max(e_lo, mid)
    elif emcl_prior < IMCL_PPM:
        i_lo, e_hi = max(i_lo, mid), min(e_hi, mid)
    return PeakModel((
        LineSpec.around("water", 4.70, 0.10, (1.0, 300.0)),
        LineSpec("imcl", IMCL_PPM, i_lo, i_hi, (1.0, 150.0)),
        LineSpec("emcl", emcl_prior, e_lo, e_hi, (1.0, 150.0)),
    ))


@dataclass
class FitResult:
    names: tuple
    amplitudes: np.ndarray        # complex, one per line
    freq_hz: np.ndarray           # signed model frequency
    damping: np.ndarray           # 1/s
    residual_norm: float
    condition: float
    converged: bool
    iterations: int
    start_residual_norm: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def ill_conditioned(self) -> bool:
        return not self.condition <= ILL_CONDITIONED

    def amplitude(self, name: str) -> complex:
        return complex(self.amplitudes[self.names.index(name)])


def basis(t: np.ndarray, f: np.ndarray, d: np.ndarray) -> np.ndarray:
    return np.exp(np.outer(t, 2j * np.pi * np.asarray(f) - np.asarray(d)))


def _project(phi: np.ndarray, y: np.ndarray):
    c, *_ = np.linalg.lstsq(phi, y, rcond=None)
    return c, y - phi @ c


def _batched_residuals(t, y, f, d):
    """Projected residual norms for many (f, d) candidates, shapes (C, K)."""
    phi = np.exp(t[None, :, None] * (2j * np.pi * f[:, None, :] - d[:, None, :]))
    gram = np.einsum("cnk,cnl->ckl", phi.conj(), phi)
    rhs = np.einsum("cnk,n->ck", phi.conj(), y)
    cond_ok = np.linalg.cond(gram) < 1e12
    c = np.zeros_like(rhs)
    if np.any(cond_ok):
        c[cond_ok] = np.linalg.solve(gram[cond_ok], rhs[cond_ok][..., None])[..., 0]
    r = y[None, :] - np.einsum("cnk,ck->cn", phi, c)
    out = np.linalg.norm(r, axis=1)
    out[~cond_ok] = np.inf
    return out


def full_jacobian_condition(t, c, f, d) -> float:
    """Condition number of the column-normalised Jacobian over all real parameters.

    Vanishes to infinity whenever the model loses identifiability: two lines
    collapsing onto one, or a line whose amplitude is zero.
    """
    phi = basis(t, f, d)
    cols = []
    for k in range(len(f)):
        cols += [phi[:, k], 1j * phi[:, k],
                 2j * np.pi * t * c[k] * phi[:, k], -t * c[k] * phi[:, k]]
    jac = np.array(cols).T
    jr = np.vstack([jac.real, jac.imag])
    norms = np.linalg.norm(jr, axis=0)
    if np.any(norms <= 1e-14 * norms.max()):
        return float("inf")
    s = np.linalg.svd(jr / norms, compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")


def _gauss_newton(t, y, f, d, lo, hi, max_iter=200, rtol=1e-9):
    """Levenberg-damped Gauss-Newton on the variable-projection residual."""
    k = len(f)
    theta = np.concatenate([f, d]).astype(float)
    lower, upper = np.asarray(lo, float), np.asarray(hi, float)
    ynorm2 = float(np.vdot(y, y).real)

    def evaluate(th):
        phi = basis(t, th[:k], th[k:])
        c, r = _project(phi, y)
        return phi, c, r, float(np.vdot(r, r).real)

    phi, c, r, cost = evaluate(theta)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if cost <= 1e-30 * ynorm2:
            converged = True
            break
        dphi = np.concatenate([2j * np.pi * t[:, None] * phi * c, -t[:, None] * phi * c], axis=1)
        q, _ = np.linalg.qr(phi)
        jac = -(dphi - q @ (q.conj().T @ dphi))
        jr = np.vstack([jac.real, jac.imag])
        rr = np.concatenate([r.real, r.imag])
        jtj = jr.T @ jr
        g = jr.T @ rr
        diag = np.maximum(np.diag(jtj), 1e-300)
        accepted = False
        for _ in range(30):
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = np.clip(theta + step, lower, upper)
            t_phi, t_c, t_r, t_cost = evaluate(trial)
            if t_cost < cost:
                accepted = True
                break
            lam *= 4
        if not accepted:
            converged = True
            break
        rel = (cost - t_cost) / cost
        small_step = np.all(np.abs(trial - theta) <= 1e-12 * (1 + np.abs(theta)))
        theta, phi, c, r, cost = trial, t_phi, t_c, t_r, t_cost
        lam = max(lam / 3, 1e-12)
        if rel < rtol or small_step:
            converged = True
            break
    return theta[:k], theta[k:], c, float(np.sqrt(cost)), converged, it


def _search_grid(model: PeakModel, f_water: float, field: FieldConstants):
    """Candidate frequencies per line, spaced at ~2 Hz inside each prior window."""
    grids = []
    for ln in model.lines:
        a = f_water - ppm_to_offset_hz(ln.ppm_lo, field)
        b = f_water - ppm_to_offset_hz(ln.ppm_hi, field)
        n = int(np.ceil((b - a) / 2.0)) + 1
        g = np.linspace(a, b, n)
        start = f_water - ppm_to_offset_hz(ln.ppm, field)
        grids.append(np.unique(np.append(g, start)))
    return grids


def fit_voxel(fid, time_s, model: Optional[PeakModel] = None,
              field: FieldConstants = FieldConstants(), n_refine: int = 3) -> FitResult:
    """Fit the peak model to one complex FID.

    The water line is located on the conventional spectrum and fitted
    first; the remaining lines start from a grid over their prior windows
    and three damping levels, and the best ``n_refine`` starts are refined.
    """
    y = np.asarray(fid, dtype=complex)
    t = np.asarray(time_s, dtype=float)
    if not np.any(y):
        raise EmptySignalError("FID is identically zero")
    model = model or default_peak_model()
    names = tuple(ln.name for ln in model.lines)
    dwell = t[1] - t[0]
    f_w0 = -spectral.estimate_water_offset_hz(y, dwell, field,
                                              search_ppm=model.global_shift_hz / field.hz_per_ppm)
    lo_f, hi_f, lo_d, hi_d = [], [], [], []
    for ln in model.lines:
        lo_f.append(f_w0 - ppm_to_offset_hz(ln.ppm_lo, field))
        hi_f.append(f_w0 - ppm_to_offset_hz(ln.ppm_hi, field))
        lo_d.append(ln.damping_bounds[0])
        hi_d.append(ln.damping_bounds[1])
    lo = np.array(lo_f + lo_d)
    hi = np.array(hi_f + hi_d)
    k = len(model.lines)

    grids = _search_grid(model, f_w0, field)
    try:
        iw = model.index("water")
    except KeyError:
        iw = None
    fixed_f = np.array([f_w0 - ppm_to_offset_hz(ln.ppm, field) for ln in model.lines])
    fixed_d = np.array([np.clip(20.0, *ln.damping_bounds) for ln in model.lines])
    if iw is not None:
        # water alone first; the lipid lines are hundreds of Hz away
        fw, dw, *_ = _gauss_newton(t, y, fixed_f[[iw]], fixed_d[[iw]], [lo[iw], lo[k + iw]],
                                   [hi[iw], hi[k + iw]], max_iter=50)
        fixed_f[iw], fixed_d[iw] = fw[0], dw[0]

    free = [i for i in range(k) if i != iw]
    mesh = np.meshgrid(*[grids[i] for i in free], indexing="ij")
    cand_f = np.tile(fixed_f, (mesh[0].size, 1)) if free else fixed_f[None, :]
    for j, i in enumerate(free):
        cand_f[:, i] = mesh[j].ravel()
    d_levels = []
    for dl in (5.0, 12.0, 30.0):
        dd = np.tile(fixed_d, (cand_f.shape[0], 1))
        for i in free:
            dd[:, i] = np.clip(dl, *model.lines[i].damping_bounds)
        d_levels.append(dd)
    cand_f = np.concatenate([cand_f] * len(d_levels))
    cand_d = np.concatenate(d_levels)
    scores = np.concatenate([_batched_residuals(t, y, cand_f[s:s + 512], cand_d[s:s + 512])
                             for s in range(0, len(cand_f), 512)])
    order = np.argsort(scores, kind="stable")[:max(1, n_refine)]
    best_start = float(scores[order[0]])

    best = None
    for o in order:
        f, d, c, res, conv, it = _gauss_newton(t, y, cand_f[o], cand_d[o], lo, hi)
        if best is None or res < best[3]:
            best = (f, d, c, res, conv, it)
    f, d, c, res, conv, it = best
    if res > best_start:
        # refinement never worsens the best start
        f, d = cand_f[order[0]], cand_d[order[0]]
        c, r = _project(basis(t, f, d), y)
        res = float(np.linalg.norm(r))
    cond = full_jacobian_condition(t, c, f, d)
    return FitResult(names, c, np.asarray(f, float), np.asarray(d, float), res, cond, conv, it,
                     start_residual_norm=best_start)


def imcl_percent(fit: FitResult) -> float:
    """IMCL / (IMCL + EMCL) in percent from fitted amplitude moduli."""
    if not fit.converged:
        raise InvalidArgument("fit did not converge")
    if fit.ill_conditioned:
        raise InvalidArgument("fit is ill-conditioned; the IMCL/EMCL split is not identifiable")
    a_i, a_e = abs(fit.amplitude("imcl")), abs(fit.amplitude("emcl"))
    if a_i + a_e == 0:
        raise UndefinedRatioError("both lipid amplitudes are zero")
    return 100.0 * a_i / (a_i + a_e)


def ff_percent(fit: FitResult, lipid_lines: Sequence[str] = ("imcl", "emcl")) -> float:
    """Lipid share of total fitted amplitude, in percent."""
    if not fit.converged:
        raise InvalidArgument("fit did not converge")
    lip = sum(abs(fit.amplitude(n)) for n in lipid_lines)
    tot = lip + abs(fit.amplitude("water"))
    if tot == 0:
        raise UndefinedRatioError("all amplitudes are zero")
    return 100.0 * lip / tot


@dataclass
class QuantMaps:
    imcl_pct: MapImage
    ff_fit: MapImage
    fits: dict            # (iy, ix) -> FitResult
    failures: dict        # (iy, ix) -> reason


def _fit_many(args):
    fids, time_s, model, fld = args
    out = []
    for y in fids:
        try:
            out.append(fit_voxel(y, time_s, model, fld))
        except (EmptySignalError, InvalidArgument) as exc:
            out.append(str(exc))
    return out


def fit_dataset(ds: SpectroDataset, mask: Optional[np.ndarray] = None,
                model: Optional[PeakModel] = None, workers: int = 1,
                theta_map: Optional[np.ndarray] = None, imcl_halfwidth_ppm: float = 0.02,
                emcl_halfwidth_ppm: float = 0.25) -> QuantMaps:
    """Fit every masked voxel; results do not depend on the worker count.

    ``theta_map`` supplies a per-voxel fibre angle (rad) for the EMCL prior
    and overrides ``model``.
    """
    ny, nx = ds.ny, ds.nx
    mask = np.ones((ny, nx), bool) if mask is None else np.asarray(mask, bool)
    coords = [tuple(int(v) for v in c) for c in zip(*np.nonzero(mask))]
    jobs = []
    for iy, ix in coords:
        if theta_map is not None:
            m = default_peak_model(float(theta_map[iy, ix]), imcl_halfwidth_ppm, emcl_halfwidth_ppm)
        else:
            m = model
        jobs.append(([ds.fids[iy, ix]], ds.time_s, m, ds.field))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = [r[0] for r in ex.map(_fit_many, jobs, chunksize=16)]
    else:
        results = [_fit_many(j)[0] for j in jobs]

    imcl = np.full((ny, nx), np.nan)
    ff = np.full((ny, nx), np.nan)
    fits, failures = {}, {}
    for (iy, ix), res in zip(coords, results):
        if isinstance(res, str):
            failures[(iy, ix)] = res
            continue
        fits[(iy, ix)] = res
        try:
            ff[iy, ix] = ff_percent(res)
            imcl[iy, ix] = imcl_percent(res)
        except (InvalidArgument, UndefinedRatioError) as exc:
            failures[(iy, ix)] = str(exc)
    return QuantMaps(MapImage(imcl, np.isfinite(imcl)), MapImage(ff, np.isfinite(ff)),
                     fits, failures)


FIT_TABLE_COLUMNS = ("iy", "ix", "line", "amplitude_re", "amplitude_im", "amplitude_abs",
                     "freq_hz", "damping_hz", "residual_norm", "condition", "converged",
                     "ill_conditioned")


def fit_table_rows(fits: dict):
    """Rows for the per-line fit table, voxels in row-major order."""
    for (iy, ix) in sorted(fits):
        r = fits[(iy, ix)]
        for k, name in enumerate(r.names):
            c = complex(r.amplitudes[k])
            yield (iy, ix, name, c.real, c.imag, abs(c), float(r.freq_hz[k]),
                   float(r.damping[k]), r.residual_norm, r.condition, int(r.converged),
                   int(r.ill_conditioned))
