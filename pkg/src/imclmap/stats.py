"""Group comparison and correlation statistics.

The t distribution tail is evaluated through the regularized incomplete
beta function, computed with a modified Lentz continued fraction, so the
module depends on numpy only.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import InvalidArgument


class InsufficientDataError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    df: float
    p_value: float
    mean_a: float = float("nan")
    mean_b: float = float("nan")

    @property
    def direction(self) -> str:
        """Trend arrow from group a to group b."""
        if not np.isfinite(self.statistic) or self.statistic == 0:
            return "="
        return "↗" if self.statistic < 0 else "↘"


@dataclass(frozen=True)
class CorrResult:
    rho: float
    p_value: float
    n: int


@dataclass(frozen=True)
class LinFit:
    slope: float
    intercept: float
    r2: float
    n: int


@dataclass(frozen=True)
class CorrMatrix:
    names: tuple
    rho: np.ndarray
    p: np.ndarray
    n: np.ndarray

    @property
    def significant(self) -> np.ndarray:
        """Off-diagonal entries with p < 0.05."""
        sig = np.nan_to_num(self.p, nan=1.0) < 0.05
        np.fill_diagonal(sig, False)
        return sig


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-15) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise InvalidArgument("beta parameters must be positive")
    if x <= 0:
        return 0.0
    if x >= 1:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1) / (a + b + 2):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if not df > 0:
        raise InvalidArgument("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def _clean(x, name):
    a = np.asarray(x, dtype=float).ravel()
    a = a[np.isfinite(a)]
    if a.size < 2:
        raise InsufficientDataError(f"{name} needs at least 2 finite values, got {a.size}")
    return a


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided Welch t-test with Welch-Satterthwaite degrees of freedom."""
    x, y = _clean(a, "group a"), _clean(b, "group b")
    va, vb = x.var(ddof=1) / x.size, y.var(ddof=1) / y.size
    se2 = va + vb
    if se2 == 0:
        raise DegenerateDataError("both groups have zero variance")
    t = (x.mean() - y.mean()) / math.sqrt(se2)
    ra, rb = va / se2, vb / se2   # normalised so tiny variances do not underflow
    df = 1.0 / (ra ** 2 / (x.size - 1) + rb ** 2 / (y.size - 1))
    return TTestResult(float(t), float(df), float(t_sf_two_sided(t, df)), float(x.mean()),
                       float(y.mean()))


def rankdata(x) -> np.ndarray:
    """Ranks starting at 1, ties receiving their average rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _pearson(rx, ry) -> float:
    dx, dy = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if den == 0:
        raise DegenerateDataError("constant input; correlation undefined")
    return float(np.clip((dx @ dy) / den, -1.0, 1.0))


def spearman(x, y, exact: bool = False) -> CorrResult:
    """Spearman rank correlation with a two-sided p-value.

    The p-value uses the t approximation with n - 2 degrees of freedom, or
    a full permutation enumeration when ``exact`` is set (n <= 10).
    """
    x, y = np.asarray(x, dtype=float).ravel(), np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise InvalidArgument("x and y must have equal length")
    keep = np.isfinite(x) & np.isfinite(y)
    x, y = x[keep], y[keep]
    n = x.size
    if n < 3:
        raise InsufficientDataError(f"spearman needs at least 3 pairs, got {n}")
    rx, ry = rankdata(x), rankdata(y)
    rho = _pearson(rx, ry)
    if exact:
        if n > 10:
            raise InvalidArgument("exact permutation p-value limited to n <= 10")
        p = _spearman_exact_p(rx, ry, rho)
    elif abs(rho) == 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1 - rho * rho))
        p = t_sf_two_sided(t, n - 2)
    return CorrResult(rho, float(p), int(n))


def _spearman_exact_p(rx, ry, rho) -> float:
    dx = rx - rx.mean()
    den = math.sqrt(float(dx @ dx) * float(((ry - ry.mean()) ** 2).sum()))
    target = abs(rho) - 1e-12
    hits = total = 0
    for perm in itertools.permutations(ry):
        r = (dx @ (np.asarray(perm) - ry.mean())) / den
        hits += abs(r) >= target
        total += 1
    return hits / total


def linreg(x, y) -> LinFit:
    """Ordinary least squares y = slope * x + intercept."""
    x, y = np.asarray(x, dtype=float).ravel(), np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise InvalidArgument("x and y must have equal length")
    keep = np.isfinite(x) & np.isfinite(y)
    x, y = x[keep], y[keep]
    if x.size < 2:
        raise InsufficientDataError("linreg needs at least 2 points")
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0:
        raise DegenerateDataError("x is constant")
    slope = float(dx @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (slope * x + intercept)
    syy = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / syy if syy > 0 else 0.0
    return LinFit(slope, intercept, r2, int(x.size))


def correlation_matrix(columns: dict) -> CorrMatrix:
    """Pairwise-complete Spearman matrix over named columns of equal length."""
    names = tuple(columns)
    if len(names) < 2:
        raise InsufficientDataError("correlation matrix needs at least 2 columns")
    data = [np.asarray(columns[k], dtype=float).ravel() for k in names]
    if len({d.size for d in data}) > 1:
        raise InvalidArgument("columns must have equal length")
    m = len(names)
    rho = np.eye(m)
    p = np.zeros((m, m))
    n = np.zeros((m, m), dtype=int)
    for i in range(m):
        n[i, i] = int(np.isfinite(data[i]).sum())
        for j in range(i + 1, m):
            try:
                r = spearman(data[i], data[j], exact=False)
                vals = (r.rho, r.p_value, r.n)
            except (InsufficientDataError, DegenerateDataError):
                keep = np.isfinite(data[i]) & np.isfinite(data[j])
                vals = (float("nan"), float("nan"), int(keep.sum()))
            rho[i, j] = rho[j, i] = vals[0]
            p[i, j] = p[j, i] = vals[1]
            n[i, j] = n[j, i] = vals[2]
    return CorrMatrix(names, rho, p, n)
