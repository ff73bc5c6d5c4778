"""Pearson correlation, Bland-Altman agreement and Tukey HSD comparisons."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from scipy import integrate, special
from scipy import stats as sps

VARIANCE_FLOOR = 1e-12
LOA_Z = 1.96


def pearson(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Sample correlation r and two-sided p from Student's t with n-2 df."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1D sequences of equal length")
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance in an argument")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = float(2.0 * sps.t.sf(abs(t), n - 2))
    return r, min(max(p, 0.0), 1.0)


@dataclass(frozen=True)
class BlandAltman:
    bias: float
    sd: float
    loa_low: float
    loa_high: float
    n: int


def bland_altman(a: Sequence[float], b: Sequence[float]) -> BlandAltman:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size < 3:
        raise ValueError("need at least 3 pairs")
    diffs = a - b
    bias = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    return BlandAltman(bias, sd, bias - LOA_Z * sd, bias + LOA_Z * sd, int(a.size))


# -- studentized range distribution -----------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(256)
_Z_LIMIT = 8.5


def _range_cdf(w: np.ndarray, k: int) -> np.ndarray:
    """P(range of k iid standard normals <= w), vectorised over w.

    k * int phi(z) [Phi(z) - Phi(z - w)]^(k-1) dz by Gauss-Legendre on
    [-8.5, 8.5].
    """
    w = np.atleast_1d(np.asarray(w, dtype=np.float64))
    z = _Z_LIMIT * _GL_NODES
    phi = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    cdf_z = special.ndtr(z)
    diff = np.clip(cdf_z[None, :] - special.ndtr(z[None, :] - w[:, None]), 0.0, 1.0)
    vals = k * (_Z_LIMIT * _GL_WEIGHTS * phi)[None, :] * diff ** (k - 1)
    return np.clip(vals.sum(axis=1), 0.0, 1.0)


def _scale_logpdf(s: np.ndarray, df: float) -> np.ndarray:
    """Log density of s = sqrt(chi2_df / df)."""
    half = df / 2.0
    return (math.log(2.0) + half * math.log(half) - special.gammaln(half)
            + (df - 1.0) * np.log(s) - half * s * s)


@lru_cache(maxsize=4096)
def _ptukey_cached(q: float, k: int, df: float) -> float:
    if q <= 0:
        return 0.0
    if math.isinf(df):
        return float(_range_cdf(q, k)[0])
    # integrate over s where the scale density has mass
    sd = 1.0 / math.sqrt(2.0 * df)
    lo = max(1e-12, 1.0 - 12.0 * sd) if df > 20 else 1e-12
    hi = 1.0 + 14.0 * sd if df > 20 else 1.0 + 14.0 * sd + 2.0

    def integrand(s):
        return float(np.exp(_scale_logpdf(np.asarray(s), df)) * _range_cdf(q * s, k)[0])

    val, _ = integrate.quad(integrand, lo, hi, limit=200, epsabs=1e-10, epsrel=1e-9)
    return min(max(val, 0.0), 1.0)


def studentized_range_cdf(q: float, k: int, df: float) -> float:
    """CDF of the studentized range for k groups and df error degrees of freedom."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if df <= 0:
        raise ValueError("df must be > 0")
    return _ptukey_cached(float(q), int(k), float(df))


def studentized_range_sf(q: float, k: int, df: float) -> float:
    return 1.0 - studentized_range_cdf(q, k, df)


# -- Tukey HSD ------------------------------------------------------------------

@dataclass(frozen=True)
class TukeyRow:
    group1: str
    group2: str
    mean_diff: float  # mean(group2) - mean(group1)
    q_statistic: float
    p_value: float


@dataclass
class TukeyResult:
    rows: list[TukeyRow]
    k: int
    df: int
    mse: float

    def pair(self, g1: str, g2: str) -> TukeyRow:
        for r in self.rows:
            if (r.group1, r.group2) == (g1, g2):
                return r
            if (r.group1, r.group2) == (g2, g1):
                return TukeyRow(g1, g2, -r.mean_diff, r.q_statistic, r.p_value)
        raise KeyError((g1, g2))


def tukey_hsd(groups: Mapping[str, Sequence[float]]) -> TukeyResult:
    """All-pairs Tukey HSD (Tukey-Kramer for unequal sizes) on a one-way layout."""
    if len(groups) < 2:
        raise ValueError("need at least 2 groups")
    names = list(groups)
    data = {g: np.asarray(groups[g], dtype=np.float64) for g in names}
    for g, v in data.items():
        if v.size < 2:
            raise ValueError(f"group {g!r} has fewer than 2 values")
    k = len(names)
    n_total = sum(v.size for v in data.values())
    df = n_total - k
    ss_within = sum(float(((v - v.mean()) ** 2).sum()) for v in data.values())
    mse = max(ss_within / df, VARIANCE_FLOOR)
    rows = []
    for g1, g2 in itertools.combinations(names, 2):
        v1, v2 = data[g1], data[g2]
        diff = float(v2.mean() - v1.mean())
        se = math.sqrt(mse / 2.0 * (1.0 / v1.size + 1.0 / v2.size))
        q = abs(diff) / se
        rows.append(TukeyRow(g1, g2, diff, q, studentized_range_sf(q, k, df)))
    return TukeyResult(rows, k, df, mse)
