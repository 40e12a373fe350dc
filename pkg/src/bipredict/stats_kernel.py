"""Small self-contained statistics kernel.

Two-sample t-tests (Welch by default, pooled on request), Cohen's d and
Pearson correlation. Student-t tail probabilities come from the
regularized incomplete beta function evaluated by continued fraction
(modified Lentz), so nothing here depends on scipy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .exceptions import ConvergenceError, InsufficientDataError, UndefinedStatisticError

MAX_ITER = 300
CF_TOL = 1e-12
_TINY = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_TOL:
            return h
    raise ConvergenceError(
        f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})"
    )


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc requires a > 0 and b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"betainc requires 0 <= x <= 1, got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) of Student's t with ``df`` degrees of freedom."""
    if not df > 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if math.isnan(t):
        return math.nan
    if t == 0:
        return 0.5
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * betainc(0.5 * df, 0.5, df / (df + t * t))
    return tail if t > 0 else 1.0 - tail


def two_sided_p(t: float, df: float) -> float:
    return min(1.0, 2.0 * student_t_sf(abs(t), df))


def _mean_var(x: Sequence[float]) -> tuple[float, float]:
    n = len(x)
    m = math.fsum(x) / n
    v = math.fsum((xi - m) ** 2 for xi in x) / (n - 1)
    return m, v


def _sign(x: float) -> int:
    return (x > 0) - (x < 0)


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p_two_sided: float
    mean_a: float
    mean_b: float
    direction: int  # sign of mean_b - mean_a


def welch_t_test(sample_a: Sequence[float], sample_b: Sequence[float], equal_var: bool = False) -> TTestResult:
    """Two-sample t-test of ``sample_a`` against ``sample_b``.

    The statistic is ``(mean_a - mean_b) / se`` (scipy's ``ttest_ind``
    orientation) while ``direction`` reports the sign of the shift from a
    to b. With ``equal_var=True`` the pooled-variance Student test is used.

    Degenerate cases: both samples constant with equal means gives t=0,
    p=1; constant with different means gives infinite t and p=0.
    """
    a = [float(v) for v in sample_a]
    b = [float(v) for v in sample_b]
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise InsufficientDataError(f"t-test needs at least 2 values per sample, got {na} and {nb}")
    ma, va = _mean_var(a)
    mb, vb = _mean_var(b)
    direction = _sign(mb - ma)

    if equal_var:
        df = na + nb - 2.0
        sp2 = ((na - 1) * va + (nb - 1) * vb) / df
        se2 = sp2 * (1.0 / na + 1.0 / nb)
    else:
        qa, qb = va / na, vb / nb
        se2 = qa + qb
        denom = (qa * qa / (na - 1) if qa else 0.0) + (qb * qb / (nb - 1) if qb else 0.0)
        df = se2 * se2 / denom if denom > 0 else na + nb - 2.0

    if se2 <= 0:
        if ma == mb:
            return TTestResult(0.0, df, 1.0, ma, mb, 0)
        return TTestResult(math.copysign(math.inf, ma - mb), df, 0.0, ma, mb, direction)

    t = (ma - mb) / math.sqrt(se2)
    return TTestResult(t, df, two_sided_p(t, df), ma, mb, direction)


@dataclass(frozen=True)
class EffectSize:
    cohens_d: float


def cohens_d(sample_a: Sequence[float], sample_b: Sequence[float]) -> EffectSize:
    """Pooled-SD Cohen's d for the shift from a to b."""
    na, nb = len(sample_a), len(sample_b)
    if na < 2 or nb < 2:
        raise InsufficientDataError("Cohen's d needs at least 2 values per sample")
    ma, va = _mean_var(sample_a)
    mb, vb = _mean_var(sample_b)
    pooled = ((na - 1) * va + (nb - 1) * vb) / (na + nb - 2)
    if pooled <= 0:
        raise UndefinedStatisticError("Cohen's d is undefined with zero pooled variance")
    return EffectSize((mb - ma) / math.sqrt(pooled))


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p_two_sided: float
    n: int


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    n = len(x)
    if n != len(y):
        raise ValueError(f"length mismatch: {n} vs {len(y)}")
    if n < 3:
        raise InsufficientDataError(f"Pearson correlation needs at least 3 pairs, got {n}")
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    dx = [v - mx for v in x]
    dy = [v - my for v in y]
    sxx = math.fsum(v * v for v in dx)
    syy = math.fsum(v * v for v in dy)
    if sxx <= 0 or syy <= 0:
        raise UndefinedStatisticError("Pearson correlation is undefined for a constant series")
    sxy = math.fsum(u * v for u, v in zip(dx, dy))
    r = sxy / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return CorrelationResult(r, 0.0, n)
    df = n - 2
    t = r * math.sqrt(df / (1.0 - r * r))
    return CorrelationResult(r, two_sided_p(t, df), n)
