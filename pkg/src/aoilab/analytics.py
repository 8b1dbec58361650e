"""Closed-form quantities of the cooperative update scheme.

Everything here is a pure function of its inputs: harmonic-type sums,
moments of exponential order statistics, per-phase moments of the
(worsened) three-phase scheme, and the resulting average-age expressions.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .params import SchemeParams

EULER_GAMMA = 0.5772156649015329
PI_SQ_OVER_6 = math.pi * math.pi / 6.0

# Exact prefix tables are grown on demand up to this many terms; beyond it
# the asymptotic expansions take over (their error is far below 1e-12 there).
TABLE_CAP = 10_000_000

_CHUNK = 1 << 16
_lock = threading.Lock()
_h_table = np.zeros(1)  # _h_table[k] = H_k = sum_{j<=k} 1/j
_g_table = np.zeros(1)  # _g_table[k] = G_k = sum_{j<=k} 1/j**2


def _extend_table(table: np.ndarray, target: int, power: int) -> np.ndarray:
    """Append exact partial sums of 1/j**power for j up to ``target``.

    Terms are accumulated in ascending order.  Within a chunk the partial
    sums start from zero, so their rounding error is tiny relative to the
    chunk total; chunk bases are carried in compensated (hi, lo) form.
    """
    new = np.empty(target + 1)
    built = table.size - 1
    new[: built + 1] = table
    hi = float(table[built])
    lo = 0.0
    for start in range(built + 1, target + 1, _CHUNK):
        stop = min(start + _CHUNK - 1, target)
        j = np.arange(start, stop + 1, dtype=np.float64)
        terms = 1.0 / j if power == 1 else 1.0 / (j * j)
        local = np.cumsum(terms)
        new[start : stop + 1] = hi + (lo + local)
        # Kahan-style carry of the exact chunk total into (hi, lo).
        chunk_total = math.fsum(terms.tolist())
        t = hi + chunk_total
        lo += chunk_total - (t - hi)
        hi = t
    return new


def _table_value(n: int, power: int) -> float:
    global _h_table, _g_table
    table = _h_table if power == 1 else _g_table
    if n >= table.size:
        with _lock:
            table = _h_table if power == 1 else _g_table
            if n >= table.size:
                target = min(TABLE_CAP, max(n, 2 * (table.size - 1), 1024))
                grown = _extend_table(table, target, power)
                if power == 1:
                    _h_table = grown
                else:
                    _g_table = grown
                table = grown
    return float(table[n])


def harmonic(n: int) -> float:
    """H_n = sum_{j=1}^{n} 1/j, with harmonic(0) = 0.

    Exact summation (memoized prefix table) up to ``TABLE_CAP``; the
    asymptotic expansion log n + gamma + 1/(2n) - 1/(12 n^2) + 1/(120 n^4)
    above it.  Relative accuracy is well under 1e-12 either way.
    """
    if not isinstance(n, (int, np.integer)) or n < 0:
        raise ValueError(f"harmonic requires an integer n >= 0, got {n!r}")
    n = int(n)
    if n == 0:
        return 0.0
    if n <= TABLE_CAP:
        return _table_value(n, power=1)
    inv = 1.0 / n
    inv2 = inv * inv
    return math.log(n) + EULER_GAMMA + 0.5 * inv - inv2 / 12.0 + inv2 * inv2 / 120.0


def gen_harmonic(n: int) -> float:
    """G_n = sum_{j=1}^{n} 1/j^2, with gen_harmonic(0) = 0.

    Converges to pi^2/6; above ``TABLE_CAP`` the tail is expanded as
    1/n - 1/(2n^2) + 1/(6n^3) - 1/(30n^5).
    """
    if not isinstance(n, (int, np.integer)) or n < 0:
        raise ValueError(f"gen_harmonic requires an integer n >= 0, got {n!r}")
    n = int(n)
    if n == 0:
        return 0.0
    if n <= TABLE_CAP:
        return _table_value(n, power=2)
    inv = 1.0 / n
    inv2 = inv * inv
    tail = inv - 0.5 * inv2 + inv2 * inv / 6.0 - inv2 * inv2 * inv / 30.0
    return PI_SQ_OVER_6 - tail


@dataclass(frozen=True)
class OrderStatMoments:
    """First two moments of one exponential order statistic."""

    mean: float
    variance: float
    second_moment: float


def order_stat_moments(k: int, n: int, rate: float) -> OrderStatMoments:
    """Moments of the k-th smallest of n i.i.d. exponentials with ``rate``.

    mean = (H_n - H_{n-k}) / rate, variance = (G_n - G_{n-k}) / rate^2.
    """
    if not isinstance(k, (int, np.integer)) or not isinstance(n, (int, np.integer)):
        raise ValueError("k and n must be integers")
    if k < 1 or k > n:
        raise ValueError(f"require 1 <= k <= n, got k={k}, n={n}")
    if not rate > 0:
        raise ValueError(f"rate must be > 0, got {rate}")
    mean = (harmonic(int(n)) - harmonic(int(n - k))) / rate
    variance = (gen_harmonic(int(n)) - gen_harmonic(int(n - k))) / (rate * rate)
    return OrderStatMoments(mean=mean, variance=variance, second_moment=variance + mean * mean)


@dataclass(frozen=True)
class PhaseMoments:
    """Per-phase moments of the worsened scheme.

    ``e_y1 .. e_y3`` are the mean phase durations, ``e_y*_sq`` their second
    moments, ``e_z`` the mean residual delivery wait inside phase three.
    ``e_y`` and ``e_y_sq`` aggregate the full session (phases independent).
    """

    e_y1: float
    e_y2: float
    e_y3: float
    e_y1_sq: float
    e_y2_sq: float
    e_y3_sq: float
    e_z: float
    e_y: float
    e_y_sq: float


def phase_moments(params: SchemeParams) -> PhaseMoments:
    """Exact moments of the three (worsened) phases and the delivery wait.

    Phase one: m rounds, each the max of n rate-``lambda_intra`` draws.
    Phase two: n/m cells in sequence, each the max of m draws that are
    themselves exponential with rate m^2 * ``lambda_inter``.
    Phase three: m rounds, each the max of n/m rate-``lambda_intra`` draws.
    The delivery wait z is a uniform number of full phase-three rounds plus
    one fresh in-cell delay.
    """
    n, m = params.n, params.m
    lam = params.lambda_intra
    lam_t = params.lambda_inter
    cells = params.cells

    h_n = harmonic(n)
    h_m = harmonic(m)
    h_c = harmonic(cells)
    g_n = gen_harmonic(n)
    g_m = gen_harmonic(m)
    g_c = gen_harmonic(cells)

    e_y1 = m / lam * h_n
    e_y2 = n / (m**3 * lam_t) * h_m
    e_y3 = m / lam * h_c

    e_y1_sq = m**2 / lam**2 * h_n**2 + m / lam**2 * g_n
    e_y2_sq = n**2 / (m**6 * lam_t**2) * h_m**2 + n / (m**5 * lam_t**2) * g_m
    e_y3_sq = m**2 / lam**2 * h_c**2 + m / lam**2 * g_c

    e_z = (m - 1) / (2.0 * lam) * h_c + 1.0 / lam

    e_y = e_y1 + e_y2 + e_y3
    e_y_sq = (
        e_y1_sq
        + e_y2_sq
        + e_y3_sq
        + 2.0 * (e_y1 * e_y2 + e_y1 * e_y3 + e_y2 * e_y3)
    )
    return PhaseMoments(
        e_y1=e_y1,
        e_y2=e_y2,
        e_y3=e_y3,
        e_y1_sq=e_y1_sq,
        e_y2_sq=e_y2_sq,
        e_y3_sq=e_y3_sq,
        e_z=e_z,
        e_y=e_y,
        e_y_sq=e_y_sq,
    )


@dataclass(frozen=True)
class AgeBreakdown:
    """Average age split into its delay and renewal contributions.

    ``per_term`` lists the seven additive terms of the closed form in
    order: the three delay terms (phase-one mean, phase-two mean, delivery
    wait) followed by the four renewal terms (one per phase second moment
    plus the cross term).
    """

    total: float
    delay_part: float
    renewal_part: float
    per_term: tuple[tuple[str, float], ...]


def closed_form_age(params: SchemeParams) -> AgeBreakdown:
    """Exact average age of one source-destination pair.

    total = E[Y_1] + E[Y_2] + E[Z] + E[Y^2] / (2 E[Y]) with the phase
    moments of :func:`phase_moments`.
    """
    pm = phase_moments(params)
    half_denom = 2.0 * pm.e_y
    cross = 2.0 * (pm.e_y1 * pm.e_y2 + pm.e_y1 * pm.e_y3 + pm.e_y2 * pm.e_y3)
    terms = (
        ("mean_phase1", pm.e_y1),
        ("mean_phase2", pm.e_y2),
        ("mean_delivery_wait", pm.e_z),
        ("renewal_phase1_sq", pm.e_y1_sq / half_denom),
        ("renewal_phase2_sq", pm.e_y2_sq / half_denom),
        ("renewal_phase3_sq", pm.e_y3_sq / half_denom),
        ("renewal_cross", cross / half_denom),
    )
    delay = pm.e_y1 + pm.e_y2 + pm.e_z
    renewal = pm.e_y_sq / half_denom
    return AgeBreakdown(
        total=delay + renewal,
        delay_part=delay,
        renewal_part=renewal,
        per_term=terms,
    )


def asymptotic_age(
    n: int, b: float, lambda_intra: float = 1.0, lambda_inter: float = 1.0
) -> float:
    """Large-n approximation of the average age with m = n**b kept symbolic.

    Substitutions: H_n -> log n, H_m -> b log n, H_{n/m} -> (1-b) log n,
    and every G -> pi^2/6.  ``m`` is not rounded to an integer, so this is
    an asymptotic report rather than an oracle for finite-n simulation.
    """
    if not isinstance(n, (int, np.integer)) or n < 2:
        raise ValueError(f"n must be an integer >= 2, got {n!r}")
    if not 0.0 < b <= 1.0:
        raise ValueError(f"b must lie in (0, 1], got {b}")
    if not lambda_intra > 0 or not lambda_inter > 0:
        raise ValueError("rates must be > 0")
    lam, lam_t = lambda_intra, lambda_inter
    log_n = math.log(n)
    nb = float(n) ** b
    z = PI_SQ_OVER_6

    e_y = (
        nb / lam * log_n
        + n / (nb**3 * lam_t) * b * log_n
        + nb / lam * (1.0 - b) * log_n
    )
    t1 = nb / lam * log_n
    t2 = n / (nb**3 * lam_t) * b * log_n
    t3 = (nb - 1.0) / (2.0 * lam) * (1.0 - b) * log_n
    t4 = 1.0 / lam
    t5 = (nb**2 / lam**2 * log_n**2 + nb / lam**2 * z) / (2.0 * e_y)
    t6 = (
        n**2 / (nb**6 * lam_t**2) * b * b * log_n**2
        + n / (nb**5 * lam_t**2) * z
    ) / (2.0 * e_y)
    t7 = (nb**2 / lam**2 * (1.0 - b) ** 2 * log_n**2 + nb / lam**2 * z) / (2.0 * e_y)
    t8 = (
        n / (nb**2 * lam * lam_t) * b * log_n**2
        + nb**2 / lam**2 * (1.0 - b) * log_n**2
    ) / e_y
    t9 = (n / (nb**2 * lam * lam_t) * b * (1.0 - b) * log_n**2) / e_y
    return t1 + t2 + t3 + t4 + t5 + t6 + t7 + t8 + t9


def scaling_exponent(b: float) -> float:
    """Predicted polynomial growth exponent of the age in n for cell
    exponent ``b``: the dominant of the competing terms, max(b, 1 - 3b).

    Minimized at b = 1/4 with value 1/4.
    """
    if not 0.0 < b <= 1.0:
        raise ValueError(f"b must lie in (0, 1], got {b}")
    return max(b, 1.0 - 3.0 * b)
