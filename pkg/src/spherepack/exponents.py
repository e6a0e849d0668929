"""Sphere-packing exponent, order finding and the explicit lower bounds."""

from __future__ import annotations

import csv
import io
import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import expit

from .probability import Dmc, DmcLike, as_dmc
from .renyi import DEFAULT_TOL, capacity_order_zero, capacity_value, fmt

GRID_POINTS = 256
LOG_ODDS_SPAN = 6.0 * math.log(10.0)
MIN_ORDER = 2.0 ** -40
ZERO_ORDER_TOL = 1e-9
MAX_LOG_ODDS = math.log((1.0 - MIN_ORDER) / MIN_ORDER)
LN4 = math.log(4.0)


class HypothesisError(ValueError):
    """A structural precondition of the bound is violated."""


@dataclass(frozen=True)
class SpeResult:
    rate_nats: float
    value: float
    achieving_order: Optional[float]
    grid_resolution: float

    @property
    def infinite(self) -> bool:
        return math.isinf(self.value)


@dataclass(frozen=True)
class ChannelLimits:
    c0: float
    c_half: float
    c1: float


_limits: dict = {}
_limits_lock = threading.Lock()


def channel_limits(w: DmcLike, tol: float = DEFAULT_TOL) -> ChannelLimits:
    """C_0, C_1/2 and C_1, memoised per channel."""
    w = as_dmc(w)
    key = (w.digest(), tol)
    hit = _limits.get(key)
    if hit is None:
        c1 = capacity_value(1.0, w, tol)
        c0 = min(capacity_order_zero(w, ZERO_ORDER_TOL), c1)
        if c0 < ZERO_ORDER_TOL:
            c0 = 0.0  # extrapolation residue; a positive C_0 is the log of a support ratio
        elif c1 - c0 < ZERO_ORDER_TOL:
            c0 = c1  # equal within the extrapolation accuracy: no window between them
        hit = ChannelLimits(c0, capacity_value(0.5, w, tol), c1)
        with _limits_lock:
            hit = _limits.setdefault(key, hit)
    return hit


# --- supremum over the order ----------------------------------------------

class _ExponentSearch:
    """Evaluates sup_rho ((1-rho)/rho)(C_rho - R) over a shared candidate set.

    Orders are parametrised by the log-odds u = ln((1-rho)/rho).  Every order
    at which a capacity was computed stays a candidate for every rate, so
    values for several rates are exactly ordered when the rates are.
    """

    def __init__(self, w: Dmc, tol: float):
        self.w = w
        self.tol = tol
        self.caps: dict[float, float] = {}
        self.grid = np.linspace(-LOG_ODDS_SPAN, LOG_ODDS_SPAN, GRID_POINTS)
        self.step = float(self.grid[1] - self.grid[0])

    def capacity_at(self, u: float) -> float:
        hit = self.caps.get(u)
        if hit is None:
            rho = float(expit(-u))
            hit = capacity_value(rho, self.w, self.tol)
            self.caps[u] = hit
        return hit

    def objective(self, u: float, rate: float) -> float:
        return math.exp(u) * (self.capacity_at(u) - rate)

    def refine(self, rate: float) -> None:
        us = list(self.grid)
        vals = [self.objective(u, rate) for u in us]
        i = int(np.argmax(vals))
        if i == len(us) - 1:
            jump = self.step
            while us[-1] < MAX_LOG_ODDS:
                u = min(us[-1] + jump, MAX_LOG_ODDS)
                us.append(u)
                vals.append(self.objective(u, rate))
                if vals[-1] <= vals[-2]:
                    break
                jump *= 2.0
            i = int(np.argmax(vals))
        elif i == 0:
            jump = self.step
            while us[0] > math.log(1e-15):
                u = us[0] - jump
                us.insert(0, u)
                vals.insert(0, self.objective(u, rate))
                if vals[0] <= vals[1]:
                    break
                jump *= 2.0
            i = int(np.argmax(vals))
        if 0 < i < len(us) - 1:
            try:
                minimize_scalar(
                    lambda u: -self.objective(u, rate),
                    bracket=(us[i - 1], us[i], us[i + 1]),
                    method="golden",
                    options={"xtol": 1e-12},
                )
            except ValueError:
                pass  # plateau: bracket not strict, keep the grid optimum

    def best(self, rate: float) -> tuple[float, Optional[float]]:
        value, arg = 0.0, None
        for u in sorted(self.caps):
            v = math.exp(u) * (self.caps[u] - rate)
            if v > value:
                value, arg = v, u
        return value, None if arg is None else float(expit(-arg))


def sphere_packing_exponents(w: DmcLike, rates: Sequence[float], tol: float = DEFAULT_TOL) -> list[SpeResult]:
    """E_sp at several rates; the results are exactly nonincreasing in rate."""
    w = as_dmc(w)
    lim = channel_limits(w, tol)
    search = _ExponentSearch(w, tol)
    for r in rates:
        if r < 0:
            raise ValueError(f"rate must be non-negative, got {r!r}")
        if lim.c0 <= r < lim.c1:
            search.refine(r)
    out = []
    for r in rates:
        if r >= lim.c1:
            out.append(SpeResult(r, 0.0, None, search.step))
        elif r < lim.c0:
            out.append(SpeResult(r, math.inf, None, search.step))
        else:
            v, rho = search.best(r)
            out.append(SpeResult(r, v, rho, search.step))
    return out


def sphere_packing_exponent(w: DmcLike, rate: float, tol: float = DEFAULT_TOL) -> SpeResult:
    """E_sp(R) = sup over rho in (0,1) of ((1-rho)/rho)(C_rho - R).

    A 256-point log-odds grid locates the best bracket, which golden-section
    search then refines.  Rates below C_0 give an infinite value.
    """
    return sphere_packing_exponents(w, [rate], tol)[0]


def spe_value(w: DmcLike, rate: float, tol: float = DEFAULT_TOL) -> float:
    if rate < 0:
        return math.inf
    return sphere_packing_exponent(w, rate, tol).value


# --- order finding ---------------------------------------------------------

def _check_window(lim: ChannelLimits, rate: float, name: str) -> None:
    if not lim.c0 < lim.c1:
        raise HypothesisError("C_0 equals C_1; no order satisfies the defining equation")
    if not lim.c0 < rate < lim.c1:
        raise HypothesisError(f"{name}={rate!r} lies outside (C_0, C_1) = ({lim.c0!r}, {lim.c1!r})")


def _lower_bracket(fn) -> float:
    rho = 0.5
    while fn(rho) >= 0:
        rho /= 2.0
        if rho < MIN_ORDER:
            raise HypothesisError("no bracketing order found above 2^-40")
    return rho


def find_order_for_rate(w: DmcLike, rate: float, tol: float = DEFAULT_TOL) -> float:
    """Order rho with C_rho(W) = rate, by bracketed root finding on the nondecreasing map."""
    w = as_dmc(w)
    lim = channel_limits(w, tol)
    _check_window(lim, rate, "rate")

    def gap(rho):
        return capacity_value(rho, w, tol) - rate

    lo = _lower_bracket(gap)
    hi = 1.0 if lo == 0.5 else 2.0 * lo
    return float(brentq(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))


def find_order_for_spe(w: DmcLike, rate1: float, tol: float = DEFAULT_TOL) -> float:
    """Order rho with ((1-rho)/rho) C_rho(W) = E_sp(rate1, W)."""
    w = as_dmc(w)
    lim = channel_limits(w, tol)
    _check_window(lim, rate1, "rate1")
    target = spe_value(w, rate1, tol)

    def excess(rho):
        return (1.0 - rho) / rho * capacity_value(rho, w, tol) - target

    lo = 0.5
    while excess(lo) <= 0:
        lo /= 2.0
        if lo < MIN_ORDER:
            raise HypothesisError("no bracketing order found above 2^-40")
    return float(brentq(excess, lo, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))


# --- non-asymptotic bound -------------------------------------------------

@dataclass(frozen=True)
class SpbParameters:
    n: int
    k: int
    epsilon: float
    rate0: float
    rate1: float
    rate: float
    rho1: float
    rho2: float
    delta1: float
    delta2: float
    c_half: float
    c0: float
    c1: float
    flags: dict = field(default_factory=dict)

    @property
    def window_ok(self) -> bool:
        return all(self.flags.values())


def delta_terms(n, k, epsilon: float, rho1: float, rho2: float, c_half: float, rate: float) -> tuple[float, float]:
    """The two slack constants of the non-asymptotic bound; ``n`` and ``k`` may be huge ints."""
    n_f, k_f = float(n), float(k)
    spread = 8.0 * (2.0 + c_half) / math.sqrt(k_f)
    ln_n = math.log(n) if isinstance(n, int) else math.log(n_f)
    d1 = LN4 / n_f + spread / (1.0 - rho2) + (k_f / n_f) * math.log(n_f + 1.0 / epsilon)
    d2 = LN4 / n_f + spread / rho1 + k_f * ln_n / n_f + 2.0 * rate * epsilon / (rho1 * rho1)
    return d1, d2


def default_rates(lim: ChannelLimits) -> tuple[float, float]:
    width = lim.c1 - lim.c0
    return lim.c0 + 0.1 * width, lim.c1 - 0.1 * width


def spb_constants(
    w: DmcLike,
    n: int,
    k: int,
    epsilon: Optional[float],
    rate0: Optional[float],
    rate1: Optional[float],
    rate: float,
    tol: float = DEFAULT_TOL,
) -> SpbParameters:
    """Orders and slack constants of the non-asymptotic sphere-packing bound.

    ``epsilon=None`` picks the largest admissible value min(rho1, 1-rho2)/2;
    ``rate0``/``rate1`` default to 10% inside (C_0, C_1).  Block-structure and
    epsilon violations raise; the rate window is reported in ``flags``.
    """
    w = as_dmc(w)
    if not (isinstance(n, (int, np.integer)) and isinstance(k, (int, np.integer))):
        raise HypothesisError("n and k must be integers")
    n, k = int(n), int(k)
    if n < 1 or k < 1:
        raise HypothesisError("n and k must be positive")
    if k > n:
        raise HypothesisError(f"k={k} exceeds n={n}")
    lim = channel_limits(w, tol)
    d0, d1_ = default_rates(lim)
    rate0 = d0 if rate0 is None else float(rate0)
    rate1 = d1_ if rate1 is None else float(rate1)
    if not lim.c0 < rate0 < rate1 < lim.c1:
        raise HypothesisError(f"need C_0 < rate0 < rate1 < C_1, got {rate0!r}, {rate1!r}")
    rho1 = find_order_for_rate(w, rate0, tol)
    rho2 = find_order_for_spe(w, rate1, tol)
    cap = min(rho1, 1.0 - rho2) / 2.0
    if epsilon is None:
        epsilon = cap
    if not 0 < epsilon <= cap:
        raise HypothesisError(f"epsilon={epsilon!r} must lie in (0, min(rho1, 1-rho2)/2 = {cap!r}]")
    d1, d2 = delta_terms(n, k, epsilon, rho1, rho2, lim.c_half, rate)
    flags = {"rate_at_most_rate1": rate <= rate1, "rate_at_least_rate0_plus_delta1": rate >= rate0 + d1}
    return SpbParameters(n, k, float(epsilon), rate0, rate1, float(rate), rho1, rho2, d1, d2, lim.c_half, lim.c0, lim.c1, flags)


@dataclass(frozen=True)
class BoundResult:
    value: float
    log_value: float
    exponent: float
    vacuous: bool
    window_ok: bool


def _bound_from_exponent(n, exponent: float, window_ok: bool) -> BoundResult:
    if math.isinf(exponent):
        return BoundResult(0.0, -math.inf, math.inf, True, window_ok)
    if exponent <= 0:
        log_value = 0.0
    elif int(n).bit_length() < 1000:
        log_value = -float(n) * exponent
    else:
        log_value = -math.inf
    return BoundResult(math.exp(log_value), log_value, exponent, False, window_ok)


def spb_lower_bound(params: SpbParameters, w: DmcLike, tol: float = DEFAULT_TOL) -> BoundResult:
    """exp(-n [E_sp(R - delta1) + delta2]) clamped to [0, 1]; zero and ``vacuous`` when the exponent is infinite."""
    e = spe_value(w, params.rate - params.delta1, tol)
    return _bound_from_exponent(params.n, e + params.delta2, params.window_ok)


# --- asymptotic form ---------------------------------------------------------

def icbrt(v: int) -> int:
    """Floor of the real cube root of a non-negative integer."""
    if v < 0:
        raise ValueError("negative")
    if v < 2:
        return v
    shift = max(0, (v.bit_length() - 96) // 3)
    x = int(round((v >> (3 * shift)) ** (1.0 / 3.0))) << shift
    x = max(x, 1)
    while True:
        y = (2 * x + v // (x * x)) // 3
        if abs(y - x) <= 1:
            x = y
            break
        x = y
    while x ** 3 > v:
        x -= 1
    while (x + 1) ** 3 <= v:
        x += 1
    return x


def _ln(n) -> float:
    return math.log(n)


def log_asymptotic_slack(n) -> float:
    ln_n = _ln(n)
    return math.log(2.0 * ln_n) - ln_n / 3.0


def asymptotic_slack(n) -> float:
    """2 ln(n) / n^(1/3); underflows to 0 for astronomically large n."""
    return math.exp(log_asymptotic_slack(n))


def schedule(n: int, rho1: float, rho2: float) -> tuple[int, float]:
    """Block-length schedule k_n = floor(n^(2/3)), eps_n = min(rho1, 1-rho2)/n."""
    return icbrt(n * n), min(rho1, 1.0 - rho2) / float(n) if n.bit_length() < 1000 else 0.0


def scheduled_delta_ratios(n: int, rho1: float, rho2: float, c_half: float, rate: float) -> tuple[float, float]:
    """(delta1, delta2) divided by 2 ln(n)/n^(1/3) under the k_n, eps_n schedule.

    Evaluated term by term in the log domain, so ``n`` may be an integer far
    beyond the float range.
    """
    ln_n = _ln(n)
    if n.bit_length() <= 200:
        ln_k = _ln(icbrt(n * n))
    else:
        # the floor changes ln k by less than 2^-130 relative here
        ln_k = 2.0 * ln_n / 3.0
    c = min(rho1, 1.0 - rho2)
    ls = log_asymptotic_slack(n)
    lead = math.exp(math.log(LN4) - ln_n - ls)
    spread = math.exp(math.log(8.0 * (2.0 + c_half)) - ln_k / 2.0 - ls)
    share = math.exp(ln_k - ln_n - ls)
    r1 = lead + spread / (1.0 - rho2) + share * (ln_n + math.log1p(1.0 / c))
    r2 = lead + spread / rho1 + share * ln_n
    if rate > 0:
        r2 += math.exp(math.log(2.0 * rate * c / (rho1 * rho1)) - ln_n - ls)
    return r1, r2


def scheduled_deltas(n: int, rho1: float, rho2: float, c_half: float, rate: float) -> tuple[float, float]:
    r1, r2 = scheduled_delta_ratios(n, rho1, rho2, c_half, rate)
    s = asymptotic_slack(n)
    return r1 * s, r2 * s


def _within_slack(n: int, rho1, rho2, c_half, rate) -> bool:
    return max(scheduled_delta_ratios(n, rho1, rho2, c_half, rate)) <= 1.0


def detect_n0(rho1: float, rho2: float, c_half: float, rate: float, max_bits: int = 1 << 16) -> int:
    """Smallest n past which the scheduled slack constants stay below 2 ln(n)/n^(1/3).

    A doubling scan finds the first power of two where the inequality holds
    and keeps holding for the next 24 doublings; integer bisection then
    pins the crossing.
    """
    j = 1
    while j <= max_bits:
        if _within_slack(1 << j, rho1, rho2, c_half, rate) and all(
            _within_slack(1 << (j + d), rho1, rho2, c_half, rate) for d in range(1, 25)
        ):
            break
        j += 1
    else:
        raise HypothesisError("no crossing found below 2^max_bits")
    lo, hi = 1 << (j - 1), 1 << j
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _within_slack(mid, rho1, rho2, c_half, rate):
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class AsymptoticReport:
    n: int
    rate: float
    rate0: float
    rate1: float
    slack: float
    bound: BoundResult
    window_ok: bool
    k: int
    epsilon: float
    delta1: float
    delta2: float
    deltas_within_slack: bool
    scheduled_bound: Optional[BoundResult]
    scheduled_window_ok: bool


def asymptotic_bound(
    w: DmcLike,
    rate: float,
    n: int,
    tol: float = DEFAULT_TOL,
    rate0: Optional[float] = None,
    rate1: Optional[float] = None,
) -> AsymptoticReport:
    """exp(-n [E_sp(R - s_n) + s_n]) with s_n = 2 ln(n)/n^(1/3), plus the scheduled non-asymptotic bound.

    Both exponents are evaluated over one shared order set, so whenever
    max(delta1, delta2) <= s_n the comparison between the two bounds is
    exact in floating point.
    """
    w = as_dmc(w)
    n = int(n)
    lim = channel_limits(w, tol)
    if not lim.c0 < lim.c1:
        raise HypothesisError("C_0 equals C_1")
    d0, d1_ = default_rates(lim)
    rate0 = d0 if rate0 is None else float(rate0)
    rate1 = d1_ if rate1 is None else float(rate1)
    if not lim.c0 < rate0 < rate1 < lim.c1:
        raise HypothesisError("need C_0 < rate0 < rate1 < C_1")
    slack = asymptotic_slack(n)
    rho1 = find_order_for_rate(w, rate0, tol)
    rho2 = find_order_for_spe(w, rate1, tol)
    k, eps = schedule(n, rho1, rho2)
    r1, r2 = scheduled_delta_ratios(n, rho1, rho2, lim.c_half, rate)
    d1, d2 = r1 * slack, r2 * slack
    args = [rate - slack, rate - d1]
    finite_args = [max(a, 0.0) for a in args]
    results = sphere_packing_exponents(w, finite_args, tol)
    e_asym = math.inf if args[0] < 0 else results[0].value
    e_sched = math.inf if args[1] < 0 else results[1].value
    window = rate1 > rate > rate0 + slack
    sched_window = rate1 >= rate >= rate0 + d1
    return AsymptoticReport(
        n=n,
        rate=rate,
        rate0=rate0,
        rate1=rate1,
        slack=slack,
        bound=_bound_from_exponent(n, e_asym + slack, window),
        window_ok=window,
        k=k,
        epsilon=eps,
        delta1=d1,
        delta2=d2,
        deltas_within_slack=max(r1, r2) <= 1.0,
        scheduled_bound=_bound_from_exponent(n, e_sched + d2, sched_window),
        scheduled_window_ok=sched_window,
    )


# --- CSV ---------------------------------------------------------------------

def spe_csv(w: DmcLike, rates: Iterable[float], tol: float = DEFAULT_TOL) -> str:
    rates = list(rates)
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["rate", "E_sp", "achieving_order"])
    for r in sphere_packing_exponents(w, rates, tol):
        out.writerow([fmt(r.rate_nats), fmt(r.value), "" if r.achieving_order is None else fmt(r.achieving_order)])
    return buf.getvalue()


def delta_table_csv(w: DmcLike, ns: Iterable[int], rate: float, tol: float = DEFAULT_TOL,
                    rate0: Optional[float] = None, rate1: Optional[float] = None) -> str:
    """Rows (n, k, epsilon, delta1, delta2, log_bound, bound) under the k = n^(2/3) schedule."""
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["n", "k", "epsilon", "delta1", "delta2", "log_bound", "bound"])
    for n in ns:
        rep = asymptotic_bound(w, rate, n, tol, rate0, rate1)
        b = rep.scheduled_bound
        out.writerow([n, rep.k, fmt(rep.epsilon), fmt(rep.delta1), fmt(rep.delta2), fmt(b.log_value), fmt(b.value)])
    return buf.getvalue()
