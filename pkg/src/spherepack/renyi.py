"""Rényi information, mean, capacity and center for finite channels.

The capacity solver maximises Sibson's information over the input simplex
with an active-set Newton method.  Its curvature model keeps only the
negative semidefinite part of the Hessian, which is exact at the optimum,
so the local rate is quadratic.  Far from the optimum, where the model is
too timid (tiny orders), accepted steps are extrapolated; near faces the
iterate either lands on the face or approaches it geometrically.  A damped
multiplicative reweighting serves as fallback whenever the Newton step
fails its line search.  Convergence
is certified by the minimax gap ``max_x D(W(x) || q) - I(P; W)``.
"""

from __future__ import annotations

import csv
import io
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .probability import (
    AlphabetMismatch,
    Dmc,
    DmcLike,
    Pmf,
    PmfLike,
    as_array,
    as_dmc,
    check_order,
)

DEFAULT_TOL = 1e-10
MAX_ITERATIONS = 100_000
SHRINK = 0.1  # per-step floor on the relative size of a shrinking prior entry
STALL = 200  # iterations without a 10% gap improvement before giving up


class NonConvergence(RuntimeError):
    def __init__(self, message: str, result: "CapacityResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class CapacityResult:
    order: float
    capacity_nats: float
    center: Pmf
    optimal_prior: Pmf
    iterations: int
    residual: float
    converged: bool


# --- evaluation kernel ---------------------------------------------------

class _Kernel:
    """Order-specific precomputation for one channel."""

    def __init__(self, order: float, w: np.ndarray):
        self.order = order
        self.w = w
        self.pos = w > 0
        with np.errstate(divide="ignore"):
            self.logw = np.log(w)
        # W^a - 1, exact at W = 0
        self.em = np.where(self.pos, np.expm1(order * np.where(self.pos, self.logw, 0.0)), -1.0)
        if order < 1.0:
            # per row: sum_y W^a - 1, accurate when the order is near one
            t = np.where(self.pos, w * np.expm1((order - 1.0) * np.where(self.pos, self.logw, 0.0)), 0.0)
            self.row_excess = t.sum(axis=1)

    def evaluate(self, prior: np.ndarray) -> "_State":
        a = self.order
        st = _State()
        st.prior = prior
        if a == 1.0:
            s = prior @ self.w
            st.s = s
            st.s1 = s - 1.0
            st.q = s / s.sum()
            st.log_q = np.log(st.q, where=st.q > 0, out=np.full_like(s, -np.inf))
            st.div = self._divergences(st.q, st.log_q)
            live = prior > 0
            st.info = float(np.dot(prior[live], st.div[live])) if np.all(np.isfinite(st.div[live])) else math.inf
        else:
            s1 = prior @ self.em
            s1 = np.maximum(s1, -1.0)
            st.s1 = s1
            st.s = 1.0 + s1
            with np.errstate(divide="ignore"):
                ls = np.log1p(s1)
            scaled = ls / a
            lse = float(logsumexp(scaled))
            log_z = lse
            if abs(lse) < 0.5:
                live = st.s > 0
                z1 = np.sum(st.s[live] * np.expm1(((1.0 - a) / a) * ls[live])) + float(prior @ self.row_excess)
                log_z = math.log1p(z1)
            st.log_q = scaled - lse
            st.q = np.exp(st.log_q)
            st.q = st.q / st.q.sum()
            st.info = max(a / (a - 1.0) * log_z, 0.0)
            st.div = self._divergences(st.q, st.log_q)
        st.gap = float(np.max(st.div) - st.info)
        return st

    def _divergences(self, q: np.ndarray, log_q: np.ndarray) -> np.ndarray:
        a = self.order
        qpos = q > 0
        both = self.pos & qpos[None, :]
        diff = np.where(both, self.logw - np.where(qpos, log_q, 0.0)[None, :], 0.0)
        if a == 1.0:
            out = np.where(both, self.w * diff, 0.0).sum(axis=1)
            out[np.any(self.pos & ~qpos[None, :], axis=1)] = math.inf
            return np.maximum(out, 0.0)
        if a >= 0.5:
            t = np.where(both, self.w * np.expm1((a - 1.0) * diff), 0.0).sum(axis=1)
            t -= np.where(self.pos & ~qpos[None, :], self.w, 0.0).sum(axis=1)
        else:
            t = np.where(both, q[None, :] * np.expm1(a * diff), 0.0).sum(axis=1)
            t -= np.where(~self.pos & qpos[None, :], q[None, :], 0.0).sum(axis=1)
        with np.errstate(divide="ignore"):
            out = np.log1p(np.maximum(t, -1.0)) / (a - 1.0)
        lost = t < -0.5
        if lost.any():
            # the sum sits far below one, possibly on centre entries that underflowed; log domain
            expo = np.where(self.pos[lost], a * np.where(self.pos[lost], self.logw[lost], 0.0) + (1.0 - a) * log_q[None, :], -np.inf)
            out[lost] = logsumexp(expo, axis=1) / (a - 1.0)
        return np.maximum(out, 0.0)

    def ascent_score(self, st: "_State") -> np.ndarray:
        """psi_x; the simplex gradient of the information is -psi."""
        a = self.order
        with np.errstate(invalid="ignore"):
            if a == 1.0:
                psi = st.info - st.div
            else:
                psi = np.expm1((1.0 - a) * (st.info - st.div)) / (1.0 - a)
        return np.nan_to_num(np.maximum(psi, -1e6), nan=-1e6)

    def curvature(self, st: "_State") -> tuple[np.ndarray, np.ndarray]:
        """Factor F with the Newton model Hessian equal to -F diag(c) F^T."""
        live = st.q > 0
        s = st.s[live]
        if self.order == 1.0:
            rm = (self.w[:, live] - s[None, :]) / s[None, :]
        else:
            rm = (self.em[:, live] - st.s1[live][None, :]) / s[None, :]
        return rm, st.q[live] / self.order


class _State:
    prior: np.ndarray
    s: np.ndarray
    s1: np.ndarray
    q: np.ndarray
    log_q: np.ndarray
    div: np.ndarray
    info: float
    gap: float


def _newton_direction(kernel: _Kernel, st: _State, psi: np.ndarray, face: np.ndarray) -> Optional[np.ndarray]:
    rm, c = kernel.curvature(st)
    face = face.copy()
    for _ in range(face.size + 1):
        idx = np.flatnonzero(face)
        if idx.size <= 1:
            return None
        f = rm[idx]
        h = -(f * c[None, :]) @ f.T
        k = idx.size
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = h
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs = np.concatenate([psi[idx], [0.0]])
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        v = np.zeros_like(psi)
        v[idx] = sol[:k]
        # the score's part outside the curvature's range is a direction of
        # exactly linear ascent (more inputs than outputs); ride it to the boundary
        null = (rhs - kkt @ sol)[:k]
        null -= null.mean()
        size = float(np.max(np.abs(null)))
        if size > 1e-14 and size > 1e-3 * float(np.max(np.abs(psi[idx]))):
            v[idx] -= null / size
        bad = (st.prior <= 0) & face & (v < 0)
        if not bad.any():
            return v
        face &= ~bad
    return None


def _multiplicative_step(kernel: _Kernel, st: _State) -> np.ndarray:
    p = st.prior.copy()
    div = st.div
    finite = np.isfinite(div)
    top = np.max(div[finite]) if finite.any() else 0.0
    seed = (p <= 0) & ((div > st.info) | ~finite)
    p[seed] = 1e-6
    d = np.where(finite, div, top + 1.0)
    p = p * np.exp(kernel.order * (d - top))
    return p / p.sum()


def _damped_step(kernel: _Kernel, st: _State, target: np.ndarray) -> _State:
    """Move toward ``target`` only as far as the information does not drop."""
    theta = 1.0
    for _ in range(60):
        new = kernel.evaluate((1.0 - theta) * st.prior + theta * target)
        if new.info >= st.info - 1e-15 * max(1.0, st.info):
            return new
        theta *= 0.5
    return st


def _line_search(kernel: _Kernel, st: _State, v: np.ndarray) -> Optional[_State]:
    """Backtracking along ``v``; coordinates headed for zero either land on it or shrink geometrically."""
    neg = (v < 0) & (st.prior > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(neg, -st.prior / np.where(neg, v, 1.0), np.inf)
    t_max = float(ratios.min())

    def accept(new: _State) -> bool:
        return new.info >= st.info - 1e-15 * max(1.0, st.info) or new.gap < st.gap

    if t_max <= 1.0:
        # exact landing on the face; kept only if it does not worsen the certificate,
        # since dropping an input can starve an output that it alone reaches
        cand = np.maximum(st.prior + t_max * v, 0.0)
        cand[ratios <= t_max] = 0.0
        new = kernel.evaluate(cand / cand.sum())
        if new.gap <= st.gap and accept(new):
            return new
    def at(t: float) -> _State:
        cand = np.maximum(st.prior + t * v, SHRINK * st.prior)
        return kernel.evaluate(cand / cand.sum())

    t = 1.0
    for _ in range(60):
        new = at(t)
        if accept(new):
            break
        t *= 0.5
    else:
        return None
    if t == 1.0:
        # the quadratic model can be far too timid (tiny orders); extrapolate while it pays
        # doubling pays only while gains stay comparable to the last one (near-linear regime)
        gain = new.info - st.info
        for _ in range(50):
            t *= 2.0
            nxt = at(t)
            if not nxt.info - new.info >= 0.5 * gain > 0:
                break
            gain = nxt.info - new.info
            new = nxt
    return new


def _solve_capacity(order: float, w: np.ndarray, tol: float, init: Optional[np.ndarray], max_iter: int):
    keep = w.max(axis=0) > 0
    kernel = _Kernel(order, w[:, keep])
    n_in = w.shape[0]
    prior = np.full(n_in, 1.0 / n_in) if init is None else np.asarray(init, dtype=np.float64) / np.sum(init)
    st = kernel.evaluate(prior)
    best = st
    it = mark = 0
    mark_gap = best.gap
    # at tiny orders the centre is only determined to about eps/order, which can
    # sit above tol; stop once the certificate has visibly stopped improving
    while it < max_iter and best.gap >= tol and it - mark < STALL:
        it += 1
        psi = kernel.ascent_score(st)
        face = (st.prior > 0) | (psi < 0)
        v = _newton_direction(kernel, st, psi, face)
        moved = False
        if v is not None and np.any(v != 0):
            new = _line_search(kernel, st, v)
            if new is not None:
                st, moved = new, True
        if not moved:
            st = _damped_step(kernel, st, _multiplicative_step(kernel, st))
        if st.gap < best.gap:
            best = st
        if best.gap < 0.9 * mark_gap:
            mark, mark_gap = it, best.gap
    q_full = np.zeros(w.shape[1])
    q_full[keep] = best.q
    return best, q_full, it


# --- public API ----------------------------------------------------------

def _prior_array(prior: PmfLike, w: Dmc) -> np.ndarray:
    p = as_array(prior)
    if p.shape != (w.input_size,):
        raise AlphabetMismatch(f"prior has {p.size} entries, channel has {w.input_size} inputs")
    return p


def renyi_information(order: float, prior: PmfLike, w: DmcLike) -> float:
    """Sibson's order-``order`` information I(P; W) in nats."""
    order = check_order(order)
    w = as_dmc(w)
    p = _prior_array(prior, w)
    return _Kernel(order, w.matrix).evaluate(p).info


def renyi_mean(order: float, prior: PmfLike, w: DmcLike) -> Pmf:
    """Output pmf proportional to (sum_x P(x) W(y|x)^order)^(1/order)."""
    order = check_order(order)
    w = as_dmc(w)
    p = _prior_array(prior, w)
    return Pmf(_Kernel(order, w.matrix).evaluate(p).q, renormalize=True)


def gallager_e0(s: float, prior: PmfLike, w: DmcLike) -> float:
    """Gallager's E0(s, P) = s * I_{1/(1+s)}(P; W); order and s are linked by order = 1/(1+s)."""
    if not s > 0:
        raise ValueError(f"s must be positive, got {s!r}")
    return s * renyi_information(1.0 / (1.0 + s), prior, w)


def divergence_profile(order: float, w: DmcLike, q: PmfLike) -> np.ndarray:
    """Vector of D_order(W(x) || q) over inputs x."""
    order = check_order(order)
    w = as_dmc(w)
    q = as_array(q)
    if q.shape != (w.output_size,):
        raise AlphabetMismatch("center and channel outputs differ in size")
    with np.errstate(divide="ignore"):
        lq = np.log(q)
    return _Kernel(order, w.matrix)._divergences(q, lq)


_cache: dict = {}
_cache_lock = threading.Lock()


def clear_capacity_cache() -> None:
    with _cache_lock:
        _cache.clear()


def renyi_capacity(
    order: float,
    w: DmcLike,
    tol: float = DEFAULT_TOL,
    initial_prior: Optional[PmfLike] = None,
    max_iter: int = MAX_ITERATIONS,
    strict: bool = False,
) -> CapacityResult:
    """Order-``order`` Rényi capacity, center and a maximising prior.

    Results from the default starting point are memoised per
    (channel digest, order, tol).  With ``strict`` a run that hits the
    iteration cap or stagnates raises ``NonConvergence`` carrying the best iterate.
    """
    order = check_order(order)
    if not tol > 0:
        raise ValueError("tol must be positive")
    w = as_dmc(w)
    key = (w.digest(), order, tol, max_iter)
    cached = _cache.get(key) if initial_prior is None else None
    if cached is None:
        init = None if initial_prior is None else _prior_array(initial_prior, w)
        st, q, it = _solve_capacity(order, w.matrix, tol, init, max_iter)
        cached = CapacityResult(
            order=order,
            capacity_nats=st.info,
            center=Pmf(q, renormalize=True),
            optimal_prior=Pmf(st.prior, renormalize=True),
            iterations=it,
            residual=st.gap,
            converged=bool(st.gap < tol),
        )
        if initial_prior is None:
            with _cache_lock:
                cached = _cache.setdefault(key, cached)
    if strict and not cached.converged:
        raise NonConvergence(f"capacity solver stopped with gap {cached.residual:.3g}", cached)
    return cached


def capacity_value(order: float, w: DmcLike, tol: float = DEFAULT_TOL) -> float:
    return renyi_capacity(order, w, tol).capacity_nats


def capacity_order_zero(w: DmcLike, tol: float = 1e-9, max_halvings: int = 40) -> float:
    """Limit of C_order as the order decreases to zero.

    Capacities are evaluated at orders 2^-j and combined pairwise by
    Richardson extrapolation against a linear leading term.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    w = as_dmc(w)
    inner = min(DEFAULT_TOL, tol / 10)
    prev_c = capacity_value(0.5, w, inner)
    prev_est = None
    est = prev_c
    for j in range(2, max_halvings + 1):
        c = capacity_value(2.0 ** -j, w, inner)
        est = 2.0 * c - prev_c
        if prev_est is not None and abs(est - prev_est) < tol:
            return float(min(max(est, 0.0), c))
        prev_est, prev_c = est, c
    return float(min(max(est, 0.0), prev_c))


def center_curve(w: DmcLike, orders: Sequence[float], tol: float = DEFAULT_TOL, jobs: int = 1) -> list[tuple[float, Pmf]]:
    orders = [check_order(a) for a in orders]
    if any(b < a for a, b in zip(orders, orders[1:])):
        raise ValueError("orders must be sorted ascending")
    w = as_dmc(w)

    def one(a):
        return a, renyi_capacity(a, w, tol).center

    if jobs > 1 and len(orders) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, orders))
    return [one(a) for a in orders]


def capacity_csv(w: DmcLike, orders: Sequence[float], tol: float = DEFAULT_TOL, jobs: int = 1) -> str:
    """CSV rows ``order,capacity_nats,q0,q1,...``."""
    w = as_dmc(w)
    curve = center_curve(w, orders, tol, jobs)
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["order", "capacity_nats"] + [f"q{y}" for y in range(w.output_size)])
    for a, q in curve:
        c = renyi_capacity(a, w, tol).capacity_nats
        out.writerow([fmt(a), fmt(c)] + [fmt(v) for v in q.probs])
    return buf.getvalue()


def fmt(x: float) -> str:
    """Twelve significant digits, locale independent."""
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return "%.12g" % x


def bsc_capacity(order: float, p: float) -> float:
    """Closed form for the binary symmetric channel."""
    if order == 1.0:
        h = -sum(t * math.log(t) for t in (p, 1.0 - p) if t > 0)
        return math.log(2.0) - h
    # p^a + (1-p)^a - 1 without cancellation near order one
    excess = math.fsum(t * math.expm1((order - 1.0) * math.log(t)) for t in (p, 1.0 - p) if t > 0)
    return math.log(2.0) - math.log1p(excess) / (1.0 - order)
