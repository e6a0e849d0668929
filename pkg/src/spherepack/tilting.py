"""Tilted pmfs and selftilted channels."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .probability import Dmc, DmcLike, Pmf, PmfLike, _pair, as_dmc, check_order, kl_divergence, renyi_divergence
from .renyi import DEFAULT_TOL, renyi_capacity


class InfiniteDivergence(ValueError):
    pass


@dataclass(frozen=True)
class TiltedPmf:
    base_w: Pmf
    base_q: Pmf
    order: float
    tilted: Pmf
    divergence_at_order: float


@dataclass(frozen=True)
class MomentCheck:
    lhs_w: float
    rhs_w: float
    lhs_q: float
    rhs_q: float

    @property
    def holds(self) -> bool:
        return self.lhs_w <= self.rhs_w and self.lhs_q <= self.rhs_q


def _tilted_array(order: float, w: np.ndarray, q: np.ndarray, div: float) -> np.ndarray:
    if order == 1.0:
        return w.copy()
    live = (w > 0) & (q > 0)
    out = np.zeros_like(w)
    out[live] = np.exp(order * np.log(w[live]) + (1.0 - order) * (np.log(q[live]) + div))
    return out / out.sum()


def tilt_pmf(order: float, w: PmfLike, q: PmfLike) -> TiltedPmf:
    """Normalised geometric mix w^order q^(1-order)."""
    order = check_order(order)
    wa, qa = _pair(w, q)
    div = renyi_divergence(order, wa, qa)
    if math.isinf(div):
        raise InfiniteDivergence(f"D_{order}(w||q) is infinite; tilt undefined")
    t = _tilted_array(order, wa, qa, div)
    return TiltedPmf(Pmf(wa, renormalize=True), Pmf(qa, renormalize=True), order, Pmf(t, renormalize=True), div)


_centers: dict = {}
_centers_lock = threading.Lock()


def channel_center(order: float, w: DmcLike, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Order-``order`` Rényi center, cached by channel digest and rounded order."""
    w = as_dmc(w)
    key = (w.digest(), round(float(order), 12), tol)
    hit = _centers.get(key)
    if hit is None:
        hit = renyi_capacity(order, w, tol).center.probs
        with _centers_lock:
            hit = _centers.setdefault(key, hit)
    return hit


def selftilt_matrix(order: float, w: DmcLike, tol: float = DEFAULT_TOL) -> np.ndarray:
    order = check_order(order)
    w = as_dmc(w)
    if order == 1.0:
        return w.matrix.copy()
    q = channel_center(order, w, tol)
    rows = []
    for row in w.matrix:
        rows.append(_tilted_array(order, row, q, renyi_divergence(order, row, q)))
    return np.vstack(rows)


def selftilt_channel(order: float, w: DmcLike, tol: float = DEFAULT_TOL) -> Dmc:
    """Each row tilted toward the channel's order-``order`` center."""
    return Dmc(selftilt_matrix(order, w, tol), renormalize=True)


def tilted_kld_residual(order: float, w: PmfLike, q: PmfLike) -> float:
    t = tilt_pmf(order, w, q)
    a = t.order
    if a == 1.0:
        return 0.0
    tp = t.tilted.probs
    return (
        a * kl_divergence(tp, t.base_w.probs)
        + (1.0 - a) * kl_divergence(tp, t.base_q.probs)
        - (1.0 - a) * t.divergence_at_order
    )


def _second_moment(t: np.ndarray, ref: np.ndarray) -> float:
    live = t > 0
    lr = np.log(t[live]) - np.log(ref[live])
    return math.fsum(t[live] * lr * lr)


def second_moment_check(order: float, w: PmfLike, q: PmfLike) -> MomentCheck:
    """Second moments of the tilted log-ratios against w and against q, with their ceilings."""
    t = tilt_pmf(order, w, q)
    a, d = t.order, t.divergence_at_order
    tp = t.tilted.probs
    floor = 4.0 * math.exp(-2.0)
    rhs_w = floor + ((1.0 - a) / a) ** 2 * (4.0 + d * d)
    rhs_q = math.inf if a == 1.0 else floor + 4.0 * a * a / (1.0 - a) ** 2 + d * d
    return MomentCheck(_second_moment(tp, t.base_w.probs), rhs_w, _second_moment(tp, t.base_q.probs), rhs_q)
