"""Exact, finite version of the auxiliary-measure argument behind the sphere-packing bound.

The block of length n is split into k subblocks.  Before each subblock an
auxiliary order Z_i is drawn uniformly from an interval of width epsilon whose
position is set by a function g_i of the message and the outputs so far.  Four
measures share that Z law and differ only in how outputs are generated:

* P    true channel W driven by the feedback encoder,
* P_V  selftilted channel W_z driven by the same encoder,
* P_Q  i.i.d. order-z Rényi center,
* P_U  like P_Q but with a wider, history-independent Z interval.

Z is discretised on a fixed lattice of cells of width epsilon/m.  Every Z
interval used by P, P_V, P_Q or P_U is a union of whole and partial cells and a
cell carries mass |cell ∩ interval| / |interval|, so all density ratios between
the measures stay exact.  The sample space is finite and every measure is an
explicit probability vector over it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exponents import LN4, SpbParameters, spb_constants, spe_value
from .feedback import (
    DEFAULT_BUDGET,
    Decoder,
    FeedbackEncoder,
    evaluate_code,
    history_offsets,
    map_decoder,
    optimal_feedback_code,
    output_laws,
)
from .probability import Dmc, DmcLike, as_dmc, kl_divergence
from .renyi import DEFAULT_TOL, capacity_value, fmt
from .tilting import channel_center, selftilt_matrix

SPACE_CAP = 1 << 24
BISECTION_TOL = 1e-9
BISECTION_MAX_ITER = 200
REL_SLACK = 1e-12


class ConstructionError(RuntimeError):
    pass


class BracketError(ConstructionError):
    """The conditional mean at the lowest anchor already exceeds its target."""


def _leq(lhs: float, rhs: float) -> bool:
    if math.isinf(rhs) and rhs > 0:
        return True
    return lhs <= rhs + REL_SLACK * max(1.0, abs(rhs))


# --- subblocks ---------------------------------------------------------------

@dataclass(frozen=True)
class SubblockPlan:
    n: int
    k: int
    lengths: tuple
    ends: tuple  # t_0 .. t_k
    starts: tuple  # tau_1 .. tau_k (1-based)


def make_subblocks(n: int, k: int) -> SubblockPlan:
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    lo, extra = divmod(n, k)
    lengths = tuple(lo + 1 if i < extra else lo for i in range(k))
    ends = [0]
    for ell in lengths:
        ends.append(ends[-1] + ell)
    return SubblockPlan(n, k, lengths, tuple(ends), tuple(t + 1 for t in ends[:-1]))


# --- Z lattice ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ZLattice:
    """Cells of width epsilon/m on (0, 1), aligned with rho1 - epsilon.

    Positions are kept in lattice units u, with order z = origin + u * spacing.
    Anchor intervals of P, P_V and P_Q are [u, u + m] with u in [0, top].
    """

    origin: float
    spacing: float
    atoms: int
    top: float
    bounds: np.ndarray

    @classmethod
    def build(cls, rho1: float, rho2: float, epsilon: float, atoms: int) -> "ZLattice":
        if atoms < 1:
            raise ValueError("atom count must be positive")
        origin = rho1 - epsilon
        spacing = epsilon / atoms
        top = (rho2 - origin) / spacing
        left, right = -origin / spacing, (1.0 - origin) / spacing
        inner = np.arange(math.floor(left) + 1, math.ceil(right), dtype=float)
        pts = np.unique(np.concatenate([[left, right, top + atoms], inner]))
        keep = np.concatenate([[True], np.diff(pts) > 1e-9])
        return cls(origin, spacing, atoms, top, pts[keep])

    @property
    def cell_count(self) -> int:
        return len(self.bounds) - 1

    def order(self, cell: int) -> float:
        return self.origin + self.spacing * 0.5 * (self.bounds[cell] + self.bounds[cell + 1])

    def orders(self) -> np.ndarray:
        return self.origin + self.spacing * 0.5 * (self.bounds[:-1] + self.bounds[1:])

    def anchor_offset(self, g: float, epsilon: float) -> float:
        return float(np.clip(((1.0 - epsilon) * g - self.origin) / self.spacing, 0.0, self.top))

    def anchor(self, u: float, epsilon: float) -> float:
        return (self.origin + u * self.spacing) / (1.0 - epsilon)

    def spread(self, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
        """Cells meeting [a, b] and their share |cell ∩ [a, b]| / (b - a)."""
        first = max(int(np.searchsorted(self.bounds, a, "right")) - 1, 0)
        last = min(int(np.searchsorted(self.bounds, b, "left")), self.cell_count)
        cells = np.arange(first, last)
        lo = np.maximum(self.bounds[cells], a)
        hi = np.minimum(self.bounds[cells + 1], b)
        share = (hi - lo) / (b - a)
        keep = share > 0
        return cells[keep], share[keep]

    def masses(self, u: float) -> tuple[np.ndarray, np.ndarray]:
        return self.spread(u, u + self.atoms)


# --- per-order channel data ----------------------------------------------------

@dataclass(frozen=True)
class _OrderData:
    tilted: np.ndarray
    center: np.ndarray
    info: np.ndarray  # D_1(W_z(x) || q_z) per input
    capacity: float


class ConstructionContext:
    """Channel, code, subblocks and lattice, with caches for per-order data and h."""

    def __init__(self, w: Dmc, enc: FeedbackEncoder, plan: SubblockPlan, lattice: ZLattice, tol: float):
        self.w = w
        self.enc = enc
        self.plan = plan
        self.lattice = lattice
        self.tol = tol
        self.offsets = history_offsets(enc.n, w.output_size)
        self._orders: dict = {}
        self._blocks: dict = {}

    def order_data(self, z: float) -> _OrderData:
        hit = self._orders.get(z)
        if hit is None:
            wz = selftilt_matrix(z, self.w, self.tol)
            q = channel_center(z, self.w, self.tol)
            info = np.array([kl_divergence(row, q) for row in wz])
            hit = _OrderData(wz, q, info, capacity_value(z, self.w, self.tol))
            self._orders[z] = hit
        return hit

    def cell_data(self, cell: int) -> _OrderData:
        return self.order_data(self.lattice.order(cell))

    def block(self, i: int, message: int, hist: int, z: float):
        """Laws of subblock i's outputs given (message, history rank) and order z.

        Returns (p_w, p_v, p_q, log Q_i, log V_i, h) with vectors indexed by the
        little-endian rank of the subblock's outputs.
        """
        key = (i, message, hist, z)
        hit = self._blocks.get(key)
        if hit is not None:
            return hit
        od = self.order_data(z)
        w = self.w.matrix
        ny = self.w.output_size
        t0 = self.plan.ends[i]
        scale = ny ** t0
        pw = np.ones(1)
        pv = np.ones(1)
        pq = np.ones(1)
        lq = np.zeros(1)
        lv = np.zeros(1)
        h = 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            log_q = np.log(od.center)
            log_wz = np.log(od.tilted)
            log_w = np.log(w)
        for s in range(self.plan.lengths[i]):
            ranks = np.arange(ny ** s)
            xs = self.enc.table[message, self.offsets[t0 + s] + hist + ranks * scale]
            h += math.fsum(pv * od.info[xs])
            # new rank = old rank + y * |Y|^s, i.e. y-major order
            pw = (pw[:, None] * w[xs]).T.ravel()
            pv = (pv[:, None] * od.tilted[xs]).T.ravel()
            pq = (pq[:, None] * od.center[None, :]).T.ravel()
            with np.errstate(invalid="ignore"):
                lq = (lq[:, None] + (log_wz[xs] - log_q[None, :])).T.ravel()
                lv = (lv[:, None] + (log_wz[xs] - log_w[xs])).T.ravel()
        hit = (pw, pv, pq, lq, lv, h)
        self._blocks[key] = hit
        return hit


def h_statistic(ctx: ConstructionContext, i: int, message: int, history: int, z: float) -> float:
    """Summed expected D_1(W_z(X_t) || q_z) over subblock ``i`` (0-based) under W_z."""
    return ctx.block(i, message, history, z)[5]


def conditional_mean_h(ctx: ConstructionContext, i: int, message: int, history: int, u: float) -> float:
    cells, share = ctx.lattice.masses(u)
    return math.fsum(s * h_statistic(ctx, i, message, history, ctx.lattice.order(c)) for c, s in zip(cells, share))


# --- g functions ---------------------------------------------------------------

@dataclass(frozen=True)
class GValue:
    g: float
    offset: float  # lattice position of the Z interval
    mean: float  # E_V[h_i | message, history]
    target: float  # ell_i (R - delta1)
    mode: str  # "top", "bisected" or "clamped-lower"


def _choose_one(ctx: ConstructionContext, i: int, message: int, hist: int, target: float, eps: float, strict: bool) -> GValue:
    lat = ctx.lattice

    def f(u):
        return conditional_mean_h(ctx, i, message, hist, u)

    f_top = f(lat.top)
    if f_top <= target:
        return GValue(lat.anchor(lat.top, eps), lat.top, f_top, target, "top")
    f_low = f(0.0)
    if f_low > target:
        if strict:
            raise BracketError(
                f"subblock {i + 1}, message {message}, history {hist}: mean {f_low!r} at the lowest anchor "
                f"exceeds target {target!r}"
            )
        return GValue(lat.anchor(0.0, eps), 0.0, f_low, target, "clamped-lower")
    lo, hi, f_lo = 0.0, lat.top, f_low
    for _ in range(BISECTION_MAX_ITER):
        if target - f_lo < BISECTION_TOL:
            break
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if f_mid > target:
            hi = mid
        else:
            lo, f_lo = mid, f_mid
    return GValue(lat.anchor(lo, eps), lo, f_lo, target, "bisected")


def _node_keys(ctx: ConstructionContext, i: int) -> list:
    ny = ctx.w.output_size
    return [(m, h) for m in range(ctx.enc.message_count) for h in range(ny ** ctx.plan.ends[i])]


def choose_g_functions(ctx: ConstructionContext, rate: float, delta1: float, epsilon: float, strict: bool = True) -> dict:
    """g_i for every (subblock, message, history rank); keys are (i, message, history)."""
    out = {}
    for i in range(ctx.plan.k):
        target = ctx.plan.lengths[i] * (rate - delta1)
        for m, h in _node_keys(ctx, i):
            out[(i, m, h)] = _choose_one(ctx, i, m, h, target, epsilon, strict)
    return out


# --- measures ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Level:
    """Prefixes of the sample space after i subblocks (level 0: the message alone)."""

    parent: np.ndarray
    message: np.ndarray
    history: np.ndarray
    cell: np.ndarray
    g: np.ndarray
    zmass: np.ndarray
    p: np.ndarray
    pv: np.ndarray
    pq: np.ndarray
    zprod: np.ndarray  # product of Z masses so far
    qprod: np.ndarray  # product of center-law block masses so far
    q_step: np.ndarray  # Q_i
    v_step: np.ndarray  # V_i
    h: np.ndarray
    q_total: np.ndarray
    v_total: np.ndarray


@dataclass(frozen=True, eq=False)
class ConstructionModel:
    w: Dmc
    encoder: FeedbackEncoder
    decoder: Decoder
    plan: SubblockPlan
    params: SpbParameters
    lattice: ZLattice
    g: dict
    levels: tuple
    context: ConstructionContext = field(repr=False)

    @property
    def points(self) -> Level:
        return self.levels[-1]

    @property
    def size(self) -> int:
        return len(self.points.p)

    def ancestors(self, i: int) -> np.ndarray:
        """Index into level ``i`` of every final point's prefix."""
        idx = np.arange(self.size)
        for lev in range(len(self.levels) - 1, i, -1):
            idx = self.levels[lev].parent[idx]
        return idx

    def g_vectors(self) -> np.ndarray:
        return np.stack([self.levels[i + 1].g[self.ancestors(i + 1)] for i in range(self.plan.k)], axis=1)

    def decoded(self) -> np.ndarray:
        return self.decoder.messages[self.points.history]


def space_size(message_count: int, atoms: int, output_size: int, plan: SubblockPlan) -> int:
    """Upper bound on the number of points with positive mass (m + 1 cells meet any interval)."""
    total = message_count
    for ell in plan.lengths:
        total *= (atoms + 1) * output_size ** ell
    return total


def build_measures(ctx: ConstructionContext, g: dict, params: SpbParameters, decoder: Decoder) -> ConstructionModel:
    """Enumerate the sample space and the exact masses of P, P_V and P_Q."""
    size = space_size(ctx.enc.message_count, ctx.lattice.atoms, ctx.w.output_size, ctx.plan)
    if size > SPACE_CAP:
        raise ConstructionError(f"extended sample space bound {size} exceeds cap {SPACE_CAP}")
    mcount = ctx.enc.message_count
    ny = ctx.w.output_size
    zero_f = np.zeros(mcount)
    uniform = np.full(mcount, 1.0 / mcount)
    levels = [
        Level(
            np.full(mcount, -1), np.arange(mcount), np.zeros(mcount, dtype=np.int64), np.full(mcount, -1),
            np.full(mcount, np.nan), np.ones(mcount), uniform, uniform.copy(), uniform.copy(),
            np.ones(mcount), np.ones(mcount), zero_f, zero_f, zero_f, zero_f, zero_f,
        )
    ]
    for i in range(ctx.plan.k):
        prev = levels[-1]
        scale = ny ** ctx.plan.ends[i]
        parts: dict = {name: [] for name in Level.__dataclass_fields__}
        for j in range(len(prev.p)):
            m, hist = int(prev.message[j]), int(prev.history[j])
            gv = g[(i, m, hist)]
            cells, share = ctx.lattice.masses(gv.offset)
            for c, mass in zip(cells, share):
                pw, pv, pq, lq, lv, h = ctx.block(i, m, hist, ctx.lattice.order(c))
                cnt = len(pw)
                parts["parent"].append(np.full(cnt, j))
                parts["message"].append(np.full(cnt, m))
                parts["history"].append(hist + np.arange(cnt, dtype=np.int64) * scale)
                parts["cell"].append(np.full(cnt, c))
                parts["g"].append(np.full(cnt, gv.g))
                parts["zmass"].append(np.full(cnt, mass))
                parts["p"].append(prev.p[j] * mass * pw)
                parts["pv"].append(prev.pv[j] * mass * pv)
                parts["pq"].append(prev.pq[j] * mass * pq)
                parts["zprod"].append(np.full(cnt, prev.zprod[j] * mass))
                parts["qprod"].append(prev.qprod[j] * pq)
                parts["q_step"].append(lq)
                parts["v_step"].append(lv)
                parts["h"].append(np.full(cnt, h))
                parts["q_total"].append(prev.q_total[j] + lq)
                parts["v_total"].append(prev.v_total[j] + lv)
        levels.append(Level(**{k: np.concatenate(v) for k, v in parts.items()}))
    return ConstructionModel(ctx.w, ctx.enc, decoder, ctx.plan, params, ctx.lattice, g, tuple(levels), ctx)


def log_ratio_Q(model: ConstructionModel, point: int) -> float:
    """ln dP_V/dP_Q at a sample point."""
    return float(model.points.q_total[point])


def log_ratio_V(model: ConstructionModel, point: int) -> float:
    """ln dP_V/dP at a sample point."""
    return float(model.points.v_total[point])


# --- events ------------------------------------------------------------------

@dataclass(frozen=True)
class EventReport:
    threshold_q: float
    threshold_v: float
    exponent: float  # E_sp(R - delta1)
    prob_q: float
    prob_v: float
    prob_joint: float
    in_q: np.ndarray = field(repr=False)
    in_v: np.ndarray = field(repr=False)


def event_thresholds(params: SpbParameters, w: DmcLike, tol: float = DEFAULT_TOL) -> tuple[float, float, float]:
    n, k = params.n, params.k
    lam_q = n * params.rate - LN4 - k * math.log(n + 1.0 / params.epsilon)
    e = spe_value(w, params.rate - params.delta1, tol)
    lam_v = n * (e + params.delta2) - math.log(4.0) - k * math.log(n)
    return lam_q, lam_v, e


def chebyshev_events(model: ConstructionModel) -> EventReport:
    """Exact P_V masses of {Q <= lambda_Q}, {V <= lambda_V} and their intersection."""
    lam_q, lam_v, e = event_thresholds(model.params, model.w, model.context.tol)
    pts = model.points
    in_q = pts.q_total <= lam_q
    in_v = np.where(np.isnan(pts.v_total), False, pts.v_total <= lam_v)
    pv = pts.pv
    return EventReport(
        lam_q, lam_v, e,
        math.fsum(pv[in_q]), math.fsum(pv[in_v]), math.fsum(pv[in_q & in_v]),
        in_q, in_v,
    )


def measure_change_check(model: ConstructionModel, event: np.ndarray, lam: float, which: str) -> tuple[float, float]:
    """(lhs, rhs) of P_Q(B, Q <= lam) >= e^-lam P_V(B, Q <= lam), or P with V for ``which='V'``."""
    pts = model.points
    if which == "Q":
        ratio, base = pts.q_total, pts.pq
    elif which == "V":
        ratio, base = pts.v_total, pts.p
    else:
        raise ValueError("which must be 'Q' or 'V'")
    sel = np.asarray(event, dtype=bool) & np.where(np.isnan(ratio), False, ratio <= lam)
    lhs = math.fsum(base[sel])
    mass = math.fsum(pts.pv[sel])
    if lam == math.inf or mass == 0.0:
        return lhs, 0.0
    return lhs, math.exp(min(-lam, 700.0)) * mass


# --- pigeonhole ---------------------------------------------------------------

@dataclass(frozen=True)
class Pigeonhole:
    cube: tuple  # 1-based interval index per subblock
    mass: float  # P_V(A_Q, A_V, A_cube)
    corners: tuple  # rho-bar per subblock
    widened: float  # epsilon-tilde
    in_cube: np.ndarray = field(repr=False)
    pu: np.ndarray = field(repr=False)  # P_U at every enumerated point
    domination_excess: float = 0.0  # max over cube points of P_Q - (eps~/eps)^k P_U
    output_law_spread: float = 0.0  # max over messages of |P_U(y|m) - P_U(y|0)|
    correct_decoding: float = 0.0  # P_U(M = decoded)


def _cube_indices(g: np.ndarray, n: int) -> np.ndarray:
    return np.clip(np.ceil(g * n).astype(np.int64), 1, n)


def widened_interval(lattice: ZLattice, corner: float, widened: float) -> tuple[float, float]:
    a = ((1.0 - widened) * corner - lattice.origin) / lattice.spacing
    return a, a + widened / lattice.spacing


def pigeonhole(model: ConstructionModel, events: EventReport) -> Pigeonhole:
    n, k = model.plan.n, model.plan.k
    eps = model.params.epsilon
    cubes = _cube_indices(model.g_vectors(), n)
    good = events.in_q & events.in_v
    keys, inverse = np.unique(cubes, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    mass = np.bincount(inverse, weights=np.where(good, model.points.pv, 0.0), minlength=len(keys))
    best = int(np.argmax(mass))  # unique() sorts rows, so ties go to the smallest cube
    cube = tuple(int(c) for c in keys[best])
    in_cube = inverse == best
    widened = eps + (1.0 - eps) / n
    corners = tuple(0.0 if n == 1 else (c - 1) / (n - 1) for c in cube)
    lat = model.lattice
    umass = []
    for i in range(k):
        a, b = widened_interval(lat, corners[i], widened)
        cells, share = lat.spread(a, b)
        row = np.zeros(lat.cell_count)
        row[cells] = share
        umass.append(row)
    pts = model.points
    uprod = np.ones(model.size)
    for i in range(k):
        uprod *= umass[i][model.levels[i + 1].cell[model.ancestors(i + 1)]]
    pu = uprod * pts.qprod / model.encoder.message_count
    factor = (widened / eps) ** k
    excess = float(np.max(pts.pq[in_cube] - factor * pu[in_cube])) if in_cube.any() else 0.0
    spread, correct = _pu_output_law(model, umass)
    return Pigeonhole(cube, float(mass[best]), corners, widened, in_cube, pu, excess, spread, correct)


def _pu_output_law(model: ConstructionModel, umass: list) -> tuple[float, float]:
    """Per-message output law under P_U and the probability of correct decoding."""
    ctx = model.context
    ny = model.w.output_size
    laws = []
    for m in range(model.encoder.message_count):
        law = np.ones(1)
        for i in range(model.plan.k):
            ell = model.plan.lengths[i]
            block = np.zeros(ny ** ell)
            for c in np.flatnonzero(umass[i]):
                q = ctx.cell_data(int(c)).center
                prod = np.ones(1)
                for _ in range(ell):
                    prod = (prod[:, None] * q[None, :]).T.ravel()
                block += umass[i][c] * prod
            law = np.kron(block, law)
        laws.append(law)
    laws = np.array(laws)
    spread = float(np.max(np.abs(laws - laws[0])))
    dec = model.decoder.messages
    mcount = model.encoder.message_count
    correct = math.fsum(laws[m][dec == m].sum() for m in range(mcount)) / mcount
    return spread, correct


# --- report ---------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    lhs: float
    rhs: float
    status: str  # pass, fail, vacuous, hypothesis-failed
    detail: str = ""


def _check(name: str, lhs: float, rhs: float, ok: bool, detail: str = "") -> Check:
    return Check(name, float(lhs), float(rhs), "pass" if ok else "fail", detail)


@dataclass(frozen=True)
class ConstructionReport:
    instance: dict
    hypotheses: dict
    checks: tuple
    error_probability: float
    bound: float

    @property
    def all_pass(self) -> bool:
        return all(c.status == "pass" for c in self.checks)

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_json(self) -> str:
        def num(x):
            if isinstance(x, bool):
                return x
            if isinstance(x, (int, np.integer)):
                return int(x)
            if isinstance(x, float):
                return fmt(x) if not math.isfinite(x) else float(fmt(x))
            return x

        doc = {
            "instance": {k: num(v) for k, v in self.instance.items()},
            "hypotheses": {k: bool(v) for k, v in self.hypotheses.items()},
            "checks": [
                {"id": c.name, "lhs": num(c.lhs), "rhs": num(c.rhs), "status": c.status, "detail": c.detail}
                for c in self.checks
            ],
            "error_probability": num(self.error_probability),
            "bound": num(self.bound),
            "all_pass": self.all_pass,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _worst(values: np.ndarray, bounds) -> tuple[float, float]:
    """Entry with the largest excess over its bound: (value, bound)."""
    values = np.asarray(values, dtype=float)
    bounds = np.broadcast_to(np.asarray(bounds, dtype=float), values.shape)
    if values.size == 0:
        return 0.0, 0.0
    with np.errstate(invalid="ignore"):
        gap = np.where(np.isinf(bounds) & (bounds > 0), -np.inf, values - bounds)
    j = int(np.argmax(gap))
    return float(values[j]), float(bounds[j])


def _group_mean(keys: np.ndarray, weights: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted conditional means of ``values`` per distinct key, over keys with positive weight."""
    uniq, inv = np.unique(keys, return_inverse=True)
    inv = inv.reshape(-1)
    safe = np.where(weights > 0, values, 0.0)
    tot = np.bincount(inv, weights=weights, minlength=len(uniq))
    num = np.bincount(inv, weights=weights * safe, minlength=len(uniq))
    live = tot > 0
    return num[live] / tot[live], uniq[live]


def full_chain_verify(model: ConstructionModel, bound_value: Optional[float] = None) -> ConstructionReport:
    """Check every link of the argument numerically on the finite model."""
    ctx = model.context
    params = model.params
    plan = model.plan
    n, k, eps = plan.n, plan.k, params.epsilon
    rate, d1, d2 = params.rate, params.delta1, params.delta2
    lat = model.lattice
    pts = model.points
    checks: list = []

    # g, Z and h ranges
    gs = np.array([v.g for v in model.g.values()])
    g_lo, g_hi = (params.rho1 - eps) / (1.0 - eps), params.rho2 / (1.0 - eps)
    checks.append(_check(
        "g-range", float(gs.min()), g_lo, bool(np.all(gs >= g_lo * (1 - REL_SLACK)) and np.all(gs <= g_hi * (1 + REL_SLACK))),
        f"g in [{fmt(gs.min())}, {fmt(gs.max())}], allowed [{fmt(g_lo)}, {fmt(g_hi)}]",
    ))
    used = np.unique(np.concatenate([lev.cell for lev in model.levels[1:]]))
    zs = lat.orders()[used]
    z_lo, z_hi = params.rho1 - eps, params.rho2 + eps
    checks.append(_check(
        "z-range", float(zs.min()), z_lo, bool(zs.min() >= z_lo - REL_SLACK and zs.max() <= z_hi + REL_SLACK),
        f"z in [{fmt(zs.min())}, {fmt(zs.max())}], allowed [{fmt(z_lo)}, {fmt(z_hi)}]",
    ))
    h_vals, h_caps = [], []
    for lev_i in range(k):
        lev = model.levels[lev_i + 1]
        caps = np.array([plan.lengths[lev_i] * ctx.cell_data(int(c)).capacity for c in lev.cell])
        h_vals.append(lev.h)
        h_caps.append(caps)
    h_vals, h_caps = np.concatenate(h_vals), np.concatenate(h_caps)
    hv, hc = _worst(h_vals, h_caps)
    checks.append(_check("h-range", hv, hc, bool(h_vals.min() >= -REL_SLACK) and _leq(hv, hc),
                         "0 <= h_i <= ell_i C_z(W)"))

    # conditional mean of h against its target
    means = np.array([v.mean for v in model.g.values()])
    targets = np.array([v.target for v in model.g.values()])
    mv, mt = _worst(means, targets + BISECTION_TOL)
    modes = sorted({v.mode for v in model.g.values()})
    checks.append(_check(
        "conditional-mean-cap", mv, mt, bool(means.min() >= -REL_SLACK) and mv <= mt,
        f"0 <= E_V[h_i | past] <= ell_i (R - delta1) + {BISECTION_TOL:g}; anchor modes: {', '.join(modes)}",
    ))
    bis = [abs(v.mean - v.target) for v in model.g.values() if v.mode == "bisected"]
    if bis:
        checks.append(_check("h-bisection", max(bis), BISECTION_TOL, max(bis) < BISECTION_TOL, f"{len(bis)} bisected anchors"))
    else:
        checks.append(Check("h-bisection", 0.0, BISECTION_TOL, "vacuous", "no anchor needed bisection"))

    # moments of Q_i and V_i
    q2_cap = 16.0 * (4.0 + params.c_half ** 2) / (1.0 - params.rho2) ** 2 * (n / k) ** 2
    v2_cap = 16.0 * (2.0 + params.c_half) ** 2 / params.rho1 ** 2 * (n / k) ** 2
    e_low = spe_value(model.w, rate - d1, ctx.tol)
    id_err, q_mean_ok, q_mean_worst = 0.0, True, (0.0, 0.0)
    q2_worst, v_mean_worst, v2_worst = (0.0, q2_cap), (0.0, 0.0), (0.0, v2_cap)
    v_mean_ok, v2_ok, q2_ok = True, True, True
    for i in range(k):
        lev = model.levels[i + 1]
        ell = plan.lengths[i]
        pv = lev.pv
        q_fin = np.where(pv > 0, lev.q_step, 0.0)
        v_fin = np.where(pv > 0, lev.v_step, 0.0)
        # E_V[Q_i | F_{i-1}, Z_i] = h_i
        keys = lev.parent.astype(np.int64) * lat.cell_count + lev.cell
        cm, _ = _group_mean(keys, pv, q_fin)
        hm, _ = _group_mean(keys, pv, lev.h)
        id_err = max(id_err, float(np.max(np.abs(cm - hm))))
        qm, _ = _group_mean(lev.parent, pv, q_fin)
        tgt = ell * (rate - d1)
        a, b = _worst(qm, tgt + BISECTION_TOL)
        if a - b > q_mean_worst[0] - q_mean_worst[1] or i == 0:
            q_mean_worst = (a, b)
        q_mean_ok &= bool(qm.min() >= -REL_SLACK) and a <= b
        q2 = math.fsum(pv * q_fin * q_fin)
        q2_ok &= _leq(q2, q2_cap)
        q2_worst = max(q2_worst, (q2, q2_cap))
        vm, _ = _group_mean(lev.parent, pv, v_fin)
        v_rhs = ell * e_low + ell * 2.0 * rate * eps / params.rho1 ** 2
        a, b = _worst(vm, v_rhs)
        v_mean_ok &= bool(vm.min() >= -REL_SLACK) and _leq(a, b)
        if i == 0 or a - b > v_mean_worst[0] - v_mean_worst[1]:
            v_mean_worst = (a, b)
        v2m, _ = _group_mean(lev.parent, pv, v_fin * v_fin)
        a, b = _worst(v2m, v2_cap)
        v2_ok &= _leq(a, b)
        v2_worst = max(v2_worst, (a, b))
    checks.append(_check("q-conditional-mean-identity", id_err, 1e-9, id_err <= 1e-9,
                         "E_V[Q_i | past, Z_i] equals h_i"))
    checks.append(_check("q-conditional-mean", *q_mean_worst, q_mean_ok, "0 <= E_V[Q_i | past] <= ell_i (R - delta1)"))
    checks.append(_check("q-second-moment", *q2_worst, q2_ok, "E_V[Q_i^2] <= 16 (4 + C_1/2^2) (n/k)^2 / (1 - rho2)^2"))
    checks.append(_check(
        "v-conditional-mean", *v_mean_worst, v_mean_ok,
        "0 <= E_V[V_i | past] <= ell_i E_sp(R - delta1) + ell_i 2 R eps / rho1^2"
        + ("; right side infinite" if math.isinf(e_low) else ""),
    ))
    checks.append(_check("v-second-moment", *v2_worst, v2_ok, "E_V[V_i^2 | past] <= 16 (2 + C_1/2)^2 (n/k)^2 / rho1^2"))

    # measures and Radon-Nikodym derivatives
    for name, vec in (("p", pts.p), ("pv", pts.pv), ("pq", pts.pq)):
        tot = math.fsum(vec)
        checks.append(_check(f"normalization-{name}", tot, 1.0, abs(tot - 1.0) <= 1e-12 and bool(vec.min() >= 0)))
    laws = output_laws(model.w, model.encoder) / model.encoder.message_count
    ny_n = model.w.output_size ** n
    marg = np.bincount(pts.message * ny_n + pts.history, weights=pts.p, minlength=laws.size)
    dev = float(np.max(np.abs(marg - laws.ravel())))
    checks.append(_check("p-code-marginal", dev, 1e-12, dev <= 1e-12, "P on (message, outputs) is the code's law"))
    with np.errstate(over="ignore", invalid="ignore"):
        live = pts.pq > 0
        rq = np.abs(pts.pq[live] * np.exp(pts.q_total[live]) - pts.pv[live])
        rq_rel = float(np.max(rq / np.maximum(pts.pv[live], pts.pq[live]))) if live.any() else 0.0
        live = pts.p > 0
        rv = np.abs(pts.p[live] * np.exp(pts.v_total[live]) - pts.pv[live])
        rv_rel = float(np.max(rv / np.maximum(pts.pv[live], pts.p[live]))) if live.any() else 0.0
    checks.append(_check("rn-derivative-q", rq_rel, REL_SLACK * 100, rq_rel <= REL_SLACK * 100, "exp(Q) = dP_V/dP_Q pointwise"))
    checks.append(_check("rn-derivative-v", rv_rel, REL_SLACK * 100, rv_rel <= REL_SLACK * 100, "exp(V) = dP_V/dP pointwise"))
    integral = math.fsum(pts.p[pts.p > 0] * np.exp(pts.v_total[pts.p > 0]))
    checks.append(_check("change-of-measure-integral", integral, 1.0, abs(integral - 1.0) <= 1e-10, "E_P[exp V] = 1"))

    # Chebyshev events
    ev = chebyshev_events(model)
    checks.append(_check("q-event-probability", ev.prob_q, 0.75, ev.prob_q >= 0.75,
                         f"A_Q = {{Q <= {fmt(ev.threshold_q)}}}"))
    checks.append(_check("v-event-probability", ev.prob_v, 0.75, ev.prob_v >= 0.75,
                         f"A_V = {{V <= {fmt(ev.threshold_v)}}}"))
    checks.append(_check("joint-event-probability", ev.prob_joint, 0.5, ev.prob_joint >= 0.5))

    # pigeonhole and P_U
    ph = pigeonhole(model, ev)
    nk = float(n) ** k
    checks.append(_check("pigeonhole-mass", ph.mass, 1.0 / (2.0 * nk), ph.mass >= 1.0 / (2.0 * nk),
                         f"cube {list(ph.cube)}"))
    factor = (ph.widened / eps) ** k
    checks.append(_check("u-domination", ph.domination_excess, 0.0, ph.domination_excess <= REL_SLACK * float(pts.pq.max()),
                         f"P_Q <= (eps~/eps)^k P_U on the cube, factor {fmt(factor)}"))
    checks.append(_check("u-message-independence", ph.output_law_spread, 0.0, ph.output_law_spread == 0.0))
    mcount = model.encoder.message_count
    checks.append(_check("u-correct-decoding", ph.correct_decoding, 1.0 / mcount, _leq(ph.correct_decoding, 1.0 / mcount)))

    # measure changes on the chain's events
    decoded = model.decoded()
    right = decoded == pts.message
    core = ev.in_q & ev.in_v & ph.in_cube
    lhs_q, rhs_q = measure_change_check(model, core & right, ev.threshold_q, "Q")
    pointwise_q = bool(np.all(pts.pq[ev.in_q] >= math.exp(-ev.threshold_q) * pts.pv[ev.in_q] * (1 - REL_SLACK))) \
        if math.isfinite(ev.threshold_q) else True
    checks.append(_check("measure-change-q", lhs_q, rhs_q, pointwise_q and lhs_q >= rhs_q * (1 - REL_SLACK),
                         "P_Q(B, Q <= lam) >= e^-lam P_V(B, Q <= lam), pointwise on {Q <= lam}"))
    lam_v = ev.threshold_v
    lhs_v, rhs_v = measure_change_check(model, core & ~right, lam_v, "V")
    if math.isfinite(lam_v):
        sel = ev.in_v
        pointwise_v = bool(np.all(pts.p[sel] >= math.exp(-lam_v) * pts.pv[sel] * (1 - REL_SLACK)))
    else:
        pointwise_v = True
    checks.append(_check("measure-change-v", lhs_v, rhs_v, pointwise_v and lhs_v >= rhs_v * (1 - REL_SLACK),
                         "P(B, V <= lam) >= e^-lam P_V(B, V <= lam), pointwise on {V <= lam}"))

    # the chain
    cap = 1.0 / (4.0 * nk)
    pv_right = math.fsum(pts.pv[core & right])
    checks.append(_check("chain-correct-decoding-cap", pv_right, cap, _leq(pv_right, cap)))
    pv_wrong = math.fsum(pts.pv[core & ~right])
    checks.append(_check("chain-error-mass", pv_wrong, cap, pv_wrong >= cap * (1 - REL_SLACK)))
    lam_exp = n * (e_low + d2)
    target = math.exp(-lam_exp) if math.isfinite(lam_exp) else 0.0
    p_wrong = math.fsum(pts.p[core & ~right])
    checks.append(_check("chain-true-measure", p_wrong, target, p_wrong >= target * (1 - REL_SLACK)))
    pe_model = math.fsum(pts.p[~right])
    pe_code = evaluate_code(model.w, model.encoder, model.decoder).average
    checks.append(_check("error-probability-match", pe_model, pe_code, abs(pe_model - pe_code) <= 1e-12))
    bound = target if bound_value is None else bound_value
    if not params.window_ok:
        checks.append(Check("final-bound", pe_code, bound, "hypothesis-failed",
                            "rate window fails: " + ", ".join(k for k, v in params.flags.items() if not v)))
    elif bound == 0.0:
        checks.append(Check("final-bound", pe_code, bound, "vacuous", "bound is zero"))
    else:
        checks.append(_check("final-bound", pe_code, bound, pe_code >= bound * (1 - REL_SLACK)))

    instance = {
        "n": n, "k": k, "atoms": lat.atoms, "messages": mcount, "rate": rate, "epsilon": eps,
        "rho1": params.rho1, "rho2": params.rho2, "rate0": params.rate0, "rate1": params.rate1,
        "delta1": d1, "delta2": d2, "c_half": params.c_half, "points": model.size, "cells": lat.cell_count,
        "cube": ",".join(str(c) for c in ph.cube), "spe_at_rate_minus_delta1": e_low,
    }
    return ConstructionReport(instance, dict(params.flags), tuple(checks), pe_code, bound)


# --- top level ----------------------------------------------------------------

def construct(
    w: DmcLike,
    n: int,
    k: int,
    atoms: int,
    message_count: int,
    epsilon: Optional[float] = None,
    rate0: Optional[float] = None,
    rate1: Optional[float] = None,
    encoder: Optional[FeedbackEncoder] = None,
    tol: float = DEFAULT_TOL,
    budget: int = DEFAULT_BUDGET,
    strict: bool = False,
) -> ConstructionModel:
    """Build the finite model for a code (default: the optimal feedback code) on ``w``.

    With ``strict=False`` an anchor whose target cannot be bracketed is pinned to
    the lowest anchor and the violation shows up in the report.
    """
    w = as_dmc(w)
    plan = make_subblocks(n, k)
    size = space_size(message_count, atoms, w.output_size, plan)
    if size > SPACE_CAP:
        raise ConstructionError(f"extended sample space bound {size} exceeds cap {SPACE_CAP}")
    if encoder is None:
        encoder = optimal_feedback_code(w, n, message_count, budget).encoder
    decoder = map_decoder(w, encoder, message_count)
    rate = math.log(message_count) / n
    params = spb_constants(w, n, k, epsilon, rate0, rate1, rate, tol)
    lattice = ZLattice.build(params.rho1, params.rho2, params.epsilon, atoms)
    ctx = ConstructionContext(w, encoder, plan, lattice, tol)
    g = choose_g_functions(ctx, rate, params.delta1, params.epsilon, strict)
    return build_measures(ctx, g, params, decoder)
