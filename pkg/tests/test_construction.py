import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import channel, seeds
from spherepack.construction import (
    BracketError,
    ConstructionContext,
    ConstructionError,
    ZLattice,
    build_measures,
    chebyshev_events,
    choose_g_functions,
    conditional_mean_h,
    construct,
    full_chain_verify,
    h_statistic,
    log_ratio_Q,
    log_ratio_V,
    make_subblocks,
    measure_change_check,
    pigeonhole,
    space_size,
)
from spherepack.exponents import SpbParameters
from spherepack.feedback import FeedbackEncoder, evaluate_code, map_decoder, output_laws
from spherepack.probability import Dmc, bsc
from spherepack.renyi import DEFAULT_TOL, capacity_value
from spherepack.tilting import channel_center, selftilt_matrix

FLAT = Dmc([[0.3, 0.7], [0.3, 0.7]])


def binary_entropy(p: float) -> float:
    return -p * math.log(p) - (1 - p) * math.log(1 - p)


def context(w, enc, k, rho1=0.2, rho2=0.8, eps=0.05, atoms=4):
    plan = make_subblocks(enc.n, k)
    return ConstructionContext(w, enc, plan, ZLattice.build(rho1, rho2, eps, atoms), DEFAULT_TOL)


def hand_params(ctx, rate, delta1=0.0, delta2=0.0, rho1=0.2, rho2=0.8, eps=0.05, window=True):
    return SpbParameters(
        ctx.plan.n, ctx.plan.k, eps, 0.01, 0.5, rate, rho1, rho2, delta1, delta2,
        capacity_value(0.5, ctx.w), 0.0, capacity_value(1.0, ctx.w), {"window": window},
    )


def hand_model(w, enc, k, rate, delta1=0.0, **kw):
    ctx = context(w, enc, k, **kw)
    g = choose_g_functions(ctx, rate, delta1, 0.05)
    return build_measures(ctx, g, hand_params(ctx, rate, delta1), map_decoder(w, enc))


@pytest.fixture(scope="module")
def bsc_model():
    enc = FeedbackEncoder.from_codewords([[0, 0, 1, 1], [1, 1, 0, 0]], 2, 2)
    return hand_model(bsc(0.1), enc, 2, 0.15)


@pytest.fixture(scope="module")
def acceptance_model():
    return construct(bsc(0.1), 4, 2, 8, 2)


class TestSubblocks:
    def test_ten_into_three(self):
        plan = make_subblocks(10, 3)
        assert plan.lengths == (4, 3, 3)
        assert plan.ends == (0, 4, 7, 10)
        assert plan.starts == (1, 5, 8)

    def test_extremes(self):
        assert make_subblocks(7, 1).lengths == (7,)
        assert make_subblocks(5, 5).lengths == (1,) * 5

    @given(st.integers(1, 200), st.integers(1, 200))
    def test_invariants(self, n, k):
        if k > n:
            with pytest.raises(ValueError):
                make_subblocks(n, k)
            return
        plan = make_subblocks(n, k)
        extra = n - (n // k) * k
        assert plan.lengths == tuple(-(-n // k) if i < extra else n // k for i in range(k))
        assert plan.ends[-1] == n and plan.lengths[0] >= plan.lengths[-1]
        assert all(s == e + 1 for s, e in zip(plan.starts, plan.ends))


class TestLattice:
    def test_masses_sum_to_one(self):
        lat = ZLattice.build(0.2, 0.8, 0.05, 4)
        for u in (0.0, 1.3, lat.top):
            cells, share = lat.masses(u)
            assert math.fsum(share) == pytest.approx(1.0, abs=1e-12)
            assert len(cells) <= lat.atoms + 1

    def test_aligned_interval_hits_whole_cells(self):
        lat = ZLattice.build(0.2, 0.8, 0.05, 4)
        cells, share = lat.masses(0.0)
        np.testing.assert_allclose(share, 0.25, rtol=1e-12)
        np.testing.assert_allclose(lat.orders()[cells], 0.15 + 0.0125 * (np.arange(4) + 0.5), rtol=1e-12)

    def test_anchor_roundtrip(self):
        lat = ZLattice.build(0.2, 0.8, 0.05, 4)
        g_top = 0.8 / 0.95
        assert lat.anchor_offset(g_top, 0.05) == pytest.approx(lat.top, rel=1e-12)
        assert lat.anchor(lat.top, 0.05) == pytest.approx(g_top, rel=1e-12)
        assert lat.anchor(0.0, 0.05) == pytest.approx(0.15 / 0.95, rel=1e-12)

    def test_orders_within_range(self):
        lat = ZLattice.build(0.2, 0.8, 0.05, 4)
        for u in np.linspace(0.0, lat.top, 17):
            zs = lat.orders()[lat.masses(u)[0]]
            assert zs.min() >= 0.15 and zs.max() <= 0.85


class TestHStatistic:
    def test_flat_channel_is_zero(self):
        enc = FeedbackEncoder.from_codewords([[0, 1]], 2, 2)
        ctx = context(FLAT, enc, 1)
        assert h_statistic(ctx, 0, 0, 0, 0.4) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("p", [0.1, 0.25])
    def test_bsc_single_use_half_order(self, p):
        enc = FeedbackEncoder.from_codewords([[0, 1], [1, 1]], 2, 2)
        ctx = context(bsc(p), enc, 2)
        pp = math.sqrt(p) / (math.sqrt(p) + math.sqrt(1 - p))
        expected = math.log(2) - binary_entropy(pp)
        for i, m, hist in [(0, 0, 0), (1, 0, 1), (1, 1, 0)]:
            assert h_statistic(ctx, i, m, hist, 0.5) == pytest.approx(expected, rel=1e-12)

    @given(seeds, st.floats(0.05, 0.95))
    def test_range(self, seed, z):
        rng = np.random.default_rng(seed)
        w = channel(rng, 2, 3)
        enc = FeedbackEncoder(3, 1, 2, 3, rng.integers(0, 2, size=(1, 13)))
        ctx = context(w, enc, 1)
        h = h_statistic(ctx, 0, 0, 0, z)
        assert -1e-15 <= h <= 3 * capacity_value(z, w) * (1 + 1e-12) + 1e-15

    def test_feedback_history_matters(self):
        # second input flips only after output 1
        enc = FeedbackEncoder(2, 1, 2, 2, [[0, 0, 1]])
        w = Dmc([[0.9, 0.1], [0.4, 0.6]])
        ctx = context(w, enc, 1)
        wz = selftilt_matrix(0.5, w)
        q = channel_center(0.5, w)
        d = [sum(r * math.log(r / s) for r, s in zip(row, q)) for row in wz]
        assert h_statistic(ctx, 0, 0, 0, 0.5) == pytest.approx(d[0] + wz[0][0] * d[0] + wz[0][1] * d[1], rel=1e-12)


class TestGFunctions:
    def test_flat_channel_sits_at_top(self):
        enc = FeedbackEncoder.from_codewords([[0, 1, 0, 1]], 2, 2)
        ctx = context(FLAT, enc, 2)
        g = choose_g_functions(ctx, 0.1, 0.0, 0.05)
        assert {v.mode for v in g.values()} == {"top"}
        assert all(v.g == pytest.approx(0.8 / 0.95) for v in g.values())

    def test_bisection_hits_target(self, bsc_model):
        modes = [v.mode for v in bsc_model.g.values()]
        assert "bisected" in modes
        for v in bsc_model.g.values():
            assert v.mean <= v.target + 1e-9
            if v.mode == "bisected":
                assert abs(v.mean - v.target) < 1e-9
            assert 0.15 / 0.95 - 1e-12 <= v.g <= 0.8 / 0.95 + 1e-12

    def test_lowest_anchor_below_target(self, bsc_model):
        ctx = bsc_model.context
        for (i, m, h), v in bsc_model.g.items():
            assert conditional_mean_h(ctx, i, m, h, 0.0) <= v.target

    def test_unbracketed_target(self):
        enc = FeedbackEncoder.from_codewords([[0, 0], [1, 1]], 2, 2)
        ctx = context(bsc(0.1), enc, 1)
        with pytest.raises(BracketError):
            choose_g_functions(ctx, 0.1, 5.0, 0.05)
        g = choose_g_functions(ctx, 0.1, 5.0, 0.05, strict=False)
        assert {v.mode for v in g.values()} == {"clamped-lower"}


class TestMeasures:
    def test_normalised(self, bsc_model):
        for vec in (bsc_model.points.p, bsc_model.points.pv, bsc_model.points.pq):
            assert math.fsum(vec) == pytest.approx(1.0, abs=1e-12)
            assert vec.min() >= 0

    def test_true_measure_marginal_is_code_law(self, bsc_model):
        pts = bsc_model.points
        laws = output_laws(bsc_model.w, bsc_model.encoder) / 2
        marg = np.bincount(pts.message * 16 + pts.history, weights=pts.p, minlength=32)
        np.testing.assert_allclose(marg, laws.ravel(), atol=1e-15)

    def test_single_subblock_center_law(self):
        w = Dmc([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]])
        enc = FeedbackEncoder.from_codewords([[0, 1]], 2, 3)
        model = hand_model(w, enc, 1, 0.2)
        pts = model.points
        cells, share = model.lattice.masses(model.g[(0, 0, 0)].offset)
        expected = sum(s * np.kron(channel_center(model.lattice.order(c), w), channel_center(model.lattice.order(c), w))
                       for c, s in zip(cells, share))
        np.testing.assert_allclose(np.bincount(pts.history, weights=pts.pq, minlength=9), expected, atol=1e-15)

    def test_messages_are_uniform(self, bsc_model):
        pts = bsc_model.points
        for vec in (pts.p, pts.pv, pts.pq):
            np.testing.assert_allclose(np.bincount(pts.message, weights=vec), [0.5, 0.5], atol=1e-15)

    def test_z_conditionals_shared(self, bsc_model):
        # for every (message, first cell) the three measures assign the same mass
        lev = bsc_model.levels[1]
        keys = lev.message * bsc_model.lattice.cell_count + lev.cell
        uniq, inv = np.unique(keys, return_inverse=True)
        expected = 0.5 * np.bincount(inv.reshape(-1), weights=lev.zmass) / np.bincount(inv.reshape(-1))
        for vec in (lev.p, lev.pv, lev.pq):
            np.testing.assert_allclose(np.bincount(inv.reshape(-1), weights=vec), expected, rtol=1e-13)

    def test_space_cap(self):
        plan = make_subblocks(20, 2)
        assert space_size(2, 8, 2, plan) > 1 << 24
        with pytest.raises(ConstructionError):
            construct(bsc(0.1), 20, 2, 8, 2)


class TestLogRatios:
    def test_flat_channel_ratios_vanish(self):
        enc = FeedbackEncoder.from_codewords([[0, 1, 1, 0], [1, 0, 0, 1]], 2, 2)
        model = hand_model(FLAT, enc, 2, 0.1)
        for pt in range(model.size):
            assert log_ratio_Q(model, pt) == pytest.approx(0.0, abs=1e-15)
            assert log_ratio_V(model, pt) == pytest.approx(0.0, abs=1e-15)

    def test_single_use_subblock(self, bsc_model):
        model = hand_model(bsc(0.1), FeedbackEncoder.from_codewords([[0, 1], [1, 0]], 2, 2), 2, 0.15)
        pts, lev = model.points, model.levels[1]
        for pt in range(model.size):
            j = model.ancestors(1)[pt]
            z = model.lattice.order(int(lev.cell[j]))
            y = int(lev.history[j])
            x = model.encoder.input(int(pts.message[pt]), 1)
            wz, q = selftilt_matrix(z, model.w), channel_center(z, model.w)
            assert lev.q_step[j] == pytest.approx(math.log(wz[x][y] / q[y]), rel=1e-12, abs=1e-15)

    def test_radon_nikodym(self, bsc_model):
        pts = bsc_model.points
        np.testing.assert_allclose(pts.pq * np.exp(pts.q_total), pts.pv, rtol=1e-13)
        np.testing.assert_allclose(pts.p * np.exp(pts.v_total), pts.pv, rtol=1e-13)
        assert math.fsum(pts.p * np.exp(pts.v_total)) == pytest.approx(1.0, abs=1e-10)


class TestMeasureChange:
    def test_empty_event(self, bsc_model):
        empty = np.zeros(bsc_model.size, dtype=bool)
        assert measure_change_check(bsc_model, empty, 0.3, "Q") == (0.0, 0.0)

    def test_full_event_infinite_lambda(self, bsc_model):
        full = np.ones(bsc_model.size, dtype=bool)
        lhs, rhs = measure_change_check(bsc_model, full, math.inf, "Q")
        assert lhs == pytest.approx(1.0) and rhs == 0.0

    @pytest.mark.parametrize("which", ["Q", "V"])
    def test_random_events(self, bsc_model, which):
        rng = np.random.default_rng(9)
        ratio = bsc_model.points.q_total if which == "Q" else bsc_model.points.v_total
        for _ in range(100):
            event = rng.random(bsc_model.size) < rng.uniform(0.05, 0.95)
            lam = float(rng.choice(ratio))
            lhs, rhs = measure_change_check(bsc_model, event, lam, which)
            assert lhs >= rhs * (1 - 1e-12)

    def test_unknown_ratio(self, bsc_model):
        with pytest.raises(ValueError):
            measure_change_check(bsc_model, np.ones(bsc_model.size, dtype=bool), 0.0, "W")


class TestPigeonhole:
    def test_mass_and_u_measure(self, bsc_model):
        ev = chebyshev_events(bsc_model)
        ph = pigeonhole(bsc_model, ev)
        good = ev.in_q & ev.in_v
        # the chosen cube carries at least an equal share of the good mass
        assert ph.mass >= math.fsum(bsc_model.points.pv[good]) / 4**2 - 1e-15
        assert ph.output_law_spread == 0.0
        assert ph.correct_decoding <= 0.5 + 1e-12
        assert ph.domination_excess <= 1e-15
        assert ph.widened == pytest.approx(0.05 + 0.95 / 4)

    def test_single_subblock_single_cube(self):
        enc = FeedbackEncoder.from_codewords([[0, 1], [1, 0]], 2, 2)
        model = hand_model(FLAT, enc, 1, 0.1)
        ev = chebyshev_events(model)
        ph = pigeonhole(model, ev)
        assert ph.in_cube.all()
        assert ph.mass == pytest.approx(math.fsum(model.points.pv[ev.in_q & ev.in_v]), abs=1e-15)


class TestFullChain:
    def test_error_probability_matches_code(self, acceptance_model):
        rep = full_chain_verify(acceptance_model)
        code = evaluate_code(acceptance_model.w, acceptance_model.encoder, acceptance_model.decoder).average
        assert rep.error_probability == pytest.approx(code, abs=1e-12)
        assert rep.check("error-probability-match").status == "pass"

    def test_structural_checks_pass(self, acceptance_model):
        rep = full_chain_verify(acceptance_model)
        for name in ("g-range", "z-range", "h-range", "normalization-p", "normalization-pv", "normalization-pq",
                     "p-code-marginal", "rn-derivative-q", "rn-derivative-v", "change-of-measure-integral",
                     "u-message-independence", "u-correct-decoding", "q-second-moment", "v-second-moment"):
            assert rep.check(name).status == "pass", name

    def test_failed_window_is_never_silent(self, acceptance_model):
        rep = full_chain_verify(acceptance_model)
        assert not rep.hypotheses["rate_at_least_rate0_plus_delta1"]
        assert rep.check("final-bound").status == "hypothesis-failed"
        assert not rep.all_pass

    def test_flat_channel_error(self):
        enc = FeedbackEncoder.from_codewords([[0, 1], [1, 0]], 2, 2)
        model = hand_model(FLAT, enc, 2, 0.1)
        rep = full_chain_verify(model)
        assert rep.error_probability == pytest.approx(0.5, abs=1e-15)

    def test_json_report(self, acceptance_model):
        doc = json.loads(full_chain_verify(acceptance_model).to_json())
        assert doc["all_pass"] is False
        assert {c["id"] for c in doc["checks"]} >= {"final-bound", "pigeonhole-mass", "q-event-probability"}
        assert doc["instance"]["n"] == 4

    def test_deterministic(self):
        a = full_chain_verify(construct(bsc(0.1), 4, 2, 4, 2)).to_json()
        b = full_chain_verify(construct(bsc(0.1), 4, 2, 4, 2)).to_json()
        assert a == b
