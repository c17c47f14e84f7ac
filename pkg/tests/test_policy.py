import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divbar_sim import (
    DIVBAR_REP,
    DIVBAR_RMIA,
    IntegrityError,
    RayleighFading,
    StationaryPolicy,
    build_cdf_table,
    choose_commodity,
    choose_forwarder,
    differential_backlog,
    phi,
    phi_rep,
    priority_sets,
)
from divbar_sim.analytics import simulate_epochs
from divbar_sim.policy import RETAIN, EpochDecision
from divbar_sim.queueing import BacklogSnapshot, Scheme

from helpers import bernoulli


def snap(rows, commodities=(1,)):
    return BacklogSnapshot(q=tuple(tuple(r) for r in rows), commodities=commodities)


class TestDifferentialBacklog:
    def test_positive_difference(self):
        assert differential_backlog(snap([[5], [3]]), 0, 1, 1) == 2

    def test_clamped_at_zero(self):
        assert differential_backlog(snap([[3], [5]]), 0, 1, 1) == 0

    def test_equal_backlogs(self):
        assert differential_backlog(snap([[4], [4]]), 0, 1, 1) == 0


class TestPrioritySets:
    def test_two_receivers(self):
        s = snap([[5], [1], [3]])
        r = priority_sets(s, 0, 1, (1, 2))
        assert r.order == (1, 2)  # W = 4 vs 2
        assert r.high(2) == (1,)
        assert r.low(1) == (2,)
        assert r.high(1) == () and r.low(2) == ()

    def test_all_ties_break_by_id(self):
        s = snap([[5], [2], [2], [2]])
        r = priority_sets(s, 0, 1, (1, 2, 3))
        assert r.order == (1, 2, 3)
        assert r.high(2) == (1,)  # tied receiver lands in exactly one side
        assert r.low(2) == (3,)

    def test_single_neighbor(self):
        r = priority_sets(snap([[5], [0]]), 0, 1, (1,))
        assert r.high(1) == () and r.low(1) == ()


class TestPhi:
    def test_single_neighbor_normalized(self):
        t = build_cdf_table(RayleighFading(1.0), 1.0)
        assert phi({1: t}, (1,))[1] == pytest.approx(1.0, abs=1e-9)

    def test_bernoulli_closed_form(self):
        # two per-slot Bernoulli(1/2) receivers: geometric series give
        # 2/3 for the higher priority and 1/3 for the lower
        t1 = build_cdf_table(bernoulli(0.5), 1.0, max_order=512)
        t2 = build_cdf_table(bernoulli(0.5), 1.0, max_order=512)
        probs = phi({1: t1, 2: t2}, (1, 2))
        assert probs[1] == pytest.approx(2.0 / 3.0, abs=1e-9)
        assert probs[2] == pytest.approx(1.0 / 3.0, abs=1e-9)

    def test_rayleigh_pair_against_epoch_simulation(self):
        h0 = 1.0
        models = {1: RayleighFading(1.0), 2: RayleighFading(1.0)}
        tables = {k: build_cdf_table(m, h0) for k, m in models.items()}
        probs = phi(tables, (1, 2))
        n = 10**6
        sample = simulate_epochs(models, h0, n, np.random.default_rng(99))
        hat = sample.phi_hat((1, 2))
        for k in (1, 2):
            sigma = math.sqrt(probs[k] * (1 - probs[k]) / n)
            assert abs(hat[k] - probs[k]) <= 3 * sigma

    def test_normalization_over_random_rankings(self):
        rng = np.random.default_rng(5)
        tables = {
            1: build_cdf_table(RayleighFading(0.8), 1.0),
            2: build_cdf_table(RayleighFading(1.5), 1.0),
            3: build_cdf_table(RayleighFading(3.0), 1.0),
        }
        for _ in range(100):
            ranking = tuple(rng.permutation([1, 2, 3]).tolist())
            assert sum(phi(tables, ranking).values()) == pytest.approx(1.0, abs=1e-6)

    def test_empty_receiver_set_rejected(self):
        with pytest.raises(ValueError):
            phi({}, ())

    def test_mismatched_h0_rejected(self):
        t1 = build_cdf_table(RayleighFading(1.0), 1.0)
        t2 = build_cdf_table(RayleighFading(1.0), 2.0)
        with pytest.raises(ValueError):
            phi({1: t1, 2: t2}, (1, 2))

    def test_rep_metric_is_single_slot_truncation(self):
        tables = {
            1: build_cdf_table(RayleighFading(1.0), 1.0),
            2: build_cdf_table(RayleighFading(2.0), 1.0),
        }
        probs = phi_rep(tables, (1, 2))
        f1 = tables[1].at_h0(1)
        f2 = tables[2].at_h0(1)
        assert probs[1] == pytest.approx(1 - f1, abs=1e-12)
        assert probs[2] == pytest.approx(f1 * (1 - f2), abs=1e-12)


class TestChooseCommodity:
    @staticmethod
    def phi_fn(tables):
        return lambda ranking: phi(tables, ranking)

    def test_all_zero_backlog_idles(self):
        t = {1: build_cdf_table(RayleighFading(1.0), 1.0)}
        d = choose_commodity(DIVBAR_RMIA, snap([[0], [0]]), 0, (1,), self.phi_fn(t))
        assert d.commodity is None and d.metric == 0.0

    def test_unique_positive_commodity_chosen(self):
        t = {1: build_cdf_table(RayleighFading(1.0), 1.0)}
        s = snap([[3, 0], [0, 0]], commodities=(1, 2))
        d = choose_commodity(DIVBAR_RMIA, s, 0, (1,), self.phi_fn(t))
        assert d.commodity == 1
        assert d.metric > 0.0

    def test_argmax_against_exhaustive_enumeration(self):
        tables = {
            1: build_cdf_table(bernoulli(0.5), 1.0, max_order=256),
            2: build_cdf_table(bernoulli(0.5), 1.0, max_order=256),
        }
        rows = [[4, 2], [1, 0], [3, 5]]
        s = snap(rows, commodities=(5, 6))
        d = choose_commodity(DIVBAR_RMIA, s, 0, (1, 2), self.phi_fn(tables))
        best = max(
            (
                sum(
                    max(rows[0][ci] - rows[k][ci], 0)
                    * phi(tables, priority_sets(s, 0, c, (1, 2)).order)[k]
                    for k in (1, 2)
                ),
                -c,
            )
            for ci, c in enumerate((5, 6))
        )
        assert d.metric == pytest.approx(best[0], rel=1e-12)
        assert d.commodity == -best[1]

    def test_metric_zero_iff_idle(self):
        # backlogged but every receiver is more backlogged: idle
        t = {1: build_cdf_table(RayleighFading(1.0), 1.0)}
        d = choose_commodity(DIVBAR_RMIA, snap([[2], [5]]), 0, (1,), self.phi_fn(t))
        assert d.commodity is None and d.metric == 0.0

    def test_scale_invariance_of_selection(self):
        tables = {
            1: build_cdf_table(RayleighFading(0.7), 1.0),
            2: build_cdf_table(RayleighFading(2.0), 1.0),
        }
        rows = [[4, 1], [2, 0], [0, 3]]
        s1 = snap(rows, commodities=(7, 8))
        s2 = snap([[v * 13 for v in r] for r in rows], commodities=(7, 8))
        d1 = choose_commodity(DIVBAR_RMIA, s1, 0, (1, 2), self.phi_fn(tables))
        d2 = choose_commodity(DIVBAR_RMIA, s2, 0, (1, 2), self.phi_fn(tables))
        assert d1.commodity == d2.commodity
        assert d1.ranking == d2.ranking

    @given(st.lists(st.lists(st.integers(0, 6), min_size=2, max_size=2),
                    min_size=3, max_size=3))
    @settings(max_examples=30, deadline=None)
    def test_idle_iff_metric_zero(self, rows):
        tables = {
            1: build_cdf_table(RayleighFading(1.0), 1.0, max_order=64),
            2: build_cdf_table(RayleighFading(1.0), 1.0, max_order=64),
        }
        s = snap(rows, commodities=(1, 2))
        d = choose_commodity(DIVBAR_RMIA, s, 0, (1, 2), self.phi_fn(tables))
        assert (d.commodity is None) == (d.metric == 0.0)


class TestChooseForwarder:
    def make_decision(self, w):
        order = tuple(sorted(w, key=lambda k: (-w[k], k)))
        return EpochDecision(commodity=1, metric=1.0, ranking=order, w=w)

    def test_single_acker(self):
        d = self.make_decision({1: 3, 2: 1})
        assert choose_forwarder(DIVBAR_RMIA, d, {1}) == 1

    def test_retain_when_no_positive_backpressure(self):
        d = self.make_decision({1: 0, 2: 0})
        assert choose_forwarder(DIVBAR_RMIA, d, {1, 2}) is RETAIN

    def test_tie_breaks_to_lowest_id(self):
        d = self.make_decision({1: 2, 2: 2})
        assert choose_forwarder(DIVBAR_RMIA, d, {1, 2}) == 1

    def test_result_always_in_ack_set(self):
        d = self.make_decision({1: 1, 2: 5, 3: 2})
        assert choose_forwarder(DIVBAR_RMIA, d, {1, 3}) == 3

    def test_empty_ack_set_is_protocol_fault(self):
        d = self.make_decision({1: 1})
        with pytest.raises(IntegrityError):
            choose_forwarder(DIVBAR_RMIA, d, set())


class TestStationaryPolicy:
    def make_policy(self):
        return StationaryPolicy(
            alpha={(0, 1): 0.4, (0, 2): 0.3},
            theta={(0, 1, frozenset({1})): {1: 0.5}},
            scheme=Scheme.RMIA,
        )

    def test_alpha_validation(self):
        with pytest.raises(ValueError):
            StationaryPolicy(alpha={(0, 1): 0.7, (0, 2): 0.6}, theta={})

    def test_theta_validation(self):
        with pytest.raises(ValueError):
            StationaryPolicy(
                alpha={(0, 1): 0.5},
                theta={(0, 1, frozenset({1, 2})): {1: 0.7, 2: 0.7}},
            )

    def test_commodity_draw_frequencies(self):
        pol = self.make_policy()
        rng = np.random.default_rng(17)
        s = snap([[0, 0], [0, 0], [0, 0]], commodities=(1, 2))
        outcomes = [
            choose_commodity(pol, s, 0, (1, 2), None, rng).commodity
            for _ in range(20000)
        ]
        freq1 = sum(c == 1 for c in outcomes) / len(outcomes)
        freq_idle = sum(c is None for c in outcomes) / len(outcomes)
        assert freq1 == pytest.approx(0.4, abs=0.015)
        assert freq_idle == pytest.approx(0.3, abs=0.015)

    def test_forwarder_sampling_respects_theta_and_residual(self):
        pol = self.make_policy()
        rng = np.random.default_rng(23)
        d = EpochDecision(commodity=1, metric=0.0, ranking=(1,), w={1: 0})
        outcomes = [
            choose_forwarder(pol, d, {1}, rng, node=0) for _ in range(20000)
        ]
        freq = sum(o == 1 for o in outcomes) / len(outcomes)
        assert freq == pytest.approx(0.5, abs=0.015)
        assert any(o is RETAIN for o in outcomes)

    def test_unknown_set_retains(self):
        pol = self.make_policy()
        rng = np.random.default_rng(29)
        d = EpochDecision(commodity=2, metric=0.0, ranking=(1,), w={})
        assert choose_forwarder(pol, d, {1}, rng, node=0) is RETAIN


def test_rep_equals_rmia_decision_on_bernoulli_channels():
    # single-slot channels: the repetition metric and the accumulation metric
    # differ by the constant epoch-length factor, so decisions coincide
    tables = {
        1: build_cdf_table(bernoulli(0.4), 1.0, max_order=512),
        2: build_cdf_table(bernoulli(0.7), 1.0, max_order=512),
    }
    phi_acc = lambda r: phi(tables, r)
    phi_one = lambda r: phi_rep(tables, r)
    for rows in itertools.product(range(4), repeat=3):
        s = snap([list(rows[:1] * 2), list(rows[1:2] * 2), list(rows[2:] * 2)],
                 commodities=(1, 2))
        d_acc = choose_commodity(DIVBAR_RMIA, s, 0, (1, 2), phi_acc)
        d_rep = choose_commodity(DIVBAR_REP, s, 0, (1, 2), phi_one)
        assert d_acc.commodity == d_rep.commodity
        assert d_acc.ranking == d_rep.ranking
