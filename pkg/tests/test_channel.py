import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divbar_sim import (
    ConfigError,
    DiscreteTest,
    RayleighFading,
    TruncationWarning,
    build_cdf_table,
    phi,
    rate_cdf,
    sample_rate,
)
from divbar_sim.channel import cached_cdf_table


class TestSampling:
    def test_degenerate_atom_always_returned(self):
        model = DiscreteTest(((1.0, 1.0),))
        rng = np.random.default_rng(0)
        assert all(sample_rate(model, rng) == 1.0 for _ in range(50))

    def test_rayleigh_tail_probability(self):
        # P(R >= 1 bit) = exp(-(2^1 - 1)/1) = e^-1 for unit mean SNR
        model = RayleighFading(1.0)
        rng = np.random.default_rng(42)
        samples = model.sample(rng, size=10**6)
        assert abs((samples >= 1.0).mean() - math.exp(-1)) < 0.002

    def test_rayleigh_nonnegative(self):
        model = RayleighFading(0.3)
        rng = np.random.default_rng(7)
        assert model.sample(rng, size=10**6).min() >= 0.0

    def test_uniform_transform_matches_distribution(self):
        model = RayleighFading(2.0)
        u = np.random.default_rng(3).random(200_000)
        r = model.rates_from_uniform(u)
        assert abs((r < 1.0).mean() - model.cdf(1.0)) < 0.005


class TestRateCdf:
    def test_rayleigh_at_origin(self):
        assert rate_cdf(RayleighFading(1.0), 0.0) == 0.0

    def test_rayleigh_closed_form(self):
        assert rate_cdf(RayleighFading(1.0), 1.0) == pytest.approx(
            1.0 - math.exp(-1.0), abs=1e-12
        )

    def test_discrete_mass_below(self):
        model = DiscreteTest(((1.0, 0.5), (0.0, 0.5)))
        assert rate_cdf(model, 0.5) == 0.5

    def test_negative_argument_rejected(self):
        with pytest.raises(ValueError):
            rate_cdf(RayleighFading(1.0), -0.1)

    @given(st.floats(0.01, 20.0), st.floats(0.0, 8.0), st.floats(0.0, 8.0))
    @settings(max_examples=50, deadline=None)
    def test_cdf_monotone(self, snr, x1, x2):
        lo, hi = sorted((x1, x2))
        model = RayleighFading(snr)
        assert rate_cdf(model, lo) <= rate_cdf(model, hi) + 1e-15


class TestModelValidation:
    def test_bad_mean_snr(self):
        with pytest.raises(ConfigError):
            RayleighFading(0.0)

    def test_atom_probs_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            DiscreteTest(((1.0, 0.6), (0.0, 0.5)))

    def test_negative_atom_rate(self):
        with pytest.raises(ConfigError):
            DiscreteTest(((-1.0, 1.0),))


class TestCdfTable:
    def test_order_zero_row_is_one(self):
        for model in (RayleighFading(1.0), DiscreteTest(((0.5, 0.5), (0.0, 0.5)))):
            table = build_cdf_table(model, 1.0, max_order=4)
            assert (table.values[0] == 1.0).all()

    def test_base_row_matches_single_slot_cdf(self):
        model = RayleighFading(1.3)
        table = build_cdf_table(model, 1.0, max_order=2)
        assert table.at_h0(1) == pytest.approx(rate_cdf(model, 1.0), abs=1e-9)

    def test_two_fold_convolution_against_monte_carlo(self):
        table = build_cdf_table(RayleighFading(1.0), 1.0, max_order=4)
        rng = np.random.default_rng(123)
        total = np.log2(1.0 + rng.exponential(1.0, size=(10**7, 2))).sum(axis=1)
        assert abs(table.at_h0(2) - (total < 1.0).mean()) < 5e-4
        # strict product bound from the flow-rate lemma
        assert table.at_h0(2) < table.at_h0(1) ** 2
        assert table.at_h0(1) ** 2 == pytest.approx(0.39958, abs=5e-5)

    @pytest.mark.parametrize("m", [2, 3, 5])
    def test_convolution_vs_monte_carlo_binomial_band(self, m):
        table = build_cdf_table(RayleighFading(1.0), 1.0, max_order=8)
        rng = np.random.default_rng(1000 + m)
        n = 10**6
        total = np.log2(1.0 + rng.exponential(1.0, size=(n, m))).sum(axis=1)
        p = table.at_h0(m)
        tol = 4.0 * math.sqrt(p * (1.0 - p) / n)
        assert abs(p - (total < 1.0).mean()) <= tol

    @pytest.mark.parametrize("snr", [0.5, 1.0, 4.0])
    @pytest.mark.parametrize("h0", [1.0, 2.0])
    def test_flow_rate_lemma_strict_inequalities(self, snr, h0):
        # strictness threshold 1e-9, floored at half the bound once the
        # probabilities themselves drop below that scale (fast channels at
        # high orders underflow any fixed absolute margin)
        def strict(value, bound):
            assert bound - value > min(1e-9, 0.5 * bound)

        table = build_cdf_table(RayleighFading(snr), h0, max_order=12)
        f = table.failure_at_h0
        f1 = f[1]
        for m in range(2, 11):
            strict(f[m], f[m - 1] * f1)  # product recursion bound
            strict(f[m], f1**m)  # power bound
            strict(f[m], f[m - 1])  # strict decrease
        assert f[1] < f[0]

    def test_rows_monotone_and_bounded(self):
        table = build_cdf_table(RayleighFading(2.0), 1.5, max_order=16)
        v = table.values
        assert (v >= 0.0).all() and (v <= 1.0).all()
        assert (np.diff(v[1:], axis=1) >= -1e-15).all()

    def test_grid_refinement_converged(self):
        coarse = build_cdf_table(RayleighFading(1.0), 1.0, 1.0 / 1024, max_order=10)
        fine = build_cdf_table(RayleighFading(1.0), 1.0, 1.0 / 2048, max_order=10)
        for m in range(1, 11):
            assert abs(coarse.at_h0(m) - fine.at_h0(m)) < 1e-4

    def test_discrete_bernoulli_is_geometric(self):
        model = DiscreteTest(((1.0, 0.5), (0.0, 0.5)))
        table = build_cdf_table(model, 1.0, max_order=20)
        for m in range(0, 21):
            assert table.at_h0(m) == pytest.approx(0.5**m, abs=1e-15)

    def test_discrete_half_atoms_need_two_slots(self):
        # atoms of h0/2: the two-slot sum always reaches h0
        model = DiscreteTest(((0.5, 1.0),))
        table = build_cdf_table(model, 1.0, max_order=4)
        assert table.at_h0(1) == 1.0
        assert table.at_h0(2) == 0.0

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            build_cdf_table(RayleighFading(1.0), -1.0)
        with pytest.raises(ConfigError):
            build_cdf_table(RayleighFading(1.0), 1.0, grid_step=0.5)  # < 64 cells
        with pytest.raises(ConfigError):
            build_cdf_table(RayleighFading(1.0), 1.0, max_order=0)

    def test_truncation_warning_on_heavy_tail(self):
        # tiny max order on a slow-decaying link leaves visible tail mass
        table = build_cdf_table(RayleighFading(0.5), 2.0, max_order=2)
        with pytest.warns(TruncationWarning):
            phi({1: table}, (1,))

    def test_cached_builder_returns_identical_table(self):
        model = RayleighFading(1.0)
        t1 = cached_cdf_table(model, 1.0, None, 32)
        t2 = cached_cdf_table(model, 1.0, None, 32)
        assert t1 is t2

    def test_table_is_frozen_after_build(self):
        table = build_cdf_table(RayleighFading(1.0), 1.0, max_order=2)
        with pytest.raises((ValueError, RuntimeError)):
            table.values[0, 0] = 0.5

    def test_no_truncation_warning_at_default_order(self):
        table = build_cdf_table(RayleighFading(1.0), 1.0)
        with warnings.catch_warnings():
            warnings.simplefilter("error", TruncationWarning)
            phi({1: table}, (1,))
