"""Theory oracles and closed-form terms: enumeration, formulas, reports."""

import json
import math

import numpy as np
import pytest

from stabledr.estimators import EstimatorInputs, ideal_loss
from stabledr import theory as T
from stabledr.verification import (
    make_constant_imputation_world,
    make_population_constrained_world,
    verify_dominant_orders,
    verify_exact_ips_dr,
    verify_stability_contrast,
)


def test_exact_expectation_single_pair():
    assert T.exact_expectation([0.4], [0.5], [2.0], [0.0], "ips") == pytest.approx(1.6)


def test_exact_expectation_rejects_oversized_universe():
    n = T.ENUMERATION_CAP + 1
    with pytest.raises(T.EnumerationCapError):
        T.exact_expectation(np.full(n, 0.5), np.full(n, 0.5), np.zeros(n), np.zeros(n), "ips")


def test_ips_unbiased_at_true_propensities():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.2, 0.9, 10)
    e = rng.uniform(0, 2, 10)
    mean = T.exact_expectation(p, p, e, np.zeros(10), "ips")
    assert mean == pytest.approx(ideal_loss(e), abs=1e-13)


def test_vectorized_estimators_match_scalar_kernels():
    rng = np.random.default_rng(1)
    n = 10
    p_hat = rng.uniform(0.05, 1.0, n)
    e = rng.uniform(0, 3, n)
    e_hat = rng.uniform(0, 3, n)
    O = (rng.random((64, n)) < 0.5).astype(float)
    O[0] = 0.0  # degenerate row exercises the fallback
    for kind in T.ESTIMATOR_KINDS:
        values = T.estimator_values(kind, O, p_hat, e, e_hat)
        for row in range(0, 64, 7):
            inputs = EstimatorInputs(o=O[row], p_hat=p_hat, e=e, e_hat=e_hat)
            assert values[row] == pytest.approx(
                T.scalar_estimator(kind, inputs), abs=1e-12
            ), kind


def test_sdr_asymptotic_unbiasedness_at_true_propensities():
    """With accurate propensities the exact SDR bias shrinks like 1/n."""
    biases = {}
    for n in (8, 16, 20):  # sizes capped by exact enumeration
        rng = np.random.default_rng((1, n))
        p = rng.uniform(0.3, 0.9, n)
        e = rng.uniform(0.1, 2.0, n)
        e_hat = rng.uniform(0.1, 2.0, n)
        mean = T.exact_expectation(p, p, e, e_hat, "sdr")
        biases[n] = abs(mean - ideal_loss(e))
    assert biases[8] > biases[16] > biases[20]
    assert max(n * b for n, b in biases.items()) <= 10 * min(
        n * b for n, b in biases.items()
    )


class TestClosedFormBias:
    def test_sdr_bias_zero_for_constant_deviation(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0.2, 0.9, 9)
        p_hat = rng.uniform(0.1, 1.0, 9)
        e = rng.uniform(0, 2, 9)
        assert T.sdr_bias_dominant(p, p_hat, e, e - 0.4) == pytest.approx(0.0, abs=1e-15)

    def test_sdr_bias_zero_at_accurate_propensities(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(0.2, 0.9, 9)
        e = rng.uniform(0, 2, 9)
        e_hat = rng.uniform(0, 2, 9)
        assert T.sdr_bias_dominant(p, p, e, e_hat) == pytest.approx(0.0, abs=1e-14)

    def test_ips_dr_bias_zero_at_accurate_propensities(self):
        rng = np.random.default_rng(4)
        p = rng.uniform(0.2, 0.9, 9)
        assert T.ips_dr_bias(p, p, rng.uniform(0, 2, 9)) == 0.0

    def test_dr_bias_zero_at_accurate_imputation(self):
        rng = np.random.default_rng(5)
        p = rng.uniform(0.2, 0.9, 9)
        p_hat = rng.uniform(0.1, 1.0, 9)
        assert T.ips_dr_bias(p, p_hat, np.zeros(9)) == 0.0


class TestClosedFormVariance:
    def test_zero_when_always_observed(self):
        rng = np.random.default_rng(6)
        e = rng.uniform(0, 2, 7)
        assert T.ips_dr_variance(np.ones(7), rng.uniform(0.1, 1, 7), e) == 0.0
        assert T.sdr_variance_dominant(
            np.ones(7), rng.uniform(0.1, 1, 7), e, rng.uniform(0, 2, 7)
        ) == pytest.approx(0.0, abs=1e-15)

    def test_sdr_variance_zero_for_constant_deviation(self):
        rng = np.random.default_rng(7)
        p = rng.uniform(0.2, 0.9, 7)
        p_hat = rng.uniform(0.1, 1, 7)
        e = rng.uniform(0, 2, 7)
        assert T.sdr_variance_dominant(p, p_hat, e, e - 1.1) == pytest.approx(
            0.0, abs=1e-15
        )

    def test_ips_variance_blows_up_as_propensity_shrinks(self):
        p = np.full(6, 0.5)
        e = np.linspace(0.2, 1.4, 6)
        values = []
        for floor in (1e-2, 1e-4, 1e-6):
            p_hat = p.copy()
            p_hat[0] = floor
            values.append(T.ips_dr_variance(p, p_hat, e))
        assert values[0] < values[1] < values[2]
        assert values[2] > 1e7 * values[0]


class TestExactFormulas:
    """IPS/DR bias and variance are exact: they match full enumeration."""

    def test_enumeration_match_small(self):
        result = verify_exact_ips_dr(max_size=8, seeds=5)
        assert result["ok"], result

    def test_eib_formula_matches_enumeration(self):
        rng = np.random.default_rng(8)
        n = 8
        p = rng.uniform(0.2, 0.9, n)
        p_hat = rng.uniform(0.1, 1.0, n)
        e = rng.uniform(0, 2, n)
        e_hat = rng.uniform(0, 2, n)
        mean, var = T.exact_moments(p, p_hat, e, e_hat, "eib")
        bias = abs(float(np.mean((1 - p) * (e - e_hat))))
        assert abs(mean - ideal_loss(e)) == pytest.approx(bias, abs=1e-13)
        formula_var = float(np.sum(p * (1 - p) * (e - e_hat) ** 2)) / n**2
        assert var == pytest.approx(formula_var, abs=1e-13)


class TestDominantTerms:
    def test_scaled_residuals_do_not_grow(self):
        result = verify_dominant_orders(seeds=3, small=9, large=16)
        assert result["ok"], result

    def test_error_mode_covers_unconstrained_propensities(self):
        """Appendix-style variant: with arbitrary p_hat and inaccurate e_hat,
        the raw-error-centered formulas describe the plain SDR ratio."""
        scaled = {}
        for n in (9, 16):
            world = make_population_constrained_world(11, n)
            rng = np.random.default_rng((n, 0xAB))
            p_hat = np.clip(world.p * rng.uniform(0.6, 1.5, n), 0.05, 1.0)
            mean, var = T.exact_moments(world.p, p_hat, world.e, world.e_hat, "sdr")
            bias_gap = abs(
                abs(mean - ideal_loss(world.e))
                - T.sdr_bias_dominant(world.p, p_hat, world.e, world.e_hat, mode="error")
            )
            var_gap = abs(
                var
                - T.sdr_variance_dominant(
                    world.p, p_hat, world.e, world.e_hat, mode="error"
                )
            )
            scaled[n] = (bias_gap * n, var_gap * n**2)
        assert scaled[16][0] <= 4 * scaled[9][0] + 1e-9
        assert scaled[16][1] <= 4 * scaled[9][1] + 1e-9

    def test_population_constrained_world_bias_order_for_plain_sdr(self):
        """With the expected residual zero, the deviation-centered bias term
        describes the plain SDR ratio to O(1/n)."""
        gaps = {}
        for n in (9, 16):
            world = make_population_constrained_world(4, n)
            mean, _ = T.exact_moments(world.p, world.p_hat, world.e, world.e_hat, "sdr")
            gaps[n] = abs(
                abs(mean - ideal_loss(world.e))
                - T.sdr_bias_dominant(world.p, world.p_hat, world.e, world.e_hat)
            )
        assert gaps[16] * 16 <= 4 * gaps[9] * 9 + 1e-9


class TestTailBounds:
    def test_zero_for_constant_deviation(self):
        rng = np.random.default_rng(9)
        p = rng.uniform(0.3, 0.9, 8)
        p_hat = rng.uniform(0.1, 1.0, 8)
        e = rng.uniform(0, 2, 8)
        assert T.sdr_tail_bound(p, p_hat, e, e - 0.3, eta=0.1) == pytest.approx(
            0.0, abs=1e-15
        )
        assert T.ips_dr_tail_bound(p_hat, np.zeros(8), eta=0.1) == 0.0

    def test_sdr_bound_shrinks_with_universe_size(self):
        rng = np.random.default_rng(10)
        bounds = []
        for n in (16, 64, 256):
            p = rng.uniform(0.3, 0.8, n)
            p_hat = np.clip(p * rng.uniform(0.7, 1.3, n), 0.05, 1.0)
            e = rng.uniform(0.1, 2.0, n)
            bounds.append(T.sdr_tail_bound(p, p_hat, e, np.full(n, 0.6), eta=0.1))
        assert bounds[0] > bounds[1] > bounds[2]

    def test_ips_bound_blows_up(self):
        e = np.linspace(0.2, 1.4, 6)
        values = []
        for floor in (1e-2, 1e-4, 1e-6):
            p_hat = np.full(6, 0.5)
            p_hat[0] = floor
            values.append(T.ips_dr_tail_bound(p_hat, e, eta=0.1))
        assert values[0] < values[1] < values[2]

    def test_bracket_flooring_flagged(self):
        # two pairs with tiny estimated propensities force the bracket below 1
        p = np.array([0.5, 0.5])
        p_hat = np.array([1e-4, 1e-4])
        e = np.array([0.1, 1.9])
        bound, details = T.sdr_tail_bound(
            p, p_hat, e, np.zeros(2), eta=0.1, return_details=True
        )
        assert details["bracket_floored"]
        assert np.isfinite(bound)

    def test_invalid_eta_rejected(self):
        with pytest.raises(ValueError):
            T.sdr_tail_bound([0.5], [0.5], [1.0], [0.0], eta=1.5)

    def test_error_mode_bound_covers_unconstrained_sdr(self):
        """The raw-error-centered tail bound needs no constraint: it covers
        the plain SDR ratio for arbitrary propensities and imputed errors."""
        for seed in range(3):
            rng = np.random.default_rng((seed, 0xE11))
            n = 12
            p = rng.uniform(0.3, 0.85, n)
            p_hat = rng.uniform(0.05, 1.0, n)
            e = rng.uniform(0.1, 2.0, n)
            e_hat = rng.uniform(0.1, 2.0, n)
            ref = T.exact_expectation(p, p_hat, e, e_hat, "sdr")
            O = T.sample_indicator_matrix(p, 50_000, seed)
            values = T.estimator_values("sdr", O, p_hat, e, e_hat)
            bound = T.sdr_tail_bound(p, p_hat, e, e_hat, eta=0.1, mode="error")
            assert float(np.mean(np.abs(values - ref) > bound)) <= 0.1


class TestMonteCarloReport:
    def test_deterministic_per_seed(self):
        world = make_constant_imputation_world(0, 10)
        kwargs = dict(replicates=2000, eta=0.1, seed=123)
        a = T.monte_carlo_report(world.p, world.p_hat, world.e, world.e_hat, "sdr", **kwargs)
        b = T.monte_carlo_report(world.p, world.p_hat, world.e, world.e_hat, "sdr", **kwargs)
        assert a.to_dict() == b.to_dict()

    def test_unbiased_case_within_three_standard_errors(self):
        world = make_constant_imputation_world(1, 10)
        replicates = 50_000
        report = T.monte_carlo_report(
            world.p, world.p, world.e, world.e_hat, "ips", replicates=replicates, seed=3
        )
        se = math.sqrt(report.empirical_variance / replicates)
        assert abs(report.empirical_bias) <= 3 * se

    def test_sdr_bias_within_three_standard_errors_of_formula(self):
        world = make_constant_imputation_world(2, 10)
        replicates = 50_000
        report = T.monte_carlo_report(
            world.p, world.p_hat, world.e, world.e_hat, "sdr",
            replicates=replicates, seed=4,
        )
        se = math.sqrt(report.empirical_variance / replicates)
        allowance = 3 * se + 2.0 / world.n  # O(1/n) remainder term
        assert abs(abs(report.empirical_bias) - report.formula_bias_dominant) <= allowance

    def test_enumeration_matches_million_replicate_monte_carlo(self):
        world = make_constant_imputation_world(3, 9)
        exact = T.exact_expectation(world.p, world.p_hat, world.e, world.e_hat, "sdr")
        O = T.sample_indicator_matrix(world.p, 1_000_000, 42)
        values = T.estimator_values("sdr", O, world.p_hat, world.e, world.e_hat)
        se = values.std() / math.sqrt(values.size)
        assert abs(values.mean() - exact) <= 3 * se

    def test_report_serialization_round_trip(self):
        world = make_constant_imputation_world(4, 8)
        report = T.monte_carlo_report(
            world.p, world.p_hat, world.e, world.e_hat, "dr", replicates=2000, seed=5
        )
        decoded = json.loads(report.to_json())
        assert decoded["estimator"] == "dr"
        assert decoded["sample_size"] == 8
        assert 0.0 <= decoded["tail_exceedance_rate"] <= 1.0

    def test_replicate_floor_enforced(self):
        world = make_constant_imputation_world(5, 8)
        with pytest.raises(ValueError):
            T.monte_carlo_report(
                world.p, world.p_hat, world.e, world.e_hat, "sdr", replicates=10
            )


class TestGeneralizationBound:
    def _setup(self, h_count, n=12, seed=5):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.3, 0.8, n)
        p_hat = np.clip(p * rng.uniform(0.6, 1.5, n), 0.05, 1.0)
        e_hat = np.full(n, 0.7)
        errors = [rng.uniform(0.1, 2.0, n) for _ in range(h_count)]
        return p, p_hat, e_hat, errors

    def test_identical_models_share_bound(self):
        p, p_hat, e_hat, errors = self._setup(1)
        doubled = T.generalization_bound(errors * 2, p, p_hat, e_hat, eta=0.1)
        assert doubled[0]["bound_offset"] == pytest.approx(doubled[1]["bound_offset"])

    def test_singleton_matches_tail_plus_bias(self):
        p, p_hat, e_hat, errors = self._setup(1)
        out = T.generalization_bound(errors, p, p_hat, e_hat, eta=0.1)[0]
        # |H| = 1 makes the union bound collapse onto the single-model terms
        tail = T.sdr_tail_bound(p, p_hat, errors[0], e_hat, eta=0.1)
        bias = T.sdr_bias_dominant(p, p_hat, errors[0], e_hat)
        assert out["bound_offset"] == pytest.approx(tail + bias, rel=1e-12)

    def test_monte_carlo_coverage(self):
        p, p_hat, e_hat, errors = self._setup(4)
        bounds = T.generalization_bound(errors, p, p_hat, e_hat, eta=0.1)
        O = T.sample_indicator_matrix(p, 10_000, 7)
        covered = np.ones(O.shape[0], dtype=bool)
        for model, err in enumerate(errors):
            values = T.estimator_values("sdr", O, p_hat, err, e_hat)
            covered &= ideal_loss(err) <= values + bounds[model]["bound_offset"] + 1e-12
        assert covered.mean() >= 0.9

    def test_empty_hypothesis_list_rejected(self):
        p, p_hat, e_hat, _ = self._setup(1)
        with pytest.raises(ValueError):
            T.generalization_bound([], p, p_hat, e_hat, eta=0.1)


def test_stability_contrast_suite():
    result = verify_stability_contrast()
    assert result["ok"], {k: v for k, v in result.items() if k != "rows"}
