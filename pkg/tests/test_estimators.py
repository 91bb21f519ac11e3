"""Estimator kernel contracts: worked examples, invariants, identities."""

import numpy as np
import pytest

from stabledr.estimators import (
    DegenerateDenominatorError,
    EstimatorInputs,
    constraint_residual,
    estimate_dr,
    estimate_eib,
    estimate_ips,
    estimate_sdr,
    estimate_sdr_anchored,
    estimate_snips,
    ideal_loss,
    sdr_violation_identity_check,
)


def make_inputs(o, p_hat, e, e_hat, **kw):
    return EstimatorInputs(
        o=np.asarray(o, float),
        p_hat=np.asarray(p_hat, float),
        e=np.asarray(e, float),
        e_hat=np.asarray(e_hat, float),
        **kw,
    )


def random_inputs(rng, n=16):
    o = (rng.random(n) < 0.6).astype(float)
    return make_inputs(
        o,
        rng.uniform(0.05, 1.0, n),
        rng.uniform(0.0, 3.0, n),
        rng.uniform(0.0, 3.0, n),
    )


class TestIdealLoss:
    def test_mean(self):
        assert ideal_loss([0.2, 0.4]) == pytest.approx(0.3)

    def test_constant(self):
        assert ideal_loss([0.7] * 5) == pytest.approx(0.7)

    def test_matches_reversed_summation(self):
        rng = np.random.default_rng(0)
        e = rng.uniform(0, 2, 100)
        assert ideal_loss(e) == pytest.approx(ideal_loss(e[::-1]), abs=1e-12)


class TestIps:
    def test_hand_value(self):
        inputs = make_inputs([1, 1], [0.5, 1.0], [1, 2], [0, 0])
        assert estimate_ips(inputs).value == pytest.approx(2.0)

    def test_no_reweighting_reduces_to_ideal(self):
        e = [0.3, 1.1, 0.2]
        inputs = make_inputs([1, 1, 1], [1, 1, 1], e, [0, 0, 0])
        assert estimate_ips(inputs).value == pytest.approx(ideal_loss(e))

    def test_blow_up_permitted(self):
        inputs = make_inputs([1], [1e-8], [1.0], [0.0])
        assert estimate_ips(inputs).value == pytest.approx(1e8)


class TestSnips:
    def test_hand_value(self):
        inputs = make_inputs([1, 1], [0.5, 1.0], [1, 2], [0, 0])
        assert estimate_snips(inputs).value == pytest.approx(4.0 / 3.0)

    def test_uniform_weights_cancel(self):
        inputs = make_inputs([1, 0, 1], [0.4, 0.4, 0.4], [1.0, np.nan, 3.0], [0, 0, 0])
        assert estimate_snips(inputs).value == pytest.approx(2.0)

    def test_degenerate_falls_back_to_imputed_mean(self):
        inputs = make_inputs([0, 0], [0.5, 0.5], [np.nan, np.nan], [0.2, 0.6])
        result = estimate_snips(inputs)
        assert result.degenerate
        assert result.value == pytest.approx(0.4)


class TestDr:
    def test_accurate_imputation_ignores_propensities(self):
        rng = np.random.default_rng(1)
        e = rng.uniform(0, 2, 10)
        o = (rng.random(10) < 0.5).astype(float)
        inputs = make_inputs(o, rng.uniform(0.01, 1, 10), e, e)
        assert estimate_dr(inputs).value == pytest.approx(ideal_loss(e), abs=1e-12)

    def test_zero_imputation_reduces_to_ips(self):
        rng = np.random.default_rng(2)
        inputs = random_inputs(rng)
        zeroed = make_inputs(inputs.o, inputs.p_hat, inputs.e, np.zeros(inputs.n))
        assert estimate_dr(zeroed).value == pytest.approx(
            estimate_ips(zeroed).value, abs=1e-12
        )

    def test_hand_value(self):
        inputs = make_inputs([1, 1], [0.5, 1.0], [1, 2], [0.5, 0.5])
        assert estimate_dr(inputs).value == pytest.approx(1.75)


class TestEib:
    def test_all_observed(self):
        e = [0.1, 2.2]
        inputs = make_inputs([1, 1], [0.5, 0.5], e, [9, 9])
        assert estimate_eib(inputs).value == pytest.approx(ideal_loss(e))

    def test_none_observed(self):
        inputs = make_inputs([0, 0], [0.5, 0.5], [np.nan, np.nan], [1.0, 3.0])
        assert estimate_eib(inputs).value == pytest.approx(2.0)

    def test_hand_value(self):
        inputs = make_inputs([1, 0], [0.5, 0.5], [2, np.nan], [9, 4])
        assert estimate_eib(inputs).value == pytest.approx(3.0)


class TestSdr:
    def test_constraint_satisfying_inputs_recover_imputed_mean(self):
        # residual terms cancel by construction: p_hat[2] = p_hat[0] / 3
        inputs = make_inputs([1, 0, 1, 0], [0.9, 0.5, 0.3, 0.5], [1, 2, 3, 4], [1, 2, 3, 4])
        assert constraint_residual(inputs) == pytest.approx(0.0, abs=1e-15)
        assert estimate_sdr(inputs).value == pytest.approx(2.5)

    def test_single_observed_pair(self):
        inputs = make_inputs([0, 1, 0], [0.3, 0.017, 0.9], [np.nan, 1.3, np.nan], [0, 0, 0])
        assert estimate_sdr(inputs).value == pytest.approx(1.3)

    def test_scale_invariance_in_propensities(self):
        rng = np.random.default_rng(3)
        inputs = random_inputs(rng)
        scaled = make_inputs(inputs.o, inputs.p_hat * 7.3, inputs.e, inputs.e_hat)
        assert estimate_sdr(scaled).value == pytest.approx(
            estimate_sdr(inputs).value, rel=1e-12
        )

    def test_anchored_form_equals_plain_when_residual_zero(self):
        inputs = make_inputs([1, 0, 1, 0], [0.9, 0.5, 0.3, 0.5], [1, 2, 3, 4], [1, 2, 3, 4])
        assert estimate_sdr_anchored(inputs).value == pytest.approx(
            estimate_sdr(inputs).value, abs=1e-12
        )


class TestBoundedness:
    """Self-normalized estimators stay in the observed-error hull; IPS/DR do not."""

    def test_sdr_bounded_ips_unbounded_at_tiny_propensity(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            inputs = random_inputs(rng)
            if inputs.o.sum() == 0:
                continue
            p_hat = inputs.p_hat.copy()
            p_hat[np.flatnonzero(inputs.o == 1.0)[0]] = 1e-9
            extreme = make_inputs(inputs.o, p_hat, inputs.e, inputs.e_hat)
            observed_e = extreme.e[extreme.o == 1.0]
            lo, hi = observed_e.min(), observed_e.max()
            for kernel in (estimate_sdr, estimate_snips):
                value = kernel(extreme).value
                assert lo - 1e-12 <= value <= hi + 1e-12
        # one concrete blow-up case: IPS exceeds 10x the max observed error
        inputs = make_inputs([1, 1], [1e-9, 0.5], [2.0, 1.0], [0, 0])
        assert estimate_ips(inputs).value > 10 * 2.0
        assert estimate_sdr(inputs).value <= 2.0 + 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        inputs = random_inputs(rng)
        perm = rng.permutation(inputs.n)
        shuffled = make_inputs(
            inputs.o[perm], inputs.p_hat[perm], inputs.e[perm], inputs.e_hat[perm]
        )
        for kernel in (estimate_ips, estimate_snips, estimate_dr, estimate_eib,
                       estimate_sdr, estimate_sdr_anchored):
            assert kernel(shuffled).value == pytest.approx(
                kernel(inputs).value, abs=1e-12
            )
        assert constraint_residual(shuffled) == pytest.approx(
            constraint_residual(inputs), abs=1e-12
        )


class TestConstraintResidual:
    def test_constant_imputation_zero(self):
        rng = np.random.default_rng(6)
        inputs = make_inputs(
            (rng.random(8) < 0.5).astype(float),
            rng.uniform(0.1, 1, 8),
            rng.uniform(0, 2, 8),
            np.full(8, 0.37),
        )
        assert constraint_residual(inputs) == pytest.approx(0.0, abs=1e-15)

    def test_nothing_observed_zero(self):
        inputs = make_inputs([0, 0], [0.5, 0.5], [np.nan, np.nan], [1.0, 2.0])
        assert constraint_residual(inputs) == 0.0


class TestViolationIdentity:
    def test_zero_residual_case(self):
        inputs = make_inputs([1, 0, 1, 0], [0.9, 0.5, 0.3, 0.5], [1, 2, 3, 4], [1, 2, 3, 4])
        assert sdr_violation_identity_check(inputs) <= 1e-12

    def test_random_inputs_with_accurate_imputation(self):
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 100:
            o = (rng.random(16) < 0.6).astype(float)
            if o.sum() == 0:
                continue
            e = rng.uniform(0.0, 3.0, 16)
            inputs = make_inputs(o, rng.uniform(0.05, 1.0, 16), e, e)
            assert sdr_violation_identity_check(inputs) <= 1e-12
            checked += 1

    def test_residual_shift_prediction(self):
        # doubling the violation moves SDR exactly as the identity predicts
        rng = np.random.default_rng(8)
        o = (rng.random(12) < 0.7).astype(float)
        e = rng.uniform(0.1, 2.0, 12)
        p1 = rng.uniform(0.2, 1.0, 12)
        inputs1 = make_inputs(o, p1, e, e)
        lam1 = constraint_residual(inputs1)
        s1 = np.mean(o / p1)
        p2 = p1.copy()
        p2[np.flatnonzero(o == 1.0)[0]] /= 3.0
        inputs2 = make_inputs(o, p2, e, e)
        lam2 = constraint_residual(inputs2)
        s2 = np.mean(o / p2)
        predicted_shift = lam2 / s2 - lam1 / s1
        actual_shift = estimate_sdr(inputs2).value - estimate_sdr(inputs1).value
        assert actual_shift == pytest.approx(predicted_shift, abs=1e-12)

    def test_requires_accurate_imputation(self):
        inputs = make_inputs([1, 1], [0.5, 0.5], [1.0, 2.0], [1.0, 2.5])
        with pytest.raises(ValueError):
            sdr_violation_identity_check(inputs)

    def test_degenerate_denominator(self):
        inputs = make_inputs([0, 0], [0.5, 0.5], [1.0, 2.0], [1.0, 2.0])
        with pytest.raises(DegenerateDenominatorError):
            sdr_violation_identity_check(inputs)


class TestValidation:
    def test_rejects_nonpositive_propensity(self):
        with pytest.raises(ValueError):
            make_inputs([1], [0.0], [1.0], [1.0])

    def test_rejects_nan_error_on_observed_pair(self):
        with pytest.raises(ValueError):
            make_inputs([1, 0], [0.5, 0.5], [np.nan, np.nan], [0.0, 0.0])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            make_inputs([1, 0], [0.5], [1.0, 1.0], [0.0, 0.0])

    def test_rejects_nonbinary_indicator(self):
        with pytest.raises(ValueError):
            make_inputs([0.5], [0.5], [1.0], [0.0])
