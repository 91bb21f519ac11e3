"""Canned verification studies tying the estimator kernels to the oracles.

Each ``verify_*`` function builds seeded worlds with known ground truth,
runs the relevant oracle (exact enumeration or Monte Carlo), and returns a
result dict with a boolean ``ok`` plus enough detail to debug a failure.
The acceptance test suite and the ``theory-verify`` CLI command both consume
these, so a red check fails the command and the suite identically.

World constructions used here:

* constant-imputation worlds: the imputed error vector is constant, so the
  stabilization residual is identically zero at every realized indicator
  vector.  This is the one construction where the constraint premise of the
  SDR bias/variance/tail formulas holds exactly for the plain self-normalized
  estimator, making enumeration comparisons clean.
* population-constrained worlds: general imputed errors with propensities
  built so the expected residual is zero (weights p/p_hat orthogonal to
  e_hat - mean(e_hat)).  Used for the bias-order property of the plain SDR
  ratio under inaccurate imputation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .estimators import (
    EstimatorInputs,
    constraint_residual,
    estimate_sdr,
    ideal_loss,
    sdr_violation_identity_check,
)
from .theory import (
    exact_moments,
    ips_dr_bias,
    ips_dr_tail_bound,
    ips_dr_variance,
    monte_carlo_report,
    sdr_bias_dominant,
    sdr_tail_bound,
    sdr_variance_dominant,
    sample_indicator_matrix,
    estimator_values,
)

__all__ = [
    "TheoryWorld",
    "make_constant_imputation_world",
    "make_population_constrained_world",
    "rescale_to_zero_residual",
    "verify_double_robustness_identity",
    "verify_violation_identity",
    "verify_exact_ips_dr",
    "verify_dominant_orders",
    "verify_tail_coverage",
    "verify_stability_contrast",
]


@dataclass(frozen=True)
class TheoryWorld:
    """Fully known vectors for one oracle study."""

    p: np.ndarray
    p_hat: np.ndarray
    e: np.ndarray
    e_hat: np.ndarray

    @property
    def n(self) -> int:
        return int(self.p.size)


def make_constant_imputation_world(
    seed: int,
    n: int,
    p_range: tuple[float, float] = (0.5, 0.9),
    p_hat_jitter: tuple[float, float] = (0.7, 1.4),
    e_range: tuple[float, float] = (0.1, 2.0),
) -> TheoryWorld:
    """World with constant imputed errors and mis-specified propensities."""
    rng = np.random.default_rng((seed, n, 0xC0))
    p = rng.uniform(*p_range, size=n)
    p_hat = np.clip(p * rng.uniform(*p_hat_jitter, size=n), 0.05, 1.0)
    e = rng.uniform(*e_range, size=n)
    e_hat = np.full(n, rng.uniform(0.2, 1.0))
    return TheoryWorld(p=p, p_hat=p_hat, e=e, e_hat=e_hat)


def make_population_constrained_world(
    seed: int, n: int, p_range: tuple[float, float] = (0.4, 0.9)
) -> TheoryWorld:
    """General imputed errors; p_hat built so the expected residual is zero.

    With weights q = p / p_hat, the expected residual is proportional to
    q . (e_hat - mean(e_hat)); the positive-deviation group of q is rescaled
    to cancel the negative group, then p_hat = p / q is renormalized below 1.
    """
    for attempt in range(64):
        rng = np.random.default_rng((seed, n, attempt, 0xA1))
        p = rng.uniform(*p_range, size=n)
        e = rng.uniform(0.1, 2.0, size=n)
        e_hat = rng.uniform(0.1, 2.0, size=n)
        u = e_hat - e_hat.mean()
        pos, neg = u > 1e-9, u < -1e-9
        if not (pos.any() and neg.any()):
            continue
        q = rng.uniform(0.5, 2.0, size=n)
        scale = -float(np.dot(q[neg], u[neg])) / float(np.dot(q[pos], u[pos]))
        if scale <= 0.0:
            continue
        q = q.copy()
        q[pos] *= scale
        p_hat = p / q
        p_hat = p_hat / max(1.0, float(p_hat.max()))
        return TheoryWorld(p=p, p_hat=p_hat, e=e, e_hat=e_hat)
    raise RuntimeError("could not build a population-constrained world")


def rescale_to_zero_residual(o, p_hat, e_hat):
    """Rescale one propensity coordinate so the sample residual is zero.

    Returns the adjusted copy of p_hat, or None when no observed coordinate
    can absorb the residual with a positive propensity.
    """
    o = np.asarray(o, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64).copy()
    e_hat = np.asarray(e_hat, dtype=np.float64)
    centered = e_hat - e_hat.mean()
    terms = (o / p_hat) * centered
    total = float(terms.sum())
    if total == 0.0:
        return p_hat
    candidates = np.flatnonzero(
        (o == 1.0) & (np.sign(centered) == -np.sign(total)) & (np.abs(centered) > 1e-6)
    )
    if candidates.size == 0:
        return None
    m = int(candidates[0])
    new_term = terms[m] - total
    p_hat[m] = centered[m] / new_term
    return p_hat


# ---------------------------------------------------------------------------
# Identity checks (exact, sample-level)
# ---------------------------------------------------------------------------


def verify_double_robustness_identity(
    cases: int = 200, n: int = 20, tol: float = 1e-12, seed: int = 0
) -> dict:
    """Accurate imputation + zero sample residual forces SDR == mean(e_hat).

    Builds seeded inputs with e_hat == e and a constraint-satisfying p_hat
    obtained by rescaling one coordinate; checks |SDR - mean(e_hat)| <= tol.
    """
    worst = 0.0
    built = 0
    attempt = 0
    while built < cases:
        rng = np.random.default_rng((seed, attempt, 0xD0))
        attempt += 1
        o = (rng.random(n) < rng.uniform(0.3, 0.9)).astype(float)
        if o.sum() < 2:
            continue
        e = rng.uniform(0.05, 3.0, size=n)
        p_hat = rng.uniform(0.1, 1.0, size=n)
        adjusted = rescale_to_zero_residual(o, p_hat, e)
        if adjusted is None:
            continue
        inputs = EstimatorInputs(o=o, p_hat=adjusted, e=e, e_hat=e)
        gap = abs(estimate_sdr(inputs).value - float(np.mean(e)))
        worst = max(worst, gap)
        built += 1
    return {"ok": worst <= tol, "cases": built, "max_gap": worst, "tol": tol}


def verify_violation_identity(
    cases: int = 100, n: int = 16, tol: float = 1e-12, seed: int = 0
) -> dict:
    """Violated constraint with accurate imputation obeys the exact shift law.

    The residual lambda and the mean inverse-propensity weight pin the SDR
    value: SDR = ideal + lambda / mean(o / p_hat).  Checked on seeded inputs
    with a deliberately nonzero residual.
    """
    worst = 0.0
    min_residual = math.inf
    built = 0
    attempt = 0
    while built < cases:
        rng = np.random.default_rng((seed, attempt, 0xF0))
        attempt += 1
        o = (rng.random(n) < rng.uniform(0.3, 0.9)).astype(float)
        if o.sum() < 2:
            continue
        e = rng.uniform(0.05, 3.0, size=n)
        p_hat = rng.uniform(0.1, 1.0, size=n)
        inputs = EstimatorInputs(o=o, p_hat=p_hat, e=e, e_hat=e)
        lam = constraint_residual(inputs)
        if abs(lam) < 1e-6:  # must exercise a genuinely violated constraint
            continue
        min_residual = min(min_residual, abs(lam))
        worst = max(worst, sdr_violation_identity_check(inputs))
        built += 1
    return {
        "ok": worst <= tol,
        "cases": built,
        "max_gap": worst,
        "min_abs_residual": min_residual,
        "tol": tol,
    }


# ---------------------------------------------------------------------------
# Enumeration-backed formula checks
# ---------------------------------------------------------------------------


def verify_exact_ips_dr(
    max_size: int = 16, seeds: int = 20, tol: float = 1e-12
) -> dict:
    """IPS/DR bias and variance formulas are exact: match 2^n enumeration."""
    worst_bias = 0.0
    worst_var = 0.0
    for n in range(1, max_size + 1):
        for seed in range(seeds):
            rng = np.random.default_rng((seed, n, 0xE0))
            p = rng.uniform(0.15, 0.95, size=n)
            p_hat = rng.uniform(0.1, 1.0, size=n)
            e = rng.uniform(0.05, 3.0, size=n)
            e_hat = rng.uniform(0.05, 3.0, size=n)
            ideal = ideal_loss(e)
            for kind, errs in (("ips", e), ("dr", e - e_hat)):
                mean, var = exact_moments(p, p_hat, e, e_hat, kind)
                worst_bias = max(
                    worst_bias, abs(abs(mean - ideal) - ips_dr_bias(p, p_hat, errs))
                )
                worst_var = max(
                    worst_var, abs(var - ips_dr_variance(p, p_hat, errs))
                )
    return {
        "ok": worst_bias <= tol and worst_var <= tol,
        "max_bias_gap": worst_bias,
        "max_variance_gap": worst_var,
        "tol": tol,
        "sizes": list(range(1, max_size + 1)),
        "seeds_per_size": seeds,
    }


def verify_dominant_orders(
    seeds: int = 5, small: int = 9, large: int = 16
) -> dict:
    """Scaled enumeration residuals of the SDR dominant terms do not grow.

    For constant-imputation worlds the stabilization residual vanishes at
    every indicator vector, so the dominant-term formulas address the plain
    SDR ratio; the leftover |oracle - formula| should shrink like 1/n (bias)
    and 1/n^2 (variance).  Scaled by n and n^2 they must not grow when the
    universe roughly doubles.
    """
    scaled_bias = {small: [], large: []}
    scaled_var = {small: [], large: []}
    for seed in range(seeds):
        for n in (small, large):
            world = make_constant_imputation_world(seed, n)
            mean, var = exact_moments(world.p, world.p_hat, world.e, world.e_hat, "sdr")
            ideal = ideal_loss(world.e)
            bias_gap = abs(
                abs(mean - ideal)
                - sdr_bias_dominant(world.p, world.p_hat, world.e, world.e_hat)
            )
            var_gap = abs(
                var - sdr_variance_dominant(world.p, world.p_hat, world.e, world.e_hat)
            )
            scaled_bias[n].append(bias_gap * n)
            scaled_var[n].append(var_gap * n**2)
    mean_bias = {n: float(np.mean(v)) for n, v in scaled_bias.items()}
    mean_var = {n: float(np.mean(v)) for n, v in scaled_var.items()}
    ok = mean_bias[large] <= mean_bias[small] and mean_var[large] <= mean_var[small]
    return {
        "ok": ok,
        "scaled_bias": {k: list(map(float, v)) for k, v in scaled_bias.items()},
        "scaled_variance": {k: list(map(float, v)) for k, v in scaled_var.items()},
        "mean_scaled_bias": mean_bias,
        "mean_scaled_variance": mean_var,
        "sizes": (small, large),
        "seeds": seeds,
    }


def verify_tail_coverage(
    n: int = 12,
    seeds: int = 3,
    replicates: int = 100_000,
    eta: float = 0.1,
) -> dict:
    """Empirical exceedance of every tail bound stays at or below eta."""
    rows = []
    ok = True
    for seed in range(seeds):
        world = make_constant_imputation_world(
            seed, n, p_range=(0.3, 0.85), p_hat_jitter=(0.5, 1.6)
        )
        for kind in ("sdr", "ips", "dr"):
            report = monte_carlo_report(
                world.p,
                world.p_hat,
                world.e,
                world.e_hat,
                kind,
                replicates=replicates,
                eta=eta,
                seed=seed,
            )
            ok = ok and report.tail_exceedance_rate <= eta
            rows.append(report)
    return {
        "ok": ok,
        "eta": eta,
        "rows": rows,
        "max_exceedance": max(r.tail_exceedance_rate for r in rows),
    }


def verify_stability_contrast(
    seed: int = 0,
    n: int = 64,
    floored_count: int = 32,
    floors: tuple[float, ...] = (1e-1, 1e-3, 1e-6),
    eta: float = 0.1,
    draws: int = 200,
    growth_factor: float = 10.0,
) -> dict:
    """Small-propensity sweep: IPS/DR formulas blow up, SDR stays fixed.

    Fixed true propensities; p_hat equals p except on ``floored_count``
    coordinates forced to the sweep floor.  Along the sweep the IPS and DR
    bias/variance/tail formulas must each grow by >= ``growth_factor`` per
    step, while the SDR values stay below bounds set by the deviation vector
    alone: max|delta| for bias, (delta_max - delta_min) for the tail, and
    the squared range for the variance.  Sampled SDR estimates must stay
    inside the observed-error hull.
    """
    rng = np.random.default_rng((seed, 0x5C))
    p = rng.uniform(0.3, 0.8, size=n)
    e = rng.uniform(0.1, 2.0, size=n)
    e_hat = 0.5 * e  # deviations stay nonnegative: range <= max|delta|
    delta = e - e_hat
    max_abs_delta = float(np.abs(delta).max())
    delta_range = float(delta.max() - delta.min())
    floored_idx = rng.permutation(n)[:floored_count]

    rows = []
    hull_ok = True
    for floor in floors:
        p_hat = p.copy()
        p_hat[floored_idx] = floor
        row = {
            "floor": floor,
            "ips_bias": ips_dr_bias(p, p_hat, e),
            "ips_variance": ips_dr_variance(p, p_hat, e),
            "ips_tail": ips_dr_tail_bound(p_hat, e, eta),
            "dr_bias": ips_dr_bias(p, p_hat, delta),
            "dr_variance": ips_dr_variance(p, p_hat, delta),
            "dr_tail": ips_dr_tail_bound(p_hat, delta, eta),
            "sdr_bias": sdr_bias_dominant(p, p_hat, e, e_hat),
            "sdr_variance": sdr_variance_dominant(p, p_hat, e, e_hat),
            "sdr_tail": sdr_tail_bound(p, p_hat, e, e_hat, eta),
        }
        rows.append(row)
        O = sample_indicator_matrix(p, draws, np.random.default_rng((seed, 0xD4)))
        observed_any = O.sum(axis=1) > 0
        values = estimator_values("sdr", O, p_hat, e, e_hat)[observed_any]
        lo = np.array([e[r == 1.0].min() for r in O[observed_any]])
        hi = np.array([e[r == 1.0].max() for r in O[observed_any]])
        hull_ok = hull_ok and bool(
            np.all(values >= lo - 1e-12) and np.all(values <= hi + 1e-12)
        )

    growth_ok = True
    for stat in ("bias", "variance", "tail"):
        for est in ("ips", "dr"):
            series = [row[f"{est}_{stat}"] for row in rows]
            for prev, nxt in zip(series, series[1:]):
                growth_ok = growth_ok and nxt >= growth_factor * prev
    sdr_bias_ok = all(row["sdr_bias"] <= max_abs_delta for row in rows)
    sdr_tail_ok = all(row["sdr_tail"] <= delta_range for row in rows)
    sdr_var_ok = all(row["sdr_variance"] <= delta_range**2 for row in rows)
    return {
        "ok": growth_ok and sdr_bias_ok and sdr_tail_ok and sdr_var_ok and hull_ok,
        "rows": rows,
        "growth_ok": growth_ok,
        "sdr_bias_ok": sdr_bias_ok,
        "sdr_tail_ok": sdr_tail_ok,
        "sdr_variance_ok": sdr_var_ok,
        "hull_ok": hull_ok,
        "max_abs_delta": max_abs_delta,
        "delta_range": delta_range,
        "floors": list(floors),
    }
