"""Closed-form bias/variance/tail formulas and the oracles that verify them.

Two oracle modes:

* exact enumeration -- for ``n <= ENUMERATION_CAP`` pairs, the expectation of
  any estimator under independent Bernoulli indicators is computed by summing
  all 2^n indicator vectors weighted by their exact probabilities;
* Monte Carlo -- replicated indicator draws with seeded streams for larger
  universes and for tail-coverage checks.

Formula values (dominant bias and variance terms, tail bounds) are pure
functions of the per-pair vectors so they can be probed at arbitrarily
extreme propensities.  None of them clip anything.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .estimators import (
    EstimatorInputs,
    estimate_dr,
    estimate_eib,
    estimate_ips,
    estimate_sdr,
    estimate_sdr_anchored,
    estimate_snips,
    ideal_loss,
)

__all__ = [
    "ENUMERATION_CAP",
    "ESTIMATOR_KINDS",
    "EnumerationCapError",
    "TheoryReport",
    "estimator_values",
    "exact_expectation",
    "exact_moments",
    "sample_indicator_matrix",
    "sdr_bias_dominant",
    "sdr_variance_dominant",
    "sdr_tail_bound",
    "ips_dr_bias",
    "ips_dr_variance",
    "ips_dr_tail_bound",
    "generalization_bound",
    "monte_carlo_report",
    "scalar_estimator",
]

ENUMERATION_CAP = 20
_CHUNK_BITS = 16

ESTIMATOR_KINDS = ("ips", "snips", "dr", "eib", "sdr", "sdr-anchored")

_SCALAR_KERNELS = {
    "ips": estimate_ips,
    "snips": estimate_snips,
    "dr": estimate_dr,
    "eib": estimate_eib,
    "sdr": estimate_sdr,
    "sdr-anchored": estimate_sdr_anchored,
}


class EnumerationCapError(ValueError):
    """Raised when exact enumeration is requested beyond ENUMERATION_CAP pairs."""


def scalar_estimator(kind: str, inputs: EstimatorInputs) -> float:
    """Evaluate one estimator kind on one realized indicator vector."""
    try:
        return float(_SCALAR_KERNELS[kind](inputs).value)
    except KeyError:
        raise ValueError(f"unknown estimator kind {kind!r}") from None


def _prep(p_hat, e, e_hat):
    p_hat = np.asarray(p_hat, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    e_filled = np.where(np.isfinite(e), e, 0.0)
    return p_hat, e_filled, e_hat


def estimator_values(kind: str, O: np.ndarray, p_hat, e, e_hat) -> np.ndarray:
    """Vectorized estimator values for a stack of indicator vectors.

    ``O`` has shape (replicates, n) with 0/1 entries.  Rows where nothing is
    observed fall back exactly as the scalar kernels do.  Agreement with the
    scalar kernels row by row is covered by tests (dual-route check).
    """
    p_hat, e_filled, e_hat = _prep(p_hat, e, e_hat)
    O = np.asarray(O, dtype=np.float64)
    n = p_hat.size
    anchor = float(np.mean(e_hat))
    if kind == "ips":
        return O @ (e_filled / p_hat) / n
    if kind == "dr":
        return anchor + O @ ((e_filled - e_hat) / p_hat) / n
    if kind == "eib":
        return (O @ (e_filled - e_hat) + e_hat.sum()) / n
    if kind in ("snips", "sdr"):
        num = O @ (e_filled / p_hat)
        den = O @ (1.0 / p_hat)
        return np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), anchor)
    if kind == "sdr-anchored":
        num = O @ ((e_filled - e_hat) / p_hat)
        den = O @ (1.0 / p_hat)
        return anchor + np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)
    raise ValueError(f"unknown estimator kind {kind!r}")


def _exact_sum(terms: np.ndarray) -> float:
    # math.fsum keeps the 2^n-term reductions exact enough for 1e-12 checks
    return math.fsum(terms.tolist())


def _enumerate_values_probs(p, p_hat, e, e_hat, kind):
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    if n > ENUMERATION_CAP:
        raise EnumerationCapError(
            f"exact enumeration supports at most {ENUMERATION_CAP} pairs, got {n}"
        )
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("true propensities must lie in [0, 1]")
    total = 1 << n
    cols = np.arange(n, dtype=np.uint64)
    values = np.empty(total, dtype=np.float64)
    probs = np.empty(total, dtype=np.float64)
    chunk = 1 << min(_CHUNK_BITS, n)
    for start in range(0, total, chunk):
        stop = min(start + chunk, total)
        bits = np.arange(start, stop, dtype=np.uint64)
        O = ((bits[:, None] >> cols[None, :]) & 1).astype(np.float64)
        probs[start:stop] = np.prod(np.where(O == 1.0, p, 1.0 - p), axis=1)
        values[start:stop] = estimator_values(kind, O, p_hat, e, e_hat)
    return values, probs


def exact_expectation(p, p_hat, e, e_hat, estimator_kind: str) -> float:
    """Exact E over indicators of the estimator, by full 2^n enumeration.

    ``p`` are the true observation propensities; each indicator is an
    independent Bernoulli(p) draw.
    """
    values, probs = _enumerate_values_probs(p, p_hat, e, e_hat, estimator_kind)
    return _exact_sum(values * probs)


def exact_moments(p, p_hat, e, e_hat, estimator_kind: str) -> tuple[float, float]:
    """Exact (mean, variance) of the estimator over indicator randomness."""
    values, probs = _enumerate_values_probs(p, p_hat, e, e_hat, estimator_kind)
    mean = _exact_sum(values * probs)
    var = _exact_sum(probs * (values - mean) ** 2)
    return mean, var


def sample_indicator_matrix(p, replicates: int, rng) -> np.ndarray:
    """Draw a (replicates, n) matrix of independent Bernoulli(p) indicators."""
    rng = np.random.default_rng(rng)
    p = np.asarray(p, dtype=np.float64)
    return (rng.random((int(replicates), p.size)) < p).astype(np.float64)


# ---------------------------------------------------------------------------
# Closed-form dominant terms and bounds
# ---------------------------------------------------------------------------


def _deviations(e, e_hat, mode: str) -> np.ndarray:
    """Deviation vector the SDR formulas are centered on.

    mode="deviation": e - e_hat (the usual error deviation).
    mode="error":     e itself (the variant used when the constraint fails
    and the imputed errors are inaccurate).
    """
    e = np.asarray(e, dtype=np.float64)
    if mode == "deviation":
        return e - np.asarray(e_hat, dtype=np.float64)
    if mode == "error":
        return e
    raise ValueError(f"unknown mode {mode!r}")


def sdr_bias_dominant(p, p_hat, e, e_hat, mode: str = "deviation") -> float:
    """Dominant bias term of SDR: |mean(d) - weighted mean(d)|.

    The weighted mean uses weights p / p_hat; d is the deviation vector for
    ``mode``.  Finite for arbitrarily small p_hat whenever p shrinks with it.
    """
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    d = _deviations(e, e_hat, mode)
    q = p / p_hat
    weighted = float(np.dot(q, d) / q.sum())
    return abs(float(np.mean(d)) - weighted)


def sdr_variance_dominant(p, p_hat, e, e_hat, mode: str = "deviation") -> float:
    """Dominant variance term of SDR.

    sum(p (1-p) h^2 / p_hat^2) / (sum(p / p_hat))^2 with h the deviation
    vector centered at its p/p_hat-weighted mean.
    """
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    d = _deviations(e, e_hat, mode)
    q = p / p_hat
    h = d - float(np.dot(q, d) / q.sum())
    num = float(np.sum(p * (1.0 - p) * h**2 / p_hat**2))
    return num / float(q.sum()) ** 2


def sdr_tail_bound(
    p,
    p_hat,
    e,
    e_hat,
    eta: float,
    mode: str = "deviation",
    return_details: bool = False,
):
    """High-probability bound on |SDR - E[SDR]| at confidence 1 - eta.

    Per pair, the bounded-difference denominator is
    1 + p_hat_i (sum_{j != i} p_j / p_hat_j - eps_i) with
    eps_i = sqrt(log(4/eta)/2 * sum_{j != i} 1 / p_hat_j^2).  At small
    universes the bracket can drop below 1; the denominator is then floored
    at 1, which is the all-observed worst case and keeps the bound valid
    (see the flag in the details).
    """
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    d = _deviations(e, e_hat, mode)
    d_min, d_max = float(d.min()), float(d.max())
    log_term = math.log(4.0 / eta)
    q_total = float(np.sum(p / p_hat))
    s2_total = float(np.sum(1.0 / p_hat**2))
    q_excl = q_total - p / p_hat
    s2_excl = np.maximum(s2_total - 1.0 / p_hat**2, 0.0)
    eps = np.sqrt(0.5 * log_term * s2_excl)
    bracket = 1.0 + p_hat * (q_excl - eps)
    floored = bool(np.any(bracket < 1.0))
    denom = np.maximum(bracket, 1.0)
    num = (d_max - d) ** 2 + (d - d_min) ** 2
    bound = math.sqrt(0.5 * log_term * float(np.sum(num / denom**2)))
    if return_details:
        return bound, {"bracket_floored": floored, "min_bracket": float(bracket.min())}
    return bound


def ips_dr_bias(p, p_hat, errs) -> float:
    """Exact bias of IPS/DR: |mean((p_hat - p) errs / p_hat)|.

    Pass errs = e for IPS and errs = e - e_hat for DR.
    """
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    errs = np.asarray(errs, dtype=np.float64)
    return abs(float(np.mean((p_hat - p) * errs / p_hat)))


def ips_dr_variance(p, p_hat, errs) -> float:
    """Exact variance of IPS/DR: n^-2 sum(p (1-p) errs^2 / p_hat^2)."""
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    errs = np.asarray(errs, dtype=np.float64)
    n = p.size
    return float(np.sum(p * (1.0 - p) * errs**2 / p_hat**2)) / n**2


def ips_dr_tail_bound(p_hat, errs, eta: float) -> float:
    """Hoeffding tail bound for IPS/DR: sqrt(log(2/eta)/(2 n^2) sum((errs/p_hat)^2))."""
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    p_hat = np.asarray(p_hat, dtype=np.float64)
    errs = np.asarray(errs, dtype=np.float64)
    n = p_hat.size
    return math.sqrt(
        math.log(2.0 / eta) / (2.0 * n**2) * float(np.sum((errs / p_hat) ** 2))
    )


def generalization_bound(error_vectors, p, p_hat, e_hat, eta: float):
    """Per-hypothesis upper bound on the true risk from the SDR estimate.

    ``error_vectors`` lists one full-universe error vector per candidate
    prediction model.  For each model the bound is

        SDR estimate + dominant bias term + uniform tail term,

    where the tail term uses log(4 |H| / eta) and the hypothesis maximizing
    the tail sum.  The SDR estimate itself depends on realized indicators, so
    each returned dict carries ``bound_offset`` (bias term + tail term) to be
    added to the realized SDR value of its model.
    """
    if len(error_vectors) == 0:
        raise ValueError("empty hypothesis list")
    if len(error_vectors) > 32:
        raise ValueError("hypothesis list capped at 32 models")
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    h_count = len(error_vectors)
    log_term = math.log(4.0 * h_count / eta)
    q_total = float(np.sum(p / p_hat))
    s2_total = float(np.sum(1.0 / p_hat**2))
    q_excl = q_total - p / p_hat
    s2_excl = np.maximum(s2_total - 1.0 / p_hat**2, 0.0)
    eps = np.sqrt(0.5 * log_term * s2_excl)
    denom = np.maximum(1.0 + p_hat * (q_excl - eps), 1.0)

    tail_sums = []
    for e in error_vectors:
        d = np.asarray(e, dtype=np.float64) - e_hat
        num = (d.max() - d) ** 2 + (d - d.min()) ** 2
        tail_sums.append(float(np.sum(num / denom**2)))
    worst = int(np.argmax(tail_sums))
    tail_term = math.sqrt(0.5 * log_term * tail_sums[worst])

    out = []
    for idx, e in enumerate(error_vectors):
        bias_term = sdr_bias_dominant(p, p_hat, e, e_hat, mode="deviation")
        out.append(
            {
                "hypothesis": idx,
                "bias_term": bias_term,
                "tail_term": tail_term,
                "bound_offset": bias_term + tail_term,
                "worst_hypothesis": worst,
            }
        )
    return out


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class TheoryReport:
    """Per-estimator record of empirical moments vs closed-form terms."""

    estimator: str
    sample_size: int
    replicates: int
    mode: str  # "exact-enumeration" or "monte-carlo" reference expectation
    eta: float
    seed: int
    empirical_bias: float
    empirical_variance: float
    formula_bias_dominant: float
    formula_variance_dominant: float
    tail_bound_value: float
    tail_exceedance_rate: float
    reference_expectation: float
    ideal_loss_value: float
    bracket_floored: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.tail_exceedance_rate <= 1.0:
            raise ValueError("exceedance rate must lie in [0, 1]")
        if self.mode == "exact-enumeration" and self.sample_size > ENUMERATION_CAP:
            raise ValueError("exact mode only valid up to the enumeration cap")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _formula_pair(kind, p, p_hat, e, e_hat, mode):
    e_arr = np.asarray(e, dtype=np.float64)
    delta = e_arr - np.asarray(e_hat, dtype=np.float64)
    if kind == "ips":
        return ips_dr_bias(p, p_hat, e_arr), ips_dr_variance(p, p_hat, e_arr)
    if kind == "dr":
        return ips_dr_bias(p, p_hat, delta), ips_dr_variance(p, p_hat, delta)
    if kind in ("sdr", "sdr-anchored"):
        return (
            sdr_bias_dominant(p, p_hat, e, e_hat, mode=mode),
            sdr_variance_dominant(p, p_hat, e, e_hat, mode=mode),
        )
    if kind == "eib":
        # EIB bias is exactly |mean((1 - p) delta)|; no tail formula is kept.
        p_arr = np.asarray(p, dtype=np.float64)
        bias = abs(float(np.mean((1.0 - p_arr) * delta)))
        var = float(np.sum(p_arr * (1.0 - p_arr) * delta**2)) / p_arr.size**2
        return bias, var
    raise ValueError(f"no formula set for estimator kind {kind!r}")


def _tail_bound_for(kind, p, p_hat, e, e_hat, eta, mode):
    e_arr = np.asarray(e, dtype=np.float64)
    delta = e_arr - np.asarray(e_hat, dtype=np.float64)
    if kind == "ips":
        return ips_dr_tail_bound(p_hat, e_arr, eta), False
    if kind in ("dr", "eib"):
        return ips_dr_tail_bound(p_hat, delta, eta), False
    bound, details = sdr_tail_bound(
        p, p_hat, e, e_hat, eta, mode=mode, return_details=True
    )
    return bound, details["bracket_floored"]


def monte_carlo_report(
    p,
    p_hat,
    e,
    e_hat,
    estimator_kind: str,
    replicates: int = 100_000,
    eta: float = 0.1,
    seed: int = 0,
    mode: str = "deviation",
    reference_replicates: int = 10_000_000,
) -> TheoryReport:
    """Monte Carlo check of one estimator against its closed-form terms.

    Draws ``replicates`` indicator vectors, compares the empirical bias and
    variance with the dominant-term formulas, and reports the fraction of
    replicates whose deviation from the reference expectation exceeds the
    tail bound at confidence eta.  The reference expectation comes from
    exact enumeration when the universe fits under the cap, otherwise from
    an independent high-replicate Monte Carlo stream.
    """
    if replicates < 1_000:
        raise ValueError("at least 1000 replicates required")
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    rng = np.random.default_rng(seed)
    O = sample_indicator_matrix(p, replicates, rng)
    values = estimator_values(estimator_kind, O, p_hat, e, e_hat)
    if n <= ENUMERATION_CAP:
        ref = exact_expectation(p, p_hat, e, e_hat, estimator_kind)
        ref_mode = "exact-enumeration"
    else:
        ref_chunks = []
        remaining = int(reference_replicates)
        while remaining > 0:
            take = min(remaining, 1 << 20)
            O_ref = sample_indicator_matrix(p, take, rng)
            ref_chunks.append(
                float(np.sum(estimator_values(estimator_kind, O_ref, p_hat, e, e_hat)))
            )
            remaining -= take
        ref = math.fsum(ref_chunks) / reference_replicates
        ref_mode = "monte-carlo"
    ideal = ideal_loss(e)  # oracle setting: e is defined on all of D
    bias = float(np.mean(values)) - ideal
    variance = float(np.var(values))
    f_bias, f_var = _formula_pair(estimator_kind, p, p_hat, e, e_hat, mode)
    bound, floored = _tail_bound_for(estimator_kind, p, p_hat, e, e_hat, eta, mode)
    exceed = float(np.mean(np.abs(values - ref) > bound))
    return TheoryReport(
        estimator=estimator_kind,
        sample_size=int(n),
        replicates=int(replicates),
        mode=ref_mode,
        eta=float(eta),
        seed=int(seed),
        empirical_bias=bias,
        empirical_variance=variance,
        formula_bias_dominant=f_bias,
        formula_variance_dominant=f_var,
        tail_bound_value=bound,
        tail_exceedance_rate=exceed,
        reference_expectation=float(ref),
        ideal_loss_value=float(ideal),
        bracket_floored=floored,
    )
