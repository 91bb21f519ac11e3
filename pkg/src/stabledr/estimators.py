"""Pure estimator kernels over aligned per-pair vectors.

Every kernel consumes :class:`EstimatorInputs`: an observation indicator
vector ``o`` over the pair universe, strictly positive estimated
propensities ``p_hat``, prediction errors ``e`` (defined wherever
``o == 1``) and imputed errors ``e_hat`` (defined everywhere).  Kernels are
pure functions, permutation-invariant, and never clip propensities --
callers choose floors, and the theory oracles deliberately feed extreme
values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateDenominatorError",
    "EstimatorInputs",
    "EstimateValue",
    "ideal_loss",
    "estimate_ips",
    "estimate_snips",
    "estimate_dr",
    "estimate_eib",
    "estimate_sdr",
    "estimate_sdr_anchored",
    "constraint_residual",
    "sdr_violation_identity_check",
]


class DegenerateDenominatorError(ValueError):
    """Raised when a check requires sum(o / p_hat) > 0 and it is zero."""


def _vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-d vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class EstimatorInputs:
    """Aligned vectors over the pair universe D, the common currency of all
    estimator kernels.

    ``e`` only needs to hold finite values where ``o == 1``; entries at
    unobserved pairs are ignored (NaN is fine there).  ``p_true`` is optional
    and only consumed by oracle code.
    """

    o: np.ndarray
    p_hat: np.ndarray
    e: np.ndarray
    e_hat: np.ndarray
    p_true: np.ndarray | None = None

    def __post_init__(self) -> None:
        o = _vector(self.o, "o")
        p_hat = _vector(self.p_hat, "p_hat")
        e = _vector(self.e, "e")
        e_hat = _vector(self.e_hat, "e_hat")
        n = o.size
        if not (p_hat.size == e.size == e_hat.size == n):
            raise ValueError("o, p_hat, e, e_hat must share one length")
        if not np.all((o == 0.0) | (o == 1.0)):
            raise ValueError("o must be a 0/1 indicator vector")
        if not np.all(p_hat > 0.0):
            raise ValueError("p_hat must be strictly positive everywhere")
        if not np.all(np.isfinite(e[o == 1.0])):
            raise ValueError("e must be finite wherever o == 1")
        if not np.all(np.isfinite(e_hat)):
            raise ValueError("e_hat must be finite everywhere")
        object.__setattr__(self, "o", o)
        object.__setattr__(self, "p_hat", p_hat)
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "e_hat", e_hat)
        if self.p_true is not None:
            p_true = _vector(self.p_true, "p_true")
            if p_true.size != n:
                raise ValueError("p_true length mismatch")
            object.__setattr__(self, "p_true", p_true)

    @property
    def n(self) -> int:
        return int(self.o.size)

    @property
    def e_filled(self) -> np.ndarray:
        """e with unobserved entries replaced by 0 so that o*e is NaN-safe."""
        return np.where(self.o == 1.0, self.e, 0.0)


@dataclass(frozen=True)
class EstimateValue:
    """An estimate plus the self-normalization bookkeeping around it."""

    value: float
    effective_weight_sum: float  # sum of o / p_hat
    degenerate: bool = False


def ideal_loss(e) -> float:
    """Average error over the full pair universe (oracle settings only)."""
    return float(np.mean(_vector(e, "e")))


def estimate_ips(inputs: EstimatorInputs) -> EstimateValue:
    """Inverse-propensity-scored loss: mean of o * e / p_hat over D.

    Unbounded by design when p_hat -> 0 on an observed pair.
    """
    w = inputs.o / inputs.p_hat
    value = float(np.mean(w * inputs.e_filled))
    return EstimateValue(value=value, effective_weight_sum=float(w.sum()))


def _self_normalized(inputs: EstimatorInputs) -> EstimateValue:
    w = inputs.o / inputs.p_hat
    weight_sum = float(w.sum())
    if weight_sum == 0.0:
        return EstimateValue(
            value=float(np.mean(inputs.e_hat)),
            effective_weight_sum=0.0,
            degenerate=True,
        )
    value = float(np.dot(w, inputs.e_filled) / weight_sum)
    return EstimateValue(value=value, effective_weight_sum=weight_sum)


def estimate_snips(inputs: EstimatorInputs) -> EstimateValue:
    """Self-normalized IPS: sum(o e / p_hat) / sum(o / p_hat).

    Falls back to mean(e_hat) with the degenerate flag set when no pair is
    observed.  Always lies in [min_O e, max_O e].
    """
    return _self_normalized(inputs)


def estimate_dr(inputs: EstimatorInputs) -> EstimateValue:
    """Doubly robust loss: mean of e_hat + o (e - e_hat) / p_hat over D."""
    correction = inputs.o * (inputs.e_filled - inputs.e_hat) / inputs.p_hat
    value = float(np.mean(inputs.e_hat + correction))
    return EstimateValue(
        value=value, effective_weight_sum=float((inputs.o / inputs.p_hat).sum())
    )


def estimate_eib(inputs: EstimatorInputs) -> EstimateValue:
    """Error-imputation-based loss: mean of o e + (1 - o) e_hat over D."""
    value = float(
        np.mean(inputs.o * inputs.e_filled + (1.0 - inputs.o) * inputs.e_hat)
    )
    return EstimateValue(
        value=value, effective_weight_sum=float((inputs.o / inputs.p_hat).sum())
    )


def estimate_sdr(inputs: EstimatorInputs) -> EstimateValue:
    """Stabilized doubly robust loss.

    Same self-normalized form as SNIPS; the name marks inputs whose
    propensities were trained under the stabilization constraint (see
    :func:`constraint_residual`).  The kernel itself does not check the
    constraint.
    """
    return _self_normalized(inputs)


def estimate_sdr_anchored(inputs: EstimatorInputs) -> EstimateValue:
    """SDR through its constraint-exact decomposition.

    Value = mean(e_hat) + sum(o (e - e_hat) / p_hat) / sum(o / p_hat).
    Equals :func:`estimate_sdr` whenever the stabilization residual is zero
    at the realized indicators; the closed-form bias/variance/tail formulas
    in the theory module characterize exactly this form.  Degenerate inputs
    fall back to mean(e_hat).
    """
    w = inputs.o / inputs.p_hat
    weight_sum = float(w.sum())
    anchor = float(np.mean(inputs.e_hat))
    if weight_sum == 0.0:
        return EstimateValue(value=anchor, effective_weight_sum=0.0, degenerate=True)
    shift = float(np.dot(w, inputs.e_filled - inputs.e_hat) / weight_sum)
    return EstimateValue(value=anchor + shift, effective_weight_sum=weight_sum)


def constraint_residual(inputs: EstimatorInputs) -> float:
    """Sample residual of the stabilization constraint.

    residual = mean over D of (o / p_hat) (e_hat - mean(e_hat)), recomputed
    from the current e_hat vector.  Zero iff the constraint holds exactly on
    this sample.
    """
    e_hat_mean = float(np.mean(inputs.e_hat))
    return float(np.mean((inputs.o / inputs.p_hat) * (inputs.e_hat - e_hat_mean)))


def sdr_violation_identity_check(inputs: EstimatorInputs) -> float:
    """Numeric check of the exact violation identity for accurate imputation.

    When e_hat == e on all of D, the SDR value satisfies

        E_sdr = ideal_loss(e) + residual / mean(o / p_hat)

    for any indicators and propensities, so the size of the constraint
    violation pins down the deviation from the ideal loss exactly.  Returns
    the absolute difference between the two sides (<= 1e-12 up to float
    noise).  Raises :class:`DegenerateDenominatorError` when nothing is
    observed.
    """
    if not np.all(np.isfinite(inputs.e)):
        raise ValueError("identity check needs e defined on all of D")
    if not np.allclose(inputs.e, inputs.e_hat, rtol=0.0, atol=0.0):
        raise ValueError("identity check requires e_hat == e exactly")
    weight_mean = float(np.mean(inputs.o / inputs.p_hat))
    if weight_mean == 0.0:
        raise DegenerateDenominatorError("sum(o / p_hat) is zero")
    residual = constraint_residual(inputs)
    predicted = ideal_loss(inputs.e) + residual / weight_mean
    return abs(estimate_sdr(inputs).value - predicted)
