"""Trainable scoring models and a deterministic adaptive-moment optimizer.

One embedding-based factor model serves three roles: rating prediction,
error imputation (as a pseudo-labeling model), and, through its frozen
embeddings, the feature source of the logistic propensity head.  The Naive
Bayes propensity model has a single trainable scalar, the Laplace smoothing
coefficient.

Every model exposes ``params()`` as a dict of live tensors plus a
``*_with_grad`` method returning the forward values and a backprop closure,
so the training losses can assemble exact analytic gradients without an
autograd framework.  Propensity outputs are floored at PROPENSITY_FLOOR so
downstream inverse weights stay finite; the theory lab never goes through
these models and keeps its propensities unclipped.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "PROPENSITY_FLOOR",
    "CHECKPOINT_VERSION",
    "FactorModel",
    "NaiveBayesPropensity",
    "LogisticPropensity",
    "UndefinedProbabilityError",
    "Adam",
    "adam_step",
    "sigmoid",
    "softplus",
    "cross_entropy_from_scores",
    "finite_difference_grad",
    "save_checkpoint",
    "load_checkpoint",
]

PROPENSITY_FLOOR = 1e-6
CHECKPOINT_VERSION = 1


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def cross_entropy_from_scores(targets: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """CE(target, sigmoid(score)) in a form stable for large |score|."""
    return softplus(scores) - np.asarray(targets, dtype=np.float64) * scores


@dataclass
class FactorModel:
    """Embedding scoring model: <e_u, e_i> + b_u + b_i + b0 through a link."""

    user_emb: np.ndarray
    item_emb: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: np.ndarray  # shape (1,)
    link: str = "sigmoid"

    @classmethod
    def init(
        cls,
        num_users: int,
        num_items: int,
        dim: int,
        link: str = "sigmoid",
        seed: int = 0,
        scale: float = 0.01,
    ) -> "FactorModel":
        # small-scale uniform init keeps sigmoid outputs near 0.5 at start
        rng = np.random.default_rng(seed)
        return cls(
            user_emb=rng.uniform(-scale, scale, size=(num_users, dim)),
            item_emb=rng.uniform(-scale, scale, size=(num_items, dim)),
            user_bias=np.zeros(num_users),
            item_bias=np.zeros(num_items),
            global_bias=np.zeros(1),
            link=link,
        )

    @property
    def num_users(self) -> int:
        return int(self.user_emb.shape[0])

    @property
    def num_items(self) -> int:
        return int(self.item_emb.shape[0])

    def params(self) -> dict[str, np.ndarray]:
        return {
            "user_emb": self.user_emb,
            "item_emb": self.item_emb,
            "user_bias": self.user_bias,
            "item_bias": self.item_bias,
            "global_bias": self.global_bias,
        }

    def raw_scores(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        return (
            np.sum(self.user_emb[users] * self.item_emb[items], axis=1)
            + self.user_bias[users]
            + self.item_bias[items]
            + self.global_bias[0]
        )

    def scores(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        raw = self.raw_scores(users, items)
        if self.link == "sigmoid":
            return sigmoid(raw)
        if self.link == "identity":
            return raw
        raise ValueError(f"unknown link {self.link!r}")

    def scores_with_grad(self, users: np.ndarray, items: np.ndarray):
        """Raw scores plus a closure mapping d(loss)/d(score) to param grads."""
        users = np.asarray(users)
        items = np.asarray(items)
        u_emb = self.user_emb[users]
        i_emb = self.item_emb[items]
        raw = (
            np.sum(u_emb * i_emb, axis=1)
            + self.user_bias[users]
            + self.item_bias[items]
            + self.global_bias[0]
        )

        def backprop(d_score: np.ndarray) -> dict[str, np.ndarray]:
            d_score = np.asarray(d_score, dtype=np.float64)
            g = {name: np.zeros_like(t) for name, t in self.params().items()}
            np.add.at(g["user_emb"], users, d_score[:, None] * i_emb)
            np.add.at(g["item_emb"], items, d_score[:, None] * u_emb)
            np.add.at(g["user_bias"], users, d_score)
            np.add.at(g["item_bias"], items, d_score)
            g["global_bias"][0] = d_score.sum()
            return g

        return raw, backprop

    def copy(self) -> "FactorModel":
        return FactorModel(
            user_emb=self.user_emb.copy(),
            item_emb=self.item_emb.copy(),
            user_bias=self.user_bias.copy(),
            item_bias=self.item_bias.copy(),
            global_bias=self.global_bias.copy(),
            link=self.link,
        )


class UndefinedProbabilityError(ValueError):
    """Naive Bayes propensity undefined: empty histogram with zero smoothing."""


@dataclass
class NaiveBayesPropensity:
    """Rating-conditional observation probability with Laplace smoothing.

    propensity(r) = P(r | o=1) * P(o=1) / P(r), with both histogram
    probabilities smoothed as (count + alpha) / (total + alpha * V) and P(r)
    estimated from a small missing-at-random sample.  ``laplace_alpha`` is
    the one trainable parameter; its gradient is analytic.
    """

    values: np.ndarray  # sorted rating values
    counts_observed: np.ndarray
    counts_mar: np.ndarray
    marginal_rate: float
    laplace_alpha: float = 0.0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.counts_observed = np.asarray(self.counts_observed, dtype=np.float64)
        self.counts_mar = np.asarray(self.counts_mar, dtype=np.float64)
        if self.laplace_alpha < 0.0:
            raise ValueError("laplace_alpha must be >= 0")
        if not 0.0 < self.marginal_rate <= 1.0:
            raise ValueError("marginal observation rate must lie in (0, 1]")
        if np.any(np.diff(self.values) <= 0):
            raise ValueError("rating values must be strictly increasing")

    @classmethod
    def fit(
        cls,
        counts_observed,
        counts_mar,
        marginal_rate: float,
        values=(1, 2, 3, 4, 5),
        laplace_alpha: float = 0.0,
    ) -> "NaiveBayesPropensity":
        return cls(
            values=np.asarray(values, dtype=np.float64),
            counts_observed=np.asarray(counts_observed, dtype=np.float64),
            counts_mar=np.asarray(counts_mar, dtype=np.float64),
            marginal_rate=float(marginal_rate),
            laplace_alpha=float(laplace_alpha),
        )

    @classmethod
    def from_interactions(
        cls, data, mar_fraction: float = 0.05, seed: int = 0, laplace_alpha: float = 0.0
    ) -> "NaiveBayesPropensity":
        """Histogram the observed ratings and a seeded MAR subsample."""
        _, _, ratings, _ = data.observed_arrays()
        if data.mar_rating is None:
            raise ValueError("dataset has no MAR split to estimate P(r) from")
        rng = np.random.default_rng(seed)
        take = max(1, int(round(mar_fraction * data.mar_rating.size)))
        idx = rng.choice(data.mar_rating.size, size=take, replace=False)
        mar_sample = data.mar_rating[idx]
        values = np.asarray(_default_values(), dtype=np.float64)
        counts_obs = np.array([(ratings == v).sum() for v in values], dtype=np.float64)
        counts_mar = np.array(
            [(mar_sample == v).sum() for v in values], dtype=np.float64
        )
        return cls(
            values=values,
            counts_observed=counts_obs,
            counts_mar=counts_mar,
            marginal_rate=data.n_observed / data.universe_size,
            laplace_alpha=laplace_alpha,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {"laplace_alpha": np.atleast_1d(np.float64(self.laplace_alpha))}

    def set_alpha(self, alpha: float) -> None:
        self.laplace_alpha = max(0.0, float(alpha))

    def _smoothed(self, counts: np.ndarray, alpha: float):
        total = counts.sum()
        V = counts.size
        if total == 0.0 and alpha == 0.0:
            raise UndefinedProbabilityError(
                "empty histogram with zero Laplace smoothing"
            )
        prob = (counts + alpha) / (total + alpha * V)
        d_alpha = (total - counts * V) / (total + alpha * V) ** 2
        return prob, d_alpha

    def per_value_propensity(self, with_grad: bool = False):
        """Propensity and d/d(alpha) for each rating value, clipped to (0, 1].

        A rating value with an empty MAR histogram cell at alpha = 0 has an
        undefined Bayes ratio; it clips to 1 (the finite-sample estimate says
        the value should not exist unobserved, yet it was observed).
        """
        alpha = self.laplace_alpha
        cond, d_cond = self._smoothed(self.counts_observed, alpha)
        marg, d_marg = self._smoothed(self.counts_mar, alpha)
        empty = marg == 0.0
        safe_marg = np.where(empty, 1.0, marg)
        raw = np.where(empty, np.inf, self.marginal_rate * cond / safe_marg)
        grad = self.marginal_rate * (d_cond * safe_marg - cond * d_marg) / safe_marg**2
        clipped = np.clip(raw, PROPENSITY_FLOOR, 1.0)
        grad = np.where((raw > PROPENSITY_FLOOR) & (raw < 1.0) & ~empty, grad, 0.0)
        if with_grad:
            return clipped, grad
        return clipped

    def propensity_for_value(self, rating: float) -> float:
        idx = int(np.flatnonzero(self.values == float(rating))[0])
        return float(self.per_value_propensity()[idx])

    def propensity_with_grad(self, users, items, ratings):
        """Per-pair propensities plus the alpha backprop closure.

        Pairs with a NaN rating (unobserved) get the MAR-marginalized
        propensity sum_v P(v) * propensity(v), which stays differentiable in
        alpha.
        """
        ratings = np.asarray(ratings, dtype=np.float64)
        per_value, per_value_grad = self.per_value_propensity(with_grad=True)
        marg, d_marg = self._smoothed(self.counts_mar, self.laplace_alpha)
        marginal_pi = float(np.dot(marg, per_value))
        marginal_grad = float(np.dot(d_marg, per_value) + np.dot(marg, per_value_grad))
        pi = np.full(ratings.size, marginal_pi)
        dpi = np.full(ratings.size, marginal_grad)
        known = np.isfinite(ratings)
        if known.any():
            idx = np.searchsorted(self.values, ratings[known])
            idx = np.clip(idx, 0, self.values.size - 1)
            if not np.all(self.values[idx] == ratings[known]):
                raise ValueError("rating outside the declared value set")
            pi[known] = per_value[idx]
            dpi[known] = per_value_grad[idx]

        def backprop(d_pi: np.ndarray) -> dict[str, np.ndarray]:
            return {"laplace_alpha": np.atleast_1d(float(np.dot(d_pi, dpi)))}

        return pi, backprop

    def propensities(self, users, items, ratings) -> np.ndarray:
        pi, _ = self.propensity_with_grad(users, items, ratings)
        return pi


def _default_values():
    return (1.0, 2.0, 3.0, 4.0, 5.0)


@dataclass
class LogisticPropensity:
    """Affine head on frozen per-user/per-item features, sigmoid output."""

    user_features: np.ndarray
    item_features: np.ndarray
    weight: np.ndarray
    bias: np.ndarray  # shape (1,)

    @classmethod
    def init(
        cls, user_features: np.ndarray, item_features: np.ndarray, seed: int = 0
    ) -> "LogisticPropensity":
        rng = np.random.default_rng(seed)
        dim = user_features.shape[1] + item_features.shape[1]
        return cls(
            user_features=np.asarray(user_features, dtype=np.float64),
            item_features=np.asarray(item_features, dtype=np.float64),
            weight=rng.uniform(-0.01, 0.01, size=dim),
            bias=np.zeros(1),
        )

    @classmethod
    def from_factor_model(cls, model: FactorModel, seed: int = 0) -> "LogisticPropensity":
        """Use frozen pretrained embeddings (plus their biases) as features."""
        return cls.init(
            user_features=np.hstack([model.user_emb, model.user_bias[:, None]]),
            item_features=np.hstack([model.item_emb, model.item_bias[:, None]]),
            seed=seed,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def _features(self, users, items) -> np.ndarray:
        return np.hstack(
            [self.user_features[np.asarray(users)], self.item_features[np.asarray(items)]]
        )

    def propensity_with_grad(self, users, items, ratings=None):
        x = self._features(users, items)
        raw = sigmoid(x @ self.weight + self.bias[0])
        pi = np.clip(raw, PROPENSITY_FLOOR, 1.0)
        # zero slope where the floor clips, matching the projected output
        slope = np.where(raw > PROPENSITY_FLOOR, raw * (1.0 - raw), 0.0)

        def backprop(d_pi: np.ndarray) -> dict[str, np.ndarray]:
            d_score = np.asarray(d_pi, dtype=np.float64) * slope
            return {"weight": x.T @ d_score, "bias": np.atleast_1d(d_score.sum())}

        return pi, backprop

    def propensities(self, users, items, ratings=None) -> np.ndarray:
        pi, _ = self.propensity_with_grad(users, items)
        return pi


class Adam:
    """Deterministic adaptive-moment optimizer over named parameter tensors."""

    def __init__(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(
        self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
    ) -> dict[str, np.ndarray]:
        """One update in place; unknown or mis-shaped gradients are errors."""
        self.step_count += 1
        t = self.step_count
        for name, g in grads.items():
            if name not in params:
                raise ValueError(f"gradient for unknown parameter {name!r}")
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: param {p.shape}, grad {g.shape}"
                )
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g**2
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def adam_step(
    state: Adam, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Functional form of :meth:`Adam.step`."""
    return state.step(params, grads)


def finite_difference_grad(fn, params: dict[str, np.ndarray], step: float = 1e-5):
    """Central finite differences of ``fn()`` w.r.t. every tensor entry."""
    grads = {}
    for name, tensor in params.items():
        g = np.zeros_like(tensor)
        flat = tensor.ravel()
        g_flat = g.ravel()
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up = fn()
            flat[i] = original - step
            down = fn()
            flat[i] = original
            g_flat[i] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def save_checkpoint(path: str | Path, model: FactorModel, config_hash: str) -> None:
    """Versioned tensor dump with enough metadata to reject a bad load."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "num_users": model.num_users,
        "num_items": model.num_items,
        "dim": int(model.user_emb.shape[1]),
        "link": model.link,
        "config_hash": config_hash,
    }
    np.savez(
        path,
        meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
        **{name: t for name, t in model.params().items()},
    )


def load_checkpoint(
    path: str | Path, expect_shape: tuple[int, int] | None = None
) -> tuple[FactorModel, dict]:
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        model = FactorModel(
            user_emb=archive["user_emb"],
            item_emb=archive["item_emb"],
            user_bias=archive["user_bias"],
            item_bias=archive["item_bias"],
            global_bias=archive["global_bias"],
            link=meta["link"],
        )
    if (model.num_users, model.num_items) != (meta["num_users"], meta["num_items"]):
        raise ValueError("checkpoint tensors disagree with their metadata")
    if expect_shape is not None and (model.num_users, model.num_items) != tuple(
        expect_shape
    ):
        raise ValueError(
            f"checkpoint shape {(model.num_users, model.num_items)} does not match "
            f"expected {tuple(expect_shape)}"
        )
    return model, meta


def config_hash_of(mapping: dict) -> str:
    canon = json.dumps(mapping, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]
