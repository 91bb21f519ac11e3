"""Dataset representation, file ingestion, and synthetic MNAR worlds.

Two on-disk formats are supported: whitespace-separated integer rating
matrices with 0 meaning missing (one row per user), and "user item rating"
triples with configurable 0- or 1-based indexing.  Synthetic worlds carry
fully known ground truth (ratings, propensities) so oracle studies can score
any estimator exactly.

Pair ordering is row-major (user-major) everywhere; every vector over the
full pair universe shares this ordering.  All containers are immutable after
construction; indicator sampling takes an explicit per-replicate stream so
replicates can run in parallel without shared state.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "DataFormatError",
    "InteractionSet",
    "SyntheticWorld",
    "SyntheticWorldConfig",
    "FeatureTable",
    "DEFAULT_THRESHOLD",
    "load_ascii_matrix_dataset",
    "write_ascii_matrix_dataset",
    "load_triple_dataset",
    "generate_synthetic_world",
    "sample_indicators",
    "world_to_interaction_set",
]

DEFAULT_THRESHOLD = 4.0
_RATING_VALUES = (1, 2, 3, 4, 5)


class DataFormatError(ValueError):
    """Malformed dataset file; message carries the offending location."""


def _encode_pairs(users: np.ndarray, items: np.ndarray, num_items: int) -> np.ndarray:
    return users.astype(np.int64) * num_items + items.astype(np.int64)


@dataclass(frozen=True)
class InteractionSet:
    """Indexed user-item pairs with indicators, ratings, and binary labels.

    ``pairs`` may span the full universe (row-major) or only a subset, e.g.
    the observed pairs of a large triple-format dataset.  ``rating`` and
    ``label`` are NaN exactly where ``observed == 0``.  ``mar_*`` hold an
    optional held-out missing-at-random test split, disjoint from the
    observed training pairs.
    """

    num_users: int
    num_items: int
    pairs: np.ndarray  # (n, 2) int64
    observed: np.ndarray  # (n,) float64 in {0, 1}
    rating: np.ndarray  # (n,) float64, NaN where unobserved
    label: np.ndarray  # (n,) float64, NaN where unobserved
    threshold: float = DEFAULT_THRESHOLD
    mar_pairs: np.ndarray | None = None
    mar_rating: np.ndarray | None = None
    mar_label: np.ndarray | None = None

    def __post_init__(self) -> None:
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        observed = np.asarray(self.observed, dtype=np.float64)
        rating = np.asarray(self.rating, dtype=np.float64)
        label = np.asarray(self.label, dtype=np.float64)
        n = pairs.shape[0]
        if not (observed.size == rating.size == label.size == n):
            raise ValueError("pairs, observed, rating, label lengths differ")
        if n and (
            pairs.min() < 0
            or pairs[:, 0].max() >= self.num_users
            or pairs[:, 1].max() >= self.num_items
        ):
            raise ValueError("pair index outside the declared universe")
        if not np.all((observed == 0.0) | (observed == 1.0)):
            raise ValueError("observed must be a 0/1 indicator")
        obs = observed == 1.0
        if not np.all(np.isfinite(rating[obs])) or np.any(np.isfinite(rating[~obs])):
            raise ValueError("rating must be present iff observed == 1")
        expect = (rating[obs] >= self.threshold).astype(np.float64)
        if not np.array_equal(label[obs], expect) or np.any(np.isfinite(label[~obs])):
            raise ValueError("label must equal (rating >= threshold) where observed")
        codes = _encode_pairs(pairs[:, 0], pairs[:, 1], self.num_items)
        if np.unique(codes).size != n:
            raise ValueError("duplicate pairs within the split")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "rating", rating)
        object.__setattr__(self, "label", label)
        if self.mar_pairs is not None:
            mar_pairs = np.asarray(self.mar_pairs, dtype=np.int64).reshape(-1, 2)
            mar_rating = np.asarray(self.mar_rating, dtype=np.float64)
            mar_label = (mar_rating >= self.threshold).astype(np.float64)
            mar_codes = _encode_pairs(mar_pairs[:, 0], mar_pairs[:, 1], self.num_items)
            if np.unique(mar_codes).size != mar_codes.size:
                raise ValueError("duplicate pairs within the MAR split")
            if np.intersect1d(mar_codes, codes[obs]).size:
                raise ValueError("MAR split overlaps observed training pairs")
            object.__setattr__(self, "mar_pairs", mar_pairs)
            object.__setattr__(self, "mar_rating", mar_rating)
            object.__setattr__(self, "mar_label", mar_label)

    @property
    def n_pairs(self) -> int:
        return int(self.pairs.shape[0])

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())

    @property
    def universe_size(self) -> int:
        return self.num_users * self.num_items

    @property
    def spans_full_universe(self) -> bool:
        return self.n_pairs == self.universe_size

    def observed_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(users, items, ratings, labels) restricted to observed pairs."""
        mask = self.observed == 1.0
        return (
            self.pairs[mask, 0],
            self.pairs[mask, 1],
            self.rating[mask],
            self.label[mask],
        )

    @cached_property
    def observed_matrix(self) -> np.ndarray:
        mat = np.zeros((self.num_users, self.num_items), dtype=bool)
        users, items, _, _ = self.observed_arrays()
        mat[users, items] = True
        return mat

    @cached_property
    def label_matrix(self) -> np.ndarray:
        mat = np.full((self.num_users, self.num_items), np.nan, dtype=np.float32)
        users, items, _, labels = self.observed_arrays()
        mat[users, items] = labels
        return mat

    @cached_property
    def rating_matrix(self) -> np.ndarray:
        mat = np.full((self.num_users, self.num_items), np.nan, dtype=np.float32)
        users, items, ratings, _ = self.observed_arrays()
        mat[users, items] = ratings
        return mat


def _parse_int_matrix(path: str | Path) -> np.ndarray:
    path = Path(path)
    rows: list[list[int]] = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            row = []
            for col, tok in enumerate(tokens):
                try:
                    value = int(tok)
                except ValueError:
                    raise DataFormatError(
                        f"{path}: non-integer cell {tok!r} at row {line_no}, column {col + 1}"
                    ) from None
                if value not in (0, *_RATING_VALUES):
                    raise DataFormatError(
                        f"{path}: rating {value} outside 0..5 at row {line_no}, column {col + 1}"
                    )
                row.append(value)
            if rows and len(row) != len(rows[0]):
                raise DataFormatError(
                    f"{path}: row {line_no} has {len(row)} columns, expected {len(rows[0])}"
                )
            rows.append(row)
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    return np.asarray(rows, dtype=np.int64)


def load_ascii_matrix_dataset(
    train_path: str | Path,
    test_path: str | Path,
    threshold: float = DEFAULT_THRESHOLD,
) -> InteractionSet:
    """Load a matrix-format dataset (one row per user, 0 = missing).

    The train matrix provides the observed MNAR ratings; nonzeros of the
    test matrix become the MAR test split.  Both matrices must agree on
    dimensions, and their nonzero cells must not overlap.
    """
    train = _parse_int_matrix(train_path)
    test = _parse_int_matrix(test_path)
    if train.shape != test.shape:
        raise DataFormatError(
            f"dimension mismatch: train {train.shape} vs test {test.shape}"
        )
    num_users, num_items = train.shape
    users, items = np.meshgrid(
        np.arange(num_users), np.arange(num_items), indexing="ij"
    )
    pairs = np.column_stack([users.ravel(), items.ravel()])
    flat = train.ravel().astype(np.float64)
    observed = (flat > 0).astype(np.float64)
    rating = np.where(flat > 0, flat, np.nan)
    label = np.where(flat > 0, (flat >= threshold).astype(np.float64), np.nan)
    mar_users, mar_items = np.nonzero(test)
    return InteractionSet(
        num_users=num_users,
        num_items=num_items,
        pairs=pairs,
        observed=observed,
        rating=rating,
        label=label,
        threshold=threshold,
        mar_pairs=np.column_stack([mar_users, mar_items]),
        mar_rating=test[mar_users, mar_items].astype(np.float64),
        mar_label=None,
    )


def write_ascii_matrix_dataset(
    data: InteractionSet, train_path: str | Path, test_path: str | Path
) -> None:
    """Write a full-universe InteractionSet back to matrix format."""
    if not data.spans_full_universe:
        raise ValueError("matrix format requires a full-universe InteractionSet")
    train = np.where(data.observed == 1.0, np.nan_to_num(data.rating), 0.0)
    train = train.reshape(data.num_users, data.num_items).astype(np.int64)
    test = np.zeros((data.num_users, data.num_items), dtype=np.int64)
    if data.mar_pairs is not None:
        test[data.mar_pairs[:, 0], data.mar_pairs[:, 1]] = data.mar_rating.astype(
            np.int64
        )
    for path, mat in ((train_path, train), (test_path, test)):
        with open(path, "w") as fh:
            for row in mat:
                fh.write(" ".join(str(v) for v in row) + "\n")


def load_triple_dataset(
    path: str | Path,
    threshold: float = DEFAULT_THRESHOLD,
    mar_path: str | Path | None = None,
    index_base: int = 0,
    num_users: int | None = None,
    num_items: int | None = None,
) -> InteractionSet:
    """Load "user item rating" triples; optionally a MAR test triple file.

    ``index_base`` declares whether indices in the file start at 0 or 1.
    Duplicate (user, item) lines are rejected with their line number.
    """

    def parse(p: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        users, items, ratings = [], [], []
        seen: set[tuple[int, int]] = set()
        with open(p) as fh:
            for line_no, line in enumerate(fh, start=1):
                tokens = line.split()
                if not tokens:
                    continue
                if len(tokens) != 3:
                    raise DataFormatError(
                        f"{p}: line {line_no} has {len(tokens)} fields, expected 3"
                    )
                try:
                    u, i, r = (int(t) for t in tokens)
                except ValueError:
                    raise DataFormatError(
                        f"{p}: line {line_no} is not three integers: {line.strip()!r}"
                    ) from None
                u -= index_base
                i -= index_base
                if u < 0 or i < 0:
                    raise DataFormatError(
                        f"{p}: line {line_no} index below declared base {index_base}"
                    )
                if r < 1:
                    raise DataFormatError(
                        f"{p}: line {line_no} rating {r} must be >= 1"
                    )
                if (u, i) in seen:
                    raise DataFormatError(f"{p}: duplicate pair at line {line_no}")
                seen.add((u, i))
                users.append(u)
                items.append(i)
                ratings.append(r)
        if not users:
            raise DataFormatError(f"{p}: empty file")
        return (
            np.asarray(users, dtype=np.int64),
            np.asarray(items, dtype=np.int64),
            np.asarray(ratings, dtype=np.float64),
        )

    users, items, ratings = parse(path)
    mar = parse(mar_path) if mar_path is not None else None
    inferred_users = int(users.max()) + 1
    inferred_items = int(items.max()) + 1
    if mar is not None:
        inferred_users = max(inferred_users, int(mar[0].max()) + 1)
        inferred_items = max(inferred_items, int(mar[1].max()) + 1)
    num_users = num_users or inferred_users
    num_items = num_items or inferred_items
    return InteractionSet(
        num_users=num_users,
        num_items=num_items,
        pairs=np.column_stack([users, items]),
        observed=np.ones(users.size, dtype=np.float64),
        rating=ratings,
        label=(ratings >= threshold).astype(np.float64),
        threshold=threshold,
        mar_pairs=np.column_stack([mar[0], mar[1]]) if mar is not None else None,
        mar_rating=mar[2] if mar is not None else None,
        mar_label=None,
    )


# ---------------------------------------------------------------------------
# Synthetic worlds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticWorldConfig:
    seed: int = 0
    num_users: int = 10
    num_items: int = 10
    latent_dim: int = 4
    propensity_slope: float = 1.0
    propensity_center: float = 3.5
    propensity_floor: float = 0.0
    threshold: float = DEFAULT_THRESHOLD
    rating_noise: float = 0.25
    item_quality_weight: float = 0.0  # per-item shift mixed into the latent score


@dataclass(frozen=True)
class SyntheticWorld:
    """A fully known MNAR universe: ratings and propensities for every pair.

    Vectors are row-major over the full universe.  Regeneration with the same
    config is bit-identical.
    """

    num_users: int
    num_items: int
    true_rating: np.ndarray
    true_label: np.ndarray
    true_propensity: np.ndarray
    generator_seed: int
    propensity_floor: float
    threshold: float
    user_factors: np.ndarray
    item_factors: np.ndarray

    @property
    def n_pairs(self) -> int:
        return self.num_users * self.num_items

    @property
    def pairs(self) -> np.ndarray:
        users, items = np.meshgrid(
            np.arange(self.num_users), np.arange(self.num_items), indexing="ij"
        )
        return np.column_stack([users.ravel(), items.ravel()])


def generate_synthetic_world(config: SyntheticWorldConfig) -> SyntheticWorld:
    """Sample a latent-factor MNAR world with known ground truth.

    Ratings come from quintiles of a noisy latent score, so the 1..5
    histogram is balanced.  Propensities are a logistic function of the
    rating (higher ratings are more likely observed), clipped below at the
    configured floor when the floor is positive.
    """
    if config.num_users < 1 or config.num_items < 1:
        raise ValueError("user and item counts must be >= 1")
    if config.latent_dim < 1:
        raise ValueError("latent_dim must be >= 1")
    if not 0.0 <= config.propensity_floor < 1.0:
        raise ValueError("propensity_floor must lie in [0, 1)")
    rng = np.random.default_rng(config.seed)
    n = config.num_users * config.num_items
    user_f = rng.normal(size=(config.num_users, config.latent_dim)) / np.sqrt(
        config.latent_dim
    )
    item_f = rng.normal(size=(config.num_items, config.latent_dim)) / np.sqrt(
        config.latent_dim
    )
    z = (user_f @ item_f.T).ravel() + config.rating_noise * rng.normal(size=n)
    if config.item_quality_weight:
        quality = rng.normal(size=config.num_items)
        z = z + config.item_quality_weight * np.tile(quality, config.num_users)
    order = np.argsort(z, kind="stable")
    rating = np.empty(n, dtype=np.float64)
    rating[order] = 1.0 + (5 * np.arange(n)) // n  # balanced quintile map to 1..5
    label = (rating >= config.threshold).astype(np.float64)
    propensity = 1.0 / (
        1.0 + np.exp(-config.propensity_slope * (rating - config.propensity_center))
    )
    if config.propensity_floor > 0.0:
        propensity = np.maximum(propensity, config.propensity_floor)
    return SyntheticWorld(
        num_users=config.num_users,
        num_items=config.num_items,
        true_rating=rating,
        true_label=label,
        true_propensity=propensity,
        generator_seed=config.seed,
        propensity_floor=config.propensity_floor,
        threshold=config.threshold,
        user_factors=user_f,
        item_factors=item_f,
    )


def sample_indicators(world: SyntheticWorld, stream) -> np.ndarray:
    """One Bernoulli(p) indicator vector over the universe.

    ``stream`` is a seed or Generator; distinct streams give independent
    replicates, the same stream id reproduces the same draw.
    """
    rng = np.random.default_rng(stream)
    return (rng.random(world.n_pairs) < world.true_propensity).astype(np.float64)


def world_to_interaction_set(
    world: SyntheticWorld, indicators: np.ndarray, mar: str = "unobserved"
) -> InteractionSet:
    """Materialize a training InteractionSet from a world and indicators.

    mar="unobserved" places every unobserved pair (with its true rating) in
    the MAR test split, which stays disjoint from the observed training
    pairs; mar="none" omits the split.
    """
    indicators = np.asarray(indicators, dtype=np.float64)
    if indicators.size != world.n_pairs:
        raise ValueError("indicator length does not match the universe")
    obs = indicators == 1.0
    rating = np.where(obs, world.true_rating, np.nan)
    label = np.where(obs, world.true_label, np.nan)
    mar_pairs = mar_rating = None
    if mar == "unobserved":
        mar_pairs = world.pairs[~obs]
        mar_rating = world.true_rating[~obs]
    elif mar != "none":
        raise ValueError(f"unknown mar policy {mar!r}")
    return InteractionSet(
        num_users=world.num_users,
        num_items=world.num_items,
        pairs=world.pairs,
        observed=indicators,
        rating=rating,
        label=label,
        threshold=world.threshold,
        mar_pairs=mar_pairs,
        mar_rating=mar_rating,
    )


@dataclass(frozen=True)
class FeatureTable:
    """Per-pair feature rows, built as user-block + item-block concatenation."""

    user_features: np.ndarray
    item_features: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.user_features.shape[1] + self.item_features.shape[1])

    def rows_for(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        return np.hstack([self.user_features[users], self.item_features[items]])

    @classmethod
    def one_hot(cls, num_users: int, num_items: int) -> "FeatureTable":
        return cls(
            user_features=np.eye(num_users), item_features=np.eye(num_items)
        )

    @classmethod
    def from_latent(cls, world: SyntheticWorld) -> "FeatureTable":
        return cls(
            user_features=world.user_factors.copy(),
            item_features=world.item_factors.copy(),
        )
