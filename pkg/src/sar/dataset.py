"""Rating files, dense reindexing, statistics and seeded train/test splits."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

FORMATS = {"ml100k": "\t", "ml1m": "::"}
MAX_RATING = 5


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RatingDataset:
    """Sparse rating triples over densely indexed users and items.

    ``user_ids[k]`` is the raw ID of dense user ``k`` (likewise for items).
    Subsets produced by :func:`split` share the ID maps of their source, so
    dense indices stay valid across train and test.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    rating_max: int
    _user_index: dict = field(init=False, repr=False)
    _item_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("users", "items", "ratings"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.users) == len(self.items) == len(self.ratings)):
            raise DatasetError("users, items and ratings must have equal length")
        object.__setattr__(self, "_user_index", {r: k for k, r in enumerate(self.user_ids)})
        object.__setattr__(self, "_item_index", {r: k for k, r in enumerate(self.item_ids)})
        if len(self._user_index) != len(self.user_ids) or len(self._item_index) != len(self.item_ids):
            raise DatasetError("raw ID maps must be bijective")
        if self.rating_max < 2:
            raise DatasetError(f"rating_max must be >= 2, got {self.rating_max}")
        if len(self.ratings):
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise DatasetError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise DatasetError("item index out of range")
            if self.ratings.min() < 1 or self.ratings.max() > self.rating_max:
                raise DatasetError(f"ratings must lie in [1, {self.rating_max}]")
            keys = self.users * self.num_items + self.items
            if len(np.unique(keys)) != len(keys):
                raise DatasetError("duplicate (user, item) pairs")

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_ratings(self) -> int:
        return len(self.ratings)

    def __len__(self):
        return self.num_ratings

    @property
    def triples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()))

    def user_index(self, raw_id) -> int:
        try:
            return self._user_index[str(raw_id)]
        except KeyError:
            raise KeyError(f"unknown user id {raw_id!r}") from None

    def item_index(self, raw_id) -> int:
        try:
            return self._item_index[str(raw_id)]
        except KeyError:
            raise KeyError(f"unknown item id {raw_id!r}") from None

    def subset(self, rows: np.ndarray) -> "RatingDataset":
        """Return the triples at ``rows`` over the same ID maps."""
        return RatingDataset(
            self.users[rows], self.items[rows], self.ratings[rows],
            self.user_ids, self.item_ids, self.rating_max,
        )

    def global_mean(self) -> float:
        return float(self.ratings.mean())


@dataclass(frozen=True)
class DatasetStats:
    num_users: int
    num_items: int
    num_ratings: int
    sparsity: float
    histogram: dict[int, int]


@dataclass(frozen=True, eq=False)
class Split:
    train: RatingDataset
    test: RatingDataset
    rho: float
    seed: int


def from_triples(
    triples: Iterable[tuple], rating_max: int | None = None
) -> RatingDataset:
    """Build a dataset from ``(raw_user, raw_item, rating)`` triples.

    Dense indices follow first appearance.
    """
    uidx: dict[str, int] = {}
    iidx: dict[str, int] = {}
    users, items, ratings = [], [], []
    for raw_u, raw_i, r in triples:
        users.append(uidx.setdefault(str(raw_u), len(uidx)))
        items.append(iidx.setdefault(str(raw_i), len(iidx)))
        ratings.append(int(r))
    if not ratings:
        raise DatasetError("no ratings")
    return RatingDataset(
        np.array(users), np.array(items), np.array(ratings),
        tuple(uidx), tuple(iidx), rating_max or max(ratings),
    )


def parse_ratings(path: str | Path, format: str = "ml100k") -> RatingDataset:
    """Read a MovieLens ratings file (``u.data`` or ``ratings.dat``)."""
    if format not in FORMATS:
        raise DatasetError(f"unknown format {format!r}; expected one of {sorted(FORMATS)}")
    sep = FORMATS[format]
    path = Path(path)
    triples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(sep)
            if len(parts) != 4:
                raise DatasetError(f"{path}:{lineno}: expected 4 fields separated by {sep!r}")
            try:
                rating = int(parts[2])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: rating {parts[2]!r} is not an integer") from None
            if not 1 <= rating <= MAX_RATING:
                raise DatasetError(f"{path}:{lineno}: rating {rating} outside [1, {MAX_RATING}]")
            triples.append((parts[0], parts[1], rating))
    if not triples:
        raise DatasetError(f"{path}: empty file")
    try:
        return from_triples(triples)
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def stats(ds: RatingDataset) -> DatasetStats:
    hist = Counter(ds.ratings.tolist())
    cells = ds.num_users * ds.num_items
    return DatasetStats(
        num_users=ds.num_users,
        num_items=ds.num_items,
        num_ratings=ds.num_ratings,
        sparsity=1.0 - ds.num_ratings / cells,
        histogram={r: hist.get(r, 0) for r in range(1, ds.rating_max + 1)},
    )


def train_size(n: int, rho: float) -> int:
    # round half up, independent of Python's banker's rounding
    return int(np.floor(rho * n + 0.5))


def split(ds: RatingDataset, rho: float, seed: int) -> Split:
    """Shuffle all triples with ``seed`` and give the first ``round(rho*N)`` to train."""
    if not 0.0 < rho < 1.0:
        raise DatasetError(f"rho must lie in (0, 1), got {rho}")
    n_train = train_size(ds.num_ratings, rho)
    if n_train == 0 or n_train == ds.num_ratings:
        raise DatasetError(f"rho={rho} leaves an empty train or test set for N={ds.num_ratings}")
    perm = np.random.default_rng(seed).permutation(ds.num_ratings)
    return Split(
        train=ds.subset(np.sort(perm[:n_train])),
        test=ds.subset(np.sort(perm[n_train:])),
        rho=rho,
        seed=seed,
    )


def write_triples(ds: RatingDataset, path: str | Path) -> None:
    """Persist as ``user_raw item_raw rating`` lines."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for u, i, r in zip(ds.users, ds.items, ds.ratings):
            fh.write(f"{ds.user_ids[u]} {ds.item_ids[i]} {r}\n")


def read_triples(path: str | Path, like: RatingDataset) -> RatingDataset:
    """Load a file written by :func:`write_triples` against the ID maps of ``like``."""
    users, items, ratings = [], [], []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise DatasetError(f"{path}:{lineno}: expected 'user item rating'")
            users.append(like.user_index(parts[0]))
            items.append(like.item_index(parts[1]))
            ratings.append(int(parts[2]))
    return RatingDataset(
        np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
        np.array(ratings, dtype=np.int64), like.user_ids, like.item_ids, like.rating_max,
    )


def co_rated(ds: RatingDataset, kind: str) -> list[np.ndarray]:
    """For each user (``kind='user'``) the items it rated, or vice versa."""
    if kind == "user":
        keys, vals, n = ds.users, ds.items, ds.num_users
    elif kind == "item":
        keys, vals, n = ds.items, ds.users, ds.num_items
    else:
        raise ValueError(f"kind must be 'user' or 'item', got {kind!r}")
    order = np.argsort(keys, kind="stable")
    bounds = np.searchsorted(keys[order], np.arange(n + 1))
    return [vals[order[bounds[k]:bounds[k + 1]]] for k in range(n)]

