"""MovieLens ingestion and weak-generalization splits.

Both the 100K and the 1M layouts are read into a :class:`RatingStore` whose
users and items are densely re-indexed ``0..n-1`` in ascending original-id
order.  Side information is reduced to categorical attributes (age band,
gender, occupation; genres, release decade) because the content graph only
ever counts shared attributes.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

_log = logging.getLogger(__name__)

ML100K_GENRES = (
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)
ML1M_OCCUPATIONS = (
    "other", "academic/educator", "artist", "clerical/admin", "college/grad student",
    "customer service", "doctor/health care", "executive/managerial", "farmer",
    "homemaker", "K-12 student", "lawyer", "programmer", "retired", "sales/marketing",
    "scientist", "self-employed", "technician/engineer", "tradesman/craftsman",
    "unemployed", "writer",
)
AGE_CATEGORIES = ("teenager", "young", "adult", "middle-aged", "senior")
GENDERS = {"M": "male", "F": "female"}
UNKNOWN_GENRE = "unknown"


class DatasetError(ValueError):
    """Raised for unreadable or inconsistent rating data."""


@dataclass(frozen=True, eq=False)
class RatingStore:
    """Explicit feedback triples over a dense user x item index space."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    n_users: int
    n_items: int
    k_min: int = 1
    k_max: int = 5
    user_ids: np.ndarray | None = field(default=None, repr=False)
    item_ids: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        ratings = np.asarray(self.ratings, dtype=np.float64)
        if not (len(users) == len(items) == len(ratings)):
            raise DatasetError("users, items and ratings must have equal length")
        if len(users):
            if users.min() < 0 or users.max() >= self.n_users:
                raise DatasetError("user index out of range")
            if items.min() < 0 or items.max() >= self.n_items:
                raise DatasetError("item index out of range")
            if ratings.min() < self.k_min or ratings.max() > self.k_max:
                raise DatasetError(f"ratings outside [{self.k_min}, {self.k_max}]")
        order = np.lexsort((items, users))
        users, items, ratings = users[order], items[order], ratings[order]
        if len(users) > 1:
            dup = (users[1:] == users[:-1]) & (items[1:] == items[:-1])
            if dup.any():
                k = int(np.argmax(dup))
                raise DatasetError(f"duplicate rating for user {users[k]}, item {items[k]}")
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "ratings", ratings)

    def __len__(self):
        return len(self.ratings)

    @property
    def scale(self) -> float:
        return float(self.k_max - self.k_min)

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """User x item CSR matrix of ratings (rows sorted by item index)."""
        return sp.csr_matrix(
            (self.ratings, (self.users, self.items)), shape=(self.n_users, self.n_items)
        )

    @cached_property
    def _indptr(self) -> np.ndarray:
        return np.searchsorted(self.users, np.arange(self.n_users + 1))

    def user_items(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        """Items rated by ``u`` (ascending) and the corresponding ratings."""
        lo, hi = self._indptr[u], self._indptr[u + 1]
        return self.items[lo:hi], self.ratings[lo:hi]

    def user_counts(self) -> np.ndarray:
        return np.diff(self._indptr)

    def active_users(self) -> np.ndarray:
        return np.flatnonzero(self.user_counts())

    def item_set(self) -> np.ndarray:
        return np.unique(self.items)

    def subset(self, mask: np.ndarray) -> "RatingStore":
        return RatingStore(
            self.users[mask], self.items[mask], self.ratings[mask],
            self.n_users, self.n_items, self.k_min, self.k_max,
            self.user_ids, self.item_ids,
        )


@dataclass(frozen=True)
class UserProfile:
    user: int
    age: str
    gender: str
    occupation: str

    def attributes(self) -> tuple[str, ...]:
        return (f"age:{self.age}", f"gender:{self.gender}", f"occupation:{self.occupation}")


@dataclass(frozen=True)
class ItemProfile:
    item: int
    genres: frozenset
    decade: str | None

    def attributes(self) -> tuple[str, ...]:
        attrs = tuple(f"genre:{g}" for g in sorted(self.genres))
        if self.decade is not None:
            attrs += (f"decade:{self.decade}",)
        return attrs


@dataclass(frozen=True)
class Split:
    train: RatingStore
    test: RatingStore
    upl: int
    n_eval: int
    seed: int

    @property
    def users(self) -> np.ndarray:
        return self.train.active_users()


def categorize_age(age: int) -> str:
    """Map an age in years (or an ML-1M age code) to its band."""
    if age <= 0:
        raise ValueError(f"age must be positive, got {age}")
    if age < 18:
        return "teenager"
    if age < 25:
        return "young"
    if age < 35:
        return "adult"
    if age < 50:
        return "middle-aged"
    return "senior"


def categorize_decade(year: int) -> str:
    """``1998 -> "90s"``; decades outside 1910-1999 keep all four digits."""
    if not 1900 <= year <= 2100:
        raise ValueError(f"release year out of range: {year}")
    decade = year // 10 * 10
    if 1910 <= decade <= 1990:
        return f"{decade % 100:02d}s"
    return f"{decade}s"


def _read_lines(path: Path, encoding="latin-1"):
    with open(path, encoding=encoding) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if line.strip():
                yield lineno, line


def _dense_index(ids, what, path):
    ids = np.asarray(ids, dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate {what} ids")
    order = np.sort(ids)
    return order, {int(x): k for k, x in enumerate(order)}


def _read_ratings(path: Path, sep: str, user_index, item_index):
    users, items, ratings = [], [], []
    for lineno, line in _read_lines(path):
        parts = line.split(sep)
        if len(parts) != 4:
            raise DatasetError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            u, i, r, _ = (int(p) for p in parts)
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        if u not in user_index or i not in item_index:
            raise DatasetError(f"{path}:{lineno}: unknown user {u} or item {i}")
        users.append(user_index[u])
        items.append(item_index[i])
        ratings.append(r)
    if not ratings:
        raise DatasetError(f"{path}: no ratings")
    return users, items, ratings


def _parse_100k(root: Path):
    raw_users = []
    for lineno, line in _read_lines(root / "u.user"):
        parts = line.split("|")
        if len(parts) != 5 or parts[2] not in GENDERS:
            raise DatasetError(f"{root / 'u.user'}:{lineno}: malformed user row")
        try:
            raw_users.append((int(parts[0]), categorize_age(int(parts[1])), GENDERS[parts[2]], parts[3]))
        except ValueError as exc:
            raise DatasetError(f"{root / 'u.user'}:{lineno}: {exc}") from None

    raw_items = []
    for lineno, line in _read_lines(root / "u.item"):
        parts = line.split("|")
        if len(parts) != 5 + len(ML100K_GENRES):
            raise DatasetError(f"{root / 'u.item'}:{lineno}: expected {5 + len(ML100K_GENRES)} fields")
        try:
            flags = [int(x) for x in parts[5:]]
            date = parts[2].strip()
            decade = categorize_decade(int(date[-4:])) if date else None
        except ValueError as exc:
            raise DatasetError(f"{root / 'u.item'}:{lineno}: {exc}") from None
        genres = frozenset(g for g, f in zip(ML100K_GENRES, flags) if f)
        raw_items.append((int(parts[0]), genres, decade))
    return raw_users, raw_items, root / "u.data", "\t"


_YEAR = re.compile(r"\((\d{4})\)\s*$")


def _parse_1m(root: Path):
    raw_users = []
    for lineno, line in _read_lines(root / "users.dat"):
        parts = line.split("::")
        if len(parts) != 5 or parts[1] not in GENDERS:
            raise DatasetError(f"{root / 'users.dat'}:{lineno}: malformed user row")
        try:
            occ = ML1M_OCCUPATIONS[int(parts[3])]
            raw_users.append((int(parts[0]), categorize_age(int(parts[2])), GENDERS[parts[1]], occ))
        except (ValueError, IndexError) as exc:
            raise DatasetError(f"{root / 'users.dat'}:{lineno}: {exc}") from None

    raw_items = []
    for lineno, line in _read_lines(root / "movies.dat"):
        parts = line.split("::")
        if len(parts) != 3:
            raise DatasetError(f"{root / 'movies.dat'}:{lineno}: malformed movie row")
        match = _YEAR.search(parts[1])
        try:
            decade = categorize_decade(int(match.group(1))) if match else None
            genres = frozenset(g for g in parts[2].split("|") if g and g != "(no genres listed)")
            raw_items.append((int(parts[0]), genres, decade))
        except ValueError as exc:
            raise DatasetError(f"{root / 'movies.dat'}:{lineno}: {exc}") from None
    return raw_users, raw_items, root / "ratings.dat", "::"


def parse_movielens(path, flavor: str = "100K"):
    """Read a MovieLens directory; returns ``(store, user_profiles, item_profiles)``.

    ``flavor`` is ``"100K"`` (``u.data``/``u.user``/``u.item``) or ``"1M"``
    (``ratings.dat``/``users.dat``/``movies.dat``).  Profiles are listed in
    dense-index order.  Ratings are 1..5 in both flavors.
    """
    root = Path(path)
    key = str(flavor).upper()
    if key == "100K":
        raw_users, raw_items, ratings_path, sep = _parse_100k(root)
    elif key == "1M":
        raw_users, raw_items, ratings_path, sep = _parse_1m(root)
    else:
        raise ValueError(f"unknown MovieLens flavor {flavor!r}")

    user_ids, user_index = _dense_index([u[0] for u in raw_users], "user", root)
    item_ids, item_index = _dense_index([i[0] for i in raw_items], "item", root)
    users, items, ratings = _read_ratings(ratings_path, sep, user_index, item_index)
    store = RatingStore(
        np.array(users), np.array(items), np.array(ratings, dtype=np.float64),
        len(user_ids), len(item_ids), 1, 5, user_ids, item_ids,
    )

    user_profiles = [None] * len(user_ids)
    for uid, age, gender, occ in raw_users:
        k = user_index[uid]
        user_profiles[k] = UserProfile(k, age, gender, occ)
    item_profiles = [None] * len(item_ids)
    for iid, genres, decade in raw_items:
        k = item_index[iid]
        item_profiles[k] = ItemProfile(k, genres or frozenset([UNKNOWN_GENRE]), decade)

    _log.info("parsed %s: %d users, %d items, %d ratings", root, store.n_users, store.n_items, len(store))
    return store, user_profiles, item_profiles


def weak_generalization_split(store: RatingStore, upl: int, n_eval: int = 10, seed: int = 0) -> Split:
    """Sample ``upl`` training ratings per user; the rest become test ratings.

    Users with fewer than ``upl + n_eval`` ratings are dropped up front.  Test
    ratings on items that nobody has in training are discarded, and users left
    with fewer than ``n_eval`` test ratings are dropped; the two filters are
    repeated until neither changes anything.
    """
    if upl < 2:
        raise ValueError("upl must be at least 2")
    if n_eval < 1:
        raise ValueError("n_eval must be at least 1")
    rng = np.random.default_rng(seed)
    counts = store.user_counts()
    starts = store._indptr
    in_train = np.zeros(len(store), dtype=bool)
    keep_user = counts >= upl + n_eval
    for u in np.flatnonzero(keep_user):
        chosen = rng.choice(counts[u], size=upl, replace=False)
        in_train[starts[u] + chosen] = True

    while True:
        active = keep_user[store.users]
        train_mask = in_train & active
        train_items = np.zeros(store.n_items, dtype=bool)
        train_items[store.items[train_mask]] = True
        test_mask = ~in_train & active & train_items[store.items]
        test_counts = np.bincount(store.users[test_mask], minlength=store.n_users)
        short = keep_user & (test_counts < n_eval)
        if not short.any():
            break
        keep_user &= ~short

    if not keep_user.any():
        raise DatasetError(f"no user has at least {upl + n_eval} usable ratings")
    _log.info("split upl=%d seed=%d: %d users, %d train / %d test ratings",
              upl, seed, int(keep_user.sum()), int(train_mask.sum()), int(test_mask.sum()))
    return Split(store.subset(train_mask), store.subset(test_mask), upl, n_eval, seed)
