"""Ingestion of ratings, item descriptions and word vectors.

Everything here is a pure function over immutable inputs.  Interactions are
kept column-wise in numpy arrays; :attr:`Dataset.interactions` gives the
record view when one is wanted.
"""

from __future__ import annotations

import csv
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from harc.errors import FormatError, ParseError, UnknownIdError, ValidationError
from harc.numerics.params import make_rng

PAD = 0
OOV = 1
PAD_ID = -1  # entity id used in padded history/profile slots
PAD_WORD = "<pad>"
OOV_WORD = "<oov>"

DEFAULT_VMAX = 8000
DEFAULT_RHO = 300
DEFAULT_HISTORY = 50

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    rating: int
    timestamp: int


@dataclass(frozen=True)
class Dataset:
    """Interactions over dense user/item indices plus the raw-id maps.

    Split outputs share ``user_ids``/``item_ids`` with their parent, so a
    dense index means the same entity in every view.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.users)

    @property
    def interactions(self) -> list[Interaction]:
        return [
            Interaction(int(u), int(i), int(r), int(t))
            for u, i, r, t in zip(self.users, self.items, self.ratings, self.timestamps)
        ]

    def user_index(self) -> dict[str, int]:
        return {raw: k for k, raw in enumerate(self.user_ids)}

    def item_index(self) -> dict[str, int]:
        return {raw: k for k, raw in enumerate(self.item_ids)}

    def subset(self, rows: np.ndarray) -> "Dataset":
        """View over selected rows, re-sorted by (user, timestamp, item)."""
        rows = np.asarray(rows, dtype=np.int64)
        order = np.lexsort((self.items[rows], self.timestamps[rows], self.users[rows]))
        rows = rows[order]
        return Dataset(
            self.users[rows], self.items[rows], self.ratings[rows], self.timestamps[rows],
            self.user_ids, self.item_ids,
        )

    def as_array(self) -> np.ndarray:
        """(N, 4) int64 table of user, item, rating, timestamp."""
        return np.stack([self.users, self.items, self.ratings, self.timestamps], axis=1).astype(np.int64)

    @classmethod
    def from_array(cls, table: np.ndarray, user_ids: Sequence[str], item_ids: Sequence[str]) -> "Dataset":
        table = np.asarray(table, dtype=np.int64).reshape(-1, 4)
        return cls(
            table[:, 0].copy(), table[:, 1].copy(), table[:, 2].copy(), table[:, 3].copy(),
            tuple(user_ids), tuple(item_ids),
        )


def _raw_sort_key(raw: str):
    # numeric ids sort numerically, everything else after them lexicographically
    return (0, int(raw), "") if raw.isdigit() else (1, 0, raw)


def _densify(records: Iterable[tuple[str, str, int, int]]) -> Dataset:
    records = list(records)
    user_ids = tuple(sorted({r[0] for r in records}, key=_raw_sort_key))
    item_ids = tuple(sorted({r[1] for r in records}, key=_raw_sort_key))
    uix = {raw: k for k, raw in enumerate(user_ids)}
    iix = {raw: k for k, raw in enumerate(item_ids)}
    n = len(records)
    users = np.fromiter((uix[r[0]] for r in records), dtype=np.int64, count=n)
    items = np.fromiter((iix[r[1]] for r in records), dtype=np.int64, count=n)
    ratings = np.fromiter((r[2] for r in records), dtype=np.int64, count=n)
    stamps = np.fromiter((r[3] for r in records), dtype=np.int64, count=n)
    ds = Dataset(users, items, ratings, stamps, user_ids, item_ids)
    return ds.subset(np.arange(n))


# -- parsing -----------------------------------------------------------------


def _parse_rating(text: str, lineno: int, path: str) -> int:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"rating {text!r} is not a number", lineno, path) from None
    if value != int(value) or not 1 <= value <= 5:
        raise ValidationError(f"{path}:{lineno}: rating {text!r} outside integer range [1, 5]")
    return int(value)


def _parse_int(text: str, what: str, lineno: int, path: str) -> int:
    try:
        return int(text)
    except ValueError:
        try:
            f = float(text)
        except ValueError:
            raise ParseError(f"{what} {text!r} is not an integer", lineno, path) from None
        if f != int(f):
            raise ParseError(f"{what} {text!r} is not an integer", lineno, path) from None
        return int(f)


def _ratings_rows(path: Path, fmt: str) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        if fmt == "movielens_dat":
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\r\n")
                if not line.strip():
                    continue
                yield lineno, line.split("::")
        elif fmt == "csv":
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return
            if len(header) != 4:
                raise ParseError(f"expected a 4-column header, got {len(header)} columns", 1, str(path))
            for row in reader:
                if not row or all(not c.strip() for c in row):
                    continue
                yield reader.line_num, row
        else:
            raise ValueError(f"unknown ratings format {fmt!r}")


def detect_format(path: str | Path) -> str:
    return "movielens_dat" if str(path).endswith(".dat") else "csv"


def parse_ratings(path: str | Path, format: str | None = None) -> Dataset:
    """Read a ratings file into a densified, de-duplicated :class:`Dataset`.

    For repeated (user, item) pairs the record with the latest timestamp wins
    (on equal timestamps, the later line).
    """
    path = Path(path)
    fmt = format or detect_format(path)
    fmt = "movielens_dat" if fmt == "movielens" else fmt
    latest: dict[tuple[str, str], tuple[int, int]] = {}
    for lineno, fields in _ratings_rows(path, fmt):
        if len(fields) != 4:
            raise ParseError(f"expected 4 fields, got {len(fields)}", lineno, str(path))
        user, item = fields[0].strip(), fields[1].strip()
        if not user or not item:
            raise ParseError("empty user or item id", lineno, str(path))
        rating = _parse_rating(fields[2].strip(), lineno, str(path))
        ts = _parse_int(fields[3].strip(), "timestamp", lineno, str(path))
        key = (user, item)
        prev = latest.get(key)
        if prev is None or ts >= prev[1]:
            latest[key] = (rating, ts)
    if not latest:
        raise ValidationError(f"{path}: no interactions found")
    return _densify((u, i, r, t) for (u, i), (r, t) in latest.items())


def parse_documents(path: str | Path) -> dict[str, str]:
    """``item_raw_id<TAB>text`` per line; a later line for the same id wins."""
    docs: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ParseError("expected 'item_id<TAB>text'", lineno, str(path))
            raw, text = line.split("\t", 1)
            docs[raw.strip()] = text
    return docs


def load_stopwords(path: str | Path) -> frozenset[str]:
    with open(path, encoding="utf-8") as fh:
        return frozenset(w.strip().lower() for w in fh if w.strip())


# -- filtering ---------------------------------------------------------------


def filter_dataset(ds: Dataset, min_user_ratings: int = 3, items_with_docs: Iterable[int] | None = None) -> Dataset:
    """Drop items without documents and users below the rating threshold.

    Repeats until nothing changes, then re-densifies both index spaces.
    """
    if min_user_ratings < 1:
        raise ValueError("min_user_ratings must be >= 1")
    keep = np.ones(len(ds), dtype=bool)
    if items_with_docs is not None:
        allowed = np.zeros(ds.n_items, dtype=bool)
        allowed[np.fromiter(items_with_docs, dtype=np.int64)] = True
        keep &= allowed[ds.items]
    while True:
        counts = np.bincount(ds.users[keep], minlength=ds.n_users)
        drop = keep & (counts[ds.users] < min_user_ratings)
        if not drop.any():
            break
        keep &= ~drop
    if not keep.any():
        raise ValidationError("filtering removed every interaction")
    rows = np.flatnonzero(keep)
    return _densify(
        (ds.user_ids[ds.users[k]], ds.item_ids[ds.items[k]], int(ds.ratings[k]), int(ds.timestamps[k]))
        for k in rows
    )


# -- vocabulary and documents ------------------------------------------------


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]  # id k + 2 holds words[k]
    idf: Mapping[str, float]
    scores: Mapping[str, float]
    stopwords: frozenset[str] = frozenset()
    index: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            object.__setattr__(self, "index", {w: k + 2 for k, w in enumerate(self.words)})

    def __len__(self) -> int:
        return len(self.words)

    @property
    def table_rows(self) -> int:
        return len(self.words) + 2

    def word(self, token_id: int) -> str:
        if token_id == PAD:
            return PAD_WORD
        if token_id == OOV:
            return OOV_WORD
        return self.words[token_id - 2]


def build_vocabulary(docs: Mapping[object, str], stopwords: Iterable[str] = (), v_max: int = DEFAULT_VMAX) -> Vocabulary:
    """Keep the ``v_max`` non-stopword words with the highest corpus TF-IDF.

    score(w) = (total count of w) * ln(N_docs / df(w)); ties go to the
    lexicographically smaller word.
    """
    stop = frozenset(s.lower() for s in stopwords)
    tokenized = [tokenize(t) for t in docs.values()]
    if not any(tokenized):
        raise ValidationError("all documents are empty")
    tf: Counter[str] = Counter()
    df: Counter[str] = Counter()
    for toks in tokenized:
        toks = [t for t in toks if t not in stop]
        tf.update(toks)
        df.update(set(toks))
    if not tf:
        raise ValidationError("every token is a stopword")
    n_docs = len(tokenized)
    idf = {w: math.log(n_docs / df[w]) for w in tf}
    scores = {w: tf[w] * idf[w] for w in tf}
    ranked = sorted(scores, key=lambda w: (-scores[w], w))[:v_max]
    return Vocabulary(
        words=tuple(ranked),
        idf={w: idf[w] for w in ranked},
        scores={w: scores[w] for w in ranked},
        stopwords=stop,
    )


@dataclass(frozen=True)
class ItemDocument:
    token_ids: np.ndarray
    mask: np.ndarray
    raw_length: int


def filter_tokens(text: str, vocab: Vocabulary) -> list[str]:
    """Token stream after stopword removal, with unknown words as ``<oov>``."""
    return [t if t in vocab.index else OOV_WORD for t in tokenize(text) if t not in vocab.stopwords]


def encode_document(text: str, vocab: Vocabulary, rho: int = DEFAULT_RHO) -> ItemDocument:
    ids = [vocab.index.get(t, OOV) for t in tokenize(text) if t not in vocab.stopwords]
    token_ids = np.zeros(rho, dtype=np.int32)
    n = min(len(ids), rho)
    token_ids[:n] = ids[:n]
    mask = np.zeros(rho, dtype=np.uint8)
    mask[:n] = 1
    return ItemDocument(token_ids, mask, len(ids))


def decode_document(doc: ItemDocument, vocab: Vocabulary) -> list[str]:
    return [vocab.word(int(t)) for t, m in zip(doc.token_ids, doc.mask) if m]


@dataclass(frozen=True)
class DocumentTable:
    """Encoded documents for every dense item, stacked row-wise."""

    tokens: np.ndarray  # (n_items, rho) int32
    lengths: np.ndarray  # (n_items,) raw token counts

    @property
    def rho(self) -> int:
        return self.tokens.shape[1]

    @property
    def masks(self) -> np.ndarray:
        return (np.arange(self.rho)[None, :] < self.lengths[:, None]).astype(np.uint8)

    def __getitem__(self, item_id: int) -> ItemDocument:
        mask = (np.arange(self.rho) < self.lengths[item_id]).astype(np.uint8)
        return ItemDocument(self.tokens[item_id], mask, int(self.lengths[item_id]))

    def __len__(self) -> int:
        return self.tokens.shape[0]


def encode_documents(ds: Dataset, docs: Mapping[str, str], vocab: Vocabulary, rho: int = DEFAULT_RHO) -> DocumentTable:
    """Encode the document of every item of ``ds`` (items without text get an empty doc)."""
    tokens = np.zeros((ds.n_items, rho), dtype=np.int32)
    lengths = np.zeros(ds.n_items, dtype=np.int64)
    for k, raw in enumerate(ds.item_ids):
        d = encode_document(docs.get(raw, ""), vocab, rho)
        tokens[k] = d.token_ids
        lengths[k] = d.raw_length
    return DocumentTable(tokens, lengths)


# -- word vectors ------------------------------------------------------------


@dataclass(frozen=True)
class WordEmbeddingTable:
    matrix: np.ndarray  # (len(vocab) + 2, dim); row PAD is zero
    found: int = 0

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def random_word_table(vocab_rows: int, dim: int, seed: int, scale: float = 0.05) -> np.ndarray:
    rng = make_rng(seed, 0x57AB)
    table = rng.uniform(-scale, scale, size=(vocab_rows, dim)).astype(np.float32)
    table[PAD] = 0
    return table


def load_word_vectors(path: str | Path, vocab: Vocabulary, dim: int = 300, seed: int = 0, scale: float = 0.05) -> WordEmbeddingTable:
    """Copy pretrained rows for vocabulary words; the rest come from the random init."""
    table = random_word_table(vocab.table_rows, dim, seed, scale)
    found = 0
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                if line.strip():
                    raise FormatError("expected 'word v1 ... vl'", lineno, str(path))
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue  # word2vec-style "count dim" header
            if len(parts) - 1 != dim:
                raise FormatError(f"vector width {len(parts) - 1} != expected {dim}: {line[:60].rstrip()!r}", lineno, str(path))
            token_id = vocab.index.get(parts[0])
            if token_id is None:
                continue
            try:
                table[token_id] = np.array(parts[1:], dtype=np.float64)
            except ValueError:
                raise FormatError(f"non-numeric component in vector for {parts[0]!r}", lineno, str(path)) from None
            found += 1
    return WordEmbeddingTable(table, found)


# -- splits ------------------------------------------------------------------


def split_rating_task(
    ds: Dataset, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Random 3-way partition with every user and item covered by train.

    Entities missing from train get their earliest interaction moved there.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be three non-negatives summing to 1, got {fractions}")
    n = len(ds)
    perm = make_rng(seed, 0x5911).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    part = np.empty(n, dtype=np.int8)
    part[perm[:n_train]] = 0
    part[perm[n_train : n_train + n_valid]] = 1
    part[perm[n_train + n_valid :]] = 2

    # rows are sorted by (user, ts, item); a stable sort by item keeps ts order
    for entity, order in ((ds.users, np.arange(n)), (ds.items, np.lexsort((ds.timestamps, ds.items)))):
        covered = np.zeros(int(entity.max()) + 1, dtype=bool)
        covered[entity[part == 0]] = True
        for row in order:
            e = entity[row]
            if not covered[e]:
                part[row] = 0
                covered[e] = True

    if not (part == 1).any() or not (part == 2).any():
        raise ValidationError(
            f"dataset of {n} interactions is too small for a train/valid/test split with full train coverage"
        )
    return tuple(ds.subset(np.flatnonzero(part == k)) for k in range(3))


@dataclass(frozen=True)
class LeaveOneOutCase:
    user_id: int
    positive: int
    negatives: np.ndarray

    @property
    def candidates(self) -> np.ndarray:
        return np.concatenate([[self.positive], self.negatives]).astype(np.int64)


def split_leave_one_out(
    ds: Dataset, n_negatives: int = 99, seed: int = 0, interacted: Dataset | None = None
) -> tuple[Dataset, list[LeaveOneOutCase]]:
    """Hold out each user's latest interaction and sample negatives for it.

    Negatives are drawn without replacement from items the user never touched
    in ``interacted`` (defaults to ``ds``).
    """
    full = interacted if interacted is not None else ds
    rng = make_rng(seed, 0x100)
    counts = np.bincount(ds.users, minlength=ds.n_users)
    starts = np.concatenate([[0], np.cumsum(counts)])
    seen_rows = np.lexsort((full.items, full.users))
    seen_counts = np.bincount(full.users, minlength=full.n_users)
    seen_starts = np.concatenate([[0], np.cumsum(seen_counts)])
    held = []
    cases = []
    for u in range(ds.n_users):
        lo, hi = starts[u], starts[u + 1]
        if hi - lo == 0:
            continue
        if hi - lo < 2:
            raise ValidationError(f"user {ds.user_ids[u]} has fewer than 2 interactions")
        last = hi - 1  # rows sorted by (user, ts, item)
        held.append(last)
        touched = np.zeros(ds.n_items, dtype=bool)
        touched[full.items[seen_rows[seen_starts[u] : seen_starts[u + 1]]]] = True
        touched[ds.items[lo:hi]] = True
        pool = np.flatnonzero(~touched)
        if len(pool) < n_negatives:
            raise ValidationError(
                f"user {ds.user_ids[u]} has only {len(pool)} non-interacted items, {n_negatives} negatives requested"
            )
        negs = rng.choice(pool, size=n_negatives, replace=False)
        cases.append(LeaveOneOutCase(u, int(ds.items[last]), np.asarray(negs, dtype=np.int64)))
    keep = np.ones(len(ds), dtype=bool)
    keep[held] = False
    return ds.subset(np.flatnonzero(keep)), cases


# -- histories and profiles --------------------------------------------------


@dataclass(frozen=True)
class UserHistory:
    item_ids: np.ndarray
    rating_ids: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class ItemProfile:
    user_ids: np.ndarray
    rating_ids: np.ndarray
    mask: np.ndarray
    document: ItemDocument | None = None


class _Grouped:
    """CSR index: for each key, its (other id, rating) pairs in time order."""

    def __init__(self, keys: np.ndarray, others: np.ndarray, ratings: np.ndarray, stamps: np.ndarray, n_keys: int):
        order = np.lexsort((others, stamps, keys))
        self.others = others[order]
        self.ratings = ratings[order]
        counts = np.bincount(keys, minlength=n_keys)
        self.starts = np.concatenate([[0], np.cumsum(counts)])
        self.n_keys = n_keys

    def rows(self, key: int, exclude: int | None, h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not 0 <= key < self.n_keys:
            raise UnknownIdError(f"id {key} outside [0, {self.n_keys})")
        lo, hi = self.starts[key], self.starts[key + 1]
        others, ratings = self.others[lo:hi], self.ratings[lo:hi]
        if exclude is not None and exclude >= 0:
            keep = others != exclude
            others, ratings = others[keep], ratings[keep]
        others, ratings = others[-h:] if h else others[:0], ratings[-h:] if h else ratings[:0]
        ids = np.full(h, PAD_ID, dtype=np.int64)
        rids = np.zeros(h, dtype=np.int64)
        mask = np.zeros(h, dtype=np.uint8)
        n = len(others)
        ids[:n], rids[:n], mask[:n] = others, ratings, 1
        return ids, rids, mask

    def batch(self, keys: np.ndarray, excludes: np.ndarray | None, h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        b = len(keys)
        ids = np.full((b, h), PAD_ID, dtype=np.int64)
        rids = np.zeros((b, h), dtype=np.int64)
        mask = np.zeros((b, h), dtype=np.uint8)
        for r, k in enumerate(keys):
            ex = None if excludes is None else int(excludes[r])
            ids[r], rids[r], mask[r] = self.rows(int(k), ex, h)
        return ids, rids, mask


class HistoryIndex:
    """Pre-sorted per-user and per-item interaction lists of a training view."""

    def __init__(self, train: Dataset, h: int = DEFAULT_HISTORY):
        self.h = h
        self.n_users = train.n_users
        self.n_items = train.n_items
        self._by_user = _Grouped(train.users, train.items, train.ratings, train.timestamps, train.n_users)
        self._by_item = _Grouped(train.items, train.users, train.ratings, train.timestamps, train.n_items)

    def user_history(self, user_id: int, exclude_item: int | None = None) -> UserHistory:
        return UserHistory(*self._by_user.rows(user_id, exclude_item, self.h))

    def item_profile(self, item_id: int, exclude_user: int | None = None, docs: DocumentTable | None = None) -> ItemProfile:
        ids, rids, mask = self._by_item.rows(item_id, exclude_user, self.h)
        return ItemProfile(ids, rids, mask, docs[item_id] if docs is not None else None)

    def user_histories(self, users: np.ndarray, exclude_items: np.ndarray | None = None):
        return self._by_user.batch(users, exclude_items, self.h)

    def item_profiles(self, items: np.ndarray, exclude_users: np.ndarray | None = None):
        return self._by_item.batch(items, exclude_users, self.h)

    def user_items(self, user_id: int) -> np.ndarray:
        g = self._by_user
        return g.others[g.starts[user_id] : g.starts[user_id + 1]]


def build_user_history(ds_train: Dataset, user_id: int, exclude_item: int | None = None, h: int = DEFAULT_HISTORY) -> UserHistory:
    return HistoryIndex(ds_train, h).user_history(user_id, exclude_item)


def build_item_profile(
    ds_train: Dataset, item_id: int, exclude_user: int | None = None, docs: DocumentTable | None = None, h: int = DEFAULT_HISTORY
) -> ItemProfile:
    return HistoryIndex(ds_train, h).item_profile(item_id, exclude_user, docs)
