"""Synthetic ratings, descriptions and word vectors with planted structure.

Each item has a topic and a quality level, both spelled out in its
description.  Each user has an interest topic (which drives what they
interact with) and a rating bias (which only shows up in their ratings).
A rating is ``3 + user bias + item quality + topic bonus + noise``, rounded
and clipped to 1..5, so a model needs the document to see item quality and
the rating-tagged history to see the user bias.

``write_dataset`` writes the same four files ``harc prep`` consumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from harc.numerics.params import make_rng

_SYLLABLES = [
    "ka", "lo", "mi", "ren", "so", "ta", "vu", "zel", "dor", "pha", "qui", "bel",
    "nar", "tis", "gro", "wen", "yul", "fa", "hek", "jor",
]
STOPWORDS = ("the", "a", "of", "and", "in", "to", "is", "with", "for", "on")


def _words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        w = "".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 4))))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass
class SyntheticData:
    records: list[tuple[str, str, int, int]]
    docs: dict[str, str]
    stopwords: tuple[str, ...]
    vectors: dict[str, np.ndarray]
    item_topic: np.ndarray
    item_quality: np.ndarray
    user_topic: np.ndarray
    user_bias: np.ndarray


def generate(
    n_users: int = 200,
    n_items: int = 200,
    n_topics: int = 8,
    per_user: int = 25,
    focus: float = 0.7,
    noise: float = 0.3,
    topic_bonus: float = 0.5,
    doc_words: int = 30,
    dim: int = 50,
    seed: int = 0,
    integer_effects: bool = False,
) -> SyntheticData:
    """Draw a planted dataset.

    ``focus`` is the share of a user's interactions inside their interest
    topic.  With ``integer_effects`` the user bias and item quality take
    values in {-1, 0, 1}, the topic bonus is dropped and ``noise`` should be
    0, which makes every rating an exact function of the two latents.
    """
    rng = make_rng(seed, 0x5E7)
    taken: set[str] = set(STOPWORDS)
    topic_words = [_words(rng, 12, taken) for _ in range(n_topics)]
    good_words = _words(rng, 6, taken)
    bad_words = _words(rng, 6, taken)
    filler = _words(rng, 40, taken)

    item_topic = rng.integers(0, n_topics, size=n_items)
    user_topic = rng.integers(0, n_topics, size=n_users)
    if integer_effects:
        item_quality = rng.integers(-1, 2, size=n_items).astype(float)
        user_bias = rng.integers(-1, 2, size=n_users).astype(float)
    else:
        item_quality = rng.choice([-0.9, 0.0, 0.9], size=n_items)
        user_bias = rng.choice([-1.0, -0.5, 0.0, 0.5, 1.0], size=n_users)

    docs = {}
    for i in range(n_items):
        n_topic = doc_words // 3
        n_qual = doc_words // 6 if item_quality[i] != 0 else 0
        parts = list(rng.choice(topic_words[item_topic[i]], size=n_topic))
        if item_quality[i] > 0:
            parts += list(rng.choice(good_words, size=n_qual))
        elif item_quality[i] < 0:
            parts += list(rng.choice(bad_words, size=n_qual))
        rest = doc_words - len(parts)
        parts += list(rng.choice(filler, size=rest // 2))
        parts += list(rng.choice(STOPWORDS, size=rest - rest // 2))
        parts = [parts[k] for k in rng.permutation(len(parts))]
        docs[f"m{i + 1}"] = " ".join(parts).capitalize() + "."

    by_topic = [np.flatnonzero(item_topic == t) for t in range(n_topics)]
    records = []
    ts = 1_000_000
    for u in range(n_users):
        n_focus = min(int(round(per_user * focus)), len(by_topic[user_topic[u]]))
        chosen = list(rng.choice(by_topic[user_topic[u]], size=n_focus, replace=False)) if n_focus else []
        others = np.setdiff1d(np.arange(n_items), chosen)
        chosen += list(rng.choice(others, size=per_user - n_focus, replace=False))
        for i in rng.permutation(chosen):
            bonus = 0.0 if integer_effects else (topic_bonus if item_topic[i] == user_topic[u] else -topic_bonus)
            r = 3 + user_bias[u] + item_quality[i] + bonus + noise * rng.standard_normal()
            r = int(np.clip(np.rint(r), 1, 5))
            ts += int(rng.integers(1, 100))
            records.append((f"u{u + 1}", f"m{int(i) + 1}", r, ts))

    # vectors: topic words cluster, quality words sit on a shared axis
    centers = rng.standard_normal((n_topics, dim))
    axis = rng.standard_normal(dim)
    vectors = {}
    for t, words in enumerate(topic_words):
        for w in words:
            vectors[w] = 0.6 * centers[t] + 0.3 * rng.standard_normal(dim)
    for w in good_words:
        vectors[w] = 0.8 * axis + 0.2 * rng.standard_normal(dim)
    for w in bad_words:
        vectors[w] = -0.8 * axis + 0.2 * rng.standard_normal(dim)
    for w in filler + list(STOPWORDS):
        vectors[w] = 0.5 * rng.standard_normal(dim)

    return SyntheticData(records, docs, STOPWORDS, vectors, item_topic, item_quality, user_topic, user_bias)


def write_dataset(data: SyntheticData, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "ratings": out / "ratings.csv",
        "docs": out / "docs.tsv",
        "stopwords": out / "stopwords.txt",
        "wordvecs": out / "wordvecs.txt",
    }
    with open(paths["ratings"], "w", encoding="utf-8") as fh:
        fh.write("user_id,item_id,rating,timestamp\n")
        for u, i, r, t in data.records:
            fh.write(f"{u},{i},{r},{t}\n")
    with open(paths["docs"], "w", encoding="utf-8") as fh:
        for raw, text in data.docs.items():
            fh.write(f"{raw}\t{text}\n")
    paths["stopwords"].write_text("".join(f"{w}\n" for w in data.stopwords), encoding="utf-8")
    with open(paths["wordvecs"], "w", encoding="utf-8") as fh:
        for w in sorted(data.vectors):
            fh.write(w + " " + " ".join(f"{x:.5f}" for x in data.vectors[w]) + "\n")
    return paths
