"""Rating and ranking metrics, the leave-one-out protocol and a popularity baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from harc import model as M
from harc.corpus import Dataset, DocumentTable, HistoryIndex, LeaveOneOutCase
from harc.errors import UnknownIdError, ValidationError
from harc.numerics.params import ParameterStore


@dataclass(frozen=True)
class RankedCase:
    user_id: int
    candidates: np.ndarray  # positive first
    scores: np.ndarray
    rank_of_positive: int

    @property
    def positive(self) -> int:
        return int(self.candidates[0])

    def order(self) -> np.ndarray:
        """Candidate positions sorted by score descending, id ascending."""
        return np.lexsort((self.candidates, -self.scores))


def rank_case(user_id: int, candidates, scores) -> RankedCase:
    """Rank of ``candidates[0]`` with ties broken by ascending candidate id."""
    cand = np.asarray(candidates, dtype=np.int64)
    sc = np.asarray(scores, dtype=np.float64)
    if cand.shape != sc.shape or cand.ndim != 1 or len(cand) == 0:
        raise ValidationError("candidates and scores must be equal-length non-empty vectors")
    if len(np.unique(cand)) != len(cand):
        raise ValidationError(f"duplicate candidates for user {user_id}")
    pos_id, pos_score = cand[0], sc[0]
    ahead = np.sum(sc > pos_score) + np.sum((sc == pos_score) & (cand < pos_id))
    return RankedCase(user_id, cand, sc, int(ahead) + 1)


def rmse(preds: Sequence[float], truths: Sequence[float]) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ValidationError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValidationError("rmse of an empty set")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def _ranks(cases: Sequence[RankedCase]) -> np.ndarray:
    if not cases:
        raise ValidationError("no ranked cases")
    return np.array([c.rank_of_positive for c in cases])


def hit_ratio_at_k(cases: Sequence[RankedCase], k: int = 10) -> float:
    return float(np.mean(_ranks(cases) <= k))


def ndcg_at_k(cases: Sequence[RankedCase], k: int = 10) -> float:
    ranks = _ranks(cases)
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(gains.mean())


# -- scoring with a trained model --------------------------------------------


class ModelScorer:
    """Frozen model over a training view: caches every user and item latent."""

    def __init__(self, store: ParameterStore, cfg: M.ModelConfig, train: Dataset, docs: DocumentTable):
        if train.n_users != cfg.n_users or train.n_items != cfg.n_items:
            raise ValidationError(
                f"checkpoint expects {cfg.n_users} users/{cfg.n_items} items, "
                f"data has {train.n_users}/{train.n_items}"
            )
        self.store, self.cfg, self.docs = store, cfg, docs
        self.index = HistoryIndex(train, cfg.history_len)
        self.user_latent = M.encode_all_users(store, cfg, self.index)
        self.item_latent = M.encode_all_items(store, cfg, self.index, docs)

    def _check(self, users: np.ndarray, items: np.ndarray) -> None:
        for ids, n, what in ((users, self.cfg.n_users, "user"), (items, self.cfg.n_items, "item")):
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise UnknownIdError(f"{what} id outside [0, {n})")

    def score(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        self._check(users, items)
        return M.score_latents(self.store, self.cfg, self.user_latent[users], self.item_latent[items])


class PopularityScorer:
    """Scores an item by its number of training interactions."""

    def __init__(self, train: Dataset):
        self.counts = np.bincount(train.items, minlength=train.n_items).astype(np.float64)

    def score(self, users, items) -> np.ndarray:
        items = np.asarray(items, dtype=np.int64)
        out = np.zeros(items.shape, dtype=np.float64)
        known = (items >= 0) & (items < len(self.counts))
        out[known] = self.counts[items[known]]
        return out


def popularity_baseline(train: Dataset) -> PopularityScorer:
    return PopularityScorer(train)


Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class RankingResult:
    hr: float
    ndcg: float
    k: int
    cases: list[RankedCase]


def evaluate_ranking(scorer, test_cases: Sequence[LeaveOneOutCase], k: int = 10) -> RankingResult:
    """Score each case's candidates (positive first) and compute HR@k / NDCG@k."""
    if not test_cases:
        raise ValidationError("no test cases")
    cand = np.stack([c.candidates for c in test_cases])
    users = np.repeat([c.user_id for c in test_cases], cand.shape[1])
    score_fn = scorer.score if hasattr(scorer, "score") else scorer
    scores = np.asarray(score_fn(users, cand.reshape(-1)), dtype=np.float64).reshape(cand.shape)
    ranked = [rank_case(c.user_id, cand[r], scores[r]) for r, c in enumerate(test_cases)]
    return RankingResult(hit_ratio_at_k(ranked, k), ndcg_at_k(ranked, k), k, ranked)


def evaluate_rating(scorer: ModelScorer, split: Dataset) -> float:
    """RMSE of clamped predictions over ``split``."""
    if len(split) == 0:
        raise ValidationError("empty evaluation split")
    preds = M.clamp_rating(scorer.score(split.users, split.items))
    return rmse(preds, split.ratings)


def predict_with_exclusion(store, cfg, index: HistoryIndex, docs: DocumentTable, split: Dataset, chunk: int = 512) -> np.ndarray:
    """Raw predictions where each row's own (user, item) is hidden from its inputs.

    This is exactly what the model sees during training, so it measures the
    fit on training data without leaking the target through the history.
    """
    out = np.zeros(len(split), dtype=np.float64)
    for lo in range(0, len(split), chunk):
        u = split.users[lo : lo + chunk]
        i = split.items[lo : lo + chunk]
        U = M.user_latents(store, cfg, *index.user_histories(u, i))
        uniq, inv = np.unique(i, return_inverse=True)
        I = M.item_latents(store, cfg, *index.item_profiles(i, u), docs.tokens[uniq], docs.lengths[uniq], inv)
        out[lo : lo + len(u)] = M.head(store, cfg, U, I).data
    return out


# -- report files ------------------------------------------------------------


def write_case_dump(path, result: RankingResult, user_ids: Sequence[str], item_ids: Sequence[str]) -> None:
    """One TSV line per case: user, positive, rank, then top-k ``item:score``."""
    lines = ["user\tpositive\trank\ttop_k"]
    for case in sorted(result.cases, key=lambda c: c.user_id):
        top = case.order()[: result.k]
        tops = " ".join(f"{item_ids[case.candidates[j]]}:{case.scores[j]:.6g}" for j in top)
        lines.append(f"{user_ids[case.user_id]}\t{item_ids[case.positive]}\t{case.rank_of_positive}\t{tops}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_summary(metrics: dict[str, float | int | str]) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in metrics.items())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)
