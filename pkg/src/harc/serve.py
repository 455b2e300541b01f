"""Online personalisation on a frozen checkpoint.

:class:`ProfileCache` keeps every user history, item profile and their
encoded latent vectors.  New interactions re-run only the affected encoders;
parameters are never touched, which :meth:`ProfileCache.verify_frozen`
checks against the fingerprint taken at load time.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from harc import model as M
from harc.corpus import Dataset, DocumentTable, HistoryIndex, Interaction, PAD_ID
from harc.errors import CorruptionError, UnknownIdError, ValidationError
from harc.numerics.params import ParameterStore
from harc.train import store_fingerprint


@dataclass
class CallCounter:
    user_passes: int = 0
    item_passes: int = 0


def _latest_h(records: dict[int, tuple[int, int]], h: int):
    """Most recent ``h`` (id, rating) pairs, oldest first, padded to length ``h``."""
    ordered = sorted(records.items(), key=lambda kv: (kv[1][1], kv[0]))[-h:]
    ids = np.full(h, PAD_ID, dtype=np.int64)
    rids = np.zeros(h, dtype=np.int64)
    mask = np.zeros(h, dtype=np.uint8)
    for k, (other, (rating, _)) in enumerate(ordered):
        ids[k], rids[k], mask[k] = other, rating, 1
    return ids, rids, mask


class ProfileCache:
    def __init__(self, store: ParameterStore, cfg: M.ModelConfig, train: Dataset, docs: DocumentTable):
        if train.n_users != cfg.n_users or train.n_items != cfg.n_items:
            raise ValidationError(
                f"checkpoint expects {cfg.n_users} users/{cfg.n_items} items, data has {train.n_users}/{train.n_items}"
            )
        self.store, self.cfg, self.docs = store, cfg, docs
        self.fingerprint = store_fingerprint(store, cfg)
        self.counter = CallCounter()
        self._lock = threading.RLock()
        self.user_ids = list(train.user_ids)
        self.item_ids = list(train.item_ids)
        self._user_index = {raw: k for k, raw in enumerate(self.user_ids)}
        self._item_index = {raw: k for k, raw in enumerate(self.item_ids)}

        # id -> {other id: (rating, timestamp)}
        self.user_records: list[dict[int, tuple[int, int]]] = [dict() for _ in range(train.n_users)]
        self.item_records: list[dict[int, tuple[int, int]]] = [dict() for _ in range(train.n_items)]
        for u, i, r, t in zip(train.users, train.items, train.ratings, train.timestamps):
            self.user_records[u][int(i)] = (int(r), int(t))
            self.item_records[i][int(u)] = (int(r), int(t))

        index = HistoryIndex(train, cfg.history_len)
        # documents are static, so their CNN vectors are computed once here
        self.doc_vecs = None
        if cfg.use_doc_info:
            self.doc_vecs = np.concatenate([
                M.doc_vectors(store, cfg, docs.tokens[lo : lo + 256], docs.lengths[lo : lo + 256]).data
                for lo in range(0, train.n_items, 256)
            ]) if train.n_items else np.zeros((0, cfg.d_doc), dtype=store.dtype)
        self.user_latents = list(M.encode_all_users(store, cfg, index))
        self.item_latents = M.encode_all_items(store, cfg, index, docs)

    # -- id handling -----------------------------------------------------

    @property
    def n_users(self) -> int:
        return len(self.user_records)

    def resolve_user(self, raw: str) -> int:
        """Dense id for ``raw``; unknown users get a fresh cold-start slot."""
        with self._lock:
            if raw not in self._user_index:
                self._user_index[raw] = len(self.user_ids)
                self.user_ids.append(raw)
                self.user_records.append({})
                self.user_latents.append(self._encode_user(len(self.user_ids) - 1, count=False))
            return self._user_index[raw]

    def resolve_item(self, raw: str) -> int:
        try:
            return self._item_index[raw]
        except KeyError:
            raise UnknownIdError(f"unknown item {raw!r}") from None

    # -- encoders --------------------------------------------------------

    def user_history(self, user_id: int):
        return _latest_h(self.user_records[user_id], self.cfg.history_len)

    def item_profile(self, item_id: int):
        return _latest_h(self.item_records[item_id], self.cfg.history_len)

    def _encode_user(self, user_id: int, count: bool = True) -> np.ndarray:
        if count:
            self.counter.user_passes += 1
        ids, rids, mask = self.user_history(user_id)
        return M.user_latents(self.store, self.cfg, ids[None], rids[None], mask[None]).data[0]

    def _encode_item(self, item_id: int) -> np.ndarray:
        self.counter.item_passes += 1
        return self._item_pass(item_id, use_cached_doc=True)

    def _item_pass(self, item_id: int, use_cached_doc: bool) -> np.ndarray:
        ids, rids, mask = self.item_profile(item_id)
        sel = slice(item_id, item_id + 1)
        if use_cached_doc and self.doc_vecs is not None:
            out = M.item_latents(self.store, self.cfg, ids[None], rids[None], mask[None], doc_vecs=self.doc_vecs[sel])
        else:
            out = M.item_latents(
                self.store, self.cfg, ids[None], rids[None], mask[None], self.docs.tokens[sel], self.docs.lengths[sel]
            )
        return out.data[0]

    def recompute_user(self, user_id: int) -> np.ndarray:
        """Fresh encoder pass over the stored history (neither cached nor counted)."""
        ids, rids, mask = self.user_history(user_id)
        return M.user_latents(self.store, self.cfg, ids[None], rids[None], mask[None]).data[0]

    def recompute_item(self, item_id: int) -> np.ndarray:
        """Fresh pass over the stored profile, document CNN included."""
        return self._item_pass(item_id, use_cached_doc=False)

    # -- public operations -----------------------------------------------

    def user_latent(self, user_id: int) -> np.ndarray:
        self._check_user(user_id)
        return self.user_latents[user_id]

    def _check_user(self, user_id: int) -> None:
        if not 0 <= user_id < self.n_users:
            raise UnknownIdError(f"user id {user_id} outside [0, {self.n_users})")

    def refresh_user(self, user_id: int, new_interactions: Iterable[Interaction]) -> np.ndarray:
        """Fold new interactions into the user's history and re-encode it.

        Touched items get their profiles and latents refreshed too, provided
        the user has a trained embedding (cold-start users do not).
        """
        new = list(new_interactions)
        with self._lock:
            self._check_user(user_id)
            if not new:
                return self.user_latents[user_id]
            for it in new:
                if not 0 <= it.item_id < len(self.item_records):
                    raise UnknownIdError(f"item id {it.item_id} outside [0, {len(self.item_records)})")
                if not 1 <= it.rating <= 5:
                    raise ValidationError(f"rating {it.rating} outside [1, 5]")
            touched = []
            records = self.user_records[user_id]
            for it in new:
                prev = records.get(it.item_id)
                if prev is None or it.timestamp >= prev[1]:
                    records[it.item_id] = (it.rating, it.timestamp)
                    if user_id < self.cfg.n_users:
                        self.item_records[it.item_id][user_id] = (it.rating, it.timestamp)
                        if it.item_id not in touched:
                            touched.append(it.item_id)
            self.user_latents[user_id] = self._encode_user(user_id)
            for item in touched:
                self.item_latents[item] = self._encode_item(item)
            return self.user_latents[user_id]

    def scores(self, user_id: int, items: np.ndarray) -> np.ndarray:
        items = np.asarray(items, dtype=np.int64)
        u = np.repeat(self.user_latent(user_id)[None], len(items), axis=0)
        return M.score_latents(self.store, self.cfg, u, self.item_latents[items])

    def recommend_top_k(self, user_id: int, k: int = 10, candidates: Iterable[int] | None = None) -> list[tuple[int, float]]:
        """Top-``k`` (item, score) pairs; ties go to the smaller item id."""
        if k <= 0:
            return []
        with self._lock:
            self._check_user(user_id)
            if candidates is None:
                seen = np.fromiter(self.user_records[user_id].keys(), dtype=np.int64)
                mask = np.ones(len(self.item_records), dtype=bool)
                mask[seen] = False
                cand = np.flatnonzero(mask)
            else:
                cand = np.asarray(sorted(set(candidates)), dtype=np.int64)
            if len(cand) == 0:
                return []
            sc = self.scores(user_id, cand).astype(np.float64)
        order = np.lexsort((cand, -sc))[:k]
        return [(int(cand[j]), float(sc[j])) for j in order]

    def verify_frozen(self) -> int:
        """Raise unless the parameters still match the load-time fingerprint."""
        now = store_fingerprint(self.store, self.cfg)
        if now != self.fingerprint:
            raise CorruptionError(f"parameters changed: fingerprint {now:#010x} != {self.fingerprint:#010x}")
        return now
