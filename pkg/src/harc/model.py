"""Hybrid attention recommender: history encoders, text CNN and MLP head.

The batched functions (``user_latents``, ``item_latents``, ``scores``) build
autodiff graphs and are what training and serving use.  The single-instance
helpers (``encode_user``, ``encode_item``, ...) wrap them for one history or
profile at a time and return plain arrays.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Literal

import numpy as np

from harc.corpus import DocumentTable, ItemDocument, ItemProfile, UserHistory
from harc.errors import UnknownIdError, ValidationError
from harc.numerics import tensor as T
from harc.numerics.params import ParameterStore, init_embedding, init_glorot, make_rng
from harc.numerics.tensor import Tensor

Pooling = Literal["attention", "mean", "max"]
Task = Literal["rating", "ranking"]


@dataclass
class ModelConfig:
    n_users: int = 0
    n_items: int = 0
    vocab_rows: int = 2
    d_item: int = 64
    d_user: int = 64
    d_rating: int = 64
    d_attn: int = 32
    word_dim: int = 300
    window_sizes: tuple[int, ...] = (3, 4, 5)
    filters_per_size: int = 100
    d_doc: int = 64
    d_latent: int = 64
    mlp_layers: tuple[int, ...] = (128, 64, 32, 1)
    history_len: int = 50
    doc_len: int = 300
    use_rating_info: bool = True
    pooling: Pooling = "attention"
    use_user_info_in_item: bool = True
    use_doc_info: bool = True
    use_pretrained_words: bool = True
    task: Task = "rating"
    lr: float = 0.001
    batch_size: int = 256
    train_negatives: int = 4
    init_scale: float = 0.05

    def __post_init__(self):
        self.window_sizes = tuple(int(w) for w in self.window_sizes)
        self.mlp_layers = tuple(int(w) for w in self.mlp_layers)
        self.validate()

    def validate(self) -> None:
        if not self.mlp_layers or self.mlp_layers[-1] != 1:
            raise ValidationError(f"mlp_layers must end in 1, got {list(self.mlp_layers)}")
        if not (self.use_user_info_in_item or self.use_doc_info):
            raise ValidationError("at least one of use_user_info_in_item / use_doc_info must be enabled")
        if self.pooling not in ("attention", "mean", "max"):
            raise ValidationError(f"pooling must be attention, mean or max, got {self.pooling!r}")
        if self.task not in ("rating", "ranking"):
            raise ValidationError(f"task must be rating or ranking, got {self.task!r}")
        if self.batch_size < 1 or self.history_len < 1 or self.doc_len < 1:
            raise ValidationError("batch_size, history_len and doc_len must be positive")

    @property
    def mlp_input(self) -> int:
        return 2 * self.d_latent

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class LatentVector:
    values: np.ndarray
    source: Literal["user", "item"]


# -- parameters --------------------------------------------------------------


def init_store(cfg: ModelConfig, seed: int, word_table: np.ndarray | None = None, dtype=np.float32) -> ParameterStore:
    """Fresh parameters: uniform embeddings, Glorot weights, zero biases."""
    rng = make_rng(seed, 0x1A17)
    s = ParameterStore(dtype=np.dtype(dtype))
    scale = cfg.init_scale

    def emb(name, rows, dim, pad=True):
        w = init_embedding(rng, rows, dim, scale)
        if pad:
            w[0] = 0
        s.add(name, w)

    def dense(prefix, fan_in, fan_out):
        s.add(f"{prefix}.W", init_glorot(rng, fan_in, fan_out))
        s.add(f"{prefix}.b", np.zeros(fan_out))

    def pooled_side(prefix, entity, n_entities, d):
        emb(f"{prefix}.{entity}_emb", n_entities + 1, d)
        if cfg.use_rating_info:
            emb(f"{prefix}.rating_emb", 6, cfg.d_rating)
            dense(f"{prefix}.fuse", d + cfg.d_rating, d)
        if cfg.pooling == "attention":
            dense(f"{prefix}.attn", d, cfg.d_attn)
            s.add(f"{prefix}.attn.h", init_glorot(rng, cfg.d_attn, 1))

    pooled_side("u", "item", cfg.n_items, cfg.d_item)
    dense("u.out", cfg.d_item, cfg.d_latent)

    item_in = 0
    if cfg.use_user_info_in_item:
        pooled_side("i", "user", cfg.n_users, cfg.d_user)
        item_in += cfg.d_user
    if cfg.use_doc_info:
        if word_table is not None and cfg.use_pretrained_words:
            if word_table.shape != (cfg.vocab_rows, cfg.word_dim):
                raise ValidationError(
                    f"word table shape {word_table.shape} != ({cfg.vocab_rows}, {cfg.word_dim})"
                )
            w = np.array(word_table, dtype=np.float64)
            w[0] = 0
            s.add("doc.word_emb", w)
        else:
            emb("doc.word_emb", cfg.vocab_rows, cfg.word_dim)
        for h in cfg.window_sizes:
            dense(f"doc.conv{h}", h * cfg.word_dim, cfg.filters_per_size)
        dense("doc.fc", len(cfg.window_sizes) * cfg.filters_per_size, cfg.d_doc)
        item_in += cfg.d_doc
    dense("i.out", item_in, cfg.d_latent)

    width = cfg.mlp_input
    for k, out in enumerate(cfg.mlp_layers):
        dense(f"mlp.{k}", width, out)
        width = out
    return s


# -- building blocks ---------------------------------------------------------


def _affine(store: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    return T.linear(x, store.leaf(f"{prefix}.W"), store.leaf(f"{prefix}.b"))


def _check_ids(ids: np.ndarray, mask: np.ndarray, n: int, what: str) -> None:
    live = ids[mask.astype(bool)]
    if live.size and (live.min() < 0 or live.max() >= n):
        bad = live[(live < 0) | (live >= n)][0]
        raise UnknownIdError(f"{what} id {int(bad)} outside [0, {n})")


def _check_ratings(rating_ids: np.ndarray, mask: np.ndarray) -> None:
    live = rating_ids[mask.astype(bool)]
    if live.size and (live.min() < 1 or live.max() > 5):
        raise ValidationError("rating ids in unmasked slots must lie in [1, 5]")


def pool(store: ParameterStore, cfg: ModelConfig, prefix: str, entries: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Collapse (B, H, d) entries to (B, d); returns the context and slot weights."""
    m = np.asarray(mask, dtype=bool)
    if cfg.pooling == "attention":
        hidden = T.relu(_affine(store, f"{prefix}.attn", entries))
        logits = T.reshape(T.matmul(hidden, store.leaf(f"{prefix}.attn.h")), m.shape)
        weights = T.masked_softmax(logits, m)
        return T.weighted_sum(weights, entries), weights.data
    if cfg.pooling == "mean":
        counts = m.sum(axis=1, keepdims=True)
        w = np.divide(m, counts, out=np.zeros(m.shape), where=counts > 0).astype(entries.dtype)
        return T.weighted_sum(T.constant(w), entries), w
    ctx = T.masked_max(entries, m)
    return ctx, np.zeros(m.shape, dtype=entries.dtype)


def _history_entries(store, cfg, prefix, table, ids, rating_ids, mask) -> Tensor:
    ids = np.asarray(ids)
    rows = np.where(np.asarray(mask, dtype=bool), ids + 1, 0)
    entries = T.gather(store.leaf(f"{prefix}.{table}"), rows, padding_idx=0)
    if cfg.use_rating_info:
        rids = np.where(np.asarray(mask, dtype=bool), rating_ids, 0)
        r = T.gather(store.leaf(f"{prefix}.rating_emb"), rids, padding_idx=0)
        entries = T.relu(_affine(store, f"{prefix}.fuse", T.concat([entries, r], axis=-1)))
    return entries


def user_latents(store: ParameterStore, cfg: ModelConfig, item_ids, rating_ids, mask) -> Tensor:
    """(B, H) histories -> (B, d_latent) user latent vectors."""
    _check_ids(np.asarray(item_ids), np.asarray(mask), cfg.n_items, "item")
    if cfg.use_rating_info:
        _check_ratings(np.asarray(rating_ids), np.asarray(mask))
    entries = _history_entries(store, cfg, "u", "item_emb", item_ids, rating_ids, mask)
    ctx, _ = pool(store, cfg, "u", entries, mask)
    return _affine(store, "u.out", ctx)


def doc_vectors(store: ParameterStore, cfg: ModelConfig, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
    """(N, rho) token ids with real lengths -> (N, d_doc) document vectors.

    Positions past the longest document are pure padding and contribute
    nothing, so the sequence is cropped there before the convolution.
    """
    tokens = np.asarray(tokens)
    n_live = np.minimum(np.asarray(lengths), tokens.shape[1])
    span = max(int(n_live.max(initial=0)), 1)
    mask = np.arange(span)[None, :] < n_live[:, None]
    ids = np.where(mask, tokens[:, :span], 0)
    # zero the padded rows explicitly so the PAD row never reaches the loss
    words = T.gather(store.leaf("doc.word_emb"), ids, padding_idx=0)
    words = T.mul(words, mask[:, :, None].astype(words.dtype))
    pooled = []
    for h in cfg.window_sizes:
        windows = T.window_unfold(words, h)
        feat = T.relu(_affine(store, f"doc.conv{h}", windows))
        # window at i covers tokens i..i+h-1: live if any of them is real
        live = np.zeros_like(mask)
        for k in range(h):
            live[:, : span - k] |= mask[:, k:]
        pooled.append(T.masked_max(feat, live))
    q = T.concat(pooled, axis=-1)
    return T.relu(_affine(store, "doc.fc", q))


def item_latents(
    store: ParameterStore,
    cfg: ModelConfig,
    user_ids,
    rating_ids,
    mask,
    doc_tokens: np.ndarray | None = None,
    doc_lengths: np.ndarray | None = None,
    doc_index: np.ndarray | None = None,
    doc_vecs: np.ndarray | None = None,
) -> Tensor:
    """(B, H) profiles plus documents -> (B, d_latent) item latent vectors.

    ``doc_tokens``/``doc_lengths`` may hold one row per distinct item, with
    ``doc_index`` mapping each batch row to its document row.  Passing
    precomputed ``doc_vecs`` (rows of :func:`doc_vectors`) skips the CNN.
    """
    parts = []
    b = np.asarray(mask).shape[0]
    if cfg.use_user_info_in_item:
        _check_ids(np.asarray(user_ids), np.asarray(mask), cfg.n_users, "user")
        if cfg.use_rating_info:
            _check_ratings(np.asarray(rating_ids), np.asarray(mask))
        entries = _history_entries(store, cfg, "i", "user_emb", user_ids, rating_ids, mask)
        ctx, _ = pool(store, cfg, "i", entries, mask)
        parts.append(ctx)
    if cfg.use_doc_info:
        if doc_vecs is not None:
            docs = T.constant(np.asarray(doc_vecs, dtype=store.dtype))
        else:
            docs = doc_vectors(store, cfg, doc_tokens, doc_lengths)
        if doc_index is not None:
            docs = T.gather(docs, np.asarray(doc_index))
        if docs.shape[0] != b:
            raise ValidationError(f"{docs.shape[0]} documents for {b} profiles")
        parts.append(docs)
    x = parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)
    return T.relu(_affine(store, "i.out", x))


def head(store: ParameterStore, cfg: ModelConfig, users: Tensor, items: Tensor) -> Tensor:
    """MLP over concat(user, item); returns (B,) raw rating or probability."""
    x = T.concat([users, items], axis=-1)
    last = len(cfg.mlp_layers) - 1
    for k in range(last):
        x = T.relu(_affine(store, f"mlp.{k}", x))
    out = T.reshape(_affine(store, f"mlp.{last}", x), (x.shape[0],))
    return T.sigmoid(out) if cfg.task == "ranking" else out


def clamp_rating(pred: np.ndarray) -> np.ndarray:
    return np.clip(pred, 1.0, 5.0)


def rating_loss(pred: Tensor, target) -> Tensor:
    return T.mean(T.square(T.sub(pred, T.as_tensor(np.asarray(target, dtype=pred.dtype)))))


def ranking_loss(prob: Tensor, labels) -> Tensor:
    return T.bce(prob, labels)


# -- single-instance forms ---------------------------------------------------


def fuse_entry(entity_emb, rating_emb, w, b) -> np.ndarray:
    """ReLU(W^T concat(entity, rating) + b) with ``w`` stored input-major."""
    x = T.concat([T.constant(np.atleast_2d(entity_emb)), T.constant(np.atleast_2d(rating_emb))])
    return T.relu(T.linear(x, T.constant(w), T.constant(b))).data[0]


def attention_pool(entries, mask, w, b, h, pooling: Pooling = "attention") -> tuple[np.ndarray, np.ndarray]:
    """Pool one (H, d) matrix of entries; returns (context, weights)."""
    entries = np.asarray(entries)
    s = ParameterStore(dtype=entries.dtype)
    s.add("x.attn.W", np.asarray(w))
    s.add("x.attn.b", np.asarray(b))
    s.add("x.attn.h", np.asarray(h).reshape(-1, 1))
    cfg = _PoolCfg(pooling)
    ctx, weights = pool(s, cfg, "x", T.constant(entries[None]), np.asarray(mask)[None])
    return ctx.data[0], weights[0]


@dataclass
class _PoolCfg:
    pooling: Pooling


def encode_user(hist: UserHistory, store: ParameterStore, cfg: ModelConfig) -> LatentVector:
    out = user_latents(store, cfg, hist.item_ids[None], hist.rating_ids[None], hist.mask[None])
    return LatentVector(out.data[0], "user")


def encode_document_cnn(doc: ItemDocument, store: ParameterStore, cfg: ModelConfig) -> np.ndarray:
    return doc_vectors(store, cfg, doc.token_ids[None], np.array([doc.raw_length])).data[0]


def encode_item(profile: ItemProfile, store: ParameterStore, cfg: ModelConfig) -> LatentVector:
    doc = profile.document
    tokens = lengths = None
    if cfg.use_doc_info:
        if doc is None:
            raise ValidationError("document branch enabled but profile has no document")
        tokens, lengths = doc.token_ids[None], np.array([doc.raw_length])
    out = item_latents(store, cfg, profile.user_ids[None], profile.rating_ids[None], profile.mask[None], tokens, lengths)
    return LatentVector(out.data[0], "item")


def predict(u: LatentVector, i: LatentVector, store: ParameterStore, cfg: ModelConfig) -> float:
    out = head(store, cfg, T.constant(u.values[None]), T.constant(i.values[None]))
    return float(out.data[0])


def loss_rating(pred, target) -> float:
    return float(rating_loss(T.constant(np.asarray(pred, dtype=np.float64)), target).data)


def loss_ranking(pred, label) -> float:
    return float(ranking_loss(T.constant(np.asarray(pred, dtype=np.float64)), np.asarray(label)).data)


# -- whole-table encoding (evaluation and serving) ---------------------------


def encode_all_users(store, cfg, index, users: np.ndarray | None = None, chunk: int = 1024) -> np.ndarray:
    users = np.arange(cfg.n_users) if users is None else np.asarray(users)
    out = np.zeros((len(users), cfg.d_latent), dtype=store.dtype)
    for lo in range(0, len(users), chunk):
        sel = users[lo : lo + chunk]
        ids, rids, mask = index.user_histories(sel)
        out[lo : lo + len(sel)] = user_latents(store, cfg, ids, rids, mask).data
    return out


def encode_all_items(store, cfg, index, docs: DocumentTable, items: np.ndarray | None = None, chunk: int = 256) -> np.ndarray:
    items = np.arange(cfg.n_items) if items is None else np.asarray(items)
    out = np.zeros((len(items), cfg.d_latent), dtype=store.dtype)
    for lo in range(0, len(items), chunk):
        sel = items[lo : lo + chunk]
        ids, rids, mask = index.item_profiles(sel)
        out[lo : lo + len(sel)] = item_latents(
            store, cfg, ids, rids, mask, docs.tokens[sel], docs.lengths[sel]
        ).data
    return out


def score_latents(store, cfg, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Head output for aligned rows of user and item latents."""
    return head(store, cfg, T.constant(users), T.constant(items)).data
