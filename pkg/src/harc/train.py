"""Mini-batch training with validation-based early stopping and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from harc import eval as E
from harc import model as M
from harc.corpus import Dataset, DocumentTable, HistoryIndex
from harc.errors import CorruptionError, NumericError
from harc.numerics import checkpoint as ckpt
from harc.numerics.grad import forward_backward
from harc.numerics.params import ParameterStore, adam_step, make_rng
from harc.prepared import PreparedData

log = logging.getLogger(__name__)

CONFIG_TENSOR = "__meta__.config"


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    hist_items: np.ndarray
    hist_ratings: np.ndarray
    hist_mask: np.ndarray
    prof_users: np.ndarray
    prof_ratings: np.ndarray
    prof_mask: np.ndarray
    doc_tokens: np.ndarray
    doc_lengths: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


def _examples(split: Dataset, cfg: M.ModelConfig, rng: np.random.Generator, index: HistoryIndex):
    """(users, items, targets) for one epoch, before shuffling."""
    if cfg.task == "rating":
        return split.users, split.items, split.ratings.astype(np.float64)
    # ranking: every positive plus ``train_negatives`` unseen items for its user
    n_neg = cfg.train_negatives
    users = [split.users]
    items = [split.items]
    labels = [np.ones(len(split))]
    if n_neg:
        seen = np.zeros((split.n_users, split.n_items), dtype=bool) if split.n_users * split.n_items <= 5e7 else None
        neg_u = np.repeat(split.users, n_neg)
        neg_i = rng.integers(0, split.n_items, size=len(neg_u))
        if seen is not None:
            seen[split.users, split.items] = True
            # redraw collisions with the user's positives until none remain
            bad = seen[neg_u, neg_i]
            while bad.any():
                neg_i[bad] = rng.integers(0, split.n_items, size=int(bad.sum()))
                bad = seen[neg_u, neg_i]
        users.append(neg_u)
        items.append(neg_i)
        labels.append(np.zeros(len(neg_u)))
    return np.concatenate(users), np.concatenate(items), np.concatenate(labels)


def make_batches(
    split: Dataset,
    cfg: M.ModelConfig,
    seed: int,
    epoch: int,
    index: HistoryIndex | None = None,
    docs: DocumentTable | None = None,
) -> list[Batch]:
    """Deterministic shuffled batches for one epoch.

    Each row's history excludes its target item and its item profile excludes
    its user, so the label never leaks into the inputs.
    """
    index = index or HistoryIndex(split, cfg.history_len)
    rng = make_rng(seed, epoch, 0xBA7C)
    users, items, targets = _examples(split, cfg, rng, index)
    order = rng.permutation(len(users))
    users, items, targets = users[order], items[order], targets[order]
    batches = []
    for lo in range(0, len(users), cfg.batch_size):
        u = users[lo : lo + cfg.batch_size]
        i = items[lo : lo + cfg.batch_size]
        hi, hr, hm = index.user_histories(u, i)
        pu, pr, pm = index.item_profiles(i, u)
        if docs is not None:
            dt, dl = docs.tokens[i], docs.lengths[i]
        else:
            dt, dl = np.zeros((len(u), 1), dtype=np.int32), np.zeros(len(u), dtype=np.int64)
        batches.append(Batch(u, i, hi, hr, hm, pu, pr, pm, dt, dl, targets[lo : lo + cfg.batch_size]))
    return batches


def batch_predictions(store: ParameterStore, cfg: M.ModelConfig, batch: Batch):
    U = M.user_latents(store, cfg, batch.hist_items, batch.hist_ratings, batch.hist_mask)
    uniq, first, inv = np.unique(batch.items, return_index=True, return_inverse=True)
    I = M.item_latents(
        store, cfg, batch.prof_users, batch.prof_ratings, batch.prof_mask,
        batch.doc_tokens[first], batch.doc_lengths[first], inv,
    )
    return M.head(store, cfg, U, I)


def batch_loss(store: ParameterStore, batch: Batch, cfg: M.ModelConfig):
    """The training graph: (store, inputs, targets) -> scalar loss tensor."""
    pred = batch_predictions(store, cfg, batch)
    if cfg.task == "rating":
        return M.rating_loss(pred, batch.targets)
    return M.ranking_loss(pred, batch.targets)


def _graph(cfg):
    return lambda store, batch, _targets: batch_loss(store, batch, cfg)


# -- checkpoints -------------------------------------------------------------


def checkpoint_tensors(store: ParameterStore, cfg: M.ModelConfig) -> dict[str, np.ndarray]:
    tensors = {name: p.value for name, p in store.items()}
    tensors[CONFIG_TENSOR] = ckpt.bytes_to_tensor(cfg.to_json().encode("utf-8"))
    return tensors


def config_record(cfg: M.ModelConfig) -> str:
    raw = json.loads(cfg.to_json())
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in raw.items())


def save_checkpoint(store: ParameterStore, cfg: M.ModelConfig, path) -> int:
    """Write the container plus a ``.config`` sidecar; returns the CRC."""
    path = Path(path)
    crc = ckpt.write_container(path, checkpoint_tensors(store, cfg))
    path.with_name(path.name + ".config").write_text(config_record(cfg), encoding="utf-8")
    return crc


def load_checkpoint(path) -> tuple[ParameterStore, M.ModelConfig]:
    tensors = ckpt.read_container(path)
    if CONFIG_TENSOR not in tensors:
        raise CorruptionError(f"{path}: checkpoint has no embedded config")
    cfg = M.ModelConfig.from_json(ckpt.tensor_to_bytes(tensors.pop(CONFIG_TENSOR)).decode("utf-8"))
    store = ParameterStore()
    for name in sorted(tensors):
        store.add(name, tensors[name])
    return store, cfg


def store_fingerprint(store: ParameterStore, cfg: M.ModelConfig) -> int:
    return ckpt.crc_of(ckpt.encode_tensors(checkpoint_tensors(store, cfg)))


# -- training loop -----------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    seconds: float


@dataclass
class TrainReport:
    metric: str  # "rmse" (lower is better) or "hr@10" (higher is better)
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    checkpoint_path: str | None = None

    @property
    def best_metric(self) -> float:
        return self.epochs[self.best_epoch].val_metric

    @property
    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def metrics_lines(self, with_time: bool = False) -> str:
        """One JSON record per epoch; timing is opt-in so reruns are byte-identical."""
        out = []
        for e in self.epochs:
            rec = {"epoch": e.epoch, "train_loss": e.train_loss, "val_metric": e.val_metric}
            if with_time:
                rec["seconds"] = round(e.seconds, 3)
            out.append(json.dumps(rec))
        return "\n".join(out) + "\n"


def validation_metric(store, cfg, data: PreparedData) -> float:
    scorer = E.ModelScorer(store, cfg, data.train, data.docs)
    if cfg.task == "rating":
        if data.valid is None or len(data.valid) == 0:
            return math.nan
        return E.evaluate_rating(scorer, data.valid)
    if not data.valid_cases:
        return math.nan
    return E.evaluate_ranking(scorer, data.valid_cases, 10).hr


def config_for(data: PreparedData, **overrides) -> M.ModelConfig:
    """A config sized for ``data``; ``overrides`` set any other field."""
    base = dict(
        n_users=data.n_users, n_items=data.n_items, vocab_rows=data.vocab_rows,
        doc_len=data.docs.rho, task=data.task,
    )
    if data.word_table is not None:
        base["word_dim"] = data.word_table.shape[1]
    base.update(overrides)
    return M.ModelConfig(**base)


def train(
    cfg: M.ModelConfig,
    data: PreparedData,
    seed: int = 0,
    max_epochs: int = 30,
    patience: int | None = 10,
    out_dir=None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[TrainReport, ParameterStore]:
    """Train on ``data.train``; returns the report and the best-epoch store.

    ``patience=None`` disables early stopping.  With ``out_dir`` the best
    checkpoint is written to ``out_dir/model.harc``.
    """
    cfg.validate()
    store = M.init_store(cfg, seed, data.word_table if cfg.use_pretrained_words else None)
    index = HistoryIndex(data.train, cfg.history_len)
    graph = _graph(cfg)
    higher_better = cfg.task == "ranking"
    report = TrainReport(metric="hr@10" if higher_better else "rmse")
    best_values = store.snapshot()
    best_score = None
    stale = 0

    for epoch in range(max_epochs):
        t0 = time.perf_counter()
        batches = make_batches(data.train, cfg, seed, epoch, index, data.docs)
        total, count = 0.0, 0
        for b, batch in enumerate(batches):
            loss = forward_backward(graph, store, batch, batch.targets)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch}, batch {b} (first {len(batch)} rows)")
            adam_step(store, lr=cfg.lr)
            total += loss * len(batch)
            count += len(batch)
        train_loss = total / max(count, 1)
        val = validation_metric(store, cfg, data)
        if math.isnan(val):
            score_key = train_loss
        else:
            score_key = -val if higher_better else val
        rec = EpochRecord(epoch, train_loss, val, time.perf_counter() - t0)
        report.epochs.append(rec)
        log.info("epoch %d train_loss=%.6f val_%s=%.6f (%.1fs)", epoch, train_loss, report.metric, val, rec.seconds)
        if on_epoch:
            on_epoch(rec)

        if best_score is None or score_key < best_score:
            best_score, report.best_epoch, stale = score_key, epoch, 0
            best_values = store.snapshot()
        else:
            stale += 1
            if patience is not None and stale >= patience:
                break

    store.load_values(best_values)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "model.harc"
        save_checkpoint(store, cfg, path)
        report.checkpoint_path = str(path)
    return report, store
