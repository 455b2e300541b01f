"""Prepared-dataset directory: the hand-off between ``prep`` and everything else.

The directory holds flat binary tables as ``.npy`` files, plain-text id and
vocabulary lists, and ``manifest.json`` recording a SHA-256 for every file.
All writers are deterministic, so identical inputs give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from harc import corpus
from harc.corpus import Dataset, DocumentTable, LeaveOneOutCase
from harc.errors import ValidationError

FORMAT_VERSION = 1


@dataclass
class PreparedData:
    task: str
    seed: int
    full: Dataset
    train: Dataset
    docs: DocumentTable
    vocab_words: tuple[str, ...]
    valid: Dataset | None = None
    test: Dataset | None = None
    valid_cases: list[LeaveOneOutCase] = field(default_factory=list)
    test_cases: list[LeaveOneOutCase] = field(default_factory=list)
    word_table: np.ndarray | None = None
    n_negatives: int = 99
    manifest: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return self.full.n_users

    @property
    def n_items(self) -> int:
        return self.full.n_items

    @property
    def vocab_rows(self) -> int:
        return len(self.vocab_words) + 2


def prepare(
    ratings_path,
    docs_path,
    stopwords_path=None,
    wordvecs_path=None,
    task: str = "rating",
    seed: int = 0,
    ratings_format: str | None = None,
    min_user_ratings: int = 3,
    v_max: int = corpus.DEFAULT_VMAX,
    rho: int = corpus.DEFAULT_RHO,
    n_negatives: int = 99,
    word_dim: int | None = None,
) -> PreparedData:
    """Run the whole ingestion pipeline and return the in-memory result."""
    if task not in ("rating", "ranking"):
        raise ValidationError(f"task must be rating or ranking, got {task!r}")
    raw = corpus.parse_ratings(ratings_path, ratings_format)
    texts = corpus.parse_documents(docs_path)
    stop = corpus.load_stopwords(stopwords_path) if stopwords_path else frozenset()

    index = raw.item_index()
    with_docs = [index[r] for r in texts if r in index and texts[r].strip()]
    full = corpus.filter_dataset(raw, min_user_ratings, with_docs)
    vocab = corpus.build_vocabulary({r: texts[r] for r in full.item_ids}, stop, v_max)
    docs = corpus.encode_documents(full, texts, vocab, rho)

    table = None
    if wordvecs_path:
        dim = word_dim or sniff_vector_width(wordvecs_path)
        table = corpus.load_word_vectors(wordvecs_path, vocab, dim, seed=seed).matrix

    data = PreparedData(task=task, seed=seed, full=full, train=full, docs=docs, vocab_words=vocab.words,
                        word_table=table, n_negatives=n_negatives)
    if task == "rating":
        data.train, data.valid, data.test = corpus.split_rating_task(full, (0.8, 0.1, 0.1), seed)
    else:
        rest, data.test_cases = corpus.split_leave_one_out(full, n_negatives, seed)
        # validation cases come from the remaining history, sampled against the full one
        data.train, data.valid_cases = corpus.split_leave_one_out(rest, n_negatives, seed + 1, interacted=full)
    return data


def sniff_vector_width(path) -> int:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                return int(parts[1])
            return len(parts) - 1
    raise ValidationError(f"{path}: word-vector file is empty")


# -- on-disk layout ----------------------------------------------------------


def _cases_array(cases: list[LeaveOneOutCase], n_neg: int) -> np.ndarray:
    arr = np.zeros((len(cases), 2 + n_neg), dtype=np.int64)
    for r, c in enumerate(cases):
        arr[r, 0], arr[r, 1], arr[r, 2:] = c.user_id, c.positive, c.negatives
    return arr


def _cases_from(arr: np.ndarray) -> list[LeaveOneOutCase]:
    return [LeaveOneOutCase(int(r[0]), int(r[1]), r[2:].copy()) for r in arr]


def _write_lines(path: Path, lines) -> None:
    path.write_text("".join(f"{x}\n" for x in lines), encoding="utf-8")


def _save_npy(path: Path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        np.save(fh, np.ascontiguousarray(arr), allow_pickle=False)


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_prepared(data: PreparedData, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_lines(out / "users.txt", data.full.user_ids)
    _write_lines(out / "items.txt", data.full.item_ids)
    _write_lines(out / "vocab.txt", data.vocab_words)
    _save_npy(out / "interactions.npy", data.full.as_array())
    _save_npy(out / "train.npy", data.train.as_array())
    _save_npy(out / "doc_tokens.npy", data.docs.tokens)
    _save_npy(out / "doc_lengths.npy", data.docs.lengths)
    if data.task == "rating":
        _save_npy(out / "valid.npy", data.valid.as_array())
        _save_npy(out / "test.npy", data.test.as_array())
    else:
        _save_npy(out / "valid_cases.npy", _cases_array(data.valid_cases, data.n_negatives))
        _save_npy(out / "test_cases.npy", _cases_array(data.test_cases, data.n_negatives))
    if data.word_table is not None:
        _save_npy(out / "word_table.npy", data.word_table.astype(np.float32))

    # only what this function wrote, so stray files in ``out`` do not leak in
    files = ["users.txt", "items.txt", "vocab.txt", "interactions.npy", "train.npy", "doc_tokens.npy", "doc_lengths.npy"]
    files += ["valid.npy", "test.npy"] if data.task == "rating" else ["valid_cases.npy", "test_cases.npy"]
    if data.word_table is not None:
        files.append("word_table.npy")
    files.sort()
    manifest = {
        "format_version": FORMAT_VERSION,
        "task": data.task,
        "seed": data.seed,
        "n_users": data.n_users,
        "n_items": data.n_items,
        "n_interactions": len(data.full),
        "n_train": len(data.train),
        "vocab_size": len(data.vocab_words),
        "doc_len": data.docs.rho,
        "word_dim": None if data.word_table is None else int(data.word_table.shape[1]),
        "files": {name: sha256_file(out / name) for name in files},
    }
    if data.task == "ranking":
        manifest["n_negatives"] = data.n_negatives
        manifest["n_test_cases"] = len(data.test_cases)
        manifest["n_valid_cases"] = len(data.valid_cases)
    else:
        manifest["n_valid"] = len(data.valid)
        manifest["n_test"] = len(data.test)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    data.manifest = manifest
    return manifest


def load_prepared(path, verify: bool = True) -> PreparedData:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise ValidationError(f"{root}: not a prepared-data directory (no manifest.json)")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"{root}: unsupported prepared-data version {manifest.get('format_version')}")
    if verify:
        for name, digest in manifest["files"].items():
            if sha256_file(root / name) != digest:
                raise ValidationError(f"{root / name}: content hash does not match manifest")

    def lines(name):
        return tuple((root / name).read_text(encoding="utf-8").splitlines())

    user_ids, item_ids = lines("users.txt"), lines("items.txt")
    load = lambda name: np.load(root / name, allow_pickle=False)  # noqa: E731
    data = PreparedData(
        task=manifest["task"],
        seed=manifest["seed"],
        full=Dataset.from_array(load("interactions.npy"), user_ids, item_ids),
        train=Dataset.from_array(load("train.npy"), user_ids, item_ids),
        docs=DocumentTable(load("doc_tokens.npy"), load("doc_lengths.npy")),
        vocab_words=lines("vocab.txt"),
        n_negatives=manifest.get("n_negatives", 99),
        manifest=manifest,
    )
    if data.task == "rating":
        data.valid = Dataset.from_array(load("valid.npy"), user_ids, item_ids)
        data.test = Dataset.from_array(load("test.npy"), user_ids, item_ids)
    else:
        data.valid_cases = _cases_from(load("valid_cases.npy"))
        data.test_cases = _cases_from(load("test_cases.npy"))
    if (root / "word_table.npy").exists():
        data.word_table = load("word_table.npy")
    return data
