"""``harc`` command line: prep, train, eval, recommend, refresh.

Every subcommand takes an optional ``--config`` file of ``key = value``
lines.  Values are JSON where that parses (``[3, 4, 5]``, ``true``, ``0.01``)
and bare strings otherwise.  Explicit flags override the file, and the
fully resolved configuration is written next to each command's outputs.

Failures print one JSON line on stderr and exit with a fixed code:
2 usage, 3 data or validation, 4 numeric, 5 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from harc import eval as E
from harc import prepared as P
from harc import train as TR
from harc.corpus import Interaction
from harc.errors import CorruptionError, HarcError, NumericError, UsageError
from harc.model import ModelConfig
from harc.serve import ProfileCache

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5
RESOLVED_NAME = "resolved.conf"
JOURNAL_NAME = "journal.tsv"

# sizes always come from the prepared data, never from a config file
_DERIVED = {"n_users", "n_items", "vocab_rows", "doc_len", "task"}
_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}


@dataclass
class RunConfig:
    ratings: str | None = None
    docs: str | None = None
    stopwords: str | None = None
    wordvecs: str | None = None
    format: str | None = None
    data: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    seed: int = 0
    task: str = "rating"
    epochs: int = 30
    patience: int | None = 10
    k: int = 10
    min_user_ratings: int = 3
    v_max: int = 8000
    rho: int = 300
    n_negatives: int = 99
    model: dict = field(default_factory=dict)

    def update(self, values: dict) -> None:
        for key, value in values.items():
            if key in _MODEL_FIELDS and key not in _RUN_FIELDS:
                self.model[key] = value
            else:
                setattr(self, key, value)

    def render(self, model_cfg: ModelConfig | None = None) -> str:
        """``key = value`` text; with ``model_cfg`` every model field is spelled out."""
        run = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        model = json.loads(model_cfg.to_json()) if model_cfg is not None else dict(self.model)
        lines = [f"{k} = {json.dumps(v)}" for k, v in sorted(run.items())]
        lines += [f"{k} = {json.dumps(v)}" for k, v in sorted(model.items())]
        return "\n".join(lines) + "\n"


_RUN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "model"}


def _coerce(key: str, raw: str, where: str):
    """Typed value for ``key``; the expected type comes from the field default."""
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if key in _MODEL_FIELDS:
        default = _MODEL_FIELDS[key].default
    else:
        default = _RUN_FIELDS[key].default
    if isinstance(value, str) and value.lower() in ("none", "null"):
        value = None
    if value is None:
        if key == "patience" or default is None:
            return None
        raise UsageError(f"{where}: {key} cannot be empty")
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false"):
                    raise ValueError
                return value.lower() == "true"
            return bool(value)
        if isinstance(default, tuple):
            items = value.split(",") if isinstance(value, str) else value
            return tuple(int(x) for x in items)
        if isinstance(default, int) or key == "patience":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise UsageError(f"{where}: bad value for {key}: {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _RUN_FIELDS and key not in _MODEL_FIELDS:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, f"{source}:{lineno}")
    return values


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))


# -- argument parsing --------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="harc", description="Hybrid attention recommender with document context.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prep", help="parse, filter, split and encode a raw dataset")
    _add_common(p)
    p.add_argument("--ratings")
    p.add_argument("--docs")
    p.add_argument("--stopwords")
    p.add_argument("--wordvecs")
    p.add_argument("--format", choices=["movielens", "csv"])
    p.add_argument("--task", choices=["rating", "ranking"])
    p.add_argument("--rho", type=int, help="document length in tokens")
    p.add_argument("--v-max", dest="v_max", type=int, help="vocabulary size")
    p.add_argument("--min-user-ratings", dest="min_user_ratings", type=int)

    p = sub.add_parser("train", help="train a model on a prepared directory")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-rating-info", dest="use_rating_info", action="store_const", const=False)
    p.add_argument("--pooling", choices=["attention", "mean", "max"])
    p.add_argument("--no-user-info", dest="use_user_info_in_item", action="store_const", const=False)
    p.add_argument("--no-doc-info", dest="use_doc_info", action="store_const", const=False)
    p.add_argument("--embed-size", dest="word_dim", type=int, choices=[100, 200, 300])
    p.add_argument("--no-pretrained", dest="use_pretrained_words", action="store_const", const=False)

    p = sub.add_parser("eval", help="score the held-out split")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--k", type=int)

    for name, text in (("recommend", "top-k items for a user"), ("refresh", "add interactions, then recommend")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.add_argument("--checkpoint")
        p.add_argument("--data")
        p.add_argument("--user", required=True, help="raw user id; unknown ids start cold")
        p.add_argument("--k", type=int)
        p.add_argument("--add", nargs="+" if name == "refresh" else "*", default=[], required=name == "refresh",
                       metavar="ITEM:RATING:TS")
        p.add_argument("--journal", help=f"interaction log replayed on load (default: OUT/{JOURNAL_NAME})")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    run = RunConfig()
    if args.config:
        run.update(load_config_file(args.config))
    flags = {
        k: v for k, v in vars(args).items()
        if v is not None and k not in ("config", "command", "verbose", "user", "add", "journal")
    }
    run.update(flags)
    return run


def _need(run: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(run, n) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _out_dir(run: RunConfig, default: str) -> Path:
    out = Path(run.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands -------------------------------------------------------------


def cmd_prep(run: RunConfig, args) -> int:
    _need(run, "ratings", "docs")
    data = P.prepare(
        run.ratings, run.docs, run.stopwords, run.wordvecs, task=run.task, seed=run.seed,
        ratings_format=run.format, min_user_ratings=run.min_user_ratings, v_max=run.v_max,
        rho=run.rho, n_negatives=run.n_negatives,
    )
    out = _out_dir(run, "prepared")
    (out / RESOLVED_NAME).write_text(run.render(), encoding="utf-8")
    manifest = P.save_prepared(data, out)
    print(E.format_summary({
        "out": str(out), "task": data.task, "users": data.n_users, "items": data.n_items,
        "interactions": manifest["n_interactions"], "train": manifest["n_train"], "vocab": manifest["vocab_size"],
    }), end="")
    return EXIT_OK


def model_config(run: RunConfig, data: P.PreparedData) -> ModelConfig:
    overrides = {k: v for k, v in run.model.items() if k not in _DERIVED}
    if overrides.get("use_user_info_in_item") is False and overrides.get("use_doc_info") is False:
        raise UsageError("--no-user-info and --no-doc-info together leave the item side empty")
    if data.word_table is not None and overrides.get("use_pretrained_words", True):
        width = data.word_table.shape[1]
        if overrides.get("word_dim", width) != width:
            raise UsageError(f"--embed-size {overrides['word_dim']} differs from the prepared word vectors ({width}); "
                             "prep with matching vectors or add --no-pretrained")
    if data.word_table is None:
        overrides.setdefault("use_pretrained_words", False)
    try:
        return TR.config_for(data, **overrides)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(run: RunConfig, args) -> int:
    _need(run, "data")
    data = P.load_prepared(run.data)
    run.task = data.task
    cfg = model_config(run, data)
    out = _out_dir(run, "run")
    (out / RESOLVED_NAME).write_text(run.render(cfg), encoding="utf-8")

    handler = logging.FileHandler(out / "train.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(message)s"))
    tlog = logging.getLogger("harc.train")
    tlog.addHandler(handler)
    tlog.setLevel(logging.INFO)
    tlog.propagate = args.verbose
    try:
        report, _ = TR.train(cfg, data, seed=run.seed, max_epochs=run.epochs, patience=run.patience, out_dir=out)
    finally:
        tlog.removeHandler(handler)
        handler.close()

    (out / "metrics.jsonl").write_text(report.metrics_lines(with_time=False), encoding="utf-8")
    summary = {
        "checkpoint": report.checkpoint_path, "metric": report.metric, "best_epoch": report.best_epoch,
        "best_value": report.best_metric, "epochs_run": len(report.epochs),
    }
    (out / "summary.txt").write_text(E.format_summary(summary), encoding="utf-8")
    print(E.format_summary(summary), end="")
    return EXIT_OK


def cmd_eval(run: RunConfig, args) -> int:
    _need(run, "checkpoint", "data")
    store, cfg = TR.load_checkpoint(run.checkpoint)
    data = P.load_prepared(run.data)
    if data.task != cfg.task:
        raise UsageError(f"checkpoint was trained for {cfg.task}, data is prepared for {data.task}")
    scorer = E.ModelScorer(store, cfg, data.train, data.docs)
    if cfg.task == "rating":
        metrics = {"task": "rating", "rmse": E.evaluate_rating(scorer, data.test), "n": len(data.test)}
        result = None
    else:
        result = E.evaluate_ranking(scorer, data.test_cases, run.k)
        pop = E.evaluate_ranking(E.popularity_baseline(data.train), data.test_cases, run.k)
        metrics = {
            "task": "ranking", f"hr@{run.k}": result.hr, f"ndcg@{run.k}": result.ndcg,
            f"pop_hr@{run.k}": pop.hr, "n": len(data.test_cases),
        }
    text = E.format_summary(metrics)
    if run.out:
        out = _out_dir(run, "eval")
        (out / RESOLVED_NAME).write_text(run.render(), encoding="utf-8")
        (out / "metrics.txt").write_text(text, encoding="utf-8")
        if result is not None:
            E.write_case_dump(out / "cases.tsv", result, data.full.user_ids, data.full.item_ids)
    print(text, end="")
    return EXIT_OK


def parse_add(text: str) -> tuple[str, int, int]:
    parts = text.rsplit(":", 2)
    if len(parts) != 3:
        raise UsageError(f"--add expects ITEM:RATING:TS, got {text!r}")
    try:
        return parts[0], int(parts[1]), int(parts[2])
    except ValueError:
        raise UsageError(f"--add expects integer rating and timestamp, got {text!r}") from None


def _journal_path(run: RunConfig, args) -> Path | None:
    if args.journal:
        return Path(args.journal)
    return Path(run.out) / JOURNAL_NAME if run.out else None


def read_journal(path: Path | None) -> list[tuple[str, str, int, int]]:
    if path is None or not path.exists():
        return []
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise CorruptionError(f"{path}:{lineno}: expected 4 tab-separated fields")
        rows.append((parts[0], parts[1], int(parts[2]), int(parts[3])))
    return rows


def _apply(cache: ProfileCache, user: str, adds) -> None:
    uid = cache.resolve_user(user)
    new = [Interaction(uid, cache.resolve_item(item), rating, ts) for item, rating, ts in adds]
    cache.refresh_user(uid, new)


def _serve(run: RunConfig, args, adds: list[tuple[str, int, int]]) -> int:
    _need(run, "checkpoint", "data")
    store, cfg = TR.load_checkpoint(run.checkpoint)
    data = P.load_prepared(run.data)
    cache = ProfileCache(store, cfg, data.train, data.docs)
    journal = _journal_path(run, args)
    for user, item, rating, ts in read_journal(journal):
        _apply(cache, user, [(item, rating, ts)])
    if adds:
        _apply(cache, args.user, adds)
    uid = cache.resolve_user(args.user)
    top = cache.recommend_top_k(uid, run.k)
    cache.verify_frozen()

    if run.out:
        out = _out_dir(run, "serve")
        (out / RESOLVED_NAME).write_text(run.render(), encoding="utf-8")
    if adds and journal is not None:
        journal.parent.mkdir(parents=True, exist_ok=True)
        with open(journal, "a", encoding="utf-8") as fh:
            for item, rating, ts in adds:
                fh.write(f"{args.user}\t{item}\t{rating}\t{ts}\n")
    for rank, (item, score) in enumerate(top, start=1):
        print(f"{rank}\t{cache.item_ids[item]}\t{score:.6f}")
    return EXIT_OK


def cmd_recommend(run: RunConfig, args) -> int:
    return _serve(run, args, [parse_add(a) for a in args.add])


def cmd_refresh(run: RunConfig, args) -> int:
    return _serve(run, args, [parse_add(a) for a in args.add])


COMMANDS = {"prep": cmd_prep, "train": cmd_train, "eval": cmd_eval, "recommend": cmd_recommend, "refresh": cmd_refresh}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, HarcError):
        return EXIT_DATA
    if isinstance(exc, OSError):
        return EXIT_IO
    return 1


def _report(exc: BaseException, code: int) -> None:
    kind = getattr(exc, "kind", type(exc).__name__)
    print(json.dumps({"error": kind, "exit": code, "message": str(exc)}), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        run = resolve(args)
        return COMMANDS[args.command](run, args)
    except (HarcError, OSError) as exc:
        code = exit_code(exc)
        _report(exc, code)
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
