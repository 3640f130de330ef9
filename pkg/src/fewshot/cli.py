"""Command-line entry point: ``fewshot <command>`` or ``python -m fewshot <command>``.

Commands share one declarative run file (JSON). Flags override file values
and the merged result is echoed into the output directory as config.json.
Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .autodiff import NonFiniteError
from .embeddings import FceConfig
from .episodes import (Corpus, CorpusError, EpisodeFormatError, EpisodeSpec, SamplingError,
                       TaskSet, build_tasks, default_min_occurrences, import_episodes,
                       ingest_file, split_vocab)
from .metrics import parse_metric
from .models import MATCHING, ModelConfig
from .training import (CheckpointError, CheckpointMismatchError, EvalReport, TaskData, TrainConfig,
                       TrainingDivergedError, evaluate, fit, load_checkpoint)

log = logging.getLogger("fewshot")

OUTPUT_ROOT_ENV = "FEWSHOT_OUTPUT_ROOT"
TABLE_METRICS = ("cosine", "euclidean", "poincare", "minkowski:p=1", "minkowski:p=3")
ABSENT = "absent"

DEFAULTS = {
    "corpus": None,
    "output_dir": "runs/default",
    "min_occurrences": None,
    "split": {"sizes": [9000, 1000, 1000], "seed": 0},
    "episode": {"n_way": 5, "k_shot": 1, "batch_size": 20},
    "model": {"kind": MATCHING, "metric": "cosine", "fce": True, "fce_steps": 5,
              "relation_hidden": [64, 64]},
    "train": {"steps": 30000, "optimizer": "adam", "lr": 1e-3, "betas": [0.9, 0.999], "eps": 1e-8,
              "eval_every": 500, "eval_episodes": 200, "seed": 0, "clip_norm": 5.0,
              "pair_batch": 20},
    "eval": {"episodes": 1000, "seed": 1000, "role": "test"},
}

# fields whose default is None but must hold a value of this type when set
_NULLABLE = {"corpus": str, "min_occurrences": int}


class UsageError(Exception):
    """Bad invocation or configuration (exit code 2)."""


class ConfigError(UsageError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid run config:\n  " + "\n  ".join(problems))


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    raw: dict
    train: TrainConfig
    eval_episodes: int
    eval_seed: int
    eval_role: str

    @property
    def corpus(self) -> str:
        return self.raw["corpus"]

    @property
    def min_occurrences(self) -> int:
        m = self.raw["min_occurrences"]
        return default_min_occurrences(self.train.spec.k_shot) if m is None else m

    @property
    def split_sizes(self) -> tuple[int, ...]:
        return tuple(self.raw["split"]["sizes"])

    @property
    def split_seed(self) -> int:
        return self.raw["split"]["seed"]

    def output_dir(self) -> Path:
        return resolve_output(self.raw["output_dir"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def resolve_output(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, type(default))


def _merge(defaults: dict, user: dict, path: str, problems: list[str]) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        where = f"{path}{key}"
        if key not in defaults:
            problems.append(f"unknown key {where!r}")
            continue
        default = defaults[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                problems.append(f"{where} must be an object")
            else:
                out[key] = _merge(default, value, where + ".", problems)
        elif default is None:
            want = _NULLABLE[key]
            if value is not None and not (isinstance(value, want) and not isinstance(value, bool)):
                problems.append(f"{where} must be {want.__name__} or null")
            else:
                out[key] = value
        elif not _type_ok(value, default):
            problems.append(f"{where} must be {type(default).__name__}, got {value!r}")
        else:
            out[key] = value
    return out


def build_run_config(user: dict, require_corpus: bool = True) -> RunConfig:
    """Merge ``user`` over the defaults, validate everything, report all problems at once."""
    problems: list[str] = []
    raw = _merge(DEFAULTS, user, "", problems)
    if require_corpus and not raw["corpus"]:
        problems.append("corpus path is required (set 'corpus' or pass --corpus)")
    m, ep, tr, ev = raw["model"], raw["episode"], raw["train"], raw["eval"]

    def attempt(fn):
        try:
            return fn()
        except (ValueError, TypeError) as exc:
            problems.append(str(exc))
            return None

    if isinstance(m["metric"], str):
        attempt(lambda: parse_metric(m["metric"]))
    if len(raw["split"]["sizes"]) != 3 or not all(isinstance(s, int) and s > 0 for s in raw["split"]["sizes"]):
        problems.append("split.sizes must be three positive integers (train, validation, test)")
    if ev["role"] not in ("validation", "test"):
        problems.append(f"eval.role must be 'validation' or 'test', got {ev['role']!r}")
    if ev["episodes"] < 1:
        problems.append("eval.episodes must be >= 1")
    if raw["min_occurrences"] is not None and raw["min_occurrences"] < 2:
        problems.append("min_occurrences must be >= 2")
    spec = attempt(lambda: EpisodeSpec(ep["n_way"], ep["k_shot"], ep["batch_size"]))
    fce = attempt(lambda: FceConfig(enabled=m["fce"], steps=m["fce_steps"]))
    model = None
    if fce is not None:
        model = attempt(lambda: ModelConfig(kind=m["kind"], metric=m["metric"], fce=fce,
                                            relation_hidden=tuple(m["relation_hidden"])))
    train = None
    if spec is not None and model is not None:
        train = attempt(lambda: TrainConfig(model=model, spec=spec, steps=tr["steps"],
                                            optimizer=tr["optimizer"], lr=float(tr["lr"]),
                                            betas=tuple(float(b) for b in tr["betas"]),
                                            eps=float(tr["eps"]), eval_every=tr["eval_every"],
                                            eval_episodes=tr["eval_episodes"], seed=tr["seed"],
                                            clip_norm=float(tr["clip_norm"]),
                                            pair_batch=tr["pair_batch"]))
    # a bad metric is reported once, by parse_metric above
    problems = list(dict.fromkeys(problems))
    if problems:
        raise ConfigError(problems)
    return RunConfig(raw, train, ev["episodes"], ev["seed"], ev["role"])


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise UsageError(f"--set {dotted}: {k!r} is not an object")
    d[keys[-1]] = value


FLAG_PATHS = {
    "corpus": "corpus", "out": "output_dir", "model": "model.kind", "metric": "model.metric",
    "n_way": "episode.n_way", "k_shot": "episode.k_shot", "batch_size": "episode.batch_size",
    "steps": "train.steps", "lr": "train.lr", "seed": "train.seed", "fce": "model.fce",
    "eval_episodes": "eval.episodes", "eval_seed": "eval.seed", "role": "eval.role",
}


def load_user_config(args) -> dict:
    user: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
    for flag, dotted in FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is not None:
            _set_path(user, dotted, value)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        _set_path(user, key.strip(), _parse_value(value))
    return user


def config_from_args(args, require_corpus: bool = True) -> RunConfig:
    return build_run_config(load_user_config(args), require_corpus)


# ---------------------------------------------------------------- data

def load_corpus(path) -> Corpus:
    """Raw text file, a corpus.json artifact, or a directory holding one."""
    p = Path(path)
    if p.is_dir():
        p = p / "corpus.json"
    if not p.is_file():
        raise UsageError(f"corpus not found: {path}")
    if p.suffix == ".json":
        return Corpus.load(p)
    return ingest_file(p)


def load_task_data(cfg: RunConfig) -> TaskData:
    tasks = build_tasks(load_corpus(cfg.corpus), cfg.min_occurrences)
    split = split_vocab(tasks, cfg.split_sizes, cfg.split_seed, n_way=cfg.train.spec.n_way)
    return TaskData(tasks, split)


def task_stats(corpus: Corpus, tasks: TaskSet) -> dict:
    return {"lines": corpus.source.get("lines"), "headings": corpus.source.get("headings"),
            "sentences": len(corpus.sentences), "tokens": sum(len(s) for s in corpus.sentences),
            "vocabulary": len(corpus.vocab), "min_occurrences": tasks.min_occurrences,
            "eligible_label_words": len(tasks.groups),
            "task_instances": sum(len(g) for g in tasks.groups.values()),
            "histogram": {str(k): v for k, v in tasks.histogram().items()}}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_ingest(args) -> int:
    src = Path(args.corpus)
    if not src.is_file():
        raise UsageError(f"corpus not found: {src}")
    corpus = ingest_file(src)
    tasks = build_tasks(corpus, args.min_occurrences)
    out = resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus.save(out / "corpus.json")
    groups = {corpus.vocab.tokens[w]: [[t.sentence_id, t.position] for t in tasks.groups[w]]
              for w in tasks.words()}
    (out / "tasks.json").write_text(json.dumps(
        {"min_occurrences": tasks.min_occurrences, "groups": groups}, sort_keys=True,
        separators=(",", ":")))
    stats = task_stats(corpus, tasks)
    _write_json(out / "stats.json", stats)
    print(f"sentences: {stats['sentences']}  tokens: {stats['tokens']}  "
          f"vocabulary: {stats['vocabulary']}")
    print(f"eligible label words (>= {tasks.min_occurrences} sentences): "
          f"{stats['eligible_label_words']}  task instances: {stats['task_instances']}")
    print("distinct sentences -> words: " +
          ", ".join(f"{k}:{v}" for k, v in stats["histogram"].items()))
    return 0


def cmd_split(args) -> int:
    cfg = config_from_args(args)
    data = load_task_data(cfg)
    out = cfg.output_dir()
    _write_json(out / "split.json", data.split.to_json())
    _write_json(out / "config.json", cfg.to_dict())
    vocab = data.tasks.vocab
    for role in ("train", "validation", "test"):
        words = data.split.role(role)
        sample = ", ".join(vocab.tokens[w] for w in words[:5])
        print(f"{role}: {len(words)} words ({sample}{', ...' if len(words) > 5 else ''})")
    return 0


def _report_line(rep: EvalReport) -> str:
    return (f"{rep.role} accuracy: {rep.summary()} ({rep.episodes} episodes, "
            f"{rep.n_way}-way {rep.k_shot}-shot, {rep.model}/{rep.metric})")


def train_run(cfg: RunConfig, resume: bool = False) -> EvalReport:
    data = load_task_data(cfg)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    _write_json(out / "split.json", data.split.to_json())
    state = best = None
    if resume:
        last = out / "last.ckpt"
        if not last.is_file():
            raise UsageError(f"--resume given but no checkpoint at {last}")
        state = load_checkpoint(last, cfg.train)
        best_path = out / "best.ckpt"
        best = load_checkpoint(best_path, cfg.train) if best_path.is_file() else None
        log.info("resuming from step %d", state.step)
    t0 = time.perf_counter()
    result = fit(cfg.train, data, out_dir=out, resume=state, resume_best=best)
    report = evaluate(result.best.model, data, cfg.eval_role, cfg.eval_episodes,
                      cfg.train.spec, cfg.eval_seed)
    _write_json(out / "report.json", {**report.to_json(), "best_step": result.best.step,
                                      "train_seconds": round(time.perf_counter() - t0, 3)})
    return report


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    report = train_run(cfg, resume=args.resume)
    print(_report_line(report))
    print(f"outputs: {cfg.output_dir()}")
    return 0


def _config_for_checkpoint(args, ckpt: Path) -> RunConfig:
    """Run config for a checkpoint: --config if given, else config.json beside it."""
    if not getattr(args, "config", None):
        beside = ckpt.parent / "config.json"
        if beside.is_file():
            args.config = str(beside)
    return config_from_args(args)


def _load_ckpt(path: Path, cfg: RunConfig | None = None):
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path, cfg.train if cfg is not None else None)


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    cfg = _config_for_checkpoint(args, ckpt)
    state = _load_ckpt(ckpt, cfg)
    data = load_task_data(cfg)
    report = evaluate(state.model, data, cfg.eval_role, cfg.eval_episodes, cfg.train.spec,
                      cfg.eval_seed)
    out = resolve_output(args.report) if args.report else cfg.output_dir() / f"eval_{cfg.eval_role}.json"
    _write_json(out, report.to_json())
    print(_report_line(report))
    return 0


# ---- compare-metrics

def cell_dir_name(metric: str, k: int) -> str:
    return f"{parse_metric(metric).name.replace(':', '_').replace('=', '')}-k{k}"


def format_table(cells: dict, metrics, ks) -> tuple[str, str]:
    """Markdown and CSV for a metric x k accuracy grid.

    ``cells`` maps (metric, k) to an EvalReport-like object with ``summary()``
    or to None for an absent checkpoint.
    """
    def cell(m, k):
        rep = cells.get((m, k))
        return ABSENT if rep is None else rep.summary()

    header = ["metric"] + [f"{k}-shot" for k in ks]
    rows = [[m] + [cell(m, k) for k in ks] for m in metrics]
    md = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    md += ["| " + " | ".join(r) + " |" for r in rows]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return "\n".join(md) + "\n", buf.getvalue()


def cmd_compare_metrics(args) -> int:
    metrics = args.metrics or list(TABLE_METRICS)
    for m in metrics:
        try:
            parse_metric(m)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    ks = args.k or [1, 2, 3]
    user = load_user_config(args)
    base = build_run_config(user)
    out = base.output_dir()
    ckpt_root = resolve_output(args.checkpoints) if args.checkpoints else out
    # one label-word split for the whole grid: eligibility follows the largest k
    min_occ = base.raw["min_occurrences"] or default_min_occurrences(max(ks))
    cells = {}
    for m in metrics:
        for k in ks:
            cell_user = copy.deepcopy(user)
            _set_path(cell_user, "model.metric", m)
            _set_path(cell_user, "episode.k_shot", k)
            _set_path(cell_user, "min_occurrences", min_occ)
            _set_path(cell_user, "output_dir", str(ckpt_root / cell_dir_name(m, k)))
            cfg = build_run_config(cell_user)
            ckpt = cfg.output_dir() / "best.ckpt"
            if args.train_inline:
                log.info("training %s k=%d", m, k)
                cells[m, k] = train_run(cfg)
                continue
            if not ckpt.is_file():
                log.warning("no checkpoint for %s k=%d at %s", m, k, ckpt)
                cells[m, k] = None
                continue
            beside = ckpt.parent / "config.json"
            if beside.is_file():
                # the run's own data settings, so its test words are the ones it never trained on
                saved = json.loads(beside.read_text())
                saved["eval"] = {**saved.get("eval", {}), **user.get("eval", {})}
                cfg = build_run_config(saved)
            state = load_checkpoint(ckpt, cfg.train)
            cells[m, k] = evaluate(state.model, load_task_data(cfg), cfg.eval_role,
                                   cfg.eval_episodes, cfg.train.spec, cfg.eval_seed)
    md, table_csv = format_table(cells, metrics, ks)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics_table.md").write_text(md)
    (out / "metrics_table.csv").write_text(table_csv)
    print(md, end="")
    return 0


# ---- exports

def _episodes_and_state(args):
    ckpt = Path(args.checkpoint)
    state = _load_ckpt(ckpt)
    path = Path(args.episodes)
    if not path.is_file():
        raise UsageError(f"episode file not found: {path}")
    episodes = import_episodes(path)
    if not episodes:
        raise UsageError(f"episode file {path} holds no episodes")
    return state, episodes


def _out_path(args, default_name: str) -> Path:
    if args.output:
        return resolve_output(args.output)
    return resolve_output(Path(args.checkpoint).parent / default_name)


def attention_csv(model, episode) -> str:
    attn = model.attention(episode).data
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["query"] + [episode.label_words[c] for c in episode.support_labels])
    for (_, c, _), row in zip(episode.query, attn):
        writer.writerow([episode.label_words[c]] + [repr(float(v)) for v in row])
    return buf.getvalue()


def embeddings_csv(model, episodes) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for ep in episodes:
        s, q = model.embed(ep)
        for role, items, rows in (("support", ep.support, s.data), ("query", ep.query, q.data)):
            for (_, c, _), row in zip(items, rows):
                writer.writerow([ep.label_words[c], role] + [repr(float(v)) for v in row])
    return buf.getvalue()


def cmd_export_attention(args) -> int:
    state, episodes = _episodes_and_state(args)
    if state.model.kind != MATCHING:
        raise UsageError(f"export-attention needs a matching-network checkpoint, got {state.model.kind!r}")
    if not 0 <= args.index < len(episodes):
        raise UsageError(f"--index {args.index} out of range (file has {len(episodes)} episodes)")
    out = _out_path(args, "attention.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(attention_csv(state.model, episodes[args.index]))
    print(f"wrote {out}")
    return 0


def cmd_export_embeddings(args) -> int:
    state, episodes = _episodes_and_state(args)
    out = _out_path(args, "embeddings.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(embeddings_csv(state.model, episodes))
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------- parser

def _run_flags(p: argparse.ArgumentParser, corpus_flag: bool = True):
    p.add_argument("--config", help="JSON run file")
    if corpus_flag:
        p.add_argument("--corpus", help="raw corpus file or ingest output")
    p.add_argument("--out", help="output directory (relative paths honour $%s)" % OUTPUT_ROOT_ENV)
    p.add_argument("--model", choices=["matching", "prototypical", "relation", "siamese"])
    p.add_argument("--metric", help="cosine, euclidean, minkowski:p=<real>, poincare")
    p.add_argument("--n-way", type=int)
    p.add_argument("--k-shot", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--fce", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--eval-seed", type=int)
    p.add_argument("--role", choices=["validation", "test"])
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any run-file field, e.g. --set train.eval_every=100")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="tokenize a corpus and build missing-word tasks")
    p.add_argument("corpus")
    p.add_argument("--out", default="artifacts")
    p.add_argument("--min-occurrences", type=int, default=3)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="build the train/validation/test label-word split")
    _run_flags(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="episodic training with validation checkpoints")
    _run_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on fresh episodes")
    p.add_argument("checkpoint")
    _run_flags(p)
    p.add_argument("--report", help="where to write the JSON report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-metrics", help="metric x k accuracy table")
    _run_flags(p)
    p.add_argument("--metrics", nargs="+")
    p.add_argument("--k", nargs="+", type=int)
    p.add_argument("--checkpoints", help="directory of <metric>-k<k>/best.ckpt runs (default: --out)")
    p.add_argument("--train-inline", action="store_true", help="train every missing cell first")
    p.set_defaults(func=cmd_compare_metrics)

    for name, func, default in (("export-attention", cmd_export_attention, "attention.csv"),
                                ("export-embeddings", cmd_export_embeddings, "embeddings.csv")):
        p = sub.add_parser(name, help=f"write {default} for episodes from an episode file")
        p.add_argument("checkpoint")
        p.add_argument("episodes", help="episode file (one JSON episode per line)")
        p.add_argument("-o", "--output", help=f"CSV path (default: {default} beside the checkpoint)")
        if name == "export-attention":
            p.add_argument("--index", type=int, default=0, help="which episode in the file")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, CheckpointMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CorpusError, SamplingError, EpisodeFormatError, CheckpointError,
            TrainingDivergedError, NonFiniteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
