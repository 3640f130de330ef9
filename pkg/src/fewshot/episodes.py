"""Missing-word task data: corpus ingestion, label-word splits, episode sampling."""
from __future__ import annotations

import io
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tokens import BLANK, BLANK_TOKEN, PAD_TOKEN, SPECIAL_TOKENS, UNK, UNK_TOKEN

TERMINATORS = ".!?"
MAX_SENTENCE_LEN = 48
PAPER_SPLIT_SIZES = (9000, 1000, 1000)
ROLES = ("train", "validation", "test")


class CorpusError(ValueError):
    pass


class SamplingError(ValueError):
    pass


class EpisodeFormatError(ValueError):
    pass


# ---------------------------------------------------------------- corpus

@dataclass
class Vocabulary:
    tokens: list[str]
    counts: list[int]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id(t) for t in tokens)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class Corpus:
    sentences: list[tuple[int, ...]]
    vocab: Vocabulary
    source: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"format": "fewshot-corpus/1", "source": self.source,
                "vocab": {"tokens": self.vocab.tokens, "counts": self.vocab.counts},
                "sentences": [list(s) for s in self.sentences]}

    @classmethod
    def from_json(cls, obj: dict) -> "Corpus":
        if obj.get("format") != "fewshot-corpus/1":
            raise CorpusError(f"unsupported corpus artifact format {obj.get('format')!r}")
        vocab = Vocabulary(list(obj["vocab"]["tokens"]), list(obj["vocab"]["counts"]))
        return cls([tuple(s) for s in obj["sentences"]], vocab, dict(obj.get("source", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")))

    @classmethod
    def load(cls, path) -> "Corpus":
        return cls.from_json(json.loads(Path(path).read_text()))


def _is_heading(line: str) -> bool:
    return len(line) >= 2 and line.startswith("=") and line.endswith("=")


def split_sentences(line: str) -> list[list[str]]:
    """Lowercase, whitespace-tokenize and cut at terminator tokens.

    A token made only of terminators closes the sentence and is dropped;
    a token with trailing terminators is stripped and closes the sentence.
    """
    out, cur = [], []
    for tok in line.lower().split():
        stripped = tok.rstrip(TERMINATORS)
        if stripped:
            cur.append(stripped)
        if stripped != tok:
            if cur:
                out.append(cur)
            cur = []
    if cur:
        out.append(cur)
    return out


def ingest(stream, source: str | None = None) -> Corpus:
    """Build a Corpus from raw WikiText-style text (str, file object, or lines)."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    raw: list[list[str]] = []
    n_lines = n_headings = 0
    for line in stream:
        n_lines += 1
        line = line.strip()
        if not line:
            continue
        if _is_heading(line):
            n_headings += 1
            continue
        raw.extend(split_sentences(line))
    if not raw:
        raise CorpusError(f"no sentences found in {source or 'input'}")
    counts: dict[str, int] = defaultdict(int)
    for s in raw:
        for t in s:
            counts[t] += 1
    ordinary = sorted((t for t in counts if t not in SPECIAL_TOKENS),
                      key=lambda t: (-counts[t], t))
    tokens = list(SPECIAL_TOKENS) + ordinary
    vocab = Vocabulary(tokens, [counts.get(t, 0) for t in tokens])
    sentences = [vocab.encode(s) for s in raw]
    meta = {"path": source, "lines": n_lines, "headings": n_headings,
            "sentences": len(sentences), "tokens": sum(len(s) for s in sentences)}
    return Corpus(sentences, vocab, meta)


def ingest_file(path) -> Corpus:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return ingest(fh, source=str(path))


# ---------------------------------------------------------------- tasks

@dataclass(frozen=True)
class TaskInstance:
    label_id: int
    sentence_id: int
    position: int
    tokens: tuple[int, ...]


def blank_sentence(sentence: Sequence[int], position: int,
                   max_len: int = MAX_SENTENCE_LEN) -> tuple[int, ...]:
    """Replace ``position`` by BLANK and cut a window of ``max_len`` around it."""
    toks = list(sentence)
    toks[position] = BLANK
    if len(toks) <= max_len:
        return tuple(toks)
    start = min(max(0, position - max_len // 2), len(toks) - max_len)
    return tuple(toks[start:start + max_len])


def is_label_word(token: str) -> bool:
    return token not in SPECIAL_TOKENS and len(token) >= 2 and token.isalpha()


def default_min_occurrences(max_k: int) -> int:
    return max(max_k + 2, 3)


@dataclass
class TaskSet:
    vocab: Vocabulary
    groups: dict[int, list[TaskInstance]]
    min_occurrences: int
    _distinct: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._distinct = {w: len({t.sentence_id for t in g}) for w, g in self.groups.items()}

    def words(self) -> list[int]:
        return sorted(self.groups)

    def distinct_sentences(self, word: int) -> int:
        return self._distinct[word]

    def histogram(self) -> dict[int, int]:
        """Distinct-sentence count -> number of eligible words."""
        h: dict[int, int] = defaultdict(int)
        for w in self.groups:
            h[self.distinct_sentences(w)] += 1
        return dict(sorted(h.items()))


def build_tasks(corpus: Corpus, min_occurrences: int = 3,
                max_len: int = MAX_SENTENCE_LEN) -> TaskSet:
    if min_occurrences < 2:
        raise ValueError(f"min_occurrences must be >= 2, got {min_occurrences}")
    where: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for sid, sent in enumerate(corpus.sentences):
        for pos, tok in enumerate(sent):
            where[tok].append((sid, pos))
    groups = {}
    for tok, places in where.items():
        if not is_label_word(corpus.vocab.tokens[tok]):
            continue
        if len({sid for sid, _ in places}) < min_occurrences:
            continue
        groups[tok] = [TaskInstance(tok, sid, pos, blank_sentence(corpus.sentences[sid], pos, max_len))
                       for sid, pos in places]
    return TaskSet(corpus.vocab, groups, min_occurrences)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class VocabSplit:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]
    seed: int

    def role(self, name: str) -> tuple[int, ...]:
        if name not in ROLES:
            raise ValueError(f"unknown split role {name!r}; expected one of {ROLES}")
        return getattr(self, name)

    def to_json(self) -> dict:
        return {"format": "fewshot-split/1", "seed": self.seed, "train": list(self.train),
                "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_json(cls, obj: dict) -> "VocabSplit":
        if obj.get("format") != "fewshot-split/1":
            raise ValueError(f"unsupported split artifact format {obj.get('format')!r}")
        return cls(tuple(obj["train"]), tuple(obj["validation"]), tuple(obj["test"]), obj["seed"])


def split_sizes(n_eligible: int, sizes: Sequence[int] = PAPER_SPLIT_SIZES) -> tuple[int, ...]:
    total = sum(sizes)
    if n_eligible >= total:
        return tuple(sizes)
    return tuple(n_eligible * s // total for s in sizes)


def split_vocab(tasks: TaskSet, sizes: Sequence[int] = PAPER_SPLIT_SIZES, seed: int = 0,
                n_way: int = 2) -> VocabSplit:
    """Seeded disjoint train/validation/test label-word split.

    Falls back to the same proportions when fewer words are eligible than
    requested; raises if any role ends up with fewer than ``n_way`` words.
    """
    words = np.array(tasks.words(), dtype=np.int64)
    n_train, n_val, n_test = split_sizes(len(words), sizes)
    if min(n_train, n_val, n_test) < n_way:
        raise SamplingError(
            f"{len(words)} eligible label words cannot fill a {n_way}-way split "
            f"(sizes {n_train}/{n_val}/{n_test})")
    perm = np.random.default_rng(seed).permutation(words)
    tr = perm[:n_train]
    va = perm[n_train:n_train + n_val]
    te = perm[n_train + n_val:n_train + n_val + n_test]
    return VocabSplit(tuple(sorted(int(w) for w in tr)), tuple(sorted(int(w) for w in va)),
                      tuple(sorted(int(w) for w in te)), seed)


# ---------------------------------------------------------------- episodes

@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    batch_size: int = 20

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.batch_size < 1:
            raise ValueError(f"invalid episode spec {self}")


@dataclass
class Episode:
    """One N-way k-shot task. Items are (tokens, class index, source sentence id)."""
    n_way: int
    k_shot: int
    support: list[tuple[tuple[int, ...], int, int]]
    query: list[tuple[tuple[int, ...], int, int]]
    label_words: tuple[str, ...]
    label_ids: tuple[int, ...]
    seed: int | None = None

    @property
    def support_tokens(self) -> list[tuple[int, ...]]:
        return [s[0] for s in self.support]

    @property
    def support_labels(self) -> np.ndarray:
        return np.array([s[1] for s in self.support], dtype=np.int64)

    @property
    def query_tokens(self) -> list[tuple[int, ...]]:
        return [q[0] for q in self.query]

    @property
    def query_labels(self) -> np.ndarray:
        return np.array([q[1] for q in self.query], dtype=np.int64)

    def validate(self) -> None:
        counts = np.bincount(self.support_labels, minlength=self.n_way)
        if len(counts) != self.n_way or np.any(counts != self.k_shot):
            raise SamplingError(f"support is not {self.k_shot} per class: {counts.tolist()}")
        if set(self.query_labels.tolist()) - set(range(self.n_way)):
            raise SamplingError("query class outside the support classes")
        shared = {s[2] for s in self.support} & {q[2] for q in self.query}
        if shared:
            raise SamplingError(f"support and query share sentences {sorted(shared)[:5]}")

    def to_json(self) -> dict:
        return {"n": self.n_way, "k": self.k_shot, "seed": self.seed,
                "label_words": list(self.label_words), "label_ids": list(self.label_ids),
                "support": [[list(t), c, s] for t, c, s in self.support],
                "query": [[list(t), c, s] for t, c, s in self.query]}

    @classmethod
    def from_json(cls, obj: dict) -> "Episode":
        def items(xs):
            return [(tuple(int(v) for v in t), int(c), int(s)) for t, c, s in xs]

        return cls(int(obj["n"]), int(obj["k"]), items(obj["support"]), items(obj["query"]),
                   tuple(obj["label_words"]), tuple(int(i) for i in obj["label_ids"]),
                   None if obj["seed"] is None else int(obj["seed"]))


def _distinct_sentence_instances(instances: Sequence[TaskInstance], rng, count: int,
                                 exclude: set[int] = frozenset()) -> list[TaskInstance]:
    """Pick ``count`` instances from distinct sentences not in ``exclude``."""
    by_sentence: dict[int, list[TaskInstance]] = defaultdict(list)
    for t in instances:
        if t.sentence_id not in exclude:
            by_sentence[t.sentence_id].append(t)
    sids = sorted(by_sentence)
    if len(sids) < count:
        return []
    chosen = rng.choice(len(sids), size=count, replace=False)
    picked = []
    for c in chosen:
        opts = by_sentence[sids[c]]
        picked.append(opts[rng.integers(len(opts))] if len(opts) > 1 else opts[0])
    return picked


def eligible_words(tasks: TaskSet, words: Iterable[int], k_shot: int) -> list[int]:
    return [w for w in words if w in tasks.groups and tasks.distinct_sentences(w) >= k_shot + 1]


def sample_episode(words: Sequence[int], spec: EpisodeSpec, tasks: TaskSet,
                   rng: np.random.Generator, seed: int | None = None,
                   max_attempts: int = 20) -> Episode:
    """Sample one episode whose label words come from ``words``.

    Classes are numbered in word-sampling order; the support list is shuffled
    once. Queries are balanced across classes (remainder to the lowest class
    indices) and never share a sentence with any support item; a class with
    too few leftover instances repeats them.
    """
    pool = eligible_words(tasks, words, spec.k_shot)
    if len(pool) < spec.n_way:
        short = [w for w in words if w not in set(pool)]
        detail = f"; e.g. {tasks.vocab.tokens[short[0]]!r} has too few sentences" if short else ""
        raise SamplingError(
            f"only {len(pool)} words have >= {spec.k_shot + 1} distinct sentences, "
            f"need {spec.n_way}{detail}")
    per_class = [spec.batch_size // spec.n_way + (1 if c < spec.batch_size % spec.n_way else 0)
                 for c in range(spec.n_way)]
    last_bad = None
    for _ in range(max_attempts):
        chosen = [pool[i] for i in rng.choice(len(pool), size=spec.n_way, replace=False)]
        support = []
        for c, w in enumerate(chosen):
            for t in _distinct_sentence_instances(tasks.groups[w], rng, spec.k_shot):
                support.append((t.tokens, c, t.sentence_id))
        used = {s[2] for s in support}
        query = []
        ok = True
        for c, w in enumerate(chosen):
            left = [t for t in tasks.groups[w] if t.sentence_id not in used]
            if not left:
                ok, last_bad = False, w
                break
            m = per_class[c]
            if len(left) >= m:
                idx = rng.choice(len(left), size=m, replace=False)
            else:
                idx = rng.choice(len(left), size=m, replace=True)
            query.extend((left[i].tokens, c, left[i].sentence_id) for i in idx)
        if not ok:
            continue
        order = rng.permutation(len(support))
        support = [support[i] for i in order]
        return Episode(spec.n_way, spec.k_shot, support, query,
                       tuple(tasks.vocab.tokens[w] for w in chosen), tuple(chosen), seed)
    raise SamplingError(
        f"could not find query sentences for word {tasks.vocab.tokens[last_bad]!r} "
        f"disjoint from the support set after {max_attempts} attempts")


class EpisodeSampler:
    """Seeded stream of episodes; each episode records its own derived seed."""

    def __init__(self, tasks: TaskSet, words: Sequence[int], spec: EpisodeSpec, seed: int):
        self.tasks = tasks
        self.words = list(words)
        self.spec = spec
        self.rng = np.random.default_rng(seed)

    def sample(self) -> Episode:
        ep_seed = int(self.rng.integers(0, 2**63 - 1))
        return sample_episode(self.words, self.spec, self.tasks,
                              np.random.default_rng(ep_seed), seed=ep_seed)

    def __iter__(self):
        while True:
            yield self.sample()


@dataclass
class PairBatch:
    left: list[tuple[int, ...]]
    right: list[tuple[int, ...]]
    same: np.ndarray


def sample_pairs(tasks: TaskSet, words: Sequence[int], rng: np.random.Generator,
                 n_pairs: int = 20) -> PairBatch:
    """Verification pairs, half same-word (distinct sentences), half different-word."""
    pool = eligible_words(tasks, words, 1)
    if len(pool) < 2:
        raise SamplingError("pair sampling needs at least two words with two sentences")
    left, right, same = [], [], []
    for i in range(n_pairs):
        if i % 2 == 0:
            w = pool[rng.integers(len(pool))]
            a, b = _distinct_sentence_instances(tasks.groups[w], rng, 2)
            same.append(1.0)
        else:
            wa, wb = (pool[j] for j in rng.choice(len(pool), size=2, replace=False))
            ga, gb = tasks.groups[wa], tasks.groups[wb]
            a, b = ga[rng.integers(len(ga))], gb[rng.integers(len(gb))]
            same.append(0.0)
        left.append(a.tokens)
        right.append(b.tokens)
    return PairBatch(left, right, np.array(same))


# ---------------------------------------------------------------- episode files

def dumps_episode(ep: Episode) -> str:
    return json.dumps(ep.to_json(), sort_keys=True, separators=(",", ":"))


def export_episodes(episodes: Iterable[Episode], path) -> None:
    tmp = Path(str(path) + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="\n") as fh:
        for ep in episodes:
            fh.write(dumps_episode(ep) + "\n")
    os.replace(tmp, path)


def import_episodes(path) -> list[Episode]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.endswith("\n"):
                raise EpisodeFormatError(f"{path}:{lineno}: truncated line (no newline)")
            if not line.strip():
                continue
            try:
                out.append(Episode.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise EpisodeFormatError(f"{path}:{lineno}: malformed episode ({exc})") from None
    return out


__all__ = [
    "BLANK", "BLANK_TOKEN", "PAD_TOKEN", "UNK", "UNK_TOKEN", "Corpus", "CorpusError",
    "Episode", "EpisodeFormatError", "EpisodeSampler", "EpisodeSpec", "PairBatch",
    "SamplingError", "TaskInstance", "TaskSet", "VocabSplit", "Vocabulary", "build_tasks",
    "default_min_occurrences", "export_episodes", "import_episodes", "ingest", "ingest_file",
    "sample_episode", "sample_pairs", "split_vocab",
]
