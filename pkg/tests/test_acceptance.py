"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line; conftest prints them all at the end of
the run (``pytest tests/test_acceptance.py -v``).
"""
import functools
import os
import time
from pathlib import Path

import numpy as np
import pytest

from fewshot import autodiff as ad
from fewshot.autodiff import Parameter, grad_check
from fewshot.embeddings import FceConfig
from fewshot.episodes import (Episode, EpisodeSampler, EpisodeSpec, PairBatch, build_tasks,
                              default_min_occurrences, export_episodes, import_episodes, ingest,
                              ingest_file, split_vocab)
from fewshot.metrics import distance, euclidean, minkowski, parse_metric, poincare, project_to_ball
from fewshot.models import ModelConfig, build_model
from fewshot.synthetic import noise_corpus, wide_corpus
from fewshot.training import (TaskData, TrainConfig, TrainState, checkpoint_bytes, checkpoint_from_bytes,
                              evaluate, fit, train_step, next_batch)

RESULTS: list[str] = []

WIKITEXT_ENV = "FEWSHOT_WIKITEXT2"
# 5-way accuracy (%) for k = 1, 2, 3 as published for this task
PAPER_GRID = {
    "cosine": (28.6, 32.8, 34.1),
    "euclidean": (30.1, 31.0, 35.4),
    "poincare": (28.1, 30.6, 35.0),
    "minkowski:p=1": (27.5, 30.5, 37.7),
    "minkowski:p=3": (29.1, 32.0, 35.5),
}


def criterion(number: int, title: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
                line = f"criterion {number} FAIL  {title}: {msg}"
                RESULTS.append(line)
                print(line)
                raise
            line = f"criterion {number} PASS  {title}" + (f": {detail}" if detail else "")
            RESULTS.append(line)
            print(line)
        return run
    return wrap


# ---------------------------------------------------------------- 1. gradients

def _ops():
    """(name, parameters, scalar function of the tape) for every differentiable op."""
    rng = np.random.default_rng(100)
    a = Parameter("a", rng.normal(size=(3, 4)))
    b = Parameter("b", rng.normal(size=(3, 4)))
    pos = Parameter("pos", rng.uniform(0.5, 2.0, size=(3, 4)))
    big = Parameter("big", rng.uniform(1.5, 3.0, size=(3, 4)))
    m = Parameter("m", rng.normal(size=(4, 2)))
    row = Parameter("row", rng.normal(size=4))
    ball = Parameter("ball", rng.normal(size=(3, 4)) * 0.8)
    w = {shape: rng.normal(size=shape) for shape in [(3, 4), (3, 2), (4, 3), (12,), (3,), (4,), (2, 4), (6, 4), (3, 8)]}
    away = a.value.copy()
    away[np.abs(away) < 0.05] = 0.3  # keep |x| and clip away from their kinks
    kinked = Parameter("kinked", away)

    def weighted(t):
        return ad.sum(t * w[t.shape])

    P = lambda tape, p: tape.param(p)
    return [
        ("add", [a, row], lambda t: weighted(P(t, a) + P(t, row))),
        ("sub", [a, b], lambda t: weighted(P(t, a) - P(t, b))),
        ("mul", [a, b], lambda t: weighted(P(t, a) * P(t, b))),
        ("div", [a, pos], lambda t: weighted(P(t, a) / P(t, pos))),
        ("matmul", [a, m], lambda t: weighted(P(t, a) @ P(t, m))),
        ("neg", [a], lambda t: weighted(-P(t, a))),
        ("tanh", [a], lambda t: weighted(ad.tanh(P(t, a)))),
        ("sigmoid", [a], lambda t: weighted(ad.sigmoid(P(t, a)))),
        ("exp", [a], lambda t: weighted(ad.exp(P(t, a)))),
        ("log", [pos], lambda t: weighted(ad.log(P(t, pos)))),
        ("sqrt", [pos], lambda t: weighted(ad.sqrt(P(t, pos)))),
        ("power", [pos], lambda t: weighted(ad.power(P(t, pos), 3.0))),
        ("absolute", [kinked], lambda t: weighted(ad.absolute(P(t, kinked)))),
        ("clip", [kinked], lambda t: weighted(ad.clip(P(t, kinked), -0.5, 0.5))),
        ("arcosh", [big], lambda t: weighted(ad.arcosh(P(t, big)))),
        ("sum", [a], lambda t: ad.sum(ad.sum(P(t, a), axis=1) * w[(3,)])),
        ("mean", [a], lambda t: ad.sum(ad.mean(P(t, a), axis=0) * w[(4,)])),
        ("max_over_axis", [a], lambda t: ad.sum(ad.max_over_axis(P(t, a), axis=0) * w[(4,)])),
        ("softmax_rows", [a], lambda t: weighted(ad.softmax_rows(P(t, a)))),
        ("concat", [a, b], lambda t: weighted(ad.concat([P(t, a), P(t, b)], axis=1))),
        ("reshape", [a], lambda t: weighted(ad.reshape(P(t, a), (12,)))),
        ("transpose", [a], lambda t: weighted(ad.transpose(P(t, a)))),
        ("slice_cols", [a], lambda t: ad.sum(ad.slice_cols(P(t, a), 1, 3) * w[(3, 4)][:, 1:3])),
        ("take_rows", [a], lambda t: weighted(ad.take_rows(P(t, a), [0, 2, 2, 1, 0, 2]))),
        ("stack_rows", [row], lambda t: weighted(ad.stack_rows([P(t, row), P(t, row) * 2.0]))),
        ("l2_normalize_rows", [a], lambda t: weighted(ad.l2_normalize_rows(P(t, a)))),
        ("project_rows_to_ball", [ball], lambda t: weighted(ad.project_rows_to_ball(P(t, ball) * 2.0))),
    ]


def _toy_episode(vocab: int, seed: int) -> Episode:
    rng = np.random.default_rng(seed)
    sent = lambda lo: tuple(int(t) for t in rng.integers(lo, lo + 4, size=4))
    support = [(sent(3), 0, 1), (sent(7), 1, 2)]
    query = [(sent(3), 0, 3), (sent(7), 1, 4)]
    return Episode(2, 1, support, query, ("wa", "wb"), (3, 7))


HEADS = [
    ("matching+fce/cosine", ModelConfig("matching", "cosine", FceConfig(True, 5))),
    ("matching+fce/euclidean", ModelConfig("matching", "euclidean", FceConfig(True, 5))),
    ("matching+fce/poincare", ModelConfig("matching", "poincare", FceConfig(True, 5))),
    ("matching+fce/minkowski:p=1", ModelConfig("matching", "minkowski:p=1", FceConfig(True, 5))),
    ("matching+fce/minkowski:p=3", ModelConfig("matching", "minkowski:p=3", FceConfig(True, 5))),
    ("prototypical/euclidean", ModelConfig("prototypical", "euclidean", FceConfig(False))),
    ("relation", ModelConfig("relation", fce=FceConfig(False))),
    ("siamese/episode", ModelConfig("siamese", fce=FceConfig(False))),
]


@criterion(1, "finite-difference gradient suite, every op and head, rel err < 1e-4, < 2 min")
def test_criterion_1_gradients():
    t0 = time.perf_counter()
    failures, worst = [], 0.0
    for name, params, f in _ops():
        rep = grad_check(f, params, step=1e-5, tol=1e-4)
        worst = max(worst, rep.worst)
        if not rep.passed:
            failures.append(f"op {name}: {rep.failures()}")
    vocab = 12
    for i, (name, cfg) in enumerate(HEADS):
        model = build_model(cfg, vocab, seed=i)
        ep = _toy_episode(vocab, seed=i)
        rep = grad_check(lambda t: model.loss(ep, t), model.params.values(), step=1e-5, tol=1e-4,
                         max_entries=80, seed=i)
        worst = max(worst, rep.worst)
        if not rep.passed:
            failures.append(f"head {name}: {rep.failures()}")
    siamese = build_model(ModelConfig("siamese", fce=FceConfig(False)), vocab, seed=50)
    pairs = PairBatch([(3, 4, 5), (6, 7)], [(3, 5, 9), (10, 11, 4)], np.array([1.0, 0.0]))
    rep = grad_check(lambda t: siamese.loss(pairs, t), siamese.params.values(), step=1e-5, tol=1e-4,
                     max_entries=80, seed=50)
    worst = max(worst, rep.worst)
    if not rep.passed:
        failures.append(f"head siamese/pairs: {rep.failures()}")
    elapsed = time.perf_counter() - t0
    assert not failures, "; ".join(failures)
    assert elapsed < 120, f"gradient suite took {elapsed:.1f}s"
    return f"{len(_ops())} ops + {len(HEADS) + 1} head losses, worst rel err {worst:.2e}, {elapsed:.1f}s"


# ---------------------------------------------------------------- 2. metric axioms

@criterion(2, "metric axioms over 1000 samples; minkowski(2) == euclidean; poincare closed form")
def test_criterion_2_metric_axioms():
    rng = np.random.default_rng(2)
    metrics = [parse_metric(m) for m in ("euclidean", "minkowski:p=1", "minkowski:p=2",
                                         "minkowski:p=3", "poincare")]
    d = 6
    for _ in range(1000):
        x = rng.normal(size=(3, d))
        x *= (0.95 * rng.uniform(size=(3, 1)) ** (1 / d)) / np.linalg.norm(x, axis=1, keepdims=True)
        u, v, w = x
        for m in metrics:
            duv, dvu = distance(m, u, v), distance(m, v, u)
            assert duv >= 0, f"{m.name} negative"
            assert duv == dvu, f"{m.name} asymmetric"
            assert distance(m, u, u) == 0, f"{m.name} d(u,u) != 0"
            assert duv <= distance(m, u, w) + distance(m, w, v) + 1e-9, f"{m.name} triangle"
        assert abs(minkowski(u, v, 2) - euclidean(u, v)) <= 1e-12
    value = poincare([0.0, 0.0], [0.5, 0.0])
    assert abs(value - np.log(3)) <= 1e-9
    return f"poincare((0,0),(0.5,0)) = {value:.12f} (ln 3 = {np.log(3):.12f})"


# ---------------------------------------------------------------- 3. 1-shot equivalence

def _np_embed(model, sentences):
    table = model.params["embed.words"].value
    W, b = model.params["embed.proj.W"].value, model.params["embed.proj.b"].value
    return np.stack([table[list(s)].max(axis=0) @ W + b for s in sentences])


@criterion(3, "1-shot: matching argmax == prototypical argmax == brute-force 1-NN, 200 episodes, every metric")
def test_criterion_3_one_shot_equivalence(noise_data):
    sampler = EpisodeSampler(noise_data.tasks, noise_data.split.test, EpisodeSpec(5, 1, 20), 33)
    episodes = [sampler.sample() for _ in range(200)]
    checked = 0
    for metric in ("cosine", "euclidean", "minkowski:p=1", "minkowski:p=2", "minkowski:p=3", "poincare"):
        m = parse_metric(metric)
        matching = build_model(ModelConfig("matching", metric, FceConfig(False)), len(noise_data.tasks.vocab), 7)
        proto = build_model(ModelConfig("prototypical", metric, FceConfig(False)), len(noise_data.tasks.vocab), 8)
        for name, p in matching.params.items():  # one frozen, shared embedding
            proto.params[name].value = p.value.copy()
        disagree = 0
        for ep in episodes:
            s, q = _np_embed(matching, ep.support_tokens), _np_embed(matching, ep.query_tokens)
            if m.kind == "poincare":
                s = np.stack([project_to_ball(r, m.epsilon_ball) for r in s])
                q = np.stack([project_to_ball(r, m.epsilon_ball) for r in q])
            nn = np.array([ep.support[int(np.argmin([distance(m, qi, sj) for sj in s]))][1] for qi in q])
            a, b = matching.predict(ep), proto.predict(ep)
            disagree += int(np.sum((a != nn) | (b != nn)))
            checked += len(q)
        assert disagree == 0, f"{metric}: {disagree} disagreements"
    return f"{checked} query predictions agree"


# ---------------------------------------------------------------- 4. sampler protocol

@criterion(4, "sampler protocol over 10k episodes; split sizes 9000/1000/1000")
def test_criterion_4_sampler(separable_data):
    split = separable_data.split
    roles = [set(split.train), set(split.validation), set(split.test)]
    assert not (roles[0] & roles[1] or roles[0] & roles[2] or roles[1] & roles[2])
    violations = 0
    for i, spec in enumerate([EpisodeSpec(5, 1, 20), EpisodeSpec(5, 2, 20), EpisodeSpec(5, 3, 20)]):
        for role, words in (("train", roles[0]), ("validation", roles[1]), ("test", roles[2])):
            n = 3334 if role == "train" else 200
            sampler = EpisodeSampler(separable_data.tasks, split.role(role), spec, seed=40 + i)
            for _ in range(n):
                ep = sampler.sample()
                sup = {s[2] for s in ep.support}
                qry = {q[2] for q in ep.query}
                violations += bool(sup & qry)
                violations += bool(np.any(np.bincount(ep.support_labels, minlength=5) != spec.k_shot))
                violations += bool(set(ep.label_ids) - words)
    assert violations == 0, f"{violations} violations"
    wide = build_tasks(ingest(wide_corpus()), default_min_occurrences(3))
    big = split_vocab(wide, seed=0)
    sizes = (len(big.train), len(big.validation), len(big.test))
    assert len(wide.words()) >= 11000 and sizes == (9000, 1000, 1000), sizes
    return f"{3 * (3334 + 400)} episodes, 0 violations; {len(wide.words())} eligible words -> {sizes}"


# ---------------------------------------------------------------- 5. separability

@criterion(5, "separable corpus: matching/cosine/FCE K=5 >= 95% 5-way 1-shot test within 3000 episodes, < 10 min")
def test_criterion_5_separable(separable_data):
    cfg = TrainConfig(model=ModelConfig("matching", "cosine", FceConfig(True, 5)), spec=EpisodeSpec(5, 1, 20),
                      steps=3000, eval_every=500, eval_episodes=100, seed=0)
    t0 = time.perf_counter()
    untrained = evaluate(TrainState.initial(cfg, len(separable_data.tasks.vocab)).model, separable_data,
                         "test", 500, cfg.spec, seed=99)
    result = fit(cfg, separable_data)
    report = evaluate(result.best.model, separable_data, "test", 500, cfg.spec, seed=99)
    elapsed = time.perf_counter() - t0
    assert report.accuracy >= 0.95, f"test accuracy {report.summary()}"
    assert elapsed < 600, f"took {elapsed:.0f}s"
    return (f"test {report.summary()} (untrained {untrained.summary()}), best step {result.best.step}, "
            f"{elapsed:.0f}s")


# ---------------------------------------------------------------- 6. chance

@pytest.fixture(scope="module")
def chance_data():
    # large enough that 500 episodes barely reuse a test sentence; on a small corpus the
    # accidental token overlap of its few same-word sentence pairs biases "chance" itself
    tasks = build_tasks(ingest(noise_corpus(n_words=300, sentences_per_word=60, seed=4)), 3)
    return TaskData(tasks, split_vocab(tasks, (100, 50, 150), seed=0, n_way=5))


@criterion(6, "untrained models score 20% +- 3 sigma on 5-way over 500 episodes")
def test_criterion_6_chance(chance_data):
    spec = EpisodeSpec(5, 1, 20)
    lines = []
    for i, cfg in enumerate([ModelConfig("matching", "cosine", FceConfig(True, 5)),
                             ModelConfig("prototypical", "euclidean", FceConfig(False)),
                             ModelConfig("relation", fce=FceConfig(False)),
                             ModelConfig("siamese", fce=FceConfig(False))]):
        model = build_model(cfg, len(chance_data.tasks.vocab), seed=60 + i)
        rep = evaluate(model, chance_data, "test", 500, spec, seed=61)
        # stderr is the per-episode spread over sqrt(500): it includes within-episode correlation.
        # An untrained relation module ranks classes the same way for every query, so each
        # balanced episode scores exactly 4/20 and the spread is zero.
        assert abs(rep.accuracy - 0.2) <= 3 * rep.stderr + 1e-12, f"{cfg.kind}: {rep.summary()}"
        lines.append(f"{cfg.kind} {rep.summary()}")
    return "; ".join(lines)


# ---------------------------------------------------------------- 7. WikiText-2

def _wikitext_path() -> Path | None:
    raw = os.environ.get(WIKITEXT_ENV)
    if not raw:
        return None
    p = Path(raw)
    return p / "wiki.train.tokens" if p.is_dir() else p


def _grid_report(cells) -> str:
    out = ["| metric | 1-shot ours (paper) | 2-shot ours (paper) | 3-shot ours (paper) |",
           "|---|---|---|---|"]
    for m, ref in PAPER_GRID.items():
        out.append("| " + m + " | " + " | ".join(
            f"{100 * cells[m, k].accuracy:.1f} ({ref[k - 1]})" for k in (1, 2, 3)) + " |")
    return "\n".join(out)


@criterion(7, "WikiText-2 desk-scale grid (30k episodes per cell) vs published table")
def test_criterion_7_wikitext(tmp_path):
    path = _wikitext_path()
    if path is None or not path.is_file():
        pytest.fail(f"WikiText-2 training file not available (set {WIKITEXT_ENV} to wiki.train.tokens "
                    f"or its directory); the protocol cannot run without the corpus")
    tasks = build_tasks(ingest_file(path), default_min_occurrences(3))
    data = TaskData(tasks, split_vocab(tasks, seed=0, n_way=5))
    cells = {}
    for metric in PAPER_GRID:
        for k in (1, 2, 3):
            cfg = TrainConfig(model=ModelConfig("matching", metric, FceConfig(True, 5)),
                              spec=EpisodeSpec(5, k, 20), steps=30000, seed=0)
            result = fit(cfg, data, out_dir=tmp_path / f"{metric.replace(':', '_')}-k{k}")
            cells[metric, k] = evaluate(result.best.model, data, "test", 1000, cfg.spec, seed=1000)
    table = _grid_report(cells)
    print(table)
    headline = cells["cosine", 1].accuracy
    assert headline >= 0.25, f"cosine 1-shot {100 * headline:.1f}% < 25%\n{table}"
    assert all(r.accuracy >= 0.25 for r in cells.values()), f"a cell is within 5 points of chance\n{table}"
    monotone = sum(cells[m, 1].accuracy <= cells[m, 2].accuracy <= cells[m, 3].accuracy for m in PAPER_GRID)
    assert monotone >= 3, f"only {monotone}/5 metrics non-decreasing in k\n{table}"
    return f"cosine 1-shot {100 * headline:.1f}%, {monotone}/5 metrics monotone in k"


# ---------------------------------------------------------------- 8. determinism

@criterion(8, "identical seed/config -> byte-identical checkpoints and identical EvalReports")
def test_criterion_8_determinism(separable_data, tmp_path):
    cfg = TrainConfig(model=ModelConfig("matching", "cosine", FceConfig(True, 5)), spec=EpisodeSpec(5, 1, 20),
                      steps=60, eval_every=20, eval_episodes=20, seed=8)
    reports = []
    for name in ("a", "b"):
        res = fit(cfg, separable_data, out_dir=tmp_path / name)
        reports.append(evaluate(res.best.model, separable_data, "test", 50, cfg.spec, seed=8).to_json())
    for f in ("best.ckpt", "last.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    assert reports[0] == reports[1]
    return f"checkpoints identical, report accuracy {reports[0]['accuracy']:.4f} both runs"


# ---------------------------------------------------------------- 9. round trips

@criterion(9, "checkpoint and episode-file round trips byte-exact on 100 cases each")
def test_criterion_9_round_trips(separable_data, tmp_path):
    kinds = [("matching", "cosine", True), ("matching", "poincare", False), ("prototypical", "minkowski:p=3", False),
             ("relation", "euclidean", True), ("siamese", "cosine", False)]
    vocab = len(separable_data.tasks.vocab)
    for i in range(100):
        kind, metric, fce = kinds[i % len(kinds)]
        cfg = TrainConfig(model=ModelConfig(kind, metric, FceConfig(fce, 1 + i % 5)),
                          spec=EpisodeSpec(2 + i % 4, 1 + i % 3, 5), seed=i,
                          optimizer="sgd" if i % 7 == 0 else "adam")
        state = TrainState.initial(cfg, vocab)
        for _ in range(i % 3):
            train_step(state, next_batch(state, separable_data))
        blob = checkpoint_bytes(state)
        back = checkpoint_from_bytes(blob)
        assert checkpoint_bytes(back) == blob, f"case {i}"
        for name, p in state.model.params.items():
            assert np.array_equal(back.model.params[name].value, p.value), (i, name)
    sampler = EpisodeSampler(separable_data.tasks, separable_data.split.train, EpisodeSpec(5, 2, 10), 9)
    episodes = [sampler.sample() for _ in range(100)]
    export_episodes(episodes, tmp_path / "a.jsonl")
    back = import_episodes(tmp_path / "a.jsonl")
    export_episodes(back, tmp_path / "b.jsonl")
    assert back == episodes
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    return "100 checkpoints and 100 episodes"
