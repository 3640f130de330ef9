"""Train a prototypical network under each metric and print test accuracy."""
from fewshot.embeddings import FceConfig
from fewshot.episodes import EpisodeSpec, build_tasks, ingest, split_vocab
from fewshot.models import ModelConfig
from fewshot.synthetic import separable_corpus
from fewshot.training import TaskData, TrainConfig, evaluate, fit

tasks = build_tasks(ingest(separable_corpus(seed=3)), 3)
data = TaskData(tasks, split_vocab(tasks, (30, 10, 10), seed=0, n_way=5))
spec = EpisodeSpec(5, 1, 20)
for metric in ("cosine", "euclidean", "minkowski:p=1", "minkowski:p=3", "poincare"):
    model = ModelConfig(kind="prototypical", metric=metric, fce=FceConfig(enabled=False))
    res = fit(TrainConfig(model=model, spec=spec, steps=200, eval_every=100, eval_episodes=50), data)
    print(f"{metric:14s} {evaluate(res.best.model, data, 'test', 200, spec, seed=99).summary()}")
