"""Train a matching network on a synthetic corpus where each word has its own context tokens."""
from fewshot.embeddings import FceConfig
from fewshot.episodes import EpisodeSpec, build_tasks, ingest, split_vocab
from fewshot.models import ModelConfig
from fewshot.synthetic import separable_corpus
from fewshot.training import TaskData, TrainConfig, evaluate, fit

tasks = build_tasks(ingest(separable_corpus(seed=3)), 3)
data = TaskData(tasks, split_vocab(tasks, (30, 10, 10), seed=0, n_way=5))
spec = EpisodeSpec(5, 1, 20)
cfg = TrainConfig(model=ModelConfig(kind="matching", fce=FceConfig(enabled=False)), spec=spec,
                  steps=300, eval_every=100, eval_episodes=50)
res = fit(cfg, data)
for rec in res.log:
    print(f"step {rec['step']:4d}  loss {rec['loss']:.4f}  val {rec['val_accuracy']:.3f}")
print("test", evaluate(res.best.model, data, "test", 200, spec, seed=99).summary())
