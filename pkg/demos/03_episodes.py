"""Turn a tiny text corpus into missing-word tasks and sample a 2-way 1-shot episode."""
import numpy as np

from fewshot.episodes import EpisodeSpec, build_tasks, ingest, sample_episode
from fewshot.synthetic import separable_corpus

tasks = build_tasks(ingest(separable_corpus(n_words=6, sentences_per_word=4, seed=0)), 3)
print(f"{len(tasks.words())} eligible label words")
ep = sample_episode(tasks.words(), EpisodeSpec(2, 1, 2), tasks, np.random.default_rng(0))
for role, items in (("support", ep.support), ("query", ep.query)):
    for toks, label, _ in items:
        print(f"{role:7s} [{ep.label_words[label]}] {' '.join(tasks.vocab.decode(toks))}")
