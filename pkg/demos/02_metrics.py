"""Compare the supported similarity functions on a handful of vectors."""
import numpy as np

from fewshot.metrics import parse_metric, similarity

rng = np.random.default_rng(1)
u, v = rng.normal(scale=0.3, size=(2, 8))
for name in ("cosine", "euclidean", "minkowski:p=1", "minkowski:p=3", "poincare"):
    m = parse_metric(name)
    print(f"{name:14s} sim(u, v) = {similarity(m, u, v): .6f}   sim(u, u) = {similarity(m, u, u) + 0.0: .6f}")
