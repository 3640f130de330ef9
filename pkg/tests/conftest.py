import numpy as np
import pytest

from fewshot.episodes import build_tasks, ingest, split_vocab
from fewshot.synthetic import noise_corpus, separable_corpus
from fewshot.training import TaskData


def central_diff(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Numeric gradient of scalar f at x (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * step)
    return g


def rel_err(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


@pytest.fixture(scope="session")
def separable_data():
    tasks = build_tasks(ingest(separable_corpus(seed=3)), 3)
    return TaskData(tasks, split_vocab(tasks, (30, 10, 10), seed=0, n_way=5))


@pytest.fixture(scope="session")
def noise_data():
    tasks = build_tasks(ingest(noise_corpus(seed=4)), 3)
    return TaskData(tasks, split_vocab(tasks, (40, 10, 10), seed=0, n_way=5))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
