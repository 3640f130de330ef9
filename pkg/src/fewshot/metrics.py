"""Similarity and distance families used by the attention kernels.

Two layers live here: plain numpy functions on single vectors (``cosine``,
``minkowski``, ``poincare``, ...) and the batched, differentiable
``pairwise_scores`` that models call. Scores follow one convention:
higher means more similar, so distances enter as their negation.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, DomainError, Tensor

COSINE = "cosine"
EUCLIDEAN = "euclidean"
MINKOWSKI = "minkowski"
POINCARE = "poincare"

_ZERO_NORM = 1e-12


@dataclass(frozen=True)
class MetricKind:
    kind: str
    p: float = 2.0
    epsilon_ball: float = 1e-5

    def __post_init__(self):
        if self.kind not in (COSINE, EUCLIDEAN, MINKOWSKI, POINCARE):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.kind == MINKOWSKI and not self.p > 0:
            raise ValueError(f"Minkowski order must be > 0, got {self.p}")
        if not 0 < self.epsilon_ball < 1e-2:
            raise ValueError(f"epsilon_ball must lie in (0, 1e-2), got {self.epsilon_ball}")

    @property
    def is_distance(self) -> bool:
        return self.kind != COSINE

    @property
    def name(self) -> str:
        if self.kind == MINKOWSKI:
            return f"minkowski:p={self.p:g}"
        return self.kind

    def __str__(self):
        return self.name


METRIC_CHOICES = ("cosine", "euclidean", "minkowski:p=<real>", "poincare")
_MINK_RE = re.compile(r"^minkowski:p=([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)$")


def parse_metric(text: str) -> MetricKind:
    """Parse the config spelling: cosine, euclidean, minkowski:p=<real>, poincare."""
    t = text.strip().lower()
    if t in (COSINE, EUCLIDEAN, POINCARE):
        return MetricKind(t)
    m = _MINK_RE.match(t)
    if m:
        return MetricKind(MINKOWSKI, p=float(m.group(1)))
    raise ValueError(f"invalid metric {text!r}; valid options: {', '.join(METRIC_CHOICES)}")


# ---------------------------------------------------------------- vector functions

def _pair(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.shape} vs {v.shape}")
    return u, v


def cosine(u, v) -> float:
    u, v = _pair(u, v)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < _ZERO_NORM or nv < _ZERO_NORM:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def minkowski(u, v, p: float) -> float:
    u, v = _pair(u, v)
    if not p > 0:
        raise ValueError(f"Minkowski order must be > 0, got {p}")
    return float(np.sum(np.abs(u - v) ** p) ** (1.0 / p))


def euclidean(u, v) -> float:
    u, v = _pair(u, v)
    return float(math.sqrt(np.sum((u - v) ** 2)))


def poincare(u, v) -> float:
    u, v = _pair(u, v)
    nu, nv = u @ u, v @ v
    if nu >= 1.0 or nv >= 1.0:
        raise DomainError("poincare operands must lie strictly inside the unit ball")
    x = 1.0 + 2.0 * np.sum((u - v) ** 2) / ((1.0 - nu) * (1.0 - nv))
    x = max(x, 1.0)
    return float(math.log(x + math.sqrt(x * x - 1.0)))


def project_to_ball(u, epsilon_ball: float = 1e-5) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    r = 1.0 - epsilon_ball
    n = np.linalg.norm(u)
    if n >= r:
        return u * (r / n)
    return u.copy()


def distance(metric: MetricKind, u, v) -> float:
    if metric.kind == COSINE:
        return -cosine(u, v)
    if metric.kind == EUCLIDEAN:
        return euclidean(u, v)
    if metric.kind == MINKOWSKI:
        return minkowski(u, v, metric.p)
    return poincare(project_to_ball(u, metric.epsilon_ball),
                    project_to_ball(v, metric.epsilon_ball))


def similarity(metric: MetricKind, u, v) -> float:
    if metric.kind == COSINE:
        return cosine(u, v)
    return -distance(metric, u, v)


# ---------------------------------------------------------------- batched, differentiable

def _pairwise_diff(q: Tensor, s: Tensor) -> Tensor:
    nq, d = q.shape
    ns = s.shape[0]
    return ad.reshape(q, (nq, 1, d)) - ad.reshape(s, (1, ns, d))


def pairwise_distance(metric: MetricKind, queries, supports) -> Tensor:
    """Distance matrix [q, s]; for cosine this is the negated cosine."""
    q, s = ad.as_tensor(queries), ad.as_tensor(supports)
    if q.ndim != 2 or s.ndim != 2 or q.shape[1] != s.shape[1]:
        raise DimensionError(f"pairwise: incompatible shapes {q.shape} and {s.shape}")
    if metric.kind == COSINE:
        return ad.neg(pairwise_cosine(q, s))
    if metric.kind == EUCLIDEAN:
        diff = _pairwise_diff(q, s)
        return ad.sqrt(ad.sum(diff * diff, axis=2))
    if metric.kind == MINKOWSKI:
        diff = ad.absolute(_pairwise_diff(q, s))
        p = metric.p
        if p == 1.0:
            return ad.sum(diff, axis=2)
        return ad.power(ad.sum(ad.power(diff, p), axis=2), 1.0 / p)
    return pairwise_poincare(q, s, metric.epsilon_ball)


def pairwise_cosine(q: Tensor, s: Tensor) -> Tensor:
    return ad.l2_normalize_rows(q) @ ad.transpose(ad.l2_normalize_rows(s))


def pairwise_poincare(q: Tensor, s: Tensor, epsilon_ball: float = 1e-5) -> Tensor:
    q = ad.project_rows_to_ball(q, epsilon_ball)
    s = ad.project_rows_to_ball(s, epsilon_ball)
    diff = _pairwise_diff(q, s)
    sq = ad.sum(diff * diff, axis=2)
    aq = 1.0 - ad.sum(q * q, axis=1, keepdims=True)          # [q, 1]
    as_ = 1.0 - ad.reshape(ad.sum(s * s, axis=1), (1, -1))   # [1, s]
    return ad.arcosh(1.0 + 2.0 * sq / (aq * as_))


def pairwise_scores(metric: MetricKind, queries, supports) -> Tensor:
    """Similarity matrix [q, s]: cosine, or negated distance."""
    q, s = ad.as_tensor(queries), ad.as_tensor(supports)
    if q.ndim != 2 or s.ndim != 2 or q.shape[1] != s.shape[1]:
        raise DimensionError(f"pairwise_scores: incompatible shapes {q.shape} and {s.shape}")
    if metric.kind == COSINE:
        return pairwise_cosine(q, s)
    return ad.neg(pairwise_distance(metric, q, s))
