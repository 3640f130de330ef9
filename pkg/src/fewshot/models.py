"""Metric-based few-shot heads: Matching, Prototypical, Relation, Siamese.

Every model owns a flat ``params`` dict of named :class:`Parameter` s and
exposes ``scores(episode, tape)`` -> [B, N] tensor (a distribution for all
heads except Relation, whose scores are unnormalised) and ``loss``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import embeddings as emb
from .autodiff import Parameter, Tape, Tensor
from .embeddings import FceConfig, PreEmbedConfig
from .episodes import Episode, PairBatch
from .metrics import MetricKind, pairwise_distance, pairwise_scores, parse_metric

PROB_FLOOR = 1e-12

MATCHING, PROTOTYPICAL, RELATION, SIAMESE = "matching", "prototypical", "relation", "siamese"
MODEL_KINDS = (MATCHING, PROTOTYPICAL, RELATION, SIAMESE)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = MATCHING
    metric: str = "cosine"
    fce: FceConfig = field(default_factory=FceConfig)
    d_word: int = 64
    relation_hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; valid options: {', '.join(MODEL_KINDS)}")
        parse_metric(self.metric)
        if self.kind == RELATION and len(self.relation_hidden) < 1:
            raise ValueError("relation module needs at least one hidden layer")

    @property
    def metric_kind(self) -> MetricKind:
        return parse_metric(self.metric)


def onehot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


# ---------------------------------------------------------------- losses

def _check_targets(targets, n: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise ValueError(f"target index out of range for {n} classes")
    return targets


def nll_loss(probs, targets) -> Tensor:
    """Mean negative log-probability of the target class (probs floored at 1e-12)."""
    probs = ad.as_tensor(probs)
    b, n = probs.shape
    targets = _check_targets(targets, n)
    picked = ad.sum(probs * onehot(targets, n), axis=1)
    return ad.neg(ad.mean(ad.log(ad.clip(picked, PROB_FLOOR, None))))


def mse_relation_loss(scores, targets) -> Tensor:
    scores = ad.as_tensor(scores)
    b, n = scores.shape
    diff = scores - onehot(_check_targets(targets, n), n)
    return ad.mean(diff * diff)


def bce_loss(p, label) -> Tensor:
    """Binary cross-entropy, averaged when ``p`` holds several probabilities."""
    p = ad.clip(ad.as_tensor(p), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = np.broadcast_to(np.asarray(label, dtype=np.float64), p.shape)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("bce labels must be 0 or 1")
    ll = y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p)
    return ad.neg(ad.mean(ll))


# ---------------------------------------------------------------- models

class FewShotModel:
    kind: str

    def __init__(self, config: ModelConfig, vocab_size: int, seed: int = 0):
        self.config = config
        self.vocab_size = vocab_size
        rng = np.random.default_rng(seed)
        self.pre_cfg = PreEmbedConfig(vocab_size, d_word=config.d_word)
        self.params: dict[str, Parameter] = emb.init_pre_embed(self.pre_cfg, rng)
        self._init_head(rng)

    def _init_head(self, rng):
        pass

    def bind(self, tape: Tape | None):
        return emb.bind(self.params, tape)

    def embed(self, episode: Episode, tape: Tape | None = None):
        return emb.embed_episode(episode.support_tokens, episode.query_tokens, self.bind(tape))

    def scores(self, episode: Episode, tape: Tape | None = None) -> Tensor:
        raise NotImplementedError

    def loss(self, batch, tape: Tape | None = None) -> Tensor:
        return nll_loss(self.scores(batch, tape), batch.query_labels)

    def predict(self, episode: Episode) -> np.ndarray:
        """Class predictions; argmax ties go to the lowest class index."""
        return np.argmax(self.scores(episode).data, axis=1)


class MatchingNetwork(FewShotModel):
    kind = MATCHING

    def _init_head(self, rng):
        if self.config.fce.enabled:
            self.params.update(emb.init_fce(self.config.fce, rng))

    def embed(self, episode, tape=None):
        return emb.embed_episode(episode.support_tokens, episode.query_tokens,
                                 self.bind(tape), self.config.fce)

    def attention(self, episode: Episode, tape: Tape | None = None) -> Tensor:
        """Attention over the N*k supports, [B, N*k], supports in emission order."""
        s, q = self.embed(episode, tape)
        return attention_from_embeddings(self.config.metric_kind, q, s)

    def scores(self, episode, tape=None):
        attn = self.attention(episode, tape)
        return attn @ onehot(episode.support_labels, episode.n_way)


def attention_from_embeddings(metric: MetricKind, query_emb, support_emb) -> Tensor:
    return ad.softmax_rows(pairwise_scores(metric, query_emb, support_emb))


def matching_probs(metric: MetricKind, query_emb, support_emb, support_labels, n_way: int) -> Tensor:
    return attention_from_embeddings(metric, query_emb, support_emb) @ onehot(support_labels, n_way)


def class_means(support_emb, support_labels, n_way: int) -> Tensor:
    oh = onehot(support_labels, n_way)
    return (oh / oh.sum(axis=0, keepdims=True)).T @ ad.as_tensor(support_emb)


def prototypical_probs(metric: MetricKind, query_emb, support_emb, support_labels,
                       n_way: int) -> Tensor:
    protos = class_means(support_emb, support_labels, n_way)
    return ad.softmax_rows(ad.neg(pairwise_distance(metric, query_emb, protos)))


class PrototypicalNetwork(FewShotModel):
    """Softmax over negative distances to class-mean prototypes (no FCE)."""
    kind = PROTOTYPICAL

    def scores(self, episode, tape=None):
        s, q = self.embed(episode, tape)
        return prototypical_probs(self.config.metric_kind, q, s,
                                  episode.support_labels, episode.n_way)


class RelationNetwork(FewShotModel):
    kind = RELATION

    def _init_head(self, rng):
        dims = [2 * emb.D_EMBED, *self.config.relation_hidden, 1]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / np.sqrt(a)
            self.params[f"relation.W{i}"] = Parameter(f"relation.W{i}", rng.uniform(-bound, bound, (a, b)))
            self.params[f"relation.b{i}"] = Parameter(f"relation.b{i}", np.zeros(b))

    @property
    def n_layers(self) -> int:
        return len(self.config.relation_hidden) + 1

    def relation_scores(self, query_emb, class_feats, bound) -> Tensor:
        q = ad.as_tensor(query_emb)
        c = ad.as_tensor(class_feats)
        b, n = q.shape[0], c.shape[0]
        pairs = ad.concat([ad.take_rows(q, np.repeat(np.arange(b), n)),
                           ad.take_rows(c, np.tile(np.arange(n), b))], axis=1)
        x = pairs
        for i in range(self.n_layers):
            x = x @ bound[f"relation.W{i}"] + bound[f"relation.b{i}"]
            x = ad.tanh(x) if i < self.n_layers - 1 else ad.sigmoid(x)
        return ad.reshape(x, (b, n))

    def scores(self, episode, tape=None):
        bound = self.bind(tape)
        s, q = emb.embed_episode(episode.support_tokens, episode.query_tokens, bound)
        # k > 1: a class's support embeddings are summed into one feature
        feats = onehot(episode.support_labels, episode.n_way).T @ s
        return self.relation_scores(q, feats, bound)

    def loss(self, batch, tape=None):
        return mse_relation_loss(self.scores(batch, tape), batch.query_labels)


class SiameseNetwork(FewShotModel):
    """p(same) = sigmoid(W . |f(a) - f(b)| + b) over twin pre-embeddings."""
    kind = SIAMESE

    def _init_head(self, rng):
        bound = 1.0 / np.sqrt(emb.D_EMBED)
        self.params["siamese.W"] = Parameter("siamese.W", rng.uniform(-bound, bound, (emb.D_EMBED, 1)))
        self.params["siamese.b"] = Parameter("siamese.b", np.zeros(1))

    def _pair_prob(self, ea, eb, bound) -> Tensor:
        d = ad.absolute(ea - eb)
        return ad.sigmoid(d @ bound["siamese.W"] + bound["siamese.b"])

    def pair_probability(self, left: Sequence[Sequence[int]], right: Sequence[Sequence[int]],
                         tape: Tape | None = None) -> Tensor:
        bound = self.bind(tape)
        e = emb.pre_embed(list(left) + list(right), bound)
        n = len(left)
        ea = ad.take_rows(e, np.arange(n))
        eb = ad.take_rows(e, np.arange(n, 2 * n))
        return ad.reshape(self._pair_prob(ea, eb, bound), (n,))

    def forward_pair(self, a: Sequence[int], b: Sequence[int]) -> float:
        return float(self.pair_probability([a], [b]).data[0])

    def pair_scores(self, episode: Episode, tape: Tape | None = None) -> Tensor:
        """Same-class probability of every (query, support) pair, [B, N*k]."""
        bound = self.bind(tape)
        s, q = emb.embed_episode(episode.support_tokens, episode.query_tokens, bound)
        b, ns = q.shape[0], s.shape[0]
        diff = ad.reshape(q, (b, 1, -1)) - ad.reshape(s, (1, ns, -1))
        flat = ad.reshape(ad.absolute(diff), (b * ns, -1))
        p = ad.sigmoid(flat @ bound["siamese.W"] + bound["siamese.b"])
        return ad.reshape(p, (b, ns))

    def scores(self, episode, tape=None):
        pairs = self.pair_scores(episode, tape)
        b = pairs.shape[0]
        labels = episode.support_labels
        n, k = episode.n_way, episode.k_shot
        order = np.argsort(labels, kind="stable")  # columns grouped by class
        grouped = ad.reshape(ad.transpose(ad.take_rows(ad.transpose(pairs), order)), (b, n, k))
        best = ad.max_over_axis(grouped, axis=2)
        return best / ad.sum(best, axis=1, keepdims=True)

    def loss(self, batch, tape=None):
        if isinstance(batch, PairBatch):
            return bce_loss(self.pair_probability(batch.left, batch.right, tape), batch.same)
        return nll_loss(self.scores(batch, tape), batch.query_labels)


_MODELS = {MATCHING: MatchingNetwork, PROTOTYPICAL: PrototypicalNetwork,
           RELATION: RelationNetwork, SIAMESE: SiameseNetwork}


def build_model(config: ModelConfig, vocab_size: int, seed: int = 0) -> FewShotModel:
    return _MODELS[config.kind](config, vocab_size, seed)
