"""Sentence encoders: max-pool pre-embedding and Full Context Embeddings.

All functions take a ``bound`` mapping of parameter name -> Tensor (see
:func:`bind`), so one code path serves training (tape-backed tensors) and
evaluation (constants).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Parameter, Tape, Tensor
from .tokens import BLANK, PAD, UNK

D_EMBED = 64


@dataclass(frozen=True)
class PreEmbedConfig:
    vocab_size: int
    d_word: int = 64
    d_embed: int = D_EMBED

    def __post_init__(self):
        if self.d_embed != D_EMBED:
            raise ValueError(f"sentence embeddings are fixed at {D_EMBED} dims")
        if self.vocab_size <= max(PAD, UNK, BLANK):
            raise ValueError("vocabulary must include the reserved PAD/UNK/BLANK rows")


@dataclass(frozen=True)
class FceConfig:
    enabled: bool = True
    steps: int = 5
    hidden: int = D_EMBED

    def __post_init__(self):
        if self.enabled and self.steps < 1:
            raise ValueError(f"FCE needs at least one attLSTM step, got {self.steps}")
        if self.hidden != D_EMBED:
            # residual sums add LSTM outputs to 64-dim pre-embeddings
            raise ValueError(f"FCE hidden size must equal {D_EMBED}")


Bound = Mapping[str, Tensor]


def bind(params: Mapping[str, Parameter], tape: Tape | None) -> dict[str, Tensor]:
    if tape is None:
        return {name: Tensor(p.value) for name, p in params.items()}
    return {name: tape.param(p) for name, p in params.items()}


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_pre_embed(cfg: PreEmbedConfig, rng: np.random.Generator,
                   prefix: str = "embed") -> dict[str, Parameter]:
    return {
        f"{prefix}.words": Parameter(f"{prefix}.words",
                                     _uniform(rng, (cfg.vocab_size, cfg.d_word), cfg.d_word)),
        f"{prefix}.proj.W": Parameter(f"{prefix}.proj.W",
                                      _uniform(rng, (cfg.d_word, cfg.d_embed), cfg.d_word)),
        f"{prefix}.proj.b": Parameter(f"{prefix}.proj.b", np.zeros(cfg.d_embed)),
    }


# Gate column blocks in the fused weight matrices: input, forget, output, candidate.
GATES = ("i", "f", "o", "g")


def init_lstm(prefix: str, input_dim: int, recurrent_dim: int, hidden: int,
              rng: np.random.Generator) -> dict[str, Parameter]:
    """Fused LSTM cell; ``recurrent_dim`` may exceed ``hidden`` (attLSTM feeds [h, r])."""
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    return {
        f"{prefix}.W_x": Parameter(f"{prefix}.W_x", _uniform(rng, (input_dim, 4 * hidden), input_dim)),
        f"{prefix}.W_h": Parameter(f"{prefix}.W_h",
                                   _uniform(rng, (recurrent_dim, 4 * hidden), recurrent_dim)),
        f"{prefix}.b": Parameter(f"{prefix}.b", b),
    }


# ---------------------------------------------------------------- pre-embedding

def pad_batch(sentences: Sequence[Sequence[int]], vocab_size: int | None = None):
    """Right-pad token id lists; returns (ids [n, L], mask [n, L]).

    Ids outside the table map to UNK. Sentences with no non-PAD token raise.
    """
    if not sentences:
        raise DimensionError("no sentences to embed")
    length = max(len(s) for s in sentences)
    ids = np.full((len(sentences), max(length, 1)), PAD, dtype=np.int64)
    for i, s in enumerate(sentences):
        ids[i, :len(s)] = s
    if vocab_size is not None:
        ids[(ids >= vocab_size) | (ids < 0)] = UNK
    mask = ids != PAD
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise DimensionError(f"sentence {int(empty[0])} is empty after removing padding")
    return ids, mask


def pre_embed(sentences: Sequence[Sequence[int]], bound: Bound, prefix: str = "embed") -> Tensor:
    """Max-pool word vectors over each sentence, then project to 64 dims -> [n, 64]."""
    table = bound[f"{prefix}.words"]
    ids, mask = pad_batch(sentences, table.shape[0])
    n, length = ids.shape
    d = table.shape[1]
    words = ad.reshape(ad.take_rows(table, ids.reshape(-1)), (n, length, d))
    full_mask = np.broadcast_to(mask[:, :, None], words.shape)
    pooled = ad.max_over_axis(words, axis=1, mask=full_mask)
    return pooled @ bound[f"{prefix}.proj.W"] + bound[f"{prefix}.proj.b"]


# ---------------------------------------------------------------- LSTM

def lstm_step(bound: Bound, prefix: str, x, h_prev, c_prev):
    """One LSTM step on row-batched inputs; returns (h, c)."""
    W_x, W_h, b = bound[f"{prefix}.W_x"], bound[f"{prefix}.W_h"], bound[f"{prefix}.b"]
    x, h_prev, c_prev = ad.as_tensor(x), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
    if x.shape[-1] != W_x.shape[0] or h_prev.shape[-1] != W_h.shape[0]:
        raise DimensionError(
            f"lstm {prefix}: inputs {x.shape}/{h_prev.shape} vs weights {W_x.shape}/{W_h.shape}")
    hidden = W_x.shape[1] // 4
    if c_prev.shape[-1] != hidden:
        raise DimensionError(f"lstm {prefix}: cell state {c_prev.shape} vs hidden {hidden}")
    z = x @ W_x + h_prev @ W_h + b
    i = ad.sigmoid(ad.slice_cols(z, 0, hidden))
    f = ad.sigmoid(ad.slice_cols(z, hidden, 2 * hidden))
    o = ad.sigmoid(ad.slice_cols(z, 2 * hidden, 3 * hidden))
    g = ad.tanh(ad.slice_cols(z, 3 * hidden, 4 * hidden))
    c = f * c_prev + i * g
    h = o * ad.tanh(c)
    return h, c


def fce_g(support_pre, bound: Bound, fwd: str = "fce_g.fwd", bwd: str = "fce_g.bwd") -> Tensor:
    """Bidirectional LSTM over support rows plus a residual: h_fwd + h_bwd + input."""
    x = ad.as_tensor(support_pre)
    n, d = x.shape
    hidden = bound[f"{fwd}.W_x"].shape[1] // 4
    if d != hidden:
        raise DimensionError(f"fce_g: support width {d} != hidden {hidden}")
    rows = [ad.take_rows(x, [i]) for i in range(n)]

    def run(prefix, order):
        h = c = Tensor(np.zeros((1, hidden)))
        out = [None] * n
        for i in order:
            h, c = lstm_step(bound, prefix, rows[i], h, c)
            out[i] = h
        return out

    h_fwd = run(fwd, range(n))
    h_bwd = run(bwd, range(n - 1, -1, -1))
    return ad.concat([h_fwd[i] + h_bwd[i] for i in range(n)], axis=0) + x


def fce_f(query_pre, g_support, steps: int, bound: Bound, prefix: str = "fce_f",
          return_attention: bool = False):
    """attLSTM: K steps of content attention over encoded supports.

    At step k the readout r is taken from h_{k-1} (softmax of dot products
    with every support row), the LSTM consumes [h_{k-1}, r] as its recurrent
    input, and the query pre-embedding is added back as a residual.
    h_0 = c_0 = 0. Returns h_K, and optionally the K attention matrices.
    """
    if steps < 1:
        raise ValueError(f"attLSTM needs steps >= 1, got {steps}")
    q = ad.as_tensor(query_pre)
    gs = ad.as_tensor(g_support)
    if q.ndim == 1:
        q = ad.reshape(q, (1, -1))
    b, d = q.shape
    if gs.ndim != 2 or gs.shape[1] != d:
        raise DimensionError(f"fce_f: query width {d} vs supports {gs.shape}")
    hidden = bound[f"{prefix}.W_x"].shape[1] // 4
    if hidden != d:
        raise DimensionError(f"fce_f: query width {d} != hidden {hidden}")
    h = Tensor(np.zeros((b, hidden)))
    c = Tensor(np.zeros((b, hidden)))
    gs_t = ad.transpose(gs)
    attentions = []
    for _ in range(steps):
        attn = ad.softmax_rows(h @ gs_t)
        r = attn @ gs
        h_hat, c = lstm_step(bound, prefix, q, ad.concat([h, r], axis=1), c)
        h = h_hat + q
        attentions.append(attn)
    if return_attention:
        return h, attentions
    return h


def init_fce(cfg: FceConfig, rng: np.random.Generator) -> dict[str, Parameter]:
    hd = cfg.hidden
    params = {}
    params.update(init_lstm("fce_g.fwd", D_EMBED, hd, hd, rng))
    params.update(init_lstm("fce_g.bwd", D_EMBED, hd, hd, rng))
    params.update(init_lstm("fce_f", D_EMBED, 2 * hd, hd, rng))
    return params


def embed_episode(support: Sequence[Sequence[int]], query: Sequence[Sequence[int]],
                  bound: Bound, fce: FceConfig | None = None):
    """Encode both sides of an episode -> (support [Nk, 64], query [B, 64]).

    Supports and queries share one word table and projection.
    """
    pre = pre_embed(list(support) + list(query), bound)
    ns = len(support)
    s_pre = ad.take_rows(pre, np.arange(ns))
    q_pre = ad.take_rows(pre, np.arange(ns, ns + len(query)))
    if fce is None or not fce.enabled:
        return s_pre, q_pre
    g_s = fce_g(s_pre, bound)
    return g_s, fce_f(q_pre, g_s, fce.steps, bound)
