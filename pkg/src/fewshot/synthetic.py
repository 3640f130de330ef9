"""Generated corpora for controls and desk-scale runs.

Context tokens contain digits so they are never eligible as label words;
only the generated alphabetic words become labels.
"""
from __future__ import annotations

import string

import numpy as np


def word_name(i: int, prefix: str = "w", width: int = 3) -> str:
    """Alphabetic name for index ``i`` (base-26 letters)."""
    letters = []
    for _ in range(width):
        i, r = divmod(i, 26)
        letters.append(string.ascii_lowercase[r])
    if i:
        raise ValueError("index too large for width")
    return prefix + "".join(reversed(letters))


def _lines(sentences):
    return "\n".join(" ".join(s) + " ." for s in sentences) + "\n"


def separable_corpus(n_words: int = 50, sentences_per_word: int = 10, private_vocab: int = 6,
                     context_len: int = 10, seed: int = 0) -> str:
    """Each label word co-occurs only with its own private context tokens."""
    rng = np.random.default_rng(seed)
    sentences = []
    for w in range(n_words):
        label = word_name(w)
        ctx = [f"c{w}x{j}" for j in range(private_vocab)]
        for _ in range(sentences_per_word):
            toks = list(rng.choice(ctx, size=context_len, replace=True))
            toks.insert(int(rng.integers(context_len + 1)), label)
            sentences.append(toks)
    order = rng.permutation(len(sentences))
    return "= Synthetic separable corpus =\n" + _lines(sentences[i] for i in order)


def noise_corpus(n_words: int = 60, sentences_per_word: int = 8, shared_vocab: int = 200,
                 context_len: int = 6, seed: int = 0) -> str:
    """Label words embedded in context drawn from one shared pool: no signal."""
    rng = np.random.default_rng(seed)
    pool = [f"n{j}" for j in range(shared_vocab)]
    sentences = []
    for w in range(n_words):
        label = word_name(w)
        for _ in range(sentences_per_word):
            toks = list(rng.choice(pool, size=context_len, replace=True))
            toks.insert(int(rng.integers(context_len + 1)), label)
            sentences.append(toks)
    order = rng.permutation(len(sentences))
    return _lines(sentences[i] for i in order)


def wide_corpus(n_words: int = 11500, sentences_per_word: int = 5, seed: int = 0) -> str:
    """Many eligible words with few sentences each (for split-size checks)."""
    rng = np.random.default_rng(seed)
    sentences = []
    for w in range(n_words):
        label = word_name(w, width=4)
        for j in range(sentences_per_word):
            sentences.append([f"q{int(rng.integers(1000))}", label, f"z{j}"])
    return _lines(sentences)
