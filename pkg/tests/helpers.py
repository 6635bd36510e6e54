"""Seeded builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from clrlab.data import Document, RagContext, Vocabulary
from clrlab.policy import NA, NG, PolicyParameters

VOCAB = Vocabulary(24, 4)


def random_params(rng: np.random.Generator, V: int = VOCAB.size, scale: float = 1.0,
                  self_copy: float | None = None) -> PolicyParameters:
    sc = float(rng.uniform(0.0, 0.5)) if self_copy is None else self_copy
    return PolicyParameters(rng.normal(0, scale, NG), rng.normal(0, scale, V),
                            rng.normal(0, scale, NA), "test", sc)


def random_context(rng: np.random.Generator, vocab: Vocabulary = VOCAB, n_docs: int = 3,
                   n_sup: int = 1, doc_len: tuple[int, int] = (3, 6),
                   query_len: int = 2) -> RagContext:
    content = np.array(vocab.content)
    sup = set(rng.permutation(n_docs)[:n_sup].tolist())
    docs = tuple(Document(i, tuple(int(t) for t in rng.choice(
        content, size=int(rng.integers(doc_len[0], doc_len[1] + 1)))), i in sup)
        for i in range(n_docs))
    query = tuple(int(t) for t in rng.choice(content, size=query_len))
    return RagContext(query, docs)


def random_tokens(rng: np.random.Generator, T: int, vocab: Vocabulary = VOCAB,
                  context: RagContext | None = None) -> list[int]:
    """Token sequence mixing context tokens, content tokens and specials."""
    pool = list(range(vocab.size))
    if context is not None:
        pool += list(context.all_tokens()) * 2
    return [int(t) for t in rng.choice(pool, size=T)]


def closed_gate_params(V: int, unigram=None, self_copy: float = 0.0) -> PolicyParameters:
    gate = np.zeros(NG)
    gate[0] = -1e3   # sigmoid underflows to exactly 0
    uni = np.zeros(V) if unigram is None else np.asarray(unigram, dtype=np.float64)
    return PolicyParameters(gate, uni, np.zeros(NA), "closed", self_copy)


def open_gate_params(V: int, attn=None, self_copy: float = 0.0) -> PolicyParameters:
    gate = np.zeros(NG)
    gate[0] = 1e3
    a = np.zeros(NA) if attn is None else np.asarray(attn, dtype=np.float64)
    return PolicyParameters(gate, np.zeros(V), a, "open", self_copy)
