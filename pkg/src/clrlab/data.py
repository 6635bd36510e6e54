"""Token-level data types shared by every module.

Token layout of a :class:`Vocabulary` (fixed, so checkpoints and task files
agree across runs)::

    0            BOS
    1            EOS
    2            THINK_OPEN
    3            THINK_CLOSE
    4 .. 4+D-1   CITE(0) .. CITE(D-1)      (D = max_docs)
    4+D ..       content tokens

The policy only relies on ``EOS == 1``; everything else is interpreted by the
rewards and the task generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

BOS = 0
EOS = 1
THINK_OPEN = 2
THINK_CLOSE = 3
_N_FIXED = 4


class InvalidTokenError(ValueError):
    """A token id falls outside ``[0, V)``."""


class ConfigurationError(ValueError):
    """Inputs are well-typed but violate a precondition (e.g. no supporting doc)."""


@dataclass(frozen=True)
class Vocabulary:
    size: int
    max_docs: int

    def __post_init__(self):
        if self.max_docs < 1:
            raise ConfigurationError("max_docs must be >= 1")
        if self.size < self.n_reserved + 2:
            raise ConfigurationError(
                f"vocabulary of size {self.size} cannot hold {self.n_reserved} "
                "reserved ids plus two content tokens")

    bos = BOS
    eos = EOS
    think_open = THINK_OPEN
    think_close = THINK_CLOSE

    @property
    def n_reserved(self) -> int:
        return _N_FIXED + self.max_docs

    def cite(self, i: int) -> int:
        if not 0 <= i < self.max_docs:
            raise ConfigurationError(f"no citation marker for document {i}")
        return _N_FIXED + i

    def cite_doc(self, token: int) -> int | None:
        """Inverse of :meth:`cite`; ``None`` for non-marker tokens."""
        i = token - _N_FIXED
        return i if 0 <= i < self.max_docs else None

    @property
    def content(self) -> range:
        return range(self.n_reserved, self.size)

    def describe(self, token: int) -> str:
        """Human-readable display string for one token."""
        names = {BOS: "<bos>", EOS: "<eos>", THINK_OPEN: "<think>",
                 THINK_CLOSE: "</think>"}
        if token in names:
            return names[token]
        doc = self.cite_doc(token)
        if doc is not None:
            return f"[doc {doc}]"
        return f"t{token}"


@dataclass(frozen=True)
class Document:
    doc_id: int
    tokens: tuple[int, ...]
    is_supporting: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise ConfigurationError(f"document {self.doc_id} is empty")


@dataclass(frozen=True)
class RagContext:
    """A query plus an ordered list of documents.

    The linearized prompt is always the query followed by the documents in
    list order.  ``is_supporting`` is read by rewards only.
    """

    query: tuple[int, ...]
    documents: tuple[Document, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "query", tuple(int(t) for t in self.query))
        object.__setattr__(self, "documents", tuple(self.documents))
        ids = [d.doc_id for d in self.documents]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"duplicate doc_ids {ids}")

    @property
    def supporting_ids(self) -> tuple[int, ...]:
        return tuple(d.doc_id for d in self.documents if d.is_supporting)

    def without(self, doc_id: int) -> "RagContext":
        """Same context with one document removed; order and ids preserved."""
        if doc_id not in {d.doc_id for d in self.documents}:
            raise ConfigurationError(f"no document with id {doc_id}")
        return RagContext(self.query,
                          tuple(d for d in self.documents if d.doc_id != doc_id))

    def without_documents(self) -> "RagContext":
        return RagContext(self.query, ())

    def with_labels(self, supporting: Iterable[int]) -> "RagContext":
        sup = set(supporting)
        return RagContext(self.query, tuple(
            replace(d, is_supporting=d.doc_id in sup) for d in self.documents))

    def all_tokens(self) -> Iterable[int]:
        yield from self.query
        for d in self.documents:
            yield from d.tokens

    def to_dict(self) -> dict:
        return {"query": list(self.query),
                "docs": [{"id": d.doc_id, "tokens": list(d.tokens),
                          "supporting": d.is_supporting} for d in self.documents]}

    @classmethod
    def from_dict(cls, obj: dict) -> "RagContext":
        docs = tuple(Document(int(d["id"]), tuple(d["tokens"]),
                              bool(d.get("supporting", False)))
                     for d in obj.get("docs", ()))
        return cls(tuple(obj["query"]), docs)


@dataclass(frozen=True)
class Rollout:
    tokens: tuple[int, ...]
    terminated_by: str = "eos"  # "eos" | "max_len"
    seed: int | None = None
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise ConfigurationError("rollout must contain at least one token")
        if self.terminated_by not in ("eos", "max_len"):
            raise ConfigurationError(f"bad terminated_by {self.terminated_by!r}")
        if self.terminated_by == "eos" and self.tokens[-1] != EOS:
            raise ConfigurationError("EOS-terminated rollout must end with EOS")

    @property
    def T(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def of(cls, tokens: Sequence[int]) -> "Rollout":
        """Wrap a bare token list, inferring how it terminated."""
        tokens = tuple(int(t) for t in tokens)
        term = "eos" if tokens and tokens[-1] == EOS else "max_len"
        return cls(tokens, term)


def check_tokens(tokens: Iterable[int], V: int, what: str = "token") -> None:
    for t in tokens:
        if not 0 <= t < V:
            raise InvalidTokenError(f"{what} id {t} outside vocabulary of size {V}")
