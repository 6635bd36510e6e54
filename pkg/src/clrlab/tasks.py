"""Seeded synthetic retrieval-QA tasks and the context-reliance metrics.

Single-hop: the query is ``[QMARK, key]`` and one supporting document holds
``key answer...`` at a random offset.  Two-hop: document A holds
``key bridge`` and document B holds ``bridge answer...``, so dropping either
breaks the chain.  Every other token in every document is filler drawn from a
pool that excludes the key, the bridge and the answer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import ConfigurationError, Document, RagContext, Vocabulary
from .clr import likelihood_profile, loo_score
from .policy import PolicyParameters, sample_rollout
from .rng import derive_seed, make_rng
from .rules import contains, correctness_reward


class GenerationError(ConfigurationError):
    """The vocabulary cannot accommodate the requested task structure."""


MIN_FILLER = 2


@dataclass(frozen=True)
class TaskSpec:
    n_docs: int = 5
    n_supporting: int = 1
    hops: int = 1
    doc_len: int = 8
    vocab: Vocabulary = Vocabulary(64, 5)
    n_tasks: int = 200
    seed: int = 0
    key_len: int = 1
    answer_len: int = 2

    def validate(self) -> None:
        if self.n_docs < 1:
            raise ConfigurationError("n_docs must be >= 1")
        if not 1 <= self.n_supporting <= self.n_docs:
            raise ConfigurationError("need 1 <= n_supporting <= n_docs")
        if self.hops not in (1, 2):
            raise ConfigurationError("hops must be 1 or 2")
        if self.hops == 2 and self.n_supporting < 2:
            raise ConfigurationError("two-hop tasks need n_supporting >= 2")
        if self.n_docs > self.vocab.max_docs:
            raise ConfigurationError(
                f"{self.n_docs} documents but only {self.vocab.max_docs} citation markers")
        if self.key_len < 1 or self.answer_len < 1:
            raise ConfigurationError("key_len and answer_len must be >= 1")
        longest = self.key_len + (1 if self.hops == 2 else self.answer_len)
        if self.hops == 2:
            longest = max(longest, 1 + self.answer_len)
        if self.doc_len < longest:
            raise ConfigurationError(f"doc_len {self.doc_len} cannot hold a {longest}-token fact")
        if self.n_tasks < 0:
            raise ConfigurationError("n_tasks must be >= 0")
        need = self.key_len + self.answer_len + (self.hops == 2) + MIN_FILLER
        if len(self.vocab.content) - 1 < need:
            raise GenerationError(
                f"vocabulary has {len(self.vocab.content) - 1} free content tokens, "
                f"need {need} to keep answer and bridge out of the filler")


@dataclass(frozen=True)
class TaskInstance:
    context: RagContext
    answer: tuple[int, ...]
    bridge: int | None = None
    seed: int | None = None

    def to_dict(self) -> dict:
        d = self.context.to_dict()
        d.update(answer=list(self.answer), bridge=self.bridge, seed=self.seed)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TaskInstance":
        bridge = obj.get("bridge")
        return cls(RagContext.from_dict(obj), tuple(int(t) for t in obj["answer"]),
                   None if bridge is None else int(bridge), obj.get("seed"))


def query_marker(vocab: Vocabulary) -> int:
    return vocab.content[0]


def _place(fact: list[int], doc_len: int, filler: np.ndarray, rng) -> tuple[int, ...]:
    off = int(rng.integers(0, doc_len - len(fact) + 1))
    toks = [int(t) for t in rng.choice(filler, size=doc_len)]
    toks[off:off + len(fact)] = fact
    return tuple(toks)


def gen_task(spec: TaskSpec, task_seed: int) -> TaskInstance:
    rng = make_rng(task_seed, "task")
    pool = np.array(spec.vocab.content[1:])
    n_special = spec.key_len + spec.answer_len + (spec.hops == 2)
    special = [int(t) for t in rng.choice(pool, size=n_special, replace=False)]
    key = special[:spec.key_len]
    answer = special[spec.key_len:spec.key_len + spec.answer_len]
    bridge = special[-1] if spec.hops == 2 else None
    filler = np.setdiff1d(pool, special)

    sup_slots = [int(i) for i in rng.permutation(spec.n_docs)[:spec.n_supporting]]
    docs: dict[int, tuple[int, ...]] = {}
    for rank, slot in enumerate(sup_slots):
        if spec.hops == 1:
            fact = key + answer
        elif rank == 0:
            fact = key + [bridge]
        elif rank == 1:
            fact = [bridge] + answer
        else:
            fact = list(key)
        docs[slot] = _place(fact, spec.doc_len, filler, rng)
    for slot in range(spec.n_docs):
        if slot not in docs:
            docs[slot] = tuple(int(t) for t in rng.choice(filler, size=spec.doc_len))
    documents = tuple(Document(i, docs[i], i in sup_slots) for i in range(spec.n_docs))
    query = (query_marker(spec.vocab), *key)
    return TaskInstance(RagContext(query, documents), tuple(answer), bridge, task_seed)


def gen_tasks(spec: TaskSpec) -> list[TaskInstance]:
    spec.validate()
    return [gen_task(spec, derive_seed(spec.seed, "task", i)) for i in range(spec.n_tasks)]


def validate_instance(task: TaskInstance) -> list[str]:
    """Return the list of violated construction invariants (empty when valid)."""
    problems = []
    docs = task.context.documents
    sup = [d for d in docs if d.is_supporting]
    noisy = [d for d in docs if not d.is_supporting]
    if not sup:
        problems.append("no supporting document")
    if not any(contains(d.tokens, task.answer) for d in sup):
        problems.append("answer not found in any supporting document")
    ans = set(task.answer)
    for d in noisy:
        if ans & set(d.tokens):
            problems.append(f"answer token leaks into noisy document {d.doc_id}")
        if task.bridge is not None and task.bridge in d.tokens:
            problems.append(f"bridge token leaks into noisy document {d.doc_id}")
    if task.bridge is not None:
        holders = [d for d in docs if task.bridge in d.tokens]
        if len(holders) != 2:
            problems.append(f"bridge appears in {len(holders)} documents, expected 2")
        else:
            with_answer = [d for d in holders if contains(d.tokens, task.answer)]
            if len(with_answer) != 1:
                problems.append("answer must appear in exactly one bridge document")
            if [d for d in docs if ans & set(d.tokens) and d not in holders]:
                problems.append("answer appears outside the bridge chain")
    return problems


# --------------------------------------------------------------------------
# serialization


def tasks_to_jsonl(tasks: Iterable[TaskInstance]) -> str:
    return "".join(json.dumps(t.to_dict(), separators=(",", ":")) + "\n" for t in tasks)


def read_tasks(path) -> list[TaskInstance]:
    with open(path) as fh:
        return [TaskInstance.from_dict(json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# metrics


def task_correct(params: PolicyParameters, task: TaskInstance, with_docs: bool,
                 k_samples: int, seed: int, index: int, max_len: int) -> bool:
    ctx = task.context if with_docs else task.context.without_documents()
    for s in range(k_samples):
        y = sample_rollout(params, ctx, max_len, derive_seed(seed, "accuracy", index, s))
        if correctness_reward(y, task.answer):
            return True
    return False


def accuracy(params: PolicyParameters, tasks: Sequence[TaskInstance], with_docs: bool = True,
             k_samples: int = 1, seed: int = 0, max_len: int = 16) -> float:
    """Share of tasks answered by any of ``k_samples`` seeded rollouts.

    Rollout seeds depend only on ``(seed, task index, sample index)``, so the
    with- and without-documents evaluations are paired.
    """
    if not tasks:
        raise ConfigurationError("accuracy needs at least one task")
    hits = sum(task_correct(params, t, with_docs, k_samples, seed, i, max_len)
               for i, t in enumerate(tasks))
    return hits / len(tasks)


def reliance_report(params: PolicyParameters, tasks: Sequence[TaskInstance],
                    k_samples: int = 1, seed: int = 0, max_len: int = 16) -> dict:
    acc_d = accuracy(params, tasks, True, k_samples, seed, max_len)
    acc_q = accuracy(params, tasks, False, k_samples, seed, max_len)
    return {"acc_with_docs": acc_d, "acc_without_docs": acc_q, "rr": acc_d - acc_q}


def reference_reliance(params: PolicyParameters, tasks: Sequence[TaskInstance],
                       k_samples: int = 1, seed: int = 0, max_len: int = 16) -> float:
    """Accuracy with documents minus accuracy without them."""
    return reliance_report(params, tasks, k_samples, seed, max_len)["rr"]


def _exp(x: float) -> float:
    return math.exp(x) if x < 709.0 else math.inf


def perplexity_forms(S: float, S_loo: float, T: int) -> dict:
    return {"ppl_full_seq": _exp(-S), "ppl_full_tok": _exp(-S / T),
            "ppl_loo_seq": _exp(-S_loo), "ppl_loo_tok": _exp(-S_loo / T)}


def perplexities(params: PolicyParameters, context: RagContext, y,
                 loo_mode: str = "min") -> dict:
    """Sequence-level ``exp(-S)`` and per-token ``exp(-S/T)``, full and leave-one-out."""
    prof = likelihood_profile(params, context, y)
    S = math.fsum(prof.full.tolist())
    return perplexity_forms(S, loo_score(prof, loo_mode), prof.T)
