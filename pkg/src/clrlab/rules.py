"""Rule-based rewards: citation recall, answer containment, length cost."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import math

from .data import THINK_CLOSE, THINK_OPEN, ConfigurationError, Rollout, Vocabulary


@dataclass(frozen=True)
class RuleConfig:
    alpha: float = 0.5
    beta: float = 0.5
    eta: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "eta"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"{name} must be finite")


def _tokens(y) -> tuple[int, ...]:
    return y.tokens if isinstance(y, Rollout) else tuple(y)


def citation_reward(y, supporting_ids: Iterable[int], vocab: Vocabulary) -> float:
    """Share of supporting documents whose marker token appears in ``y``."""
    sup = sorted(set(supporting_ids))
    if not sup:
        raise ConfigurationError("citation reward needs at least one supporting document")
    present = set(_tokens(y))
    return sum(vocab.cite(i) in present for i in sup) / len(sup)


def strip_think(tokens: Sequence[int]) -> list[int]:
    """Drop every THINK_OPEN ... THINK_CLOSE span (an unclosed span runs to the end).

    A stray THINK_CLOSE outside any span is kept as an ordinary token.
    """
    out, depth = [], 0
    for t in tokens:
        if t == THINK_OPEN:
            depth += 1
        elif t == THINK_CLOSE and depth:
            depth -= 1
        elif not depth:
            out.append(t)
    return out


def contains(haystack: Sequence[int], needle: Sequence[int]) -> bool:
    n = len(needle)
    if n == 0:
        return True
    first = needle[0]
    needle = list(needle)
    for i in range(len(haystack) - n + 1):
        if haystack[i] == first and list(haystack[i:i + n]) == needle:
            return True
    return False


def correctness_reward(y, answer: Sequence[int]) -> int:
    """1 if ``answer`` occurs contiguously in ``y`` outside think spans."""
    if len(answer) == 0:
        raise ConfigurationError("answer must be non-empty")
    return int(contains(strip_think(_tokens(y)), answer))


def cost(y) -> float:
    return float(len(_tokens(y)))


def total_reward(r_cite: float, r_acc: float, y, config: RuleConfig = RuleConfig()) -> float:
    # eta == 0 must contribute exactly nothing, whatever the length
    penalty = config.eta * cost(y) if config.eta else 0.0
    return config.alpha * r_cite + config.beta * r_acc - penalty
