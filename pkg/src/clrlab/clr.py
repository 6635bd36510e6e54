"""Evidential contribution and the contrastive likelihood reward.

For a rollout ``y`` scored under the full context and under every context
with one supporting document removed, the evidential contribution is the drop
in sequence log-likelihood caused by losing the most critical document
(``loo_mode="min"``) or, as an ablation, the average document
(``loo_mode="avg"``).  The reward keeps that drop only when it clears a
significance threshold and divides it by a length normalizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ConfigurationError, RagContext, Rollout, Vocabulary
from .policy import PolicyParameters, log_prob_sequence
from .rules import RuleConfig, citation_reward, correctness_reward, total_reward

LOO_MODES = ("min", "avg")
FUSIONS = ("mul", "add")
LENGTH_NORMS = ("sqrt", "none", "linear")


@dataclass(frozen=True)
class ClrConfig:
    tau: float = 1.0
    loo_mode: str = "min"
    norm_epsilon: float = 1e-8
    fusion: str = "mul"
    length_norm: str = "sqrt"

    def __post_init__(self):
        if not self.tau >= 0:
            raise ConfigurationError("tau must be >= 0")
        if not self.norm_epsilon > 0:
            raise ConfigurationError("norm_epsilon must be > 0")
        if self.loo_mode not in LOO_MODES:
            raise ConfigurationError(f"loo_mode must be one of {LOO_MODES}")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"fusion must be one of {FUSIONS}")
        if self.length_norm not in LENGTH_NORMS:
            raise ConfigurationError(f"length_norm must be one of {LENGTH_NORMS}")


@dataclass
class LikelihoodProfile:
    full: np.ndarray
    loo: dict[int, np.ndarray]

    def __post_init__(self):
        self.full = np.asarray(self.full, dtype=np.float64)
        self.loo = {int(k): np.asarray(v, dtype=np.float64) for k, v in self.loo.items()}
        T = self.full.size
        if T < 1:
            raise ConfigurationError("profile must cover at least one token")
        if not self.loo:
            raise ConfigurationError("profile needs at least one leave-one-out vector")
        for k, v in self.loo.items():
            if v.shape != (T,):
                raise ConfigurationError(
                    f"loo vector for doc {k} has length {v.size}, expected {T}")
        if not all(np.all(np.isfinite(v)) for v in [self.full, *self.loo.values()]):
            raise ConfigurationError("profile entries must be finite")

    @property
    def T(self) -> int:
        return self.full.size


@dataclass
class EvidentialScore:
    E: float
    eps: np.ndarray
    critical_doc: int | None
    mode: str


@dataclass
class RewardBundle:
    r_clr_raw: float
    r_clr_norm: float
    r_acc: int
    r_cite: float
    r_hybrid: float
    r_total: float
    advantage: float | None = None
    extras: dict = field(default_factory=dict, repr=False)

    def to_dict(self, with_advantage: bool = True) -> dict:
        d = {"r_clr_raw": self.r_clr_raw, "r_clr_norm": self.r_clr_norm,
             "r_acc": self.r_acc, "r_cite": self.r_cite,
             "r_hybrid": self.r_hybrid, "r_total": self.r_total}
        if with_advantage:
            d["advantage"] = self.advantage
        return d


def likelihood_profile(params: PolicyParameters, context: RagContext, y) -> LikelihoodProfile:
    """Token log-probabilities under the full context and each LOO context."""
    sup = context.supporting_ids
    if not sup:
        raise ConfigurationError("likelihood profile needs a supporting document")
    full, _ = log_prob_sequence(params, context, y)
    loo = {d: log_prob_sequence(params, context.without(d), y)[0] for d in sup}
    return LikelihoodProfile(full, loo)


def _seq_sum(v: np.ndarray) -> float:
    # index-order accumulation keeps golden files independent of numpy's
    # pairwise summation blocking
    return math.fsum(v.tolist())


def evidential_contribution(profile: LikelihoodProfile, mode: str = "min") -> EvidentialScore:
    if mode not in LOO_MODES:
        raise ConfigurationError(f"unknown loo mode {mode!r}")
    s_full = _seq_sum(profile.full)
    ids = sorted(profile.loo)
    if mode == "min":
        # strict < keeps the smallest doc_id on ties
        best = ids[0]
        best_s = _seq_sum(profile.loo[best])
        for d in ids[1:]:
            s = _seq_sum(profile.loo[d])
            if s < best_s:
                best, best_s = d, s
        return EvidentialScore(s_full - best_s, profile.full - profile.loo[best], best, mode)
    mean_loo = np.mean(np.stack([profile.loo[d] for d in ids]), axis=0)
    avg_s = sum(_seq_sum(profile.loo[d]) for d in ids) / len(ids)
    return EvidentialScore(s_full - avg_s, profile.full - mean_loo, None, mode)


def loo_score(profile: LikelihoodProfile, mode: str = "min") -> float:
    """Sequence log-likelihood with the critical (or average) document removed."""
    sums = [_seq_sum(profile.loo[d]) for d in sorted(profile.loo)]
    return min(sums) if mode == "min" else sum(sums) / len(sums)


def length_normalizer(T: int, length_norm: str = "sqrt") -> float:
    if length_norm == "sqrt":
        return math.sqrt(T)
    if length_norm == "linear":
        return float(T)
    if length_norm == "none":
        return 1.0
    raise ConfigurationError(f"unknown length normalization {length_norm!r}")


def clr_reward(E, T: int, tau: float = 1.0, length_norm: str = "sqrt") -> float:
    """``E / sqrt(T)`` when ``E > tau``, else exactly 0."""
    if isinstance(E, EvidentialScore):
        E = E.E
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    if not E > tau:
        return 0.0
    return E / length_normalizer(T, length_norm)


def normalize_group(raw: Sequence[float], norm_epsilon: float = 1e-8) -> np.ndarray:
    """Min-max scale a group of rewards into [0, 1)."""
    x = np.asarray(raw, dtype=np.float64)
    if x.size < 1:
        raise ConfigurationError("group must contain at least one reward")
    lo = x.min()
    return (x - lo) / (x.max() - lo + norm_epsilon)


def hybrid_reward(r_norm: float, r_acc: int, fusion: str = "mul") -> float:
    if fusion == "mul":
        return r_norm * r_acc
    if fusion == "add":
        return r_norm + r_acc
    raise ConfigurationError(f"unknown fusion {fusion!r}")


def score_group(params: PolicyParameters, context: RagContext, rollouts: Sequence,
                config: ClrConfig, answer: Sequence[int], vocab: Vocabulary,
                rules: RuleConfig = RuleConfig(), profiles=None,
                full_logprobs=None) -> list[RewardBundle]:
    """Fill every reward channel for one group of rollouts.

    Order of evaluation per rollout: likelihood profile, evidential
    contribution, thresholded CLR; then group normalization, correctness,
    citation, fusion and rule total.  ``profiles`` may carry precomputed
    likelihood profiles (one per rollout), in which case ``params`` is unused
    for scoring.  ``full_logprobs`` lets a caller that already scored the
    rollouts under the full context skip that pass.
    """
    rollouts = [y if isinstance(y, Rollout) else Rollout.of(y) for y in rollouts]
    if not rollouts:
        raise ConfigurationError("group must contain at least one rollout")
    sup = context.supporting_ids
    if not sup:
        raise ConfigurationError("scoring needs a supporting document")
    if profiles is None:
        profiles = []
        for i, y in enumerate(rollouts):
            if full_logprobs is not None:
                loo = {d: log_prob_sequence(params, context.without(d), y)[0] for d in sup}
                profiles.append(LikelihoodProfile(full_logprobs[i], loo))
            else:
                profiles.append(likelihood_profile(params, context, y))
    elif len(profiles) != len(rollouts):
        raise ConfigurationError(
            f"{len(profiles)} profiles supplied for {len(rollouts)} rollouts")

    scores, raw = [], []
    for y, prof in zip(rollouts, profiles):
        if prof.T != y.T:
            raise ConfigurationError(
                f"profile length {prof.T} does not match rollout length {y.T}")
        if set(prof.loo) != set(sup):
            raise ConfigurationError(
                f"profile covers documents {sorted(prof.loo)}, supporting set is {sorted(sup)}")
        sc = evidential_contribution(prof, config.loo_mode)
        scores.append(sc)
        raw.append(clr_reward(sc.E, y.T, config.tau, config.length_norm))
    norm = normalize_group(raw, config.norm_epsilon)

    bundles = []
    for y, prof, sc, r_raw, r_norm in zip(rollouts, profiles, scores, raw, norm):
        r_acc = correctness_reward(y, answer)
        r_cite = citation_reward(y, sup, vocab)
        bundles.append(RewardBundle(
            r_clr_raw=r_raw, r_clr_norm=float(r_norm), r_acc=r_acc, r_cite=r_cite,
            r_hybrid=hybrid_reward(float(r_norm), r_acc, config.fusion),
            r_total=total_reward(r_cite, r_acc, y, rules),
            extras={"score": sc, "profile": prof}))
    return bundles
