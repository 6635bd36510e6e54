"""Group Relative Policy Optimization on the toy mixture policy."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .clr import ClrConfig, RewardBundle, hybrid_reward, loo_score, score_group
from .data import ConfigurationError, RagContext, Rollout, Vocabulary
from .policy import (PolicyParameters, _token_grads, init_params, log_prob_jacobian_all,
                     log_prob_sequence, sample_rollout, token_distributions)
from .rng import derive_seed, make_rng
from .rules import RuleConfig, correctness_reward
from .tasks import TaskInstance, reliance_report

REWARD_MODES = ("acc", "cite", "total", "clr", "hybrid_mul", "hybrid_add")
LOG_FIELDS = ("step", "mean_reward", "mean_len", "acc_with_docs", "acc_without_docs",
              "rr", "ppl_full_seq", "ppl_full_tok", "ppl_loo_seq", "ppl_loo_tok")


class DivergenceError(RuntimeError):
    """Parameters left the configured magnitude bound during training."""


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_epsilon: float = 0.2
    kl_beta: float = 0.0
    learning_rate: float = 2.0
    steps: int = 300
    batch_size: int = 4
    reward_mode: str = "clr"
    adv_epsilon: float = 1e-8
    max_len: int = 16
    clr: ClrConfig = ClrConfig()
    rules: RuleConfig = RuleConfig()
    eval_every: int = 10
    eval_k: int = 1
    param_bound: float = 1e3
    init_eos_logit: float = 2.0
    init_gate_bias: float = 0.0
    init_self_copy: float = 0.25
    init_continues: float = 3.0

    def __post_init__(self):
        if self.group_size < 1:
            raise ConfigurationError("group_size must be >= 1")
        if not 0 < self.clip_epsilon < 1:
            raise ConfigurationError("clip_epsilon must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ConfigurationError("kl_beta must be >= 0")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigurationError(f"reward_mode must be one of {REWARD_MODES}")
        if self.steps < 0 or self.batch_size < 1 or self.max_len < 1:
            raise ConfigurationError("steps >= 0, batch_size >= 1 and max_len >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "GrpoConfig":
        obj = dict(obj)
        if "clr" in obj:
            obj["clr"] = ClrConfig(**obj["clr"])
        if "rules" in obj:
            obj["rules"] = RuleConfig(**obj["rules"])
        return cls(**obj)


@dataclass
class GroupSample:
    context: RagContext
    rollouts: list[Rollout]
    bundles: list[RewardBundle]
    old_logprobs: list[np.ndarray]
    advantages: np.ndarray


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("train log steps must increase")
        self.records.append({k: rec.get(k) for k in LOG_FIELDS})

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        log = cls()
        for line in text.splitlines():
            if line.strip():
                log.append(json.loads(line))
        return log

    def __len__(self) -> int:
        return len(self.records)


def compute_advantages(rewards: Sequence[float], adv_epsilon: float = 1e-8) -> np.ndarray:
    """Group-normalized advantages with the population standard deviation."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 1:
        raise ConfigurationError("need at least one reward")
    if np.all(r == r[0]):
        # the float mean of identical values can differ from them in the last bit
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + adv_epsilon)


def select_reward(bundle: RewardBundle, mode: str) -> float:
    """The scalar a reward mode trains on; hybrid modes fix their own fusion."""
    if mode == "hybrid_mul":
        return hybrid_reward(bundle.r_clr_norm, bundle.r_acc, "mul")
    if mode == "hybrid_add":
        return hybrid_reward(bundle.r_clr_norm, bundle.r_acc, "add")
    return {"acc": bundle.r_acc, "cite": bundle.r_cite, "total": bundle.r_total,
            "clr": bundle.r_clr_raw}[mode]


def grpo_surrogate(group: GroupSample, params: PolicyParameters,
                   old_params: PolicyParameters | None, config: GrpoConfig,
                   ref_params: PolicyParameters | None = None):
    """Clipped surrogate objective and its gradient with respect to ``params``.

    ``old_params`` is not re-evaluated: the ratio denominators are the
    recorded ``group.old_logprobs``.  The clipped branch contributes no
    gradient.  The reference policy is only touched when ``kl_beta > 0``.
    """
    G = len(group.rollouts)
    if not (len(group.old_logprobs) == len(group.advantages) == G):
        raise ConfigurationError("group arrays disagree in size")
    eps = config.clip_epsilon
    obj, grad = 0.0, np.zeros(params.size)
    for y, old, A in zip(group.rollouts, group.old_logprobs, group.advantages):
        old = np.asarray(old, dtype=np.float64)
        if old.shape != (y.T,):
            raise ConfigurationError(
                f"old logprobs have length {old.size}, rollout has {y.T} tokens")
        lp, J = _token_grads(params, group.context, y)
        ratio = np.exp(lp - old)
        plain = ratio * A
        clipped = np.clip(ratio, 1 - eps, 1 + eps) * A
        term = np.minimum(plain, clipped)
        w = np.where(plain <= clipped, A * ratio, 0.0)
        obj += float(np.mean(term))
        grad += (w @ J) / y.T
        if config.kl_beta > 0:
            if ref_params is None:
                raise ConfigurationError("kl_beta > 0 needs a reference policy")
            p, Jall = log_prob_jacobian_all(params, group.context, y)
            log_ratio = np.log(p) - np.log(token_distributions(ref_params, group.context, y))
            kl = np.sum(p * log_ratio, axis=1)
            kl_grad = np.einsum("tv,tvd->d", p * log_ratio, Jall)
            obj -= config.kl_beta * float(np.mean(kl))
            grad -= config.kl_beta * kl_grad / y.T
    return obj / G, grad / G


def pass_at_k(params: PolicyParameters, context: RagContext, k: int, answer: Sequence[int],
              seed: int, max_len: int = 16) -> float:
    """Share of ``k`` seeded rollouts that contain the answer."""
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    hits = sum(correctness_reward(
        sample_rollout(params, context, max_len, derive_seed(seed, "pass_at_k", j)), answer)
        for j in range(k))
    return hits / k


def group_logprob_std(params: PolicyParameters, context: RagContext,
                      rollouts: Sequence[Rollout]) -> float:
    """Population std of sequence log-likelihoods across a rollout group."""
    return float(np.std([log_prob_sequence(params, context, y)[1] for y in rollouts]))


# --------------------------------------------------------------------------
# data selection


class ShortfallError(ValueError):
    def __init__(self, report: dict):
        self.report = report
        super().__init__(
            "not enough samples: " + ", ".join(f"{k}={v}" for k, v in report.items()))


@dataclass(frozen=True)
class PoolSample:
    item: object
    pass_at_k: float
    logprob_std: float = math.inf


def filter_dataset(samples: Sequence[PoolSample], size: int | None = None,
                   band: tuple[float, float] = (0.1, 0.875), band_share: float = 0.9,
                   std_threshold: float | None = 10.0) -> list[PoolSample]:
    """Stratified selection: ``band_share`` from the pass@k band, the rest solved.

    Samples whose group log-likelihood std does not exceed ``std_threshold``
    are dropped first (pass ``None`` to skip that filter).  Within each
    stratum the earliest samples in input order are taken; the output keeps
    input order.  Without ``size`` the largest size the strata can fill is used.
    """
    lo, hi = band
    eligible = [s for s in samples
                if std_threshold is None or s.logprob_std > std_threshold]
    in_band = [i for i, s in enumerate(eligible) if lo <= s.pass_at_k <= hi]
    solved = [i for i, s in enumerate(eligible) if s.pass_at_k == 1.0]
    if size is None:
        cap_band = math.floor(len(in_band) / band_share) if band_share > 0 else math.inf
        cap_solved = math.floor(len(solved) / (1 - band_share)) if band_share < 1 else math.inf
        size = int(min(cap_band, cap_solved))
        while size > 0 and (round(size * band_share) > len(in_band)
                            or size - round(size * band_share) > len(solved)):
            size -= 1
    n_band = round(size * band_share)
    n_solved = size - n_band
    if n_band > len(in_band) or n_solved > len(solved):
        raise ShortfallError({"requested": size, "band_needed": n_band,
                              "band_available": len(in_band), "solved_needed": n_solved,
                              "solved_available": len(solved)})
    keep = sorted(in_band[:n_band] + solved[:n_solved])
    return [eligible[i] for i in keep]


# --------------------------------------------------------------------------
# training loop


def _step_groups(params, tasks, config, vocab, seed, step):
    n = len(tasks)
    rng = make_rng(seed, "batch", step)
    idx = rng.choice(n, size=config.batch_size, replace=config.batch_size > n)
    groups, stats = [], []
    for b, qi in enumerate(idx):
        task = tasks[int(qi)]
        ctx = task.context
        rollouts = [sample_rollout(params, ctx, config.max_len,
                                   derive_seed(seed, "rollout", step, b, g))
                    for g in range(config.group_size)]
        old = [log_prob_sequence(params, ctx, y)[0] for y in rollouts]
        bundles = score_group(params, ctx, rollouts, config.clr, task.answer, vocab,
                              config.rules, full_logprobs=old)
        rewards = [select_reward(bd, config.reward_mode) for bd in bundles]
        adv = compute_advantages(rewards, config.adv_epsilon)
        for bd, a in zip(bundles, adv):
            bd.advantage = float(a)
        groups.append(GroupSample(ctx, rollouts, bundles, old, adv))
        for y, bd, r in zip(rollouts, bundles, rewards):
            prof = bd.extras["profile"]
            S = math.fsum(prof.full.tolist())
            stats.append((float(r), y.T, S, loo_score(prof, config.clr.loo_mode)))
    return groups, stats


def train(config: GrpoConfig, tasks: Sequence[TaskInstance], seed: int, vocab: Vocabulary,
          init: PolicyParameters | None = None,
          progress: Callable[[dict], None] | None = None):
    """Run ``config.steps`` GRPO updates; returns final parameters and the log.

    Each record describes the policy *before* that step's update: the
    rollout statistics come from the sampled groups, and the accuracy fields
    (filled every ``eval_every`` steps, ``None`` otherwise) from a paired
    with/without-documents evaluation over all tasks.
    """
    if not tasks:
        raise ConfigurationError("training needs at least one task")
    params = init if init is not None else init_params(
        vocab.size, eos_logit=config.init_eos_logit, gate_bias=config.init_gate_bias,
        continues=config.init_continues, self_copy=config.init_self_copy)
    ref = params
    log = TrainLog()
    eval_seed = derive_seed(seed, "eval")
    for step in range(config.steps):
        groups, stats = _step_groups(params, tasks, config, vocab, seed, step)
        grad = np.zeros(params.size)
        for grp in groups:
            grad += grpo_surrogate(grp, params, params, config, ref)[1]
        grad /= len(groups)

        rec = {"step": step}
        r, T, S, S_loo = (np.array(col, dtype=np.float64) for col in zip(*stats))
        rec["mean_reward"] = float(np.mean(r))
        rec["mean_len"] = float(np.mean(T))
        # geometric means across rollouts
        rec["ppl_full_seq"] = math.exp(-np.mean(S))
        rec["ppl_full_tok"] = math.exp(-np.mean(S / T))
        rec["ppl_loo_seq"] = math.exp(-np.mean(S_loo))
        rec["ppl_loo_tok"] = math.exp(-np.mean(S_loo / T))
        if config.eval_every and (step % config.eval_every == 0 or step == config.steps - 1):
            rec.update(reliance_report(params, tasks, config.eval_k, eval_seed, config.max_len))
        log.append(rec)
        if progress is not None:
            progress(rec)

        theta = params.flat() + config.learning_rate * grad
        if not np.all(np.isfinite(theta)) or np.mean(np.abs(theta)) > config.param_bound:
            raise DivergenceError(
                f"step {step}: mean |theta| = {np.mean(np.abs(theta)):.4g} exceeds "
                f"bound {config.param_bound}")
        params = params.with_flat(theta, version=f"step-{step + 1}")
    return params, log
