"""Copy/generate mixture policy over a synthetic vocabulary.

At every step ``t`` the next-token distribution is::

    mix_t(v) = s_t * copy_t(v) + (1 - s_t) * softmax(unigram)(v)
    p_t(v)   = (1 - FLOOR) * ((1 - r_t) * mix_t(v) + r_t * self_t(v)) + FLOOR / V

``s_t = sigmoid(gate . gate_features_t)`` and ``copy_t`` is a softmax over the
positions of the linearized prompt, scored by ``attn . position_features``,
with the mass of every position credited to the token it holds.

``self_t`` is the empirical token distribution of the already generated
prefix and ``r_t = self_copy`` for ``t >= 1`` (0 at the first step).  The
self-copy weight is a fixed constant of the policy, not a trained parameter:
it lets the policy repeat its own output whether or not a document is present.

Prompt linearization: the query, then each document in list order, each
segment terminated by an EOS delimiter.  Labels never enter the prompt.

Position features (``ATTN_FEATURES``):

* ``match_query``    document token equals some query token
* ``follows_query``  previous prompt token (inside a document) is a query token
* ``continues``      previous prompt token equals the last emitted token
* ``doc_position``   offset inside its document / document length (0 in query)
* ``in_query``       position belongs to the query segment
* ``delimiter``      position holds an EOS delimiter
* ``emitted``        the token at this position was already emitted

Gate features (``GATE_FEATURES``): bias, ``STEP_SCALE * t`` and the fraction of
emitted tokens that occur somewhere in the prompt (0 at ``t = 0``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import EOS, RagContext, Rollout, check_tokens
from .rng import make_rng

FLOOR = 1e-8
STEP_SCALE = 0.1
FORMAT_VERSION = 1

GATE_FEATURES = ("bias", "step", "copy_hit_rate")
ATTN_FEATURES = ("match_query", "follows_query", "continues", "doc_position",
                 "in_query", "delimiter", "emitted")
_CONT = ATTN_FEATURES.index("continues")
_EMIT = ATTN_FEATURES.index("emitted")
NG, NA = len(GATE_FEATURES), len(ATTN_FEATURES)


@dataclass(frozen=True)
class PolicyParameters:
    gate: np.ndarray
    unigram: np.ndarray
    attn: np.ndarray
    version: str = "init"
    self_copy: float = 0.0

    def __post_init__(self):
        for name, n in (("gate", NG), ("attn", NA)):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
            object.__setattr__(self, name, arr)
        uni = np.asarray(self.unigram, dtype=np.float64)
        if uni.ndim != 1 or uni.size < 2:
            raise ValueError("unigram logits must be a vector of length >= 2")
        object.__setattr__(self, "unigram", uni)
        if not np.all(np.isfinite(self.flat())):
            raise ValueError("policy parameters must be finite")
        if not 0.0 <= self.self_copy < 1.0:
            raise ValueError("self_copy must lie in [0, 1)")

    @property
    def V(self) -> int:
        return self.unigram.size

    @property
    def size(self) -> int:
        return NG + self.V + NA

    def flat(self) -> np.ndarray:
        return np.concatenate([self.gate, self.unigram, self.attn])

    def with_flat(self, theta: np.ndarray, version: str | None = None) -> "PolicyParameters":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {theta.shape}")
        return PolicyParameters(theta[:NG].copy(), theta[NG:NG + self.V].copy(),
                                theta[NG + self.V:].copy(),
                                self.version if version is None else version,
                                self.self_copy)

    def slices(self) -> dict[str, slice]:
        return {"gate": slice(0, NG), "unigram": slice(NG, NG + self.V),
                "attn": slice(NG + self.V, self.size)}

    def __eq__(self, other):
        if not isinstance(other, PolicyParameters):
            return NotImplemented
        return (self.version == other.version and self.V == other.V
                and self.self_copy == other.self_copy
                and np.array_equal(self.flat(), other.flat()))

    __hash__ = None


def init_params(V: int, *, eos_logit: float = 1.5, gate_bias: float = 0.0,
                continues: float = 0.0, self_copy: float = 0.25,
                version: str = "init") -> PolicyParameters:
    """Untrained policy: flat unigram except EOS, copy attention flat except
    for an optional span-continuation prior."""
    uni = np.zeros(V)
    uni[EOS] = eos_logit
    gate = np.zeros(NG)
    gate[0] = gate_bias
    attn = np.zeros(NA)
    attn[_CONT] = continues
    return PolicyParameters(gate, uni, attn, version, self_copy)


# --------------------------------------------------------------------------
# prompt view


@dataclass(frozen=True)
class _View:
    tokens: np.ndarray        # (P,)
    prev: np.ndarray          # (P,) prompt token before each position, -2 at 0
    static: np.ndarray        # (P, NA) with dynamic columns left at zero
    onehot: np.ndarray        # (P, V)
    token_set: frozenset


@lru_cache(maxsize=4096)
def _build_view(query: tuple, docs: tuple, V: int) -> _View:
    segs = [(query, True)] + [(d, False) for d in docs]
    qset = set(query)
    toks, feats = [], []
    for seg, is_query in segs:
        n = len(seg)
        for off, tok in enumerate(list(seg) + [EOS]):
            f = np.zeros(NA)
            if not is_query:
                f[0] = tok in qset and off < n
                f[1] = bool(toks) and toks[-1] in qset and off > 0
                f[3] = off / n
            f[4] = is_query
            f[5] = off == n
            toks.append(tok)
            feats.append(f)
    tokens = np.array(toks, dtype=np.int64)
    check_tokens(tokens, V, "context token")
    prev = np.concatenate([[-2], tokens[:-1]])
    onehot = np.zeros((tokens.size, V))
    onehot[np.arange(tokens.size), tokens] = 1.0
    for arr in (tokens, prev, onehot):
        arr.setflags(write=False)
    static = np.array(feats)
    static.setflags(write=False)
    return _View(tokens, prev, static, onehot, frozenset(toks))


def prompt_view(context: RagContext, V: int) -> _View:
    # keyed on tokens only: labels cannot influence the policy
    return _build_view(context.query, tuple(d.tokens for d in context.documents), V)


def linearize(context: RagContext) -> list[int]:
    """The token stream the policy conditions on."""
    out = list(context.query) + [EOS]
    for d in context.documents:
        out += list(d.tokens) + [EOS]
    return out


def _sequence_features(view: _View, y: np.ndarray, V: int):
    """Features for rows t = 0..len(y)-1 (row t sees y[:t]).

    Returns position features (T, P, NA), gate features (T, NG) and the
    prefix token distribution (T, V).
    """
    T = y.size
    y_prev = np.concatenate([[-1], y[:-1]])
    phi = np.broadcast_to(view.static, (T,) + view.static.shape).copy()
    phi[:, :, _CONT] = view.prev[None, :] == y_prev[:, None]
    eq = y[:, None] == view.tokens[None, :]
    seen = np.zeros_like(eq)
    if T > 1:
        seen[1:] = np.logical_or.accumulate(eq, axis=0)[:-1]
    phi[:, :, _EMIT] = seen
    hits = np.concatenate([[0.0], np.cumsum(eq.any(axis=1))[:-1]])
    steps = np.arange(T, dtype=np.float64)
    psi = np.stack([np.ones(T), STEP_SCALE * steps,
                    hits / np.maximum(steps, 1.0)], axis=1)
    selfd = np.zeros((T, V))
    if T > 1:
        selfd[np.arange(1, T), y[:-1]] = 1.0
        selfd = np.cumsum(selfd, axis=0) / np.maximum(steps, 1.0)[:, None]
    return phi, psi, selfd


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _self_weight(params: PolicyParameters, psi: np.ndarray) -> np.ndarray:
    # psi[:, 1] is STEP_SCALE * t; no self-copy before anything was generated
    return np.where(psi[:, 1] > 0, params.self_copy, 0.0)


def _mixture(params: PolicyParameters, view: _View, phi, psi, selfd):
    s = _sigmoid(psi @ params.gate)                        # (R,)
    a = _softmax(phi @ params.attn, axis=1)                # (R, P)
    copy = a @ view.onehot                                 # (R, V)
    u = _softmax(params.unigram)                           # (V,)
    r = _self_weight(params, psi)[:, None]
    mix = s[:, None] * copy + (1.0 - s)[:, None] * u[None, :]
    p = (1.0 - FLOOR) * ((1.0 - r) * mix + r * selfd) + FLOOR / params.V
    return s, a, copy, u, p


def _as_tokens(y, V: int) -> np.ndarray:
    toks = y.tokens if isinstance(y, Rollout) else tuple(y)
    arr = np.asarray(toks, dtype=np.int64)
    check_tokens(arr, V)
    return arr


# --------------------------------------------------------------------------
# public operations


def next_token_distribution(params: PolicyParameters, context: RagContext,
                            prefix: Sequence[int] = ()) -> np.ndarray:
    """Probability vector of length V for the token following ``prefix``."""
    view = prompt_view(context, params.V)
    pre = _as_tokens(prefix, params.V)
    # row len(prefix) of a sequence whose last token is a placeholder
    phi, psi, selfd = _sequence_features(view, np.concatenate([pre, [-1]]), params.V)
    return _mixture(params, view, phi[-1:], psi[-1:], selfd[-1:])[4][0]


def token_distributions(params: PolicyParameters, context: RagContext, y) -> np.ndarray:
    """(T, V) matrix: the distribution at every step of ``y``."""
    view = prompt_view(context, params.V)
    arr = _as_tokens(y, params.V)
    phi, psi, selfd = _sequence_features(view, arr, params.V)
    return _mixture(params, view, phi, psi, selfd)[4]


def log_prob_sequence(params: PolicyParameters, context: RagContext, y):
    """Per-token log-probabilities of ``y`` and their sum."""
    arr = _as_tokens(y, params.V)
    if arr.size == 0:
        raise ValueError("cannot score an empty sequence")
    p = token_distributions(params, context, arr)
    lp = np.log(p[np.arange(arr.size), arr])
    return lp, float(np.sum(lp))


def _token_grads(params: PolicyParameters, context: RagContext, y):
    """Per-token log-probabilities and their (T, D) Jacobian."""
    view = prompt_view(context, params.V)
    arr = _as_tokens(y, params.V)
    if arr.size == 0:
        raise ValueError("cannot score an empty sequence")
    phi, psi, selfd = _sequence_features(view, arr, params.V)
    s, a, copy, u, p = _mixture(params, view, phi, psi, selfd)
    T, V = arr.size, params.V
    rows = np.arange(T)
    p_y, c_y, u_y = p[rows, arr], copy[rows, arr], u[arr]
    coef = (1.0 - FLOOR) * (1.0 - _self_weight(params, psi)) / p_y

    g_gate = (coef * s * (1 - s) * (c_y - u_y))[:, None] * psi
    g_uni = (coef * (1 - s) * u_y)[:, None] * (np.eye(V)[arr] - u[None, :])
    hit = (view.tokens[None, :] == arr[:, None]) * a          # (T, P)
    g_attn = (coef * s)[:, None] * (np.einsum("tp,tpf->tf", hit, phi)
                                    - c_y[:, None] * np.einsum("tp,tpf->tf", a, phi))
    return np.log(p_y), np.concatenate([g_gate, g_uni, g_attn], axis=1)


def grad_log_prob(params: PolicyParameters, context: RagContext, y) -> np.ndarray:
    """Gradient of the sequence log-likelihood, laid out like ``params.flat()``."""
    return _token_grads(params, context, y)[1].sum(axis=0)


def log_prob_jacobian_all(params: PolicyParameters, context: RagContext, y):
    """Distributions (T, V) and d log p_t(v) / d theta for every v: (T, V, D)."""
    view = prompt_view(context, params.V)
    arr = _as_tokens(y, params.V)
    phi, psi, selfd = _sequence_features(view, arr, params.V)
    s, a, copy, u, p = _mixture(params, view, phi, psi, selfd)
    V = params.V
    coef = (1.0 - FLOOR) * (1.0 - _self_weight(params, psi))[:, None] / p  # (T, V)
    j_gate = (coef * (s * (1 - s))[:, None] * (copy - u[None, :]))[:, :, None] * psi[:, None, :]
    j_uni = (coef * (1 - s)[:, None] * u[None, :])[:, :, None] * (np.eye(V) - u[None, :])[None]
    per_tok = np.einsum("tp,tpf,pv->tvf", a, phi, view.onehot)
    mean_phi = np.einsum("tp,tpf->tf", a, phi)
    j_attn = (coef * s[:, None])[:, :, None] * (per_tok - copy[:, :, None] * mean_phi[:, None, :])
    return p, np.concatenate([j_gate, j_uni, j_attn], axis=2)


def sample_rollout(params: PolicyParameters, context: RagContext, max_len: int,
                   seed: int) -> Rollout:
    """Draw one completion; stops at EOS or after ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    view = prompt_view(context, params.V)
    rng = make_rng(seed, "sample_rollout")
    u = _softmax(params.unigram)
    base = view.static @ params.attn
    w_cont, w_emit = params.attn[_CONT], params.attn[_EMIT]
    g0, g_step, g_hit = params.gate
    onehot = view.onehot
    seen = np.zeros(view.tokens.size, dtype=bool)
    counts = np.zeros(params.V)
    hits, prev = 0, -1
    out: list[int] = []
    for t in range(max_len):
        z = base + w_cont * (view.prev == prev) + w_emit * seen
        a = np.exp(z - z.max())
        a /= a.sum()
        s = _sigmoid(g0 + g_step * STEP_SCALE * t + g_hit * (hits / max(t, 1)))
        mix = s * (a @ onehot) + (1.0 - s) * u
        if t:
            mix = (1.0 - params.self_copy) * mix + params.self_copy * (counts / t)
        p = (1.0 - FLOOR) * mix + FLOOR / params.V
        cdf = np.cumsum(p)
        tok = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        tok = min(tok, params.V - 1)
        out.append(tok)
        if tok == EOS:
            return Rollout(tuple(out), "eos", seed)
        counts[tok] += 1.0
        match = view.tokens == tok
        seen |= match
        hits += bool(match.any())
        prev = tok
    return Rollout(tuple(out), "max_len", seed)


# --------------------------------------------------------------------------
# checkpoints


def params_to_text(params: PolicyParameters) -> str:
    doc = {
        "format": "clrlab-policy",
        "format_version": FORMAT_VERSION,
        "version": params.version,
        "self_copy": params.self_copy,
        "layout": {"gate": list(GATE_FEATURES), "unigram": params.V,
                   "attn": list(ATTN_FEATURES),
                   "flat_order": ["gate", "unigram", "attn"]},
        "gate": params.gate.tolist(),
        "unigram": params.unigram.tolist(),
        "attn": params.attn.tolist(),
    }
    return json.dumps(doc, indent=1) + "\n"


def params_from_text(text: str) -> PolicyParameters:
    doc = json.loads(text)
    if doc.get("format") != "clrlab-policy":
        raise ValueError("not a policy checkpoint")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
    layout = doc["layout"]
    if list(layout["gate"]) != list(GATE_FEATURES) or list(layout["attn"]) != list(ATTN_FEATURES):
        raise ValueError("checkpoint feature layout does not match this build")
    if len(doc["unigram"]) != layout["unigram"]:
        raise ValueError("unigram length disagrees with layout")
    return PolicyParameters(np.array(doc["gate"], dtype=np.float64),
                            np.array(doc["unigram"], dtype=np.float64),
                            np.array(doc["attn"], dtype=np.float64),
                            str(doc["version"]), float(doc["self_copy"]))


def save_checkpoint(params: PolicyParameters, path) -> None:
    Path(path).write_text(params_to_text(params))


def load_checkpoint(path) -> PolicyParameters:
    return params_from_text(Path(path).read_text())
