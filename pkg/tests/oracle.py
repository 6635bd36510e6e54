"""Straight-line scalar re-implementations used as test oracles.

Nothing here imports the package's numerical code: the mixture is rebuilt
from its documented definition with plain Python loops and ``math``.
"""

from __future__ import annotations

import math

FLOOR = 1e-8
STEP_SCALE = 0.1
EOS = 1


def prompt_positions(query, docs):
    """[(token, is_query, offset, segment_length)] for query+EOS, then each doc+EOS."""
    out = []
    for seg, is_query in [(list(query), True)] + [(list(d), False) for d in docs]:
        n = len(seg)
        for off, tok in enumerate(seg + [EOS]):
            out.append((tok, is_query, off, n))
    return out


def distribution(gate, unigram, attn, self_copy, query, docs, prefix):
    """Next-token distribution after ``prefix`` for the documented mixture."""
    V = len(unigram)
    pos = prompt_positions(query, docs)
    qset = set(query)
    prompt_tokens = [p[0] for p in pos]
    t = len(prefix)
    last = prefix[-1] if prefix else None
    emitted = set(prefix)

    scores = []
    for i, (tok, is_query, off, n) in enumerate(pos):
        prev = prompt_tokens[i - 1] if i > 0 else None
        f = [
            1.0 if (not is_query and off < n and tok in qset) else 0.0,
            1.0 if (not is_query and off > 0 and prev in qset) else 0.0,
            1.0 if (last is not None and prev is not None and prev == last) else 0.0,
            off / n if not is_query else 0.0,
            1.0 if is_query else 0.0,
            1.0 if off == n else 0.0,
            1.0 if tok in emitted else 0.0,
        ]
        scores.append(sum(w * x for w, x in zip(attn, f)))
    m = max(scores)
    ex = [math.exp(z - m) for z in scores]
    tot = sum(ex)
    copy = [0.0] * V
    for (tok, *_), e in zip(pos, ex):
        copy[tok] += e / tot

    hits = sum(1 for y in prefix if y in set(prompt_tokens))
    psi = [1.0, STEP_SCALE * t, hits / max(t, 1)]
    g = sum(w * x for w, x in zip(gate, psi))
    s = 1.0 / (1.0 + math.exp(-g)) if g > -700 else 0.0

    mu = max(unigram)
    ue = [math.exp(z - mu) for z in unigram]
    ut = sum(ue)
    u = [e / ut for e in ue]

    r = self_copy if t >= 1 else 0.0
    selfd = [prefix.count(v) / t if t else 0.0 for v in range(V)]
    return [(1 - FLOOR) * ((1 - r) * (s * copy[v] + (1 - s) * u[v]) + r * selfd[v]) + FLOOR / V
            for v in range(V)]


def log_probs(gate, unigram, attn, self_copy, query, docs, y):
    return [math.log(distribution(gate, unigram, attn, self_copy, query, docs, list(y[:t]))[y[t]])
            for t in range(len(y))]


def params_tuple(params):
    return (params.gate.tolist(), params.unigram.tolist(), params.attn.tolist(),
            params.self_copy)


def context_tuple(context):
    return context.query, [d.tokens for d in context.documents]


def evidential(full, loo: dict, mode: str):
    """(E, eps list, critical doc) from plain lists."""
    s_full = math.fsum(full)
    sums = {d: math.fsum(v) for d, v in loo.items()}
    if mode == "min":
        crit = min(sorted(sums), key=lambda d: sums[d])
        return s_full - sums[crit], [f - l for f, l in zip(full, loo[crit])], crit
    ids = sorted(loo)
    avg = sum(sums[d] for d in ids) / len(ids)
    eps = [f - sum(loo[d][t] for d in ids) / len(ids) for t, f in enumerate(full)]
    return s_full - avg, eps, None


# ---------------------------------------------------------------- rewards

N_FIXED = 4
THINK_OPEN, THINK_CLOSE = 2, 3


def strip_think(y):
    out, depth = [], 0
    for t in y:
        if t == THINK_OPEN:
            depth += 1
        elif t == THINK_CLOSE and depth:
            depth -= 1
        elif depth == 0:
            out.append(t)
    return out


def correct(y, answer):
    s, n = strip_think(y), len(answer)
    return int(any(s[i:i + n] == list(answer) for i in range(len(s) - n + 1)))


def cite(y, supporting):
    return sum((N_FIXED + d) in y for d in supporting) / len(supporting)


def score_request(params, req: dict, clr: dict, rules: dict):
    """Bundles (and eps when asked) for one request dict, built from scratch."""
    clr = {**clr, **req.get("config", {}).get("clr", {})}
    rules = {**rules, **req.get("config", {}).get("rules", {})}
    gate, uni, attn, sc = params_tuple(params)
    query = req["context"]["query"]
    docs = req["context"]["docs"]
    sup = [d["id"] for d in docs if d["supporting"]]
    raw, extra = [], []
    for i, y in enumerate(req["rollouts"]):
        if req.get("profiles"):
            p = req["profiles"][i]
            full, loo = p["full"], {int(k): v for k, v in p["loo"].items()}
        else:
            full = log_probs(gate, uni, attn, sc, query, [d["tokens"] for d in docs], y)
            loo = {d: log_probs(gate, uni, attn, sc, query,
                                [x["tokens"] for x in docs if x["id"] != d], y) for d in sup}
        E, eps, crit = evidential(full, loo, clr["loo_mode"])
        T = len(y)
        norm = {"sqrt": math.sqrt(T), "linear": float(T), "none": 1.0}[clr["length_norm"]]
        raw.append(E / norm if E > clr["tau"] else 0.0)
        extra.append((eps, crit))
    lo, hi = min(raw), max(raw)
    bundles = []
    for y, r in zip(req["rollouts"], raw):
        rn = (r - lo) / (hi - lo + clr["norm_epsilon"])
        acc = correct(y, req["answer"])
        c = cite(y, sup)
        hyb = rn * acc if clr["fusion"] == "mul" else rn + acc
        total = rules["alpha"] * c + rules["beta"] * acc - rules["eta"] * len(y)
        bundles.append({"r_clr_raw": r, "r_clr_norm": rn, "r_acc": acc, "r_cite": c,
                        "r_hybrid": hyb, "r_total": total})
    return bundles, extra
