"""Command-line entry points: ``clrlab {gen-task,score,train,eval,heatmap,serve}``.

Exit codes: 0 success, 1 some input records failed (``score``), 2 invalid
configuration or unreadable input, 3 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .clr import ClrConfig, evidential_contribution, likelihood_profile
from .data import ConfigurationError, InvalidTokenError, Vocabulary
from .grpo import DivergenceError, GrpoConfig, train
from .heatmap import FORMATS, render_heatmap
from .policy import load_checkpoint, sample_rollout, save_checkpoint
from .rng import derive_seed
from .rules import RuleConfig
from .service import ENGINE_VERSION, ScoringEngine, dumps, error_payload, make_server
from .tasks import TaskSpec, gen_tasks, perplexities, read_tasks, reliance_report, tasks_to_jsonl

CONFIG_SCHEMA_VERSION = 1
EXIT_RECORD_ERRORS, EXIT_USAGE, EXIT_DIVERGED = 1, 2, 3

log = logging.getLogger("clrlab")


class UsageError(Exception):
    pass


def _write(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _read(path: str) -> str:
    try:
        return sys.stdin.read() if path == "-" else Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _load_params(path: str):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad checkpoint {path}: {exc}") from None


def _load_tasks(path: str):
    try:
        return read_tasks(path)
    except OSError as exc:
        raise UsageError(f"cannot read task file {path}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"bad task file {path}: {exc}") from None


# --------------------------------------------------------------------------
# shared flag groups


def _add_reward_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("reward configuration")
    g.add_argument("--tau", type=float, default=ClrConfig.tau, help="significance threshold")
    g.add_argument("--loo-mode", choices=("min", "avg"), default=ClrConfig.loo_mode)
    g.add_argument("--norm-epsilon", type=float, default=ClrConfig.norm_epsilon)
    g.add_argument("--fusion", choices=("mul", "add"), default=ClrConfig.fusion)
    g.add_argument("--length-norm", choices=("sqrt", "none", "linear"),
                   default=ClrConfig.length_norm)
    g.add_argument("--alpha", type=float, default=RuleConfig.alpha, help="citation weight")
    g.add_argument("--beta", type=float, default=RuleConfig.beta, help="correctness weight")
    g.add_argument("--eta", type=float, default=RuleConfig.eta, help="length cost weight")


def _reward_configs(args) -> tuple[ClrConfig, RuleConfig]:
    return (ClrConfig(args.tau, args.loo_mode, args.norm_epsilon, args.fusion, args.length_norm),
            RuleConfig(args.alpha, args.beta, args.eta))


def _add_max_docs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-docs", type=int, default=5,
                   help="number of citation markers in the checkpoint's vocabulary")


# --------------------------------------------------------------------------
# commands


def cmd_gen_task(args) -> int:
    spec = TaskSpec(n_docs=args.n_docs, n_supporting=args.n_supporting, hops=args.hops,
                    doc_len=args.doc_len, vocab=Vocabulary(args.vocab_size, args.max_docs),
                    n_tasks=args.n_tasks, seed=args.seed, key_len=args.key_len,
                    answer_len=args.answer_len)
    _write(args.out, tasks_to_jsonl(gen_tasks(spec)))
    return 0


def cmd_score(args) -> int:
    params = _load_params(args.checkpoint)
    clr, rules = _reward_configs(args)
    engine = ScoringEngine(params, Vocabulary(params.V, args.max_docs), clr, rules)
    out, failures = [], 0
    for lineno, line in enumerate(_read(args.batch).splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(engine.score_text(line))
        except Exception as exc:
            failures += 1
            out.append(dumps({"line": lineno, **error_payload(exc)}))
            print(f"line {lineno}: {type(exc).__name__}: {exc}", file=sys.stderr)
    _write(args.out, "".join(s + "\n" for s in out))
    return EXIT_RECORD_ERRORS if failures else 0


def load_train_config(obj: dict) -> tuple[GrpoConfig, dict, int]:
    """Validate a training config document; returns (grpo config, task section, seed).

    Schema (version 1)::

        {"schema_version": 1, "seed": 0,
         "tasks": {"n_docs": 5, "n_supporting": 1, "hops": 1, "doc_len": 8, "n_tasks": 200,
                   "seed": 0, "key_len": 1, "answer_len": 2, "vocab_size": 64, "max_docs": 5}
                  | {"file": "tasks.jsonl", "vocab_size": 64, "max_docs": 5},
         "grpo": {GrpoConfig fields, nested "clr" and "rules" objects}}
    """
    if not isinstance(obj, dict):
        raise ConfigurationError("config must be a JSON object")
    if obj.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ConfigurationError(
            f"config schema_version must be {CONFIG_SCHEMA_VERSION}, got {obj.get('schema_version')!r}")
    unknown = set(obj) - {"schema_version", "seed", "tasks", "grpo"}
    if unknown:
        raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
    grpo = obj.get("grpo", {})
    known = {f.name for f in fields(GrpoConfig)}
    if set(grpo) - known:
        raise ConfigurationError(f"unknown grpo keys {sorted(set(grpo) - known)}")
    try:
        config = GrpoConfig.from_dict(grpo)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    seed = obj.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigurationError("seed must be an integer")
    return config, dict(obj.get("tasks", {})), seed


def _train_tasks(section: dict, base: Path):
    section = dict(section)
    vocab = Vocabulary(section.pop("vocab_size", 64), section.pop("max_docs", 5))
    if "file" in section:
        path = Path(section.pop("file"))
        if section:
            raise ConfigurationError(f"unexpected task keys next to file: {sorted(section)}")
        return _load_tasks(str(path if path.is_absolute() else base / path)), vocab
    try:
        spec = TaskSpec(vocab=vocab, **section)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    return gen_tasks(spec), vocab


def cmd_train(args) -> int:
    text = _read(args.config)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    config, task_section, seed = load_train_config(doc)
    base = Path(args.config).parent if args.config != "-" else Path.cwd()
    tasks, vocab = _train_tasks(task_section, base)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        if not args.quiet and rec["step"] % args.log_every == 0:
            extra = "" if rec.get("rr") is None else f" rr={rec['rr']:.3f}"
            print(f"step {rec['step']:5d} reward={rec['mean_reward']:.4f} "
                  f"len={rec['mean_len']:.2f}{extra}", file=sys.stderr)

    resolved = {"schema_version": CONFIG_SCHEMA_VERSION, "seed": seed,
                "tasks": doc.get("tasks", {}), "grpo": config.to_dict()}
    (out / "config.json").write_text(json.dumps(resolved, indent=1) + "\n")
    try:
        params, trainlog = train(config, tasks, seed, vocab, progress=progress)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(params, out / "checkpoint.json")
    (out / "trainlog.jsonl").write_text(trainlog.to_jsonl())
    if not args.no_plots and len(trainlog):
        from .plotting import plot_training
        plot_training(trainlog, out)
    return 0


def _geo_ppl(logs: list[float]) -> float:
    m = -float(np.mean(logs))
    return math.exp(m) if m < 709 else math.inf


def cmd_eval(args) -> int:
    params = _load_params(args.checkpoint)
    tasks = _load_tasks(args.tasks)
    if not tasks:
        raise UsageError("task file is empty")
    report = {"n_tasks": len(tasks), "k_samples": args.k_samples, "seed": args.seed}
    report.update(reliance_report(params, tasks, args.k_samples, args.seed, args.max_len))
    forms = {"ppl_full_seq": [], "ppl_full_tok": [], "ppl_loo_seq": [], "ppl_loo_tok": []}
    for i, task in enumerate(tasks):
        if not task.context.supporting_ids:
            continue
        y = sample_rollout(params, task.context, args.max_len, derive_seed(args.seed, "ppl", i))
        for k, v in perplexities(params, task.context, y, args.loo_mode).items():
            forms[k].append(-math.log(v) if v > 0 else math.inf)
    # geometric means over one seeded rollout per task
    report.update({k: _geo_ppl(v) if v else None for k, v in forms.items()})
    _write(args.out, json.dumps(report, indent=1) + "\n")
    return 0


def cmd_heatmap(args) -> int:
    params = _load_params(args.checkpoint)
    tasks = _load_tasks(args.tasks)
    if not 0 <= args.index < len(tasks):
        raise UsageError(f"index {args.index} out of range for {len(tasks)} tasks")
    task = tasks[args.index]
    vocab = Vocabulary(params.V, args.max_docs)
    if args.rollout is not None:
        y = [int(t) for t in args.rollout.split(",") if t.strip()]
    else:
        y = list(sample_rollout(params, task.context, args.max_len,
                                derive_seed(args.seed, "heatmap", args.index)).tokens)
    score = evidential_contribution(likelihood_profile(params, task.context, y), args.loo_mode)
    text = render_heatmap([vocab.describe(t) for t in y], score.eps, args.format, args.scale,
                          title=f"task {args.index}: E = {score.E:.4g}")
    if args.format != "html" and not args.quiet:
        crit = "none" if score.critical_doc is None else score.critical_doc
        print(f"E = {score.E!r}  critical doc = {crit}  T = {len(y)}", file=sys.stderr)
    _write(args.out, text)
    return 0


def cmd_serve(args) -> int:
    params = _load_params(args.checkpoint)
    clr, rules = _reward_configs(args)
    engine = ScoringEngine(params, Vocabulary(params.V, args.max_docs), clr, rules)
    server = make_server(engine, args.host, args.port)
    host, port = server.server_address[:2]
    print(f"serving {ENGINE_VERSION} on http://{host}:{port}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clrlab", description="Contrastive likelihood reward lab on synthetic RAG tasks.")
    parser.add_argument("--version", action="version", version=ENGINE_VERSION)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-task", help="generate a synthetic task file (JSON lines)")
    d = TaskSpec()
    p.add_argument("--n-docs", type=int, default=d.n_docs)
    p.add_argument("--n-supporting", type=int, default=d.n_supporting)
    p.add_argument("--hops", type=int, default=d.hops)
    p.add_argument("--doc-len", type=int, default=d.doc_len)
    p.add_argument("--vocab-size", type=int, default=d.vocab.size)
    p.add_argument("--max-docs", type=int, default=d.vocab.max_docs)
    p.add_argument("--n-tasks", type=int, default=d.n_tasks)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--key-len", type=int, default=d.key_len)
    p.add_argument("--answer-len", type=int, default=d.answer_len)
    p.add_argument("--out", default="-", help="output path ('-' for stdout)")
    p.set_defaults(func=cmd_gen_task)

    p = sub.add_parser("score", help="score a batch of requests (JSON lines) offline")
    p.add_argument("--batch", required=True, help="request file ('-' for stdin)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="-")
    _add_max_docs(p)
    _add_reward_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", help="run GRPO training from a config file")
    p.add_argument("--config", required=True, help="JSON config (schema_version 1)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy, reference reliance and perplexities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--k-samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--loo-mode", choices=("min", "avg"), default="min")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="render token-level contributions for one task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--index", type=int, default=0, help="task index in the file")
    p.add_argument("--rollout", help="comma-separated token ids (default: sample one)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--format", choices=FORMATS, default="ansi")
    p.add_argument("--scale", type=float, help="absolute intensity scale (default: per-rollout max)")
    p.add_argument("--loo-mode", choices=("min", "avg"), default="min")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", default="-")
    _add_max_docs(p)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("serve", help="HTTP scoring service (POST /score, GET /health)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    _add_max_docs(p)
    _add_reward_flags(p)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, InvalidTokenError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
