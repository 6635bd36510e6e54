"""Static training-curve figures written next to the train log."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .grpo import TrainLog  # noqa: E402


def _series(log: TrainLog, name: str):
    pts = [(r["step"], r[name]) for r in log.records if r.get(name) is not None]
    return [p[0] for p in pts], [p[1] for p in pts]


def _figure(path: Path, title: str, ylabel: str, curves, logy: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.6), dpi=100)
    for label, (xs, ys) in curves:
        ax.plot(xs, ys, label=label, linewidth=1.2)
    ax.set_title(title)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    if len(curves) > 1:
        ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training(log: TrainLog, out_dir) -> list[Path]:
    """Write reward, length, reliance and perplexity curves as PNG files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [
        _figure(out / "reward.png", "Mean reward", "reward",
                [("mean reward", _series(log, "mean_reward"))]),
        _figure(out / "length.png", "Mean response length", "tokens",
                [("mean length", _series(log, "mean_len"))]),
        _figure(out / "reliance.png", "Accuracy and reference reliance", "fraction",
                [("acc with docs", _series(log, "acc_with_docs")),
                 ("acc without docs", _series(log, "acc_without_docs")),
                 ("RR", _series(log, "rr"))]),
        _figure(out / "perplexity.png", "Per-token perplexity", "ppl",
                [("full context", _series(log, "ppl_full_tok")),
                 ("critical doc removed", _series(log, "ppl_loo_tok"))], logy=True),
    ]
