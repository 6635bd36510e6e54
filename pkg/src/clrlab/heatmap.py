"""Token-level contribution heatmaps for terminals and browsers.

Intensity is ``|eps_t| / scale`` where ``scale`` defaults to the rollout's
own ``max |eps|`` (pass ``scale`` for a shared absolute scale across
rollouts), clamped to [0, 1] and quantized to 256 levels.  Positive
contributions are shaded red, negative ones blue; zero stays uncolored.
"""

from __future__ import annotations

import html
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ConfigurationError

LEVELS = 256
FORMATS = ("ansi", "plain", "html")
POSITIVE_RGB = (200, 30, 30)
NEGATIVE_RGB = (30, 80, 200)


@dataclass(frozen=True)
class HeatmapDoc:
    tokens: tuple[str, ...]
    eps: np.ndarray
    intensity: np.ndarray
    level: np.ndarray

    @property
    def hue(self) -> list[str]:
        return ["pos" if e > 0 else "neg" if e < 0 else "zero" for e in self.eps]


def build_heatmap(tokens: Sequence[str], eps, scale: float | None = None) -> HeatmapDoc:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim != 1 or len(tokens) != eps.size:
        raise ConfigurationError(
            f"{len(tokens)} tokens but {eps.size} contribution values")
    if not np.all(np.isfinite(eps)):
        raise ConfigurationError("contributions must be finite")
    mag = np.abs(eps)
    top = float(mag.max()) if scale is None and eps.size else scale
    if top is not None and not top >= 0:
        raise ConfigurationError("scale must be >= 0")
    if not top:
        intensity = np.zeros_like(mag)
    else:
        intensity = np.minimum(mag / top, 1.0)
    level = np.rint(intensity * (LEVELS - 1)).astype(np.int64)
    return HeatmapDoc(tuple(str(t) for t in tokens), eps, intensity, level)


def _blend(rgb: tuple[int, int, int], level: int) -> tuple[int, int, int]:
    # white at level 0, full hue at LEVELS - 1
    f = level / (LEVELS - 1)
    return tuple(int(round(255 + (c - 255) * f)) for c in rgb)


def _color(eps: float, level: int) -> tuple[int, int, int]:
    return _blend(POSITIVE_RGB if eps > 0 else NEGATIVE_RGB, level)


def _ansi(doc: HeatmapDoc) -> str:
    parts = []
    for tok, e, lv in zip(doc.tokens, doc.eps, doc.level):
        if lv == 0:
            parts.append(tok)
            continue
        r, g, b = _color(e, int(lv))
        fg = "30" if lv < 160 else "97"
        parts.append(f"\x1b[48;2;{r};{g};{b}m\x1b[{fg}m{tok}\x1b[0m")
    return " ".join(parts) + "\n"


def _plain(doc: HeatmapDoc) -> str:
    return " ".join(f"{tok}[{'+' if e > 0 else '-' if e < 0 else ' '}{lv:03d}]"
                    for tok, e, lv in zip(doc.tokens, doc.eps, doc.level)) + "\n"


def _html(doc: HeatmapDoc, title: str) -> str:
    spans = []
    for tok, e, lv in zip(doc.tokens, doc.eps, doc.level):
        r, g, b = _color(e, int(lv)) if lv else (255, 255, 255)
        spans.append(
            f'<span class="tok {"pos" if e > 0 else "neg" if e < 0 else "zero"}" '
            f'data-eps="{float(e)!r}" data-level="{lv}" title="{e:.6g}" '
            f'style="background-color: rgb({r},{g},{b})">{html.escape(tok)}</span>')
    return ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
            f"<title>{html.escape(title)}</title>\n<style>"
            "body{font-family:monospace;line-height:2}"
            ".tok{padding:2px 4px;margin:1px;border-radius:3px}"
            "</style></head>\n<body>\n<div class=\"heatmap\">\n"
            + "\n".join(spans) + "\n</div>\n</body></html>\n")


def render_heatmap(tokens: Sequence[str], eps, format: str = "ansi",
                   scale: float | None = None, title: str = "contribution heatmap") -> str:
    """Render ``tokens`` shaded by ``eps`` as ``ansi``, ``plain`` or ``html`` text."""
    if format not in FORMATS:
        raise ConfigurationError(f"format must be one of {FORMATS}")
    doc = build_heatmap(tokens, eps, scale)
    if format == "ansi":
        return _ansi(doc)
    if format == "plain":
        return _plain(doc)
    return _html(doc, title)
