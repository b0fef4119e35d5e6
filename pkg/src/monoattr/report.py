"""Highlight CSVs and token heatmaps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .cohort import CLS_TEXT
from .metrics import ConfigError


@dataclass
class HighlightRecord:
    sample_id: object
    cls: int
    words: list[str]                   # token texts, "[CLS]" first
    scores: dict[str, np.ndarray]      # method -> token attributions (>= len(words))


def top_fraction(scores, fraction: float) -> np.ndarray:
    """Indices of the ceil(fraction * n) largest |scores|, ties to the lower index, in text order."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    v = np.abs(np.asarray(scores, dtype=np.float64))
    keep = math.ceil(fraction * len(v) - 1e-12)
    order = np.lexsort((np.arange(len(v)), -v))
    return np.sort(order[:keep])


def highlight_text(words: list[str], scores, fraction: float) -> str:
    idx = top_fraction(np.asarray(scores)[: len(words)], fraction)
    return " ".join(words[i] for i in idx)


def export_highlight_csv(records: list[HighlightRecord], out_dir, fraction: float = 0.5,
                         prefix: str = "highlights") -> list[Path]:
    """One CSV per class: full text, then the highlighted tokens of each method (attr1..attrN)."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    if not records:
        return []
    methods = list(records[0].scores)
    if len(methods) < 2:
        raise ConfigError("need attributions from at least two methods")
    out_dir = Path(out_dir)
    paths = []
    for cls in sorted({r.cls for r in records}):
        path = out_dir / f"{prefix}_class{cls}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["text"] + [f"attr{i + 1}" for i in range(len(methods))])
            for r in records:
                if r.cls != cls:
                    continue
                if r.words[0] != CLS_TEXT:
                    raise ConfigError(f"sample {r.sample_id}: text must start with {CLS_TEXT}")
                w.writerow([" ".join(r.words)] + [highlight_text(r.words, r.scores[m], fraction) for m in methods])
        paths.append(path)
    return paths


def token_color(value: float) -> str:
    """Diverging white-centred scale: +1 green, -1 red, 0 white."""
    s = int(round(255 * min(abs(value), 1.0)))
    if value > 0:
        r, g, b = 255 - s, 255, 255 - s
    elif value < 0:
        r, g, b = 255, 255 - s, 255 - s
    else:
        r = g = b = 255
    return f"#{r:02x}{g:02x}{b:02x}"


def render_heatmap(words: list[str], scores, title: str = "", width: int = 900) -> str:
    """SVG with one cell per token, shaded by attribution / max|attribution|."""
    v = np.asarray(scores, dtype=np.float64)[: len(words)]
    peak = float(np.max(np.abs(v))) if len(v) else 0.0
    norm = v / peak if peak > 0 else np.zeros_like(v)
    cells, x, y, h = [], 4, 28 if title else 4, 22
    for word, val in zip(words, norm):
        w = 8 * len(word) + 10
        if x + w > width - 4 and x > 4:
            x, y = 4, y + h + 4
        cells.append(f'<rect x="{x}" y="{y}" width="{w}" height="{h}" fill="{token_color(val)}" stroke="#cccccc"/>'
                     f'<text x="{x + 5}" y="{y + 15}" font-family="monospace" font-size="12">{escape(word)}</text>')
        x += w + 2
    height = y + h + 4
    head = f'<text x="4" y="18" font-family="sans-serif" font-size="14">{escape(title)}</text>' if title else ""
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">{head}{"".join(cells)}</svg>\n')
