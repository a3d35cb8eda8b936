"""Descriptive statistics of a curated (and optionally scored) dataset."""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Iterable, Sequence

from .document import KnowledgeBase
from .evaluation.metrics import round_half_up


@dataclass(frozen=True)
class StatRow:
    item: str
    range: str
    avg: float | None
    std: float | None
    n: int

    def to_dict(self) -> dict:
        return {"item": self.item, "range": self.range, "avg": self.avg, "std": self.std, "n": self.n}


def _row(item: str, rng: str, values: Sequence[float]) -> StatRow:
    if not values:
        return StatRow(item, rng, None, None, 0)
    return StatRow(item, rng, round_half_up(statistics.fmean(values)), round_half_up(statistics.pstdev(values)),
                   len(values))


def compute_stats(kbs: Iterable[KnowledgeBase]) -> dict[str, list[StatRow]]:
    """Count statistics (per query, per web page) and element-score statistics.

    Standard deviations are population deviations.  Score rows are empty
    when no element carries a score.
    """
    kbs = list(kbs)
    pages = [d for kb in kbs for d in kb.documents]
    counts = [
        _row("Web Page", "per query", [len(kb.documents) for kb in kbs]),
        _row("Image", "per query", [sum(1 for d in kb.documents for e in d.elements if e.is_image) for kb in kbs]),
        _row("Aux. Image", "per query", [len(kb.aux_images) for kb in kbs]),
        _row("Text Element", "per web page", [sum(1 for e in d.elements if not e.is_image) for d in pages]),
        _row("Image", "per web page", [sum(1 for e in d.elements if e.is_image) for d in pages]),
    ] if kbs else []

    text, image, aux = [], [], []
    for kb in kbs:
        for el in kb.elements():
            if el.relevance_score is None:
                continue
            (aux if el.is_aux else image if el.is_image else text).append(el.relevance_score)
    scores = [
        _row("Text", "element score", text),
        _row("Image", "element score", image),
        _row("Aux. Image", "element score", aux),
    ] if text or image or aux else []
    return {"counts": counts, "scores": scores}


def _fmt(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.1f}"


def render_stats_table(stats: dict[str, list[StatRow]]) -> str:
    lines = []
    if stats["counts"]:
        lines.append(f"{'Item':<14} {'Range':<14} {'Avg. Num':>9} {'Std.':>7}")
        for r in stats["counts"]:
            lines.append(f"{r.item:<14} {r.range:<14} {_fmt(r.avg):>9} {_fmt(r.std):>7}")
    if stats["scores"]:
        if lines:
            lines.append("")
        lines.append(f"{'Item':<14} {'Avg. Score':>10} {'Std.':>7}")
        for r in stats["scores"]:
            lines.append(f"{r.item:<14} {_fmt(r.avg):>10} {_fmt(r.std):>7}")
    return "\n".join(lines) + "\n" if lines else "(empty dataset)\n"
