"""Rank correlation between judges and human annotators."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence


class DegenerateCorrelation(ValueError):
    pass


def average_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks; tied values share the mean of the ranks they span."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman's rho: Pearson correlation of average ranks."""
    if len(xs) != len(ys):
        raise DegenerateCorrelation(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise DegenerateCorrelation("need at least two observations")
    rx, ry = average_ranks(xs), average_ranks(ys)
    mx, my = statistics.fmean(rx), statistics.fmean(ry)
    dx = [r - mx for r in rx]
    dy = [r - my for r in ry]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise DegenerateCorrelation("constant input has no rank correlation")
    rho = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, rho))


@dataclass(frozen=True)
class AnnotationFile:
    sample_ids: tuple[str, ...]
    columns: Mapping[str, tuple[int, ...]]
    human_columns: tuple[str, ...]
    model_columns: tuple[str, ...]

    def __post_init__(self) -> None:
        n = len(self.sample_ids)
        for name, col in self.columns.items():
            if len(col) != n:
                raise ValueError(f"column {name!r} has {len(col)} rows, expected {n}")
            for v in col:
                if not 0 <= v <= 10:
                    raise ValueError(f"column {name!r}: score {v} outside 0..10")


def read_annotations(path: str | Path, *, human_prefix: str = "human", model_prefix: str = "model") -> AnnotationFile:
    """Delimited table with a header row: ``sample_id``, then score columns.

    Columns whose name starts with ``human_prefix`` are annotators; columns
    starting with ``model_prefix`` are model runs.  Tab-separated when the
    file ends in ``.tsv``, comma-separated otherwise.
    """
    path = Path(path)
    delim = "\t" if path.suffix == ".tsv" else ","
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delim))
    if not rows:
        raise ValueError(f"{path}: empty annotation file")
    header, body = rows[0], [r for r in rows[1:] if any(c.strip() for c in r)]
    cols: dict[str, list[int]] = {h: [] for h in header[1:]}
    ids = []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        ids.append(row[0])
        for h, cell in zip(header[1:], row[1:]):
            try:
                cols[h].append(int(cell))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-integer score {cell!r} in {h!r}") from None
    humans = tuple(h for h in header[1:] if h.startswith(human_prefix))
    models = tuple(h for h in header[1:] if h.startswith(model_prefix))
    return AnnotationFile(tuple(ids), {k: tuple(v) for k, v in cols.items()}, humans, models)


def _summary(values: Sequence[float]) -> dict[str, float]:
    return {"max": max(values), "min": min(values), "avg": statistics.fmean(values)}


def meta_eval(annotations: AnnotationFile, model_column: str) -> dict[str, dict[str, float]]:
    """Max/min/avg correlation of the model with each human, and of humans with each other."""
    humans = annotations.human_columns
    if len(humans) < 2:
        raise DegenerateCorrelation("meta-evaluation needs at least two human columns")
    cols = annotations.columns
    model = [spearman(cols[model_column], cols[h]) for h in humans]
    pairwise = [spearman(cols[a], cols[b]) for i, a in enumerate(humans) for b in humans[i + 1 :]]
    return {"model": _summary(model), "human": _summary(pairwise)}


def meta_eval_repeated(annotations: AnnotationFile, model_columns: Sequence[str]) -> dict[str, dict[str, float]]:
    """Mean and population std of the model summary across repeated runs."""
    runs = [meta_eval(annotations, c) for c in model_columns]
    if not runs:
        raise DegenerateCorrelation("no model runs given")
    out: dict[str, dict[str, float]] = {"model": {}, "model_std": {}, "human": runs[0]["human"]}
    for key in ("max", "min", "avg"):
        vals = [r["model"][key] for r in runs]
        out["model"][key] = statistics.fmean(vals)
        out["model_std"][key] = statistics.pstdev(vals)
    return out
