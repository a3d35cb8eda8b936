"""Selecting high-quality (query, K_InDoc, response) triplets for fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from ..dataset import Dataset
from ..document import Element, MultiModalResponse, Query, element_to_dict, query_to_dict, response_to_dict
from .metrics import MetricReport

TRAINING_METRICS = ("coherence", "helpfulness", "reference", "image_recall")


@dataclass(frozen=True)
class TrainingCandidate:
    query: Query
    k_indoc: Sequence[Element]
    response: MultiModalResponse
    report: MetricReport


def filter_training_samples(records: Iterable[TrainingCandidate],
                            thresholds: Mapping[str, float]) -> list[TrainingCandidate]:
    """Keep records whose multi-modal metrics all meet their minimum.

    Text-modal metrics are deliberately not consulted.  Missing thresholds
    default to 0.
    """
    unknown = set(thresholds) - set(TRAINING_METRICS)
    if unknown:
        raise ValueError(f"unknown training thresholds: {sorted(unknown)}")
    kept = []
    for rec in records:
        values = {m: getattr(rec.report, m) for m in TRAINING_METRICS}
        if any(v is None for v in values.values()):
            raise ValueError(f"report for {rec.query.id} is incomplete")
        if all(values[m] >= thresholds.get(m, 0) for m in TRAINING_METRICS):
            kept.append(rec)
    return kept


def training_row(rec: TrainingCandidate) -> dict:
    return {
        "query": query_to_dict(rec.query),
        "k_indoc": [element_to_dict(el) for el in rec.k_indoc],
        "response": response_to_dict(rec.response),
        "markdown": rec.response.to_markdown(),
    }


def export_training(dataset: Dataset, kept: Iterable[TrainingCandidate], name: str = "train") -> None:
    dataset.write_rows(name, (training_row(r) for r in kept))
