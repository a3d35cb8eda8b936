"""Text-modal and multi-modal response metrics, all reported on a 0..100 scale."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from .. import prompts
from ..backends import CompletionRequest, ModelBackend
from ..document import (
    PLACEHOLDER_TOKEN,
    Element,
    ElementRef,
    MultiModalResponse,
    ParseError,
    Query,
    SegmentKind,
    image_markdown,
    pseudo_url,
)
from ..judge import DEFAULT_JUDGE_RETRIES, JudgeProtocolError, Transcript, ask, parse_binary_verdict, parse_two_line_verdict

METRIC_FIELDS = (
    "fluency",
    "relevance",
    "context_precision",
    "faithfulness",
    "coherence",
    "helpfulness",
    "reference",
    "image_recall",
)


class EvaluationError(RuntimeError):
    pass


class IncompleteReport(ValueError):
    pass


def round_half_up(value: float, places: int = 1) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


def proportion(numerator: int, denominator: int) -> float:
    if denominator <= 0:
        raise ValueError("empty proportion")
    exact = Decimal(100 * numerator) / Decimal(denominator)
    return float(exact.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class MetricValue:
    value: float
    flags: tuple[str, ...] = ()


@dataclass
class MetricReport:
    query_id: str = ""
    strategy: str = ""
    fluency: float | None = None
    relevance: float | None = None
    context_precision: float | None = None
    faithfulness: float | None = None
    coherence: float | None = None
    helpfulness: float | None = None
    reference: float | None = None
    image_recall: float | None = None
    overall: float | None = None
    per_image_scores: dict[ElementRef, dict[str, int]] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    judge_transcripts: list[dict[str, str]] = field(default_factory=list)

    def metrics(self) -> dict[str, float | None]:
        return {f: getattr(self, f) for f in METRIC_FIELDS}

    def to_dict(self, *, transcripts: bool = True) -> dict[str, Any]:
        d: dict[str, Any] = {"query_id": self.query_id, "strategy": self.strategy, **self.metrics(),
                             "overall": self.overall, "flags": list(self.flags)}
        d["per_image_scores"] = [
            {"element_ref": list(ref), **scores} for ref, scores in sorted(self.per_image_scores.items())
        ]
        if transcripts:
            d["judge_transcripts"] = list(self.judge_transcripts)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> MetricReport:
        per_image = {
            tuple(item["element_ref"]): {k: v for k, v in item.items() if k != "element_ref"}
            for item in d.get("per_image_scores", [])
        }
        known = {f.name for f in fields(cls)} - {"per_image_scores"}
        kwargs = {k: v for k, v in d.items() if k in known}
        return cls(per_image_scores=per_image, **kwargs)  # type: ignore[arg-type]


def overall_score(report: MetricReport | Mapping[str, float | None] | Sequence[float]) -> float:
    """Mean of the eight metrics, rounded half-up to one decimal."""
    if isinstance(report, MetricReport):
        values: Sequence[float | None] = list(report.metrics().values())
    elif isinstance(report, Mapping):
        values = [report.get(f) for f in METRIC_FIELDS]
    else:
        values = list(report)
    if len(values) != len(METRIC_FIELDS) or any(v is None for v in values):
        raise IncompleteReport("overall score needs all eight metrics")
    total = sum(Decimal(repr(float(v))) for v in values)  # type: ignore[arg-type]
    return float((total / len(values)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


# -- text-modal ----------------------------------------------------------------------


def _score(judge: ModelBackend, text: str, retries: int, transcript: Transcript | None,
           attachments: tuple[str, ...] = ()) -> int:
    req = CompletionRequest(text, image_attachments=attachments)

    def parse(reply: str) -> int:
        value = parse_two_line_verdict(reply)[1]
        if not 0 <= value <= 10:
            raise ParseError(f"score {value} outside 0..10")
        return value

    return ask(judge, req, parse, retries=retries, transcript=transcript)


def eval_fluency(response: MultiModalResponse, judge: ModelBackend, *, retries: int = DEFAULT_JUDGE_RETRIES,
                 transcript: Transcript | None = None) -> int:
    return _score(judge, prompts.render("eval_fluency", text=response.to_markdown()), retries, transcript)


def eval_relevance(query: Query, response: MultiModalResponse, judge: ModelBackend, *,
                   retries: int = DEFAULT_JUDGE_RETRIES, transcript: Transcript | None = None) -> int:
    text = prompts.render("eval_relevance", query=query.text, text=response.to_markdown())
    return _score(judge, text, retries, transcript)


def eval_context_precision(query: Query, k_indoc: Sequence[Element], judge: ModelBackend, *,
                           retries: int = DEFAULT_JUDGE_RETRIES, transcript: Transcript | None = None) -> MetricValue:
    """Share of retrieved text chunks the judge marks as relevant to the query."""
    chunks = [el for el in k_indoc if not el.is_image]
    if not chunks:
        return MetricValue(100.0, ("context_precision:no_chunks",))
    relevant = judged = 0
    flags = []
    for el in chunks:
        req = CompletionRequest(prompts.render("eval_context_precision", query=query.text, chunk=el.text))
        try:
            verdict = ask(judge, req, lambda r: parse_binary_verdict(r)[1], retries=retries, transcript=transcript)
        except JudgeProtocolError:
            flags.append(f"context_precision:excluded:{el.doc_index}:{el.position}")
            continue
        judged += 1
        relevant += int(verdict)
    if judged == 0:
        raise EvaluationError("context precision: every chunk failed the judge protocol")
    return MetricValue(proportion(relevant, judged), tuple(flags))


def parse_claims(reply: str) -> list[str]:
    import re

    text = reply.strip()
    if text.strip("*`. ").upper() == "NONE":
        return []
    items = [m.group(1).strip() for m in re.finditer(r"^\s*\d+[.)]\s+(.+?)\s*$", text, re.MULTILINE)]
    if not items:
        raise ParseError("claims reply is neither a numbered list nor NONE")
    return items


def eval_faithfulness(response: MultiModalResponse, k_indoc: Sequence[Element], judge: ModelBackend, *,
                      query: Query | None = None, retries: int = DEFAULT_JUDGE_RETRIES,
                      transcript: Transcript | None = None) -> MetricValue:
    """Share of the response's factual claims supported by the retrieved text."""
    answer = response.text
    if not answer.strip():
        raise EvaluationError("faithfulness needs a response with text")
    req = CompletionRequest(prompts.render("eval_claims", query=query.text if query else "", answer=answer))
    claims = ask(judge, req, parse_claims, retries=retries, transcript=transcript)
    if not claims:
        return MetricValue(100.0, ("faithfulness:no_claims",))
    context = "\n\n".join(el.text for el in k_indoc if not el.is_image) or "(empty)"
    supported = judged = 0
    flags = []
    for i, claim in enumerate(claims):
        req = CompletionRequest(prompts.render("eval_claim_verdict", context=context, claim=claim))
        try:
            ok = ask(judge, req, lambda r: parse_binary_verdict(r)[1], retries=retries, transcript=transcript)
        except JudgeProtocolError:
            flags.append(f"faithfulness:excluded_claim:{i}")
            continue
        judged += 1
        supported += int(ok)
    if judged == 0:
        raise EvaluationError("faithfulness: every claim failed the judge protocol")
    return MetricValue(proportion(supported, judged), tuple(flags))


# -- multi-modal -------------------------------------------------------------------------


class ImageMetric(str, Enum):
    COHERENCE = "coherence"
    HELPFULNESS = "helpfulness"
    REFERENCE = "reference"


_IMAGE_TEMPLATES = {
    ImageMetric.COHERENCE: "eval_image_coherence",
    ImageMetric.HELPFULNESS: "eval_image_helpfulness",
    ImageMetric.REFERENCE: "eval_image_reference",
}


@dataclass(frozen=True)
class ImageMetricResult:
    value: float
    per_image: dict[ElementRef, int]
    flags: tuple[str, ...] = ()


def slot_contexts(response: MultiModalResponse) -> list[tuple[ElementRef, str, str]]:
    """For each image slot: (ref, markdown before it, markdown after it)."""
    rendered: list[str] = []
    slots: list[tuple[int, ElementRef]] = []
    k = 0
    for seg in response.segments:
        if seg.kind is SegmentKind.TEXT:
            rendered.append(seg.text)
        else:
            slots.append((len(rendered), seg.element_ref))  # type: ignore[arg-type]
            rendered.append(image_markdown(seg.text, pseudo_url(k)))
            k += 1
    return [(ref, "".join(rendered[:i]).strip(), "".join(rendered[i + 1 :]).strip()) for i, ref in slots]


def eval_image_metric(metric: ImageMetric | str, response: MultiModalResponse, judge: ModelBackend,
                      elements: Mapping[ElementRef, Element], *, retries: int = DEFAULT_JUDGE_RETRIES,
                      transcript: Transcript | None = None) -> ImageMetricResult:
    """Mean per-image judge score scaled to 0..100; responses without images score 0."""
    metric = ImageMetric(metric)
    contexts = slot_contexts(response)
    if not contexts:
        return ImageMetricResult(0.0, {}, (f"{metric.value}:no_images",))
    per_image: dict[ElementRef, int] = {}
    flags = []
    for ref, above, below in contexts:
        el = elements.get(ref)
        if el is None:
            flags.append(f"{metric.value}:unknown_image:{ref[0]}:{ref[1]}")
            continue
        if judge.supports_images:
            image, attachments = PLACEHOLDER_TOKEN, (el.image_ref,)
        else:
            image, attachments = f"{PLACEHOLDER_TOKEN}\nImage description: {el.text}", ()
        text = prompts.render(_IMAGE_TEMPLATES[metric], context_above=above or "(none)",
                              context_below=below or "(none)", image=image)
        try:
            per_image[ref] = _score(judge, text, retries, transcript, attachments)  # type: ignore[arg-type]
        except JudgeProtocolError:
            flags.append(f"{metric.value}:excluded:{ref[0]}:{ref[1]}")
    if not per_image:
        raise EvaluationError(f"{metric.value}: every image failed the judge protocol")
    mean = Decimal(sum(per_image.values())) / Decimal(len(per_image))
    value = float((mean * 10).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))
    return ImageMetricResult(value, per_image, tuple(flags))


def eval_image_recall(response: MultiModalResponse | Iterable[ElementRef], key_refs: Iterable[ElementRef]) -> MetricValue:
    keys = {tuple(r) for r in key_refs}
    if not keys:
        return MetricValue(100.0, ("image_recall:no_key_images",))
    refs = response.image_refs if isinstance(response, MultiModalResponse) else list(response)
    hit = keys & {tuple(r) for r in refs}
    return MetricValue(proportion(len(hit), len(keys)))


# -- full report -----------------------------------------------------------------------------


def evaluate_response(query: Query, k_indoc: Sequence[Element], response: MultiModalResponse,
                      key_refs: Iterable[ElementRef], text_judge: ModelBackend, image_judge: ModelBackend, *,
                      retries: int = DEFAULT_JUDGE_RETRIES) -> MetricReport:
    transcript = Transcript()
    report = MetricReport(query.id, response.strategy.value)
    report.fluency = float(eval_fluency(response, text_judge, retries=retries, transcript=transcript) * 10)
    report.relevance = float(eval_relevance(query, response, text_judge, retries=retries, transcript=transcript) * 10)
    cp = eval_context_precision(query, k_indoc, text_judge, retries=retries, transcript=transcript)
    report.context_precision = cp.value
    report.flags.extend(cp.flags)
    if response.text.strip():
        fa = eval_faithfulness(response, k_indoc, text_judge, query=query, retries=retries, transcript=transcript)
    else:
        fa = MetricValue(0.0, ("faithfulness:empty_response",))
    report.faithfulness = fa.value
    report.flags.extend(fa.flags)
    lookup = {el.ref: el for el in k_indoc}
    for metric in ImageMetric:
        res = eval_image_metric(metric, response, image_judge, lookup, retries=retries, transcript=transcript)
        setattr(report, metric.value, res.value)
        report.flags.extend(res.flags)
        for ref, score in res.per_image.items():
            report.per_image_scores.setdefault(ref, {})[metric.value] = score
    rec = eval_image_recall(response, key_refs)
    report.image_recall = rec.value
    report.flags.extend(rec.flags)
    report.overall = overall_score(report)
    report.judge_transcripts = transcript.entries
    return report
