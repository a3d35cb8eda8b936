"""Query filtering and topic classification through a judge backend."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .. import prompts
from ..backends import CompletionRequest, ModelBackend
from ..document import ParseError
from ..judge import DEFAULT_JUDGE_RETRIES, JudgeProtocolError, Transcript, ask, parse_two_line_verdict


class QueryDecision(str, Enum):
    KEEP = "keep"
    DROP_NOT_QUESTION = "drop_not_question"
    DROP_NO_IMAGE_NEED = "drop_no_image_need"


@dataclass(frozen=True)
class QueryVerdict:
    decision: QueryDecision
    analyses: tuple[str, ...]


class ClassificationProtocolError(JudgeProtocolError):
    pass


def _binary(text: str) -> tuple[str, int]:
    analysis, value = parse_two_line_verdict(text)
    if value not in (0, 1):
        raise ParseError(f"expected 0 or 1, got {value}")
    return analysis, value


def filter_query(query_text: str, judge: ModelBackend, *, retries: int = DEFAULT_JUDGE_RETRIES,
                 transcript: Transcript | None = None) -> QueryVerdict:
    req = CompletionRequest(prompts.render("query_is_question", text=query_text))
    a1, v1 = ask(judge, req, _binary, retries=retries, transcript=transcript)
    if v1 == 0:
        return QueryVerdict(QueryDecision.DROP_NOT_QUESTION, (a1,))
    req = CompletionRequest(prompts.render("query_needs_image", question=query_text))
    a2, v2 = ask(judge, req, _binary, retries=retries, transcript=transcript)
    decision = QueryDecision.KEEP if v2 == 1 else QueryDecision.DROP_NO_IMAGE_NEED
    return QueryVerdict(decision, (a1, a2))


def parse_topics(text: str) -> list[int]:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty classification output")
    tokens = lines[-1].replace(",", " ").replace("*", " ").split()
    try:
        ids = [int(t) for t in tokens]
    except ValueError:
        raise ParseError(f"non-integer topic in {lines[-1]!r}") from None
    if not ids:
        raise ParseError("no topics given")
    if any(not 1 <= t <= 11 for t in ids):
        raise ParseError(f"topic outside 1..11 in {ids}")
    if 11 in ids and len(set(ids)) > 1:
        raise ParseError("topic 11 combined with other topics")
    return sorted(set(ids))


def classify_query(query_text: str, judge: ModelBackend, *, retries: int = DEFAULT_JUDGE_RETRIES,
                   transcript: Transcript | None = None) -> list[int]:
    req = CompletionRequest(prompts.render("query_classify", question=query_text))
    try:
        return ask(judge, req, parse_topics, retries=retries, transcript=transcript)
    except JudgeProtocolError as exc:
        raise ClassificationProtocolError(str(exc), exc.transcript) from None
