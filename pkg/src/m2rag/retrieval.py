"""In-document retrieval: judge-scored element relevance and top-k selection."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

from . import prompts
from .backends import CompletionRequest, ModelBackend
from .document import Element, ElementRef, KnowledgeBase, Query, order_key
from .judge import DEFAULT_JUDGE_RETRIES, Transcript, ask, parse_two_line_verdict


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 20
    max_aux_images: int = 5
    max_web_images: int = 5
    max_total_images: int = 10
    key_image_threshold: int = 7

    def __post_init__(self) -> None:
        if self.k <= 0:
            raise ValueError("k must be > 0")
        if min(self.max_aux_images, self.max_web_images, self.max_total_images) < 0:
            raise ValueError("image caps must be >= 0")
        if self.max_total_images < max(self.max_aux_images, self.max_web_images):
            raise ValueError("max_total_images must be >= each per-source cap")


class ElementScore(NamedTuple):
    score: int
    clamped: bool
    raw: str


@dataclass(frozen=True)
class ScoredKnowledgeBase:
    kb: KnowledgeBase
    scoring_backend_id: str = ""

    def __post_init__(self) -> None:
        for el in self.kb.elements():
            if el.relevance_score is None:
                raise ValueError(f"element {el.ref} is not scored")


def _image_section(element: Element, judge: ModelBackend) -> tuple[str, tuple[str, ...]]:
    if judge.supports_images:
        return "The image is attached to this message.", (element.image_ref,)  # type: ignore[return-value]
    if not element.text.strip():
        raise ValueError(f"image {element.ref} needs a description for a text-only judge")
    return f"Image description: {element.text}", ()


def score_element(query: Query, element: Element, judge: ModelBackend, *,
                  retries: int = DEFAULT_JUDGE_RETRIES, transcript: Transcript | None = None) -> ElementScore:
    """Relevance of one element to the query on the 0..10 scale (clamped)."""
    if element.is_image:
        section, attachments = _image_section(element, judge)
        text = prompts.render("element_image", question=query.text, image_section=section)
        req = CompletionRequest(text, image_attachments=attachments)
    else:
        req = CompletionRequest(prompts.render("element_text", query=query.text, piece=element.text))
    raw: list[str] = []

    def parse(reply: str) -> int:
        raw.append(reply)
        return parse_two_line_verdict(reply)[1]

    value = ask(judge, req, parse, retries=retries, transcript=transcript)
    clamped = max(0, min(10, value))
    return ElementScore(clamped, clamped != value, raw[-1])


def score_knowledge_base(query: Query, kb: KnowledgeBase, text_judge: ModelBackend, image_judge: ModelBackend, *,
                         retries: int = DEFAULT_JUDGE_RETRIES, workers: int = 1,
                         transcript: Transcript | None = None) -> tuple[ScoredKnowledgeBase, list[ElementRef]]:
    """Score every element; returns the scored KB and the refs whose score was clamped."""
    elements = list(kb.elements())

    def one(el: Element) -> ElementScore:
        judge = image_judge if el.is_image else text_judge
        return score_element(query, el, judge, retries=retries, transcript=transcript)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, elements))
    else:
        results = [one(el) for el in elements]
    scores = {el.ref: r.score for el, r in zip(elements, results)}
    clamped = [el.ref for el, r in zip(elements, results) if r.clamped]
    scored = kb.map_elements(lambda el: el.with_score(scores[el.ref]))
    return ScoredKnowledgeBase(scored, f"{text_judge.name}+{image_judge.name}"), clamped


def rank_key(el: Element) -> tuple[int, int, int, int]:
    assert el.relevance_score is not None
    return (-el.relevance_score,) + order_key(el)


def select_in_doc(skb: ScoredKnowledgeBase | KnowledgeBase, cfg: RetrievalConfig = RetrievalConfig()) -> list[Element]:
    """Top-k elements under the image caps, plus text context around selected images.

    Context elements (nearest text before and after each selected document
    image) do not count against ``k``.  Output is in document order with
    auxiliary images last.
    """
    kb = skb.kb if isinstance(skb, ScoredKnowledgeBase) else skb
    ranked = sorted(kb.elements(), key=rank_key)
    selected: dict[ElementRef, Element] = {}
    web = aux = 0
    for el in ranked:
        if len(selected) >= cfg.k:
            break
        if el.is_image:
            if web + aux >= cfg.max_total_images:
                continue
            if el.is_aux:
                if aux >= cfg.max_aux_images:
                    continue
                aux += 1
            else:
                if web >= cfg.max_web_images:
                    continue
                web += 1
        selected[el.ref] = el

    context: dict[ElementRef, Element] = {}
    by_doc = {d.doc_index: d.elements for d in kb.documents}
    for el in list(selected.values()):
        if not el.is_image or el.is_aux:
            continue
        elems = by_doc[el.doc_index]
        idx = next(i for i, e in enumerate(elems) if e.position == el.position)
        before = next((e for e in reversed(elems[:idx]) if not e.is_image), None)
        after = next((e for e in elems[idx + 1 :] if not e.is_image), None)
        for ctx in (before, after):
            if ctx is not None and ctx.ref not in selected:
                context[ctx.ref] = ctx
    return sorted([*selected.values(), *context.values()], key=order_key)


def key_images(skb: ScoredKnowledgeBase | KnowledgeBase, cfg: RetrievalConfig = RetrievalConfig()) -> set[ElementRef]:
    kb = skb.kb if isinstance(skb, ScoredKnowledgeBase) else skb
    return {
        el.ref
        for el in kb.image_elements()
        if el.relevance_score is not None and el.relevance_score >= cfg.key_image_threshold
    }
