"""Answer generation strategies over a generator backend.

* separate: text drafted from text elements only, images attached afterwards
  next to the segment with the highest judged affinity;
* single: one prompt with all elements, images placed by the model;
* multi: plain-text draft, per-segment image choice, per-segment refinement.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from . import prompts
from .backends import CompletionRequest, ModelBackend
from .document import (
    Element,
    ElementRef,
    ImageRecord,
    KnowledgeBase,
    MultiModalResponse,
    Prompt,
    Query,
    RenderMode,
    Strategy,
    image_markdown,
    normalize_pseudo_url,
    order_key,
    parse_response_markdown,
    pseudo_url,
    render_context_markdown,
)
from .judge import DEFAULT_JUDGE_RETRIES, ask, parse_two_line_verdict


class DescriptionError(RuntimeError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    strategy: Strategy = Strategy.MULTI
    max_segments: int = 12
    max_images_per_segment: int = 1
    describe_images: bool = True
    workers: int = 1

    def __post_init__(self) -> None:
        if not isinstance(self.strategy, Strategy):
            object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.max_segments < 1:
            raise ValueError("max_segments must be >= 1")
        if self.max_images_per_segment < 1:
            raise ValueError("max_images_per_segment must be >= 1")


@dataclass
class GenerationTrace:
    prompts: list[Prompt] = field(default_factory=list)
    raw_outputs: list[str] = field(default_factory=list)
    dropped_refs: int = 0
    stage_labels: list[str] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, label: str, prompt: Prompt, raw: str) -> None:
        with self._lock:
            self.stage_labels.append(label)
            self.prompts.append(prompt)
            self.raw_outputs.append(raw)

    def to_dict(self) -> dict:
        return {
            "stage_labels": list(self.stage_labels),
            "prompts": [
                {
                    "guidelines": p.guidelines,
                    "query_text": p.query_text,
                    "context_markdown": p.context_markdown,
                    "image_attachments": list(p.image_attachments),
                }
                for p in self.prompts
            ],
            "raw_outputs": list(self.raw_outputs),
            "dropped_refs": self.dropped_refs,
        }


# -- image descriptions -----------------------------------------------------------


class DescriptionCache:
    """Descriptions keyed by (image id, context hash), optionally persisted as JSON."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._data: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self._data = json.loads(self.path.read_text(encoding="utf-8"))

    @staticmethod
    def key(image_id: str, context: str) -> str:
        return f"{image_id}:{hashlib.sha256(context.encode('utf-8')).hexdigest()[:16]}"

    def get(self, image_id: str, context: str) -> str | None:
        with self._lock:
            return self._data.get(self.key(image_id, context))

    def put(self, image_id: str, context: str, description: str) -> None:
        with self._lock:
            self._data[self.key(image_id, context)] = description

    def save(self) -> None:
        if self.path is None:
            return
        from .document import atomic_write_text

        with self._lock:
            atomic_write_text(self.path, json.dumps(self._data, indent=1, sort_keys=True) + "\n")


def describe_image(image: ImageRecord | str, context_text: str, mllm: ModelBackend, *,
                   cache: DescriptionCache | None = None, retries: int = DEFAULT_JUDGE_RETRIES) -> str:
    image_id = image if isinstance(image, str) else image.image_id
    if cache is not None:
        hit = cache.get(image_id, context_text)
        if hit is not None:
            return hit
    req = CompletionRequest(prompts.render("describe_image", context=context_text or "(none)"),
                            image_attachments=(image_id,), temperature=mllm.config.temperature)
    for _ in range(retries + 1):
        text = " ".join(mllm.complete(req).text.split())
        if text:
            if cache is not None:
                cache.put(image_id, context_text, text)
            return text
    raise DescriptionError(f"no description for image {image_id} after {retries + 1} attempts")


def image_context(kb: KnowledgeBase, ref: ElementRef) -> str:
    """Nearest text before and after an image in its document (empty for aux images)."""
    for doc in kb.documents:
        if doc.doc_index != ref[0]:
            continue
        elems = doc.elements
        idx = next(i for i, e in enumerate(elems) if e.ref == ref)
        before = next((e.text for e in reversed(elems[:idx]) if not e.is_image), "")
        after = next((e.text for e in elems[idx + 1 :] if not e.is_image), "")
        return "\n\n".join(t for t in (before, after) if t)
    return ""


def attach_descriptions(elements: Sequence[Element], kb: KnowledgeBase, mllm: ModelBackend, *,
                        cache: DescriptionCache | None = None, fallback: Mapping[str, str] | None = None) -> list[Element]:
    out = []
    for el in elements:
        if el.is_image and not el.text.strip():
            try:
                desc = describe_image(el.image_ref, image_context(kb, el.ref), mllm, cache=cache)  # type: ignore[arg-type]
            except DescriptionError:
                alt = (fallback or {}).get(el.image_ref or "")
                if not alt:
                    raise
                desc = alt
            el = el.with_text(desc)
        out.append(el)
    return out


# -- shared helpers ------------------------------------------------------------------


def _mode(cfg: StrategyConfig) -> RenderMode:
    return RenderMode.DESCRIBED if cfg.describe_images else RenderMode.ATTACHED


def _complete(backend: ModelBackend, trace: GenerationTrace, label: str, prompt: Prompt, user_text: str) -> str:
    req = CompletionRequest(user_text, prompt.guidelines, prompt.image_attachments,
                            temperature=backend.config.temperature,
                            max_output_tokens=backend.config.max_output_tokens)
    raw = backend.complete(req).text
    trace.add(label, prompt, raw)
    return raw


_BLOCK_SEP = re.compile(r"\n[^\S\n]*\n\s*")
_HEADING_ONLY = re.compile(r"^#{1,6}\s+\S[^\n]*$")


def split_segments(text: str, max_segments: int) -> list[tuple[int, int]]:
    """Character spans of answer segments.

    Blocks are separated by blank lines; a block made of a lone heading is
    joined to the block after it; trailing segments beyond ``max_segments``
    are merged into the last one.
    """
    spans: list[tuple[int, int]] = []
    start = 0
    for m in _BLOCK_SEP.finditer(text):
        if m.start() > start:
            spans.append((start, m.start()))
        start = m.end()
    if start < len(text) and text[start:].strip():
        spans.append((start, len(text.rstrip())))
    spans = [(s, e) for s, e in spans if text[s:e].strip()]
    merged: list[tuple[int, int]] = []
    pending: int | None = None
    for idx, (s, e) in enumerate(spans):
        start = s if pending is None else pending
        pending = None
        if idx < len(spans) - 1 and _HEADING_ONLY.match(text[s:e].strip()):
            pending = start
            continue
        merged.append((start, e))
    if len(merged) > max_segments:
        merged = merged[: max_segments - 1] + [(merged[max_segments - 1][0], merged[-1][1])]
    return merged


def _replace_spans(text: str, replacements: Mapping[tuple[int, int], str]) -> str:
    out, cursor = [], 0
    for (s, e) in sorted(replacements):
        out.append(text[cursor:s])
        out.append(replacements[(s, e)])
        cursor = e
    out.append(text[cursor:])
    return "".join(out)


def _strip_image_md(text: str) -> str:
    return parse_response_markdown(text, {}).text


def _image_line(url: str, el: Element, mode: RenderMode) -> str:
    return f"- {url}: {el.text}" if mode is RenderMode.DESCRIBED else f"- {url}: (attached image)"


def _fan_out(fn: Callable, items: Sequence, workers: int) -> list:
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


# -- strategies ---------------------------------------------------------------------


def generate_single_stage(query: Query, k_indoc: Sequence[Element], backend: ModelBackend,
                          cfg: StrategyConfig = StrategyConfig(Strategy.SINGLE)) -> tuple[MultiModalResponse, GenerationTrace]:
    trace = GenerationTrace()
    rendered = render_context_markdown(k_indoc, _mode(cfg))
    prompt = Prompt(prompts.guideline("gen_single"), query.text, rendered.context_markdown,
                    rendered.attachments, rendered.url_table)
    user = prompts.render("gen_user", task="answer-single", query=query.text, context=rendered.context_markdown)
    raw = _complete(backend, trace, "single", prompt, user)
    resp = parse_response_markdown(raw, rendered.url_table, query_id=query.id, strategy=Strategy.SINGLE)
    trace.dropped_refs = resp.dropped_refs
    return resp, trace


def generate_multi_stage(query: Query, k_indoc: Sequence[Element], backend: ModelBackend,
                         cfg: StrategyConfig = StrategyConfig(Strategy.MULTI)) -> tuple[MultiModalResponse, GenerationTrace]:
    trace = GenerationTrace()
    mode = _mode(cfg)
    rendered = render_context_markdown(k_indoc, mode)
    by_ref = {el.ref: el for el in k_indoc}
    url_el = {url: by_ref[ref] for url, ref in rendered.url_table.items()}

    # stage 1: plain-text draft from the multi-modal input
    p1 = Prompt(prompts.guideline("gen_multi_draft"), query.text, rendered.context_markdown,
                rendered.attachments, rendered.url_table)
    user = prompts.render("gen_user", task="answer-draft", query=query.text, context=rendered.context_markdown)
    draft = _strip_image_md(_complete(backend, trace, "draft", p1, user))

    # stage 2: per-segment image choice; each image goes to at most one segment
    spans = split_segments(draft, cfg.max_segments)
    available = list(rendered.url_table)
    assigned: dict[tuple[int, int], list[str]] = {}
    dropped = 0
    for span in spans:
        if not available:
            break
        segment = draft[span[0] : span[1]]
        lines = "\n".join(_image_line(u, url_el[u], mode) for u in available)
        attachments = () if mode is RenderMode.DESCRIBED else tuple(url_el[u].image_ref for u in available)
        text = prompts.render("gen_multi_interleave", query=query.text, segment=segment, candidates=lines)
        reply = _complete(backend, trace, "interleave", Prompt("", query.text, segment, attachments), text)
        chosen, bad = _parse_choice(reply, available, cfg.max_images_per_segment)
        dropped += bad
        if chosen:
            assigned[span] = chosen
            available = [u for u in available if u not in chosen]

    # stage 3: refine each segment that received images
    def refine(span: tuple[int, int]) -> str:
        urls = assigned[span]
        segment = draft[span[0] : span[1]]
        images = "\n".join(_image_line(u, url_el[u], mode) for u in urls)
        attachments = () if mode is RenderMode.DESCRIBED else tuple(url_el[u].image_ref for u in urls)
        text = prompts.render("gen_multi_refine", query=query.text, segment=segment, images=images)
        reply = _complete(backend, trace, "refine", Prompt("", query.text, segment, attachments), text)
        refined = _strip_image_md(reply).strip() or segment
        md = "\n\n".join(image_markdown(url_el[u].text if mode is RenderMode.DESCRIBED else "image", u) for u in urls)
        return f"{md}\n\n{refined}"

    order = sorted(assigned)
    refined = dict(zip(order, _fan_out(refine, order, cfg.workers)))
    final = _replace_spans(draft, refined)
    resp = parse_response_markdown(final, rendered.url_table, query_id=query.id, strategy=Strategy.MULTI)
    trace.dropped_refs = dropped + resp.dropped_refs
    return _with_dropped(resp, trace.dropped_refs), trace


def _parse_choice(reply: str, available: Sequence[str], limit: int) -> tuple[list[str], int]:
    """Pseudo-URLs chosen in a stage-2 reply, and how many references were invalid."""
    tokens = re.findall(r"<?IMG_\d+>?", reply)
    chosen: list[str] = []
    bad = 0
    for tok in tokens:
        url = normalize_pseudo_url(tok)
        if url in available and url not in chosen and len(chosen) < limit:
            chosen.append(url)  # type: ignore[arg-type]
        elif url not in chosen:
            bad += 1
    if not tokens and reply.strip().strip("*`.").upper() != "NONE":
        bad += 1
    return chosen, bad


def _with_dropped(resp: MultiModalResponse, dropped: int) -> MultiModalResponse:
    from dataclasses import replace

    return replace(resp, dropped_refs=dropped)


def generate_separate(query: Query, k_indoc: Sequence[Element], backend: ModelBackend,
                      cfg: StrategyConfig = StrategyConfig(Strategy.SEPARATE)) -> tuple[MultiModalResponse, GenerationTrace]:
    trace = GenerationTrace()
    mode = _mode(cfg)
    texts = [el for el in k_indoc if not el.is_image]
    images = sorted((el for el in k_indoc if el.is_image), key=order_key)
    rendered = render_context_markdown(texts, mode)
    p1 = Prompt(prompts.guideline("gen_separate_draft"), query.text, rendered.context_markdown)
    user = prompts.render("gen_user", task="answer-separate", query=query.text, context=rendered.context_markdown)
    draft = _strip_image_md(_complete(backend, trace, "draft", p1, user))

    spans = split_segments(draft, cfg.max_segments)
    table = {pseudo_url(i): el.ref for i, el in enumerate(images)}
    placement: dict[tuple[int, int], list[str]] = {}
    if spans:
        for i, el in enumerate(images):
            url = pseudo_url(i)
            if mode is RenderMode.DESCRIBED:
                image_text, attachments = f"Description: {el.text}", ()
            else:
                image_text, attachments = "The image is attached to this message.", (el.image_ref,)
            scores = []
            for span in spans:
                segment = draft[span[0] : span[1]]
                text = prompts.render("gen_separate_affinity", image=image_text, segment=segment)
                prompt = Prompt("", query.text, segment, attachments)  # type: ignore[arg-type]
                req = CompletionRequest(text, image_attachments=attachments, temperature=0.0)  # type: ignore[arg-type]
                raw: list[str] = []

                def parse(reply: str) -> int:
                    raw.append(reply)
                    return parse_two_line_verdict(reply)[1]

                score = ask(backend, req, parse)
                trace.add("affinity", prompt, raw[-1])
                scores.append(score)
            best = max(range(len(spans)), key=lambda j: (scores[j], -j))
            placement.setdefault(spans[best], []).append(url)

    def content(url: str) -> str:
        el = images[int(url[5:-1])]
        return el.text if mode is RenderMode.DESCRIBED else "image"

    inserts = {
        span: draft[span[0] : span[1]] + "".join(f"\n\n{image_markdown(content(u), u)}" for u in urls)
        for span, urls in placement.items()
    }
    final = _replace_spans(draft, inserts)
    resp = parse_response_markdown(final, table, query_id=query.id, strategy=Strategy.SEPARATE)
    trace.dropped_refs = resp.dropped_refs
    return resp, trace


STRATEGIES = {
    Strategy.SEPARATE: generate_separate,
    Strategy.SINGLE: generate_single_stage,
    Strategy.MULTI: generate_multi_stage,
}


def generate(query: Query, k_indoc: Sequence[Element], backend: ModelBackend,
             cfg: StrategyConfig) -> tuple[MultiModalResponse, GenerationTrace]:
    return STRATEGIES[cfg.strategy](query, k_indoc, backend, cfg)
