"""Core data types, the markdown image protocol and dataset record IO.

Prompts and model outputs reference images through markdown image syntax
``![IMAGE_CONTENT](<IMG_k>)``.  The pseudo-URL ``<IMG_k>`` is assigned in
render order and bound back to an element through a ``url_table``.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, NamedTuple

AUX = -1
"""Sentinel ``doc_index`` for auxiliary images (no hosting document)."""

PLACEHOLDER_TOKEN = "<IMAGE_PLACEHOLDER>"
ATTACHED_IMAGE_TOKEN = "image"
SCHEMA_VERSION = 1

ElementRef = tuple[int, int]


class InvariantError(ValueError):
    """A domain object was constructed with values violating its invariants."""


class ParseError(ValueError):
    """A stored record or model output could not be parsed."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.field = field


class MissingDescription(ValueError):
    def __init__(self, ref: ElementRef):
        super().__init__(f"image element {ref} has no description")
        self.ref = ref


class ElementKind(str, Enum):
    TEXT = "text"
    IMAGE = "image"


class ImageFormat(str, Enum):
    JPG = "jpg"
    PNG = "png"
    GIF = "gif"
    WEBP = "webp"

    @property
    def extension(self) -> str:
        return self.value


class Strategy(str, Enum):
    SEPARATE = "separate"
    SINGLE = "single"
    MULTI = "multi"


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    topic_ids: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise InvariantError(f"query {self.id!r} has empty text")
        object.__setattr__(self, "topic_ids", tuple(self.topic_ids))
        for t in self.topic_ids:
            if not 1 <= t <= 11:
                raise InvariantError(f"topic id {t} outside 1..11")
        if 11 in self.topic_ids and len(self.topic_ids) > 1:
            raise InvariantError("topic 11 (Others) cannot be combined with other topics")


@dataclass(frozen=True)
class Element:
    doc_index: int
    position: int
    kind: ElementKind
    text: str = ""
    image_ref: str | None = None
    relevance_score: int | None = None

    def __post_init__(self) -> None:
        if self.doc_index < 0 and self.doc_index != AUX:
            raise InvariantError(f"doc_index {self.doc_index} must be >= 0 or AUX")
        if self.position < 0:
            raise InvariantError(f"position {self.position} must be >= 0")
        if self.kind is ElementKind.IMAGE and not self.image_ref:
            raise InvariantError(f"image element {self.ref} lacks image_ref")
        if self.kind is ElementKind.TEXT and self.image_ref is not None:
            raise InvariantError(f"text element {self.ref} carries image_ref")
        if self.relevance_score is not None:
            if isinstance(self.relevance_score, bool) or not isinstance(self.relevance_score, int):
                raise InvariantError(f"relevance_score must be an integer, got {self.relevance_score!r}")
            if not 0 <= self.relevance_score <= 10:
                raise InvariantError(f"relevance_score {self.relevance_score} outside [0, 10]")

    @property
    def ref(self) -> ElementRef:
        return (self.doc_index, self.position)

    @property
    def is_image(self) -> bool:
        return self.kind is ElementKind.IMAGE

    @property
    def is_aux(self) -> bool:
        return self.doc_index == AUX

    def with_score(self, score: int | None) -> Element:
        return _replace(self, relevance_score=score)

    def with_text(self, text: str) -> Element:
        return _replace(self, text=text)


def _replace(obj: Any, **changes: Any) -> Any:
    from dataclasses import replace

    return replace(obj, **changes)


def order_key(element: Element) -> tuple[int, int, int]:
    """Document order with auxiliary images last."""
    return (1 if element.is_aux else 0, element.doc_index, element.position)


@dataclass(frozen=True)
class Document:
    doc_index: int
    url: str
    elements: tuple[Element, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "elements", tuple(self.elements))
        last = -1
        for el in self.elements:
            if el.doc_index != self.doc_index:
                raise InvariantError(f"element {el.ref} filed under document {self.doc_index}")
            if el.position <= last:
                raise InvariantError(f"document {self.doc_index}: positions not strictly increasing")
            last = el.position


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    format: ImageFormat
    width: int
    height: int
    bytes_path: str
    phash: int | None = None
    source_url: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.format, ImageFormat):
            object.__setattr__(self, "format", ImageFormat(self.format))
        if self.width < 1 or self.height < 1:
            raise InvariantError(f"image {self.image_id} has non-positive size")
        if self.phash is not None and not 0 <= self.phash < 2**64:
            raise InvariantError(f"image {self.image_id} phash outside 64 bits")


@dataclass(frozen=True)
class KnowledgeBase:
    query_id: str
    documents: tuple[Document, ...] = ()
    aux_images: tuple[Element, ...] = ()
    images: Mapping[str, ImageRecord] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "documents", tuple(self.documents))
        object.__setattr__(self, "aux_images", tuple(self.aux_images))
        seen: set[ElementRef] = set()
        for el in self.elements():
            if el.ref in seen:
                raise InvariantError(f"duplicate element ref {el.ref}")
            seen.add(el.ref)
        for el in self.aux_images:
            if not el.is_image or not el.is_aux:
                raise InvariantError(f"aux element {el.ref} must be an image with doc_index AUX")

    def elements(self) -> Iterator[Element]:
        for doc in self.documents:
            yield from doc.elements
        yield from self.aux_images

    def image_elements(self) -> list[Element]:
        return [el for el in self.elements() if el.is_image]

    def lookup(self) -> dict[ElementRef, Element]:
        return {el.ref: el for el in self.elements()}

    def map_elements(self, fn) -> KnowledgeBase:
        """Return a copy with ``fn`` applied to every element."""
        docs = tuple(
            Document(d.doc_index, d.url, tuple(fn(el) for el in d.elements)) for d in self.documents
        )
        aux = tuple(fn(el) for el in self.aux_images)
        return KnowledgeBase(self.query_id, docs, aux, dict(self.images))


class SegmentKind(str, Enum):
    TEXT = "text"
    IMAGE_SLOT = "image_slot"


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    text: str
    element_ref: ElementRef | None = None


@dataclass(frozen=True)
class MultiModalResponse:
    query_id: str
    strategy: Strategy
    segments: tuple[Segment, ...]
    raw_markdown: str
    dropped_refs: int = 0

    @property
    def text(self) -> str:
        return "".join(s.text for s in self.segments if s.kind is SegmentKind.TEXT)

    @property
    def image_refs(self) -> list[ElementRef]:
        return [s.element_ref for s in self.segments if s.kind is SegmentKind.IMAGE_SLOT]

    def to_markdown(self) -> str:
        """Text with slots re-rendered as ``![alt](<IMG_i>)`` in slot order."""
        out, i = [], 0
        for s in self.segments:
            if s.kind is SegmentKind.TEXT:
                out.append(s.text)
            else:
                out.append(image_markdown(s.text, pseudo_url(i)))
                i += 1
        return "".join(out)


@dataclass(frozen=True)
class Prompt:
    guidelines: str
    query_text: str
    context_markdown: str
    image_attachments: tuple[str, ...] = ()
    url_table: Mapping[str, ElementRef] = field(default_factory=dict)


# -- markdown image protocol -------------------------------------------------

_IMAGE_MD = re.compile(r"!\[([^\]\n]*)\]\(\s*(<[^<>\n]*>|[^()\s]*)\s*\)")
_PSEUDO = re.compile(r"^<?(IMG_\d+)>?$")


def pseudo_url(k: int) -> str:
    return f"<IMG_{k}>"


def image_markdown(content: str, url: str) -> str:
    return f"![{_alt_safe(content)}]({url})"


def _alt_safe(text: str) -> str:
    return " ".join(text.replace("[", "(").replace("]", ")").split())


class RenderedContext(NamedTuple):
    context_markdown: str
    url_table: dict[str, ElementRef]
    attachments: tuple[str, ...]


class RenderMode(str, Enum):
    DESCRIBED = "described"
    ATTACHED = "attached"


def render_context_markdown(
    elements: Iterable[Element], mode: RenderMode = RenderMode.DESCRIBED
) -> RenderedContext:
    """Render elements as markdown, grouped by document, aux images last.

    Text elements are emitted verbatim; each image becomes one
    ``![content](<IMG_k>)`` line.  Text elements are expected not to contain
    markdown image syntax themselves (curation replaces it with placeholders).
    """
    ordered = sorted(elements, key=order_key)
    blocks: list[str] = []
    table: dict[str, ElementRef] = {}
    attachments: list[str] = []
    current: int | None = None
    for el in ordered:
        if el.doc_index != current:
            current = el.doc_index
            blocks.append("## Additional images" if el.is_aux else f"## Document {el.doc_index + 1}")
        if not el.is_image:
            blocks.append(el.text)
            continue
        if mode is RenderMode.DESCRIBED:
            if not el.text.strip():
                raise MissingDescription(el.ref)
            content = el.text
        else:
            content = ATTACHED_IMAGE_TOKEN
            attachments.append(el.image_ref)  # type: ignore[arg-type]
        url = pseudo_url(len(table))
        table[url] = el.ref
        blocks.append(image_markdown(content, url))
    return RenderedContext("\n\n".join(blocks), table, tuple(attachments))


def normalize_pseudo_url(url: str) -> str | None:
    m = _PSEUDO.match(url.strip())
    return f"<{m.group(1)}>" if m else None


def parse_response_markdown(
    raw: str,
    url_table: Mapping[str, ElementRef],
    *,
    query_id: str = "",
    strategy: Strategy = Strategy.SINGLE,
) -> MultiModalResponse:
    """Split generator output into text and image-slot segments.

    References to pseudo-URLs missing from ``url_table`` and repeated uses of
    one pseudo-URL are removed from the text and counted in ``dropped_refs``.
    Other image syntax (ordinary URLs, malformed markup) stays as plain text.
    """
    segments: list[Segment] = []
    pending = ""
    used: set[str] = set()
    dropped = 0
    cursor = 0
    for m in _IMAGE_MD.finditer(raw):
        key = normalize_pseudo_url(m.group(2))
        if key is None:
            continue
        pending += raw[cursor : m.start()]
        cursor = m.end()
        if key not in url_table or key in used:
            dropped += 1
            continue
        used.add(key)
        if pending:
            segments.append(Segment(SegmentKind.TEXT, pending))
            pending = ""
        ref = tuple(url_table[key])
        segments.append(Segment(SegmentKind.IMAGE_SLOT, m.group(1), ref))  # type: ignore[arg-type]
    pending += raw[cursor:]
    if pending:
        segments.append(Segment(SegmentKind.TEXT, pending))
    return MultiModalResponse(query_id, strategy, tuple(segments), raw, dropped)


# -- serialization -------------------------------------------------------------


def element_to_dict(el: Element) -> dict[str, Any]:
    d: dict[str, Any] = {"doc_index": el.doc_index, "position": el.position, "kind": el.kind.value, "text": el.text}
    if el.image_ref is not None:
        d["image_ref"] = el.image_ref
    if el.relevance_score is not None:
        d["relevance_score"] = el.relevance_score
    return d


def element_from_dict(d: Mapping[str, Any]) -> Element:
    return Element(
        doc_index=int(d["doc_index"]),
        position=int(d["position"]),
        kind=ElementKind(d["kind"]),
        text=d.get("text", ""),
        image_ref=d.get("image_ref"),
        relevance_score=d.get("relevance_score"),
    )


def image_to_dict(rec: ImageRecord) -> dict[str, Any]:
    d: dict[str, Any] = {
        "image_id": rec.image_id,
        "format": rec.format.value,
        "width": rec.width,
        "height": rec.height,
        "bytes_path": rec.bytes_path,
        "source_url": rec.source_url,
    }
    if rec.phash is not None:
        d["phash"] = f"{rec.phash:016x}"
    return d


def image_from_dict(d: Mapping[str, Any]) -> ImageRecord:
    phash = d.get("phash")
    return ImageRecord(
        image_id=d["image_id"],
        format=ImageFormat(d["format"]),
        width=int(d["width"]),
        height=int(d["height"]),
        bytes_path=d["bytes_path"],
        phash=int(phash, 16) if isinstance(phash, str) else phash,
        source_url=d.get("source_url", ""),
    )


def query_to_dict(q: Query) -> dict[str, Any]:
    return {"id": q.id, "text": q.text, "topic_ids": list(q.topic_ids)}


def query_from_dict(d: Mapping[str, Any]) -> Query:
    return Query(d["id"], d["text"], tuple(d.get("topic_ids", ())))


def kb_to_dict(kb: KnowledgeBase) -> dict[str, Any]:
    return {
        "query_id": kb.query_id,
        "documents": [
            {"doc_index": d.doc_index, "url": d.url, "elements": [element_to_dict(e) for e in d.elements]}
            for d in kb.documents
        ],
        "aux_images": [element_to_dict(e) for e in kb.aux_images],
        "images": {k: image_to_dict(v) for k, v in sorted(kb.images.items())},
    }


def kb_from_dict(d: Mapping[str, Any]) -> KnowledgeBase:
    docs = tuple(
        Document(int(doc["doc_index"]), doc.get("url", ""), tuple(element_from_dict(e) for e in doc["elements"]))
        for doc in d.get("documents", ())
    )
    aux = tuple(element_from_dict(e) for e in d.get("aux_images", ()))
    images = {k: image_from_dict(v) for k, v in d.get("images", {}).items()}
    return KnowledgeBase(d["query_id"], docs, aux, images)


def segment_to_dict(s: Segment) -> dict[str, Any]:
    d: dict[str, Any] = {"kind": s.kind.value, "text": s.text}
    if s.element_ref is not None:
        d["element_ref"] = list(s.element_ref)
    return d


def response_to_dict(r: MultiModalResponse) -> dict[str, Any]:
    return {
        "query_id": r.query_id,
        "strategy": r.strategy.value,
        "segments": [segment_to_dict(s) for s in r.segments],
        "raw_markdown": r.raw_markdown,
        "dropped_refs": r.dropped_refs,
    }


def response_from_dict(d: Mapping[str, Any]) -> MultiModalResponse:
    segs = tuple(
        Segment(
            SegmentKind(s["kind"]),
            s["text"],
            tuple(s["element_ref"]) if s.get("element_ref") is not None else None,  # type: ignore[arg-type]
        )
        for s in d["segments"]
    )
    return MultiModalResponse(d["query_id"], Strategy(d["strategy"]), segs, d["raw_markdown"], d.get("dropped_refs", 0))


@dataclass(frozen=True)
class Record:
    """One dataset line: a query with its knowledge base plus any unknown fields."""

    query: Query
    kb: KnowledgeBase
    extra: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        d = dict(self.extra)
        d["query"] = query_to_dict(self.query)
        d["kb"] = kb_to_dict(self.kb)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Record:
        extra = {k: v for k, v in d.items() if k not in ("query", "kb")}
        return cls(query_from_dict(d["query"]), kb_from_dict(d["kb"]), extra)


def dumps(obj: Any) -> str:
    """Canonical single-line JSON, stable across runs."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl(path: str | os.PathLike, rows: Iterable[Mapping[str, Any]]) -> None:
    atomic_write_text(path, "".join(dumps(r) + "\n" for r in rows))


def read_jsonl(path: str | os.PathLike) -> list[dict[str, Any]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from exc
    return rows


def _parse_record(d: Any, lineno: int) -> Record:
    if not isinstance(d, dict):
        raise ParseError("record is not an object", line=lineno)
    for key in ("query", "kb"):
        if key not in d:
            raise ParseError("missing field", line=lineno, field=key)
    try:
        return Record.from_dict(d)
    except KeyError as exc:
        raise ParseError("missing field", line=lineno, field=str(exc.args[0])) from exc
    except (InvariantError, ValueError, TypeError) as exc:
        raise ParseError(str(exc), line=lineno) from exc


def read_records(path: str | os.PathLike) -> list[Record]:
    rows = read_jsonl(path)
    return [_parse_record(d, i) for i, d in enumerate(rows, start=1)]


def write_records(records: Iterable[Record], path: str | os.PathLike) -> None:
    write_jsonl(path, (r.to_dict() for r in records))


def read_record(path: str | os.PathLike) -> tuple[Query, KnowledgeBase]:
    records = read_records(path)
    if len(records) != 1:
        raise ParseError(f"expected exactly one record, found {len(records)}")
    return records[0].query, records[0].kb


def write_record(record: Record | tuple[Query, KnowledgeBase], path: str | os.PathLike) -> None:
    if not isinstance(record, Record):
        record = Record(*record)
    write_records([record], path)
