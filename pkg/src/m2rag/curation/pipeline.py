"""Turn crawled pages for one query into a curated knowledge base."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from ..dataset import Dataset, content_id
from ..document import AUX, Document, Element, ElementKind, ImageRecord, KnowledgeBase
from .crawler import CrawlerClient, FetchError, RawQuery
from .images import (
    DedupConfig,
    DedupItem,
    ImageRelevanceScorer,
    PassThroughScorer,
    UnsupportedFormat,
    dedup_images,
    image_size,
    passes_size_filter,
    phash_bytes,
    sniff_image_format,
)
from .text import CleaningRuleSet, SegmenterConfig, clean_text, extract_images, segment_text

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CurationConfig:
    rules: CleaningRuleSet = field(default_factory=CleaningRuleSet)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    dedup: DedupConfig = field(default_factory=DedupConfig)
    min_image_similarity: float | None = None


@dataclass
class CurationStats:
    images_seen: int = 0
    fetch_failed: int = 0
    unsupported: int = 0
    too_small: int = 0
    irrelevant: int = 0
    duplicates: int = 0


class _ImageIngest:
    def __init__(self, query: RawQuery, crawler: CrawlerClient, dataset: Dataset, cfg: CurationConfig,
                 scorer: ImageRelevanceScorer, stats: CurationStats):
        self.query, self.crawler, self.dataset, self.cfg = query, crawler, dataset, cfg
        self.scorer, self.stats = scorer, stats
        self.records: dict[str, ImageRecord] = {}
        self.similarity: dict[str, float | None] = {}

    def __call__(self, url: str) -> ImageRecord | None:
        self.stats.images_seen += 1
        try:
            data = self.crawler.fetch_image(url)
            fmt = sniff_image_format(data)
            width, height = image_size(data)
        except FetchError:
            self.stats.fetch_failed += 1
            return None
        except (UnsupportedFormat, OSError):
            self.stats.unsupported += 1
            return None
        image_id = content_id(data)
        rec = ImageRecord(image_id, fmt, width, height, f"images/{image_id}.{fmt.extension}", None, url)
        if not passes_size_filter(rec, self.cfg.dedup):
            self.stats.too_small += 1
            return None
        sim = self.scorer.score(self.query.text, rec, data)
        if sim is not None and self.cfg.min_image_similarity is not None and sim < self.cfg.min_image_similarity:
            self.stats.irrelevant += 1
            return None
        if image_id not in self.records:
            self.dataset.store_image(data, fmt)
            self.records[image_id] = ImageRecord(image_id, fmt, width, height, rec.bytes_path, phash_bytes(data), url)
        self.similarity[image_id] = sim
        return self.records[image_id]


def curate_query(query: RawQuery, crawler: CrawlerClient, dataset: Dataset, cfg: CurationConfig = CurationConfig(),
                 scorer: ImageRelevanceScorer | None = None) -> tuple[KnowledgeBase, CurationStats]:
    stats = CurationStats()
    ingest = _ImageIngest(query, crawler, dataset, cfg, scorer or PassThroughScorer(), stats)
    token = cfg.rules.placeholder_token
    documents: list[Document] = []
    for page in crawler.search_pages(query):
        text, urls = extract_images(page.markdown, token)
        pieces = segment_text(clean_text(text, cfg.rules), cfg.segmenter, token)
        doc_index = len(documents)
        elements: list[Element] = []
        url_iter = iter(urls)
        for position, piece in enumerate(pieces):
            if piece == token:
                rec = ingest(next(url_iter))
                if rec is not None:
                    elements.append(Element(doc_index, position, ElementKind.IMAGE, "", rec.image_id))
            else:
                elements.append(Element(doc_index, position, ElementKind.TEXT, piece))
        if elements:
            documents.append(Document(doc_index, page.url, tuple(elements)))
    aux: list[Element] = []
    for position, url in enumerate(crawler.search_images(query)):
        rec = ingest(url)
        if rec is not None:
            aux.append(Element(AUX, position, ElementKind.IMAGE, "", rec.image_id))

    candidates = [
        DedupItem(ingest.records[el.image_ref], _sim_rank(ingest.similarity.get(el.image_ref)), el.ref)  # type: ignore[index]
        for el in _image_elements(documents, aux)
    ]
    survivors = {it.ref for it in dedup_images(candidates, cfg.dedup)}
    stats.duplicates = len(candidates) - len(survivors)

    def keep(el: Element) -> bool:
        return not el.is_image or el.ref in survivors

    documents = [
        Document(d.doc_index, d.url, tuple(el for el in d.elements if keep(el))) for d in documents
    ]
    aux = [el for el in aux if keep(el)]
    used = {el.image_ref for el in _image_elements(documents, aux)}
    images = {k: v for k, v in ingest.records.items() if k in used}
    return KnowledgeBase(query.id, tuple(documents), tuple(aux), images), stats


def _image_elements(documents: list[Document], aux: list[Element]) -> list[Element]:
    out = [el for d in documents for el in d.elements if el.is_image]
    return out + list(aux)


def _sim_rank(sim: float | None) -> int | None:
    # similarity in [0, 1] mapped onto the 0..10 scale used for survivor choice
    return None if sim is None else max(0, min(10, round(sim * 10)))
