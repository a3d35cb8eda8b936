from ..judge import parse_two_line_verdict
from .crawler import CrawlerClient, FetchError, FixtureCrawler, Page, RawQuery
from .images import (
    DedupConfig,
    DedupItem,
    ImageRelevanceScorer,
    PassThroughScorer,
    UnsupportedFormat,
    decode_luminance,
    dedup_images,
    hamming,
    phash,
    phash_bytes,
    sniff_image_format,
)
from .pipeline import CurationConfig, CurationStats, curate_query
from .queries import ClassificationProtocolError, QueryDecision, QueryVerdict, classify_query, filter_query
from .text import CleaningRuleSet, SegmenterConfig, clean_text, extract_images, segment_text

__all__ = [
    "ClassificationProtocolError",
    "CleaningRuleSet",
    "CrawlerClient",
    "CurationConfig",
    "CurationStats",
    "DedupConfig",
    "DedupItem",
    "FetchError",
    "FixtureCrawler",
    "ImageRelevanceScorer",
    "Page",
    "PassThroughScorer",
    "QueryDecision",
    "QueryVerdict",
    "RawQuery",
    "SegmenterConfig",
    "UnsupportedFormat",
    "classify_query",
    "clean_text",
    "curate_query",
    "decode_luminance",
    "dedup_images",
    "extract_images",
    "filter_query",
    "hamming",
    "parse_two_line_verdict",
    "phash",
    "phash_bytes",
    "segment_text",
    "sniff_image_format",
]
