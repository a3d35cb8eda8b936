"""Text processing for crawled markdown pages: image extraction, cleaning, segmentation."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..document import PLACEHOLDER_TOKEN

DEFAULT_REMOVAL_PATTERNS: tuple[str, ...] = (
    # markdown links to web addresses, anchor text included
    r"\[[^\]\n]*\]\(\s*<?(?:https?:)?//[^)\s]*>?(?:\s+\"[^\"\n]*\")?\s*\)",
    r"https?://[^\s)\]>]+",
    r"\bwww\.[^\s)\]>]+",
    r"(?im)^[^\S\n]*(?:advertisement|sponsored(?: content)?|ads? by \w+)[^\S\n]*$",
    r"(?im)^.*\b(?:subscribe to our newsletter|accept (?:all )?cookies|sign up for free)\b.*$",
    r"</?[a-z][a-z0-9]*(?:\s[^<>\n]*)?/?>",
)


@dataclass(frozen=True)
class CleaningRuleSet:
    removal_patterns: tuple[str, ...] = DEFAULT_REMOVAL_PATTERNS
    placeholder_token: str = PLACEHOLDER_TOKEN

    def __post_init__(self) -> None:
        object.__setattr__(self, "removal_patterns", tuple(self.removal_patterns))
        compiled = []
        for p in self.removal_patterns:
            try:
                rx = re.compile(p)
            except re.error as exc:
                raise ValueError(f"removal pattern {p!r} does not compile: {exc}") from exc
            if rx.search(self.placeholder_token):
                raise ValueError(f"removal pattern {p!r} matches the placeholder token")
            compiled.append(rx)
        object.__setattr__(self, "_compiled", tuple(compiled))

    @property
    def compiled(self) -> tuple[re.Pattern[str], ...]:
        return self._compiled  # type: ignore[attr-defined]


_MAX_PASSES = 16


def clean_text(raw: str, rules: CleaningRuleSet = CleaningRuleSet()) -> str:
    """Remove every rule match, in rule order, leaving placeholder tokens intact.

    Passes repeat until nothing matches, so the result is a fixed point and
    cleaning is idempotent.
    """
    chunks = raw.split(rules.placeholder_token)
    out = []
    for chunk in chunks:
        for _ in range(_MAX_PASSES):
            before = chunk
            for rx in rules.compiled:
                chunk = rx.sub("", chunk)
            if chunk == before:
                break
        out.append(chunk)
    return rules.placeholder_token.join(out)


_LINKED_IMAGE = re.compile(r"\[\s*(!\[[^\]\n]*\]\([^()\n]*\))\s*\]\([^()\n]*\)")
_MD_IMAGE = re.compile(r"!\[[^\]\n]*\]\(\s*<?([^()\s<>]+)>?(?:\s+\"[^\"\n]*\")?\s*\)")


def extract_images(markdown_page: str, placeholder_token: str = PLACEHOLDER_TOKEN) -> tuple[str, list[str]]:
    """Replace markdown images with the placeholder; return text and image URLs in order."""
    text = _LINKED_IMAGE.sub(r"\1", markdown_page)
    urls: list[str] = []

    def _sub(m: re.Match[str]) -> str:
        urls.append(m.group(1))
        return placeholder_token

    return _MD_IMAGE.sub(_sub, text), urls


@dataclass(frozen=True)
class SegmenterConfig:
    max_chars: int = 1200
    boundary_priority: tuple[str, ...] = field(default=("blank_line", "sentence_end", "whitespace"), init=False)

    def __post_init__(self) -> None:
        if self.max_chars < 200:
            raise ValueError("max_chars must be >= 200")


_BOUNDARIES = (
    re.compile(r"(\n[^\S\n]*\n\s*)"),
    re.compile(r"(?<=[.!?])(\s+)"),
    re.compile(r"(\s+)"),
)


def _split(text: str, max_chars: int, level: int = 0) -> list[str]:
    if len(text) <= max_chars or level >= len(_BOUNDARIES):
        return [text]
    parts = _BOUNDARIES[level].split(text)
    units, seps = parts[0::2], [""] + parts[1::2]
    pieces: list[str] = []
    cur = ""
    for unit, sep in zip(units, seps):
        candidate = cur + sep + unit if cur else unit
        if len(candidate) <= max_chars:
            cur = candidate
            continue
        if cur:
            pieces.append(cur)
        if len(unit) > max_chars:
            pieces.extend(_split(unit, max_chars, level + 1))
            cur = ""
        else:
            cur = unit
    if cur:
        pieces.append(cur)
    return pieces


def segment_text(cleaned: str, cfg: SegmenterConfig = SegmenterConfig(),
                 placeholder_token: str = PLACEHOLDER_TOKEN) -> list[str]:
    """Split cleaned text into pieces of at most ``cfg.max_chars`` characters.

    Each placeholder becomes its own piece.  Only runs without any
    whitespace may exceed the limit.
    """
    pieces: list[str] = []
    chunks = cleaned.split(placeholder_token)
    for i, chunk in enumerate(chunks):
        if i:
            pieces.append(placeholder_token)
        for p in _split(chunk.strip(), cfg.max_chars):
            p = p.strip()
            if p:
                pieces.append(p)
    return pieces


def normalize_for_compare(text: str, placeholder_token: str = PLACEHOLDER_TOKEN) -> str:
    return " ".join(text.replace(placeholder_token, f" {placeholder_token} ").split())
