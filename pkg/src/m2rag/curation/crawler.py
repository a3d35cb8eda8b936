"""Crawler interface and a directory-backed implementation for pre-fetched pages.

Fixture layout::

    crawl.json   {"queries": [{"id", "text", "pages": [{"url", "file"}], "aux_images": [url, ...]}],
                  "images": {url: relative file}}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol


class FetchError(RuntimeError):
    pass


@dataclass(frozen=True)
class Page:
    url: str
    markdown: str


@dataclass(frozen=True)
class RawQuery:
    id: str
    text: str


class CrawlerClient(Protocol):
    def queries(self) -> list[RawQuery]: ...

    def search_pages(self, query: RawQuery) -> list[Page]: ...

    def search_images(self, query: RawQuery) -> list[str]: ...

    def fetch_image(self, url: str) -> bytes: ...


class FixtureCrawler:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.index = json.loads((self.root / "crawl.json").read_text(encoding="utf-8"))
        self._by_id = {q["id"]: q for q in self.index.get("queries", [])}

    def queries(self) -> list[RawQuery]:
        return [RawQuery(q["id"], q["text"]) for q in self.index.get("queries", [])]

    def search_pages(self, query: RawQuery) -> list[Page]:
        entry = self._by_id.get(query.id, {})
        return [
            Page(p["url"], (self.root / p["file"]).read_text(encoding="utf-8"))
            for p in entry.get("pages", [])
        ]

    def search_images(self, query: RawQuery) -> list[str]:
        return list(self._by_id.get(query.id, {}).get("aux_images", []))

    def fetch_image(self, url: str) -> bytes:
        rel = self.index.get("images", {}).get(url)
        if rel is None:
            raise FetchError(f"not in fixture: {url}")
        path = self.root / rel
        if not path.exists():
            raise FetchError(f"missing file for {url}")
        return path.read_bytes()

    def input_files(self) -> list[Path]:
        return sorted(p for p in self.root.rglob("*") if p.is_file())
