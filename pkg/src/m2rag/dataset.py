"""On-disk dataset layout.

::

    <root>/manifest.json           schema version + record files
    <root>/records/<name>.jsonl    one record per line
    <root>/images/<id>.<ext>       content-addressed image bytes
    <root>/reports/                stage reports
    <root>/.stages/<stage>.json    idempotence stamps
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Mapping

from .document import (
    SCHEMA_VERSION,
    ImageFormat,
    Record,
    atomic_write_text,
    dumps,
    read_jsonl,
    read_records,
    write_jsonl,
    write_records,
)


def content_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:32]


class Dataset:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def records_dir(self) -> Path:
        return self.root / "records"

    @property
    def images_dir(self) -> Path:
        return self.root / "images"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def record_path(self, name: str) -> Path:
        return self.records_dir / f"{name}.jsonl"

    def has(self, name: str) -> bool:
        return self.record_path(name).exists()

    # -- manifest

    def manifest(self) -> dict[str, Any]:
        if not self.manifest_path.exists():
            return {"schema_version": SCHEMA_VERSION, "records": []}
        return json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def _register(self, name: str) -> None:
        m = self.manifest()
        files = set(m.get("records", []))
        files.add(f"records/{name}.jsonl")
        m["records"] = sorted(files)
        m["schema_version"] = SCHEMA_VERSION
        atomic_write_text(self.manifest_path, json.dumps(m, indent=2, sort_keys=True) + "\n")

    # -- records

    def write_kb_records(self, name: str, records: Iterable[Record]) -> Path:
        path = self.record_path(name)
        write_records(records, path)
        self._register(name)
        return path

    def read_kb_records(self, name: str) -> list[Record]:
        return read_records(self.record_path(name))

    def write_rows(self, name: str, rows: Iterable[Mapping[str, Any]]) -> Path:
        path = self.record_path(name)
        write_jsonl(path, rows)
        self._register(name)
        return path

    def read_rows(self, name: str) -> list[dict[str, Any]]:
        return read_jsonl(self.record_path(name))

    # -- images

    def store_image(self, data: bytes, fmt: ImageFormat) -> tuple[str, str]:
        """Write bytes under their content id; returns (image_id, relative path)."""
        image_id = content_id(data)
        rel = f"images/{image_id}.{fmt.extension}"
        path = self.root / rel
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        return image_id, rel

    def image_bytes(self, bytes_path: str) -> bytes:
        return (self.root / bytes_path).read_bytes()

    # -- reports

    def write_report(self, name: str, payload: Any) -> Path:
        path = self.reports_dir / name
        if isinstance(payload, str):
            atomic_write_text(path, payload)
        else:
            atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
        return path


def file_digest(paths: Iterable[Path]) -> str:
    h = hashlib.sha256()
    for p in sorted(paths, key=str):
        h.update(str(p.name).encode())
        h.update(b"\0")
        h.update(p.read_bytes() if p.exists() else b"<missing>")
        h.update(b"\0")
    return h.hexdigest()


def payload_digest(obj: Any) -> str:
    return hashlib.sha256(dumps(obj).encode("utf-8")).hexdigest()
