"""Image handling: format sniffing, luminance decode, pHash and near-duplicate removal."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np
from PIL import Image
from scipy.fft import dctn

from ..document import AUX, ElementRef, ImageFormat, ImageRecord

HASH_INPUT_SIDE = 32
HASH_BLOCK = 8


class UnsupportedFormat(ValueError):
    pass


def sniff_image_format(data: bytes) -> ImageFormat:
    if data[:3] == b"\xff\xd8\xff":
        return ImageFormat.JPG
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return ImageFormat.PNG
    if data[:4] == b"GIF8":
        return ImageFormat.GIF
    if len(data) >= 12 and data[:4] == b"RIFF" and data[8:12] == b"WEBP":
        return ImageFormat.WEBP
    raise UnsupportedFormat(f"unrecognised image header {data[:12].hex()}")


def _open(data: bytes) -> Image.Image:
    img = Image.open(io.BytesIO(data))
    img.seek(0)
    return img


def image_size(data: bytes) -> tuple[int, int]:
    return _open(data).size


def decode_luminance(data: bytes) -> np.ndarray:
    """First frame as a 2-D float array of 8-bit luma values."""
    img = _open(data)
    if img.mode in ("RGBA", "LA", "P"):
        img = img.convert("RGBA")
        bg = Image.new("RGBA", img.size, (255, 255, 255, 255))
        img = Image.alpha_composite(bg, img)
    return np.asarray(img.convert("L"), dtype=np.float64)


def resize_for_hash(gray: np.ndarray) -> np.ndarray:
    arr = np.asarray(gray, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D luminance array")
    img = Image.fromarray(arr, mode="F").resize((HASH_INPUT_SIDE, HASH_INPUT_SIDE), Image.Resampling.LANCZOS)
    return np.asarray(img, dtype=np.float64)


def hash_bits_from_block(block: Sequence[Sequence[float]]) -> int:
    """64-bit hash from the low-frequency 8x8 DCT block.

    The DC coefficient is left out of the median and its bit is always 0;
    every other bit is set iff its coefficient exceeds the median of the
    63 AC coefficients (with a relative tolerance for floating-point noise).
    """
    flat = [float(v) for row in block for v in row]
    ac = sorted(flat[1:])
    median = (ac[31] + ac[32]) / 2 if len(ac) % 2 == 0 else ac[len(ac) // 2]
    tol = 1e-9 * max(1.0, max(abs(v) for v in flat))
    h = 0
    for i, v in enumerate(flat):
        if i and v > median + tol:
            h |= 1 << (63 - i)
    return h


def phash(gray_pixels: np.ndarray) -> int:
    """DCT perceptual hash of a luminance image."""
    small = resize_for_hash(gray_pixels)
    coeffs = dctn(small, type=2, norm="ortho")
    return hash_bits_from_block(coeffs[:HASH_BLOCK, :HASH_BLOCK])


def phash_bytes(data: bytes) -> int:
    return phash(decode_luminance(data))


def hamming(a: int, b: int) -> int:
    return (a ^ b).bit_count()


def thumbnail(data: bytes, side: int = 512) -> tuple[bytes, str]:
    """Downscale to fit in ``side`` x ``side``; returns (bytes, mime)."""
    img = _open(data).convert("RGB")
    img.thumbnail((side, side))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue(), "image/png"


@dataclass(frozen=True)
class DedupConfig:
    hamming_threshold: int = 10
    min_dimension_px: int = 100
    thumbnail_side_px: int = 512

    def __post_init__(self) -> None:
        if not 0 <= self.hamming_threshold <= 64:
            raise ValueError("hamming_threshold must be in 0..64")


def passes_size_filter(rec: ImageRecord, cfg: DedupConfig) -> bool:
    return rec.width >= cfg.min_dimension_px and rec.height >= cfg.min_dimension_px


class ImageRelevanceScorer(Protocol):
    def score(self, query_text: str, image: ImageRecord, data: bytes) -> float | None: ...


class PassThroughScorer:
    """Keeps every image; stands in for an embedding-similarity filter."""

    def score(self, query_text: str, image: ImageRecord, data: bytes) -> float | None:
        return None


@dataclass(frozen=True)
class DedupItem:
    image: ImageRecord
    score: int | None = None
    ref: ElementRef | None = None

    def survivor_key(self) -> tuple:
        score = -1 if self.score is None else self.score
        if self.ref is None:
            pos: tuple = (2, 0, 0)
        else:
            pos = (1 if self.ref[0] == AUX else 0, self.ref[0], self.ref[1])
        return (-score, pos, self.image.image_id)


def _clusters(hashes: Sequence[int], threshold: int) -> list[int]:
    parent = list(range(len(hashes)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(hashes)):
        for j in range(i + 1, len(hashes)):
            if hamming(hashes[i], hashes[j]) <= threshold:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    return [find(i) for i in range(len(hashes))]


def dedup_images(records: Iterable[DedupItem | tuple], cfg: DedupConfig = DedupConfig()) -> list[DedupItem]:
    """Keep one image per near-duplicate cluster (transitive closure of hamming <= threshold).

    The survivor has the highest score, then the earliest (doc_index,
    position) with auxiliary images last, then the smallest image id.  Output
    keeps input order.
    """
    items = [r if isinstance(r, DedupItem) else DedupItem(*r) for r in records]
    for it in items:
        if it.image.phash is None:
            raise ValueError(f"image {it.image.image_id} has no phash")
    roots = _clusters([it.image.phash for it in items], cfg.hamming_threshold)  # type: ignore[misc]
    best: dict[int, int] = {}
    for idx, root in enumerate(roots):
        if root not in best or items[idx].survivor_key() < items[best[root]].survivor_key():
            best[root] = idx
    keep = set(best.values())
    return [it for i, it in enumerate(items) if i in keep]
