"""Regenerate the fixture corpus under fixtures/corpus.

Images are synthetic patterns drawn with numpy so that distinct images are far
apart in pHash space; one image is duplicated byte-for-byte, one is re-encoded
as JPEG and one is too small to pass the size filter.

    python3 fixtures/build_corpus.py
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
from PIL import Image

HERE = Path(__file__).resolve().parent
CORPUS = HERE / "corpus"

SIDE = 160


def _grid() -> tuple[np.ndarray, np.ndarray]:
    y, x = np.mgrid[0:SIDE, 0:SIDE].astype(float) / SIDE
    return x, y


def pattern(kind: str) -> np.ndarray:
    x, y = _grid()
    if kind == "diag":
        g = (x + y) / 2
    elif kind == "rings":
        g = 0.5 + 0.5 * np.cos(14 * np.hypot(x - 0.5, y - 0.5))
    elif kind == "checker":
        g = ((np.floor(x * 4) + np.floor(y * 4)) % 2).astype(float)
    elif kind == "vstripes":
        g = 0.5 + 0.5 * np.sin(2 * np.pi * 3 * x)
    elif kind == "blob":
        g = np.exp(-((x - 0.3) ** 2 + (y - 0.7) ** 2) * 12)
    elif kind == "corner":
        g = np.maximum(x, 1 - y) ** 3
    elif kind == "waves":
        g = 0.5 + 0.5 * np.sin(2 * np.pi * (2 * x + 5 * y * y))
    elif kind == "split":
        g = (x > 0.6).astype(float) * 0.8 + (y < 0.25) * 0.2
    elif kind == "cross":
        g = ((np.abs(x - 0.5) < 0.1) | (np.abs(y - 0.35) < 0.08)).astype(float)
    elif kind == "spiral":
        ang = np.arctan2(y - 0.5, x - 0.5)
        g = 0.5 + 0.5 * np.sin(3 * ang + 20 * np.hypot(x - 0.5, y - 0.5))
    else:
        raise ValueError(kind)
    return g


def rgb(kind: str, tint: tuple[float, float, float]) -> Image.Image:
    g = pattern(kind)
    arr = np.stack([g * t for t in tint], axis=-1)
    return Image.fromarray((arr * 255).round().astype(np.uint8), "RGB")


def encode(img: Image.Image, fmt: str, **kw) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format=fmt, **kw)
    return buf.getvalue()


IMAGES = {
    # name: (pattern, tint, format)
    "pot_soil": ("diag", (0.9, 0.7, 0.5), "PNG"),
    "root_ball": ("rings", (0.6, 0.5, 0.3), "PNG"),
    "new_pot": ("checker", (0.8, 0.4, 0.3), "PNG"),
    "watering": ("vstripes", (0.3, 0.5, 0.9), "PNG"),
    "wing_macro": ("waves", (0.5, 0.8, 0.9), "PNG"),
    "wing_veins": ("spiral", (0.4, 0.7, 0.6), "PNG"),
    "dragonfly": ("blob", (0.2, 0.6, 0.8), "PNG"),
    "knot_loop": ("corner", (0.9, 0.9, 0.8), "PNG"),
    "knot_final": ("cross", (0.7, 0.6, 0.5), "PNG"),
    "rope_coil": ("split", (0.8, 0.7, 0.6), "PNG"),
}


def main() -> None:
    img_dir = CORPUS / "img"
    page_dir = CORPUS / "pages"
    img_dir.mkdir(parents=True, exist_ok=True)
    page_dir.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    for name, (kind, tint, fmt) in IMAGES.items():
        rel = f"img/{name}.png"
        (CORPUS / rel).write_bytes(encode(rgb(kind, tint), fmt, optimize=False))
        files[name] = rel
    # JPEG re-encode of root_ball: a near duplicate
    (CORPUS / "img/root_ball_copy.jpg").write_bytes(encode(rgb("rings", (0.6, 0.5, 0.3)), "JPEG", quality=90))
    files["root_ball_copy"] = "img/root_ball_copy.jpg"
    # 40x40 badge, below the size filter
    small = rgb("checker", (1.0, 0.2, 0.2)).resize((40, 40))
    (CORPUS / "img/badge.png").write_bytes(encode(small, "PNG"))
    files["badge"] = "img/badge.png"

    url = "https://img.example.org/{}".format
    images = {url(n): rel for n, rel in files.items()}
    # the exact duplicate: same bytes published under a second URL
    images[url("pot_soil_mirror")] = files["pot_soil"]

    pages = {
        "repot_guide.md": f"""# Repotting a snake plant

Snake plants grow slowly, so they only need a new pot every two to three years. Spring is the best time.

![soil mix]({url("pot_soil")})

Mix two parts cactus soil with one part perlite so the roots never sit in water.

![root ball]({url("root_ball")})

Tip the plant out, loosen the root ball gently and cut away any soft or black roots.

Subscribe to our newsletter for weekly plant tips!

[Shop our pots](https://shop.example.org/pots)
""",
        "repot_forum.md": f"""## Forum answer

I used a terracotta pot only one size larger than the old one. A bigger pot holds too much water.

![same soil photo]({url("pot_soil_mirror")})

![badge]({url("badge")})

Wait a week before the first watering so damaged roots can heal.
""",
        "wing_article.md": f"""# Dragonfly wings under the microscope

Each wing is a thin membrane stretched over a network of veins. Under magnification the veins form small cells.

![wing macro]({url("wing_macro")})

The pattern of cells differs between species, which helps entomologists identify them.

![vein detail]({url("wing_veins")})

A dark spot near the tip, the pterostigma, adds weight and reduces flutter in fast flight.
""",
        "knot_basics.md": f"""# The bowline

The bowline makes a fixed loop at the end of a rope that will not slip or jam.

![making the loop]({url("knot_loop")})

Form a small overhand loop in the standing part, then pass the working end up through it.

Take the end around behind the standing part and back down through the small loop.
""",
        "knot_sailing.md": f"""Sailors use the bowline to tie mooring lines because it is easy to untie after carrying a load.

![finished bowline]({url("knot_final")})

Dress the knot and pull it tight before trusting it with weight. Visit www.example-knots.com for more.
""",
    }
    for fname, text in pages.items():
        (page_dir / fname).write_text(text, encoding="utf-8")

    queries = [
        {
            "id": "q1",
            "text": "How do I repot a snake plant?",
            "pages": [
                {"url": "https://plants.example.org/repot", "file": "pages/repot_guide.md"},
                {"url": "https://forum.example.org/t/123", "file": "pages/repot_forum.md"},
            ],
            "aux_images": [url("new_pot"), url("root_ball_copy"), url("watering"), url("missing_image")],
        },
        {
            "id": "q2",
            "text": "What does a dragonfly wing look like up close?",
            "pages": [{"url": "https://bugs.example.org/wings", "file": "pages/wing_article.md"}],
            "aux_images": [url("dragonfly")],
        },
        {
            "id": "q3",
            "text": "How do you tie a bowline knot?",
            "pages": [
                {"url": "https://knots.example.org/bowline", "file": "pages/knot_basics.md"},
                {"url": "https://sail.example.org/knots", "file": "pages/knot_sailing.md"},
            ],
            "aux_images": [url("rope_coil")],
        },
    ]
    crawl = {"queries": queries, "images": dict(sorted(images.items()))}
    (CORPUS / "crawl.json").write_text(json.dumps(crawl, indent=2) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
