"""Builders shared by the test modules."""

from __future__ import annotations

from hypothesis import strategies as st

from m2rag.document import AUX, Document, Element, ElementKind, ImageRecord, ImageFormat, KnowledgeBase

WORDS = ["soil", "pot", "root", "leaf", "water", "light", "wing", "vein", "rope", "loop", "knot", "cell"]


def text_el(doc: int, pos: int, text: str = "Some text.", score: int | None = None) -> Element:
    return Element(doc, pos, ElementKind.TEXT, text, None, score)


def image_el(doc: int, pos: int, image_id: str, text: str = "", score: int | None = None) -> Element:
    return Element(doc, pos, ElementKind.IMAGE, text, image_id, score)


def image_record(image_id: str, phash: int | None = 0, size: int = 200) -> ImageRecord:
    return ImageRecord(image_id, ImageFormat.PNG, size, size, f"images/{image_id}.png", phash, "")


def make_kb(layout: list[list[tuple[str, int]]], aux_scores: list[int] = (), query_id: str = "q") -> KnowledgeBase:
    """layout: per document, a list of ('t'|'i', score)."""
    docs, images = [], {}
    n = 0
    for d, items in enumerate(layout):
        els = []
        for p, (kind, score) in enumerate(items):
            if kind == "i":
                iid = f"img{n:03d}"
                n += 1
                images[iid] = image_record(iid)
                els.append(image_el(d, p, iid, f"picture {iid}", score))
            else:
                els.append(text_el(d, p, f"{WORDS[(d + p) % len(WORDS)]} paragraph {d}.{p}.", score))
        docs.append(Document(d, f"https://example.org/{d}", tuple(els)))
    aux = []
    for p, score in enumerate(aux_scores):
        iid = f"img{n:03d}"
        n += 1
        images[iid] = image_record(iid)
        aux.append(image_el(AUX, p, iid, f"aux picture {iid}", score))
    return KnowledgeBase(query_id, tuple(docs), tuple(aux), images)


@st.composite
def scored_kbs(draw, max_docs: int = 4, max_elems: int = 12, max_aux: int = 8):
    n_docs = draw(st.integers(0, max_docs))
    layout = []
    for _ in range(n_docs):
        n = draw(st.integers(1, max_elems))
        layout.append([(draw(st.sampled_from("tti")), draw(st.integers(0, 10))) for _ in range(n)])
    aux = draw(st.lists(st.integers(0, 10), max_size=max_aux))
    return make_kb(layout, aux)


# Element lists that render to markdown: text in documents, images anywhere.
safe_text = st.text(alphabet=st.sampled_from("abcdefghij klmnop.,?"), min_size=1, max_size=40).filter(
    lambda s: s.strip() != "")


@st.composite
def element_lists(draw):
    n_docs = draw(st.integers(0, 3))
    out: list[Element] = []
    n = 0
    for d in range(n_docs):
        for p in range(draw(st.integers(1, 6))):
            if draw(st.booleans()):
                out.append(image_el(d, p, f"img{n}", draw(safe_text)))
                n += 1
            else:
                out.append(text_el(d, p, draw(safe_text)))
    for p in range(draw(st.integers(0, 4))):
        out.append(image_el(AUX, p, f"img{n}", draw(safe_text)))
        n += 1
    return out


# -- pipeline runs ----------------------------------------------------------------------

FULL_RUN = ("curate", "score", "retrieve", "generate", "evaluate", "export-train")


def run_full_pipeline(config_path, root):
    """Run every record-producing stage on ``root``; returns the stage results."""
    from m2rag.config import load_config
    from m2rag.stages import Pipeline

    pipe = Pipeline(load_config(config_path, root=root))
    results = {}
    for stage in FULL_RUN:
        if stage == "generate":
            from m2rag.document import Strategy

            for s in Strategy:
                results[f"generate-{s.value}"] = pipe.run(stage, strategy=s)
        else:
            results[stage] = pipe.run(stage)
    return results


def tree_bytes(root):
    """Relative path -> bytes for every file under root, lock and stamps excluded."""
    from pathlib import Path

    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != ".lock"}
