import json

import pytest
from hypothesis import given, settings

from helpers import element_lists, image_el, make_kb, text_el
from m2rag.document import (
    AUX,
    Document,
    InvariantError,
    KnowledgeBase,
    MissingDescription,
    ParseError,
    Query,
    Record,
    RenderMode,
    SegmentKind,
    Strategy,
    kb_from_dict,
    kb_to_dict,
    order_key,
    parse_response_markdown,
    read_jsonl,
    read_record,
    render_context_markdown,
    response_from_dict,
    response_to_dict,
    write_record,
)


def expected_slots(elements):
    return [(el.ref, " ".join(el.text.split())) for el in sorted(elements, key=order_key) if el.is_image]


@settings(max_examples=200, deadline=None)
@given(element_lists())
def test_render_parse_round_trip(elements):
    rendered = render_context_markdown(elements, RenderMode.DESCRIBED)
    resp = parse_response_markdown(rendered.context_markdown, rendered.url_table)
    got = [(s.element_ref, s.text) for s in resp.segments if s.kind is SegmentKind.IMAGE_SLOT]
    assert got == expected_slots(elements)
    assert resp.dropped_refs == 0


@settings(max_examples=100, deadline=None)
@given(element_lists())
def test_to_markdown_is_stable(elements):
    rendered = render_context_markdown(elements, RenderMode.DESCRIBED)
    resp = parse_response_markdown(rendered.context_markdown, rendered.url_table)
    again = parse_response_markdown(resp.to_markdown(), {f"<IMG_{i}>": r for i, r in enumerate(resp.image_refs)})
    assert again.segments == resp.segments


def test_unknown_and_duplicate_references_are_dropped():
    table = {"<IMG_0>": (0, 1), "<IMG_1>": (AUX, 0)}
    raw = "Intro.\n\n![a](<IMG_0>)\n\nMiddle ![b](<IMG_7>) text.\n\n![again](<IMG_0>)\n\n![c](IMG_1)\nEnd."
    resp = parse_response_markdown(raw, table, query_id="q", strategy=Strategy.SINGLE)
    assert resp.image_refs == [(0, 1), (AUX, 0)]
    assert resp.dropped_refs == 2
    assert "IMG_7" not in resp.text
    # adjacent text around a dropped reference is merged into one segment
    kinds = [s.kind for s in resp.segments]
    assert kinds == [SegmentKind.TEXT, SegmentKind.IMAGE_SLOT, SegmentKind.TEXT, SegmentKind.IMAGE_SLOT, SegmentKind.TEXT]


def test_ordinary_image_urls_stay_as_text():
    resp = parse_response_markdown("See ![x](https://e.org/a.png) here.", {"<IMG_0>": (0, 0)})
    assert resp.image_refs == []
    assert resp.dropped_refs == 0
    assert "https://e.org/a.png" in resp.text


def test_zero_slots_is_valid():
    resp = parse_response_markdown("Plain answer.", {})
    assert resp.image_refs == [] and resp.text == "Plain answer."


def test_attached_mode_lists_attachments_in_slot_order():
    els = [image_el(AUX, 0, "aux0", "x"), text_el(0, 0), image_el(0, 1, "web1", "y")]
    r = render_context_markdown(els, RenderMode.ATTACHED)
    assert r.attachments == ("web1", "aux0")
    assert r.url_table == {"<IMG_0>": (0, 1), "<IMG_1>": (AUX, 0)}
    assert r.context_markdown.index("## Document 1") < r.context_markdown.index("## Additional images")


def test_described_mode_needs_descriptions():
    with pytest.raises(MissingDescription):
        render_context_markdown([image_el(0, 0, "i", "")], RenderMode.DESCRIBED)


def test_element_invariants():
    with pytest.raises(InvariantError):
        text_el(-2, 0)
    with pytest.raises(InvariantError):
        text_el(0, 0, score=11)
    with pytest.raises(InvariantError):
        Document(0, "u", (text_el(0, 2), text_el(0, 1)))
    with pytest.raises(InvariantError):
        KnowledgeBase("q", (), (text_el(AUX, 0),))
    with pytest.raises(ValueError):
        Query("q", "")


def test_record_round_trip_preserves_unknown_fields(tmp_path):
    kb = make_kb([[("t", 3), ("i", 8)]], [5])
    path = tmp_path / "rec.json"
    write_record(Record(Query("q", "Why?"), kb, {"future_field": [1, 2]}), path)
    q, kb2 = read_record(path)
    assert kb2 == kb and q.text == "Why?"
    assert json.loads(path.read_text())["future_field"] == [1, 2]
    assert kb_from_dict(kb_to_dict(kb)) == kb


def test_response_round_trip():
    resp = parse_response_markdown("A ![d](<IMG_0>) B", {"<IMG_0>": (1, 2)}, query_id="q", strategy=Strategy.MULTI)
    assert response_from_dict(response_to_dict(resp)) == resp


def test_jsonl_parse_error_carries_line(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"a": 1}\n{broken\n')
    with pytest.raises(ParseError) as exc:
        read_jsonl(p)
    assert exc.value.line == 2
