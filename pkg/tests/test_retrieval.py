import hashlib
import re

import pytest
from hypothesis import given, settings

from helpers import image_el, make_kb, scored_kbs, text_el
from m2rag.backends import BackendConfig, Rule, ScriptedBackend, scripted_mock
from m2rag.document import AUX, KnowledgeBase, Query
from m2rag.retrieval import (
    RetrievalConfig,
    ScoredKnowledgeBase,
    key_images,
    score_element,
    score_knowledge_base,
    select_in_doc,
)
from oracles import oracle_select

Q = Query("q", "How do I repot a plant?")


def _spec(kb: KnowledgeBase) -> list[dict]:
    return [{"doc": e.doc_index, "pos": e.position, "image": e.is_image, "score": e.relevance_score}
            for e in kb.elements()]


def test_score_text_element():
    judge = scripted_mock([("re:.", "relevant\n8")])
    assert score_element(Q, text_el(0, 0, "Use fresh soil."), judge).score == 8


def test_image_score_is_clamped():
    judge = scripted_mock([("re:.", "11")], BackendConfig("j", supports_images=True))
    s = score_element(Q, image_el(0, 1, "img"), judge)
    assert (s.score, s.clamped) == (10, True)
    assert judge.requests[0].image_attachments == ("img",)


def test_text_only_judge_uses_description():
    judge = scripted_mock([("re:.", "5")])
    score_element(Q, image_el(0, 1, "img", "a clay pot"), judge)
    assert "a clay pot" in judge.requests[0].user_text
    with pytest.raises(ValueError):
        score_element(Q, image_el(0, 1, "img", ""), judge)


def _rule_score(text: str) -> int:
    return int(hashlib.sha256(text.encode()).hexdigest(), 16) % 11


def test_rule_table_scores_match():
    kb = make_kb([[("t", 0)] * 5 + [("i", 0)], [("t", 0)] * 4 + [("i", 0)]], [0])
    assert sum(1 for _ in kb.elements()) == 12
    rules = []
    for el in kb.elements():
        reply = [f"table\n{_rule_score(el.text)}"]
        if el.is_image:
            # the judge sees the attachment, not the caption
            rules.append(Rule(".", reply, "regex", attachment=f"^{el.image_ref}$"))
        else:
            rules.append(Rule(re.escape(el.text), reply, "regex"))
    judge = ScriptedBackend(rules, BackendConfig("j", supports_images=True))
    skb, clamped = score_knowledge_base(Q, kb.map_elements(lambda e: e.with_score(None)), judge, judge)
    assert {e.ref: e.relevance_score for e in skb.kb.elements()} == {e.ref: _rule_score(e.text) for e in kb.elements()}
    assert clamped == []


def test_scored_kb_requires_scores():
    with pytest.raises(ValueError):
        ScoredKnowledgeBase(make_kb([[("t", None)]]))


def test_top_k_in_document_order():
    kb = make_kb([[("t", 9), ("t", 5), ("t", 1)]])
    out = select_in_doc(kb, RetrievalConfig(k=2))
    assert [e.ref for e in out] == [(0, 0), (0, 1)]


def test_image_caps_with_all_tens():
    kb = make_kb([[("i", 10)] * 4, [("i", 10)] * 4], [10] * 4)
    out = select_in_doc(kb, RetrievalConfig())
    web = [e for e in out if e.is_image and not e.is_aux]
    aux = [e for e in out if e.is_aux]
    assert len(web) == 5 and len(aux) == 4 and len(web) + len(aux) <= 10


def test_context_neighbours_do_not_consume_k():
    kb = make_kb([[("t", 0), ("i", 10), ("t", 0), ("t", 9)]])
    out = select_in_doc(kb, RetrievalConfig(k=1))
    assert [e.ref for e in out] == [(0, 0), (0, 1), (0, 2)]


def test_aux_images_last():
    kb = make_kb([[("t", 1)]], [10])
    assert [e.ref for e in select_in_doc(kb)] == [(0, 0), (AUX, 0)]


@settings(max_examples=150, deadline=None)
@given(scored_kbs())
def test_select_matches_brute_force_oracle(kb):
    cfg = RetrievalConfig(k=7, max_web_images=2, max_aux_images=2, max_total_images=3)
    got = [e.ref for e in select_in_doc(kb, cfg)]
    assert got == oracle_select(_spec(kb), 7, 2, 2, 3)


def test_key_images_threshold():
    kb = make_kb([[("i", 7), ("i", 6)]], [10])
    assert key_images(kb) == {(0, 0), (AUX, 0)}
    assert key_images(make_kb([[("i", 6), ("t", 9)]])) == set()


@settings(max_examples=50, deadline=None)
@given(scored_kbs())
def test_key_images_filter_oracle(kb):
    assert key_images(kb) == {e.ref for e in kb.elements() if e.is_image and e.relevance_score >= 7}


def test_config_invariants():
    with pytest.raises(ValueError):
        RetrievalConfig(k=0)
    with pytest.raises(ValueError):
        RetrievalConfig(max_total_images=3)


def test_empty_kb_gives_empty_selection():
    assert select_in_doc(KnowledgeBase("q")) == []
