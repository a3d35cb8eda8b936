"""Primary acceptance criteria, one PASS/FAIL line each.

Run alone with ``pytest tests/test_acceptance.py -v`` (lines are echoed in the
"acceptance criteria" section of the summary) or ``python3 tests/test_acceptance.py``.
"""

import json
import random
import time
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings

from conftest import FIXTURES, block_network
from helpers import element_lists, image_record, make_kb, run_full_pipeline
from m2rag.curation import DedupConfig, DedupItem, dedup_images, hamming, phash_bytes
from m2rag.document import RenderMode, SegmentKind, order_key, parse_response_markdown, render_context_markdown
from m2rag.evaluation import MetricReport, TrainingCandidate, filter_training_samples, overall_score, spearman
from m2rag.retrieval import RetrievalConfig, select_in_doc
from oracles import oracle_select, oracle_spearman
from test_curation import ORACLE_HASHES
from test_stages import FIXTURE_STATS, stats_oracle

ENGINE = FIXTURES / "engine.yaml"
IMAGES = FIXTURES / "corpus" / "img"


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    roots, seconds = [], []
    with pytest.MonkeyPatch.context() as mp:
        attempts = block_network(mp)
        for i in range(2):
            root = tmp_path_factory.mktemp(f"accept{i}") / "root"
            t0 = time.perf_counter()
            results = run_full_pipeline(ENGINE, root)
            seconds.append(time.perf_counter() - t0)
            assert all(r.exit_code == 0 for r in results.values())
            roots.append(root)
    return roots, seconds, attempts


def _artifacts(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for sub in ("records", "reports") for p in sorted((root / sub).rglob("*")) if p.is_file()}


# 1
def test_overall_score_arithmetic(acceptance):
    rows = [((82.5, 87.5, 96.6, 81.8, 73.3, 65.8, 81.5, 100.0), 83.6),
            ((83.8, 88.6, 98.4, 83.1, 73.4, 64.5, 78.5, 99.9), 83.8)]
    t0 = time.perf_counter()
    got = [overall_score(list(v)) for v, _ in rows]
    elapsed = time.perf_counter() - t0
    ok = got == [want for _, want in rows] and elapsed < 1e-3
    assert acceptance("overall-score arithmetic", ok, f"got {got}, {elapsed * 1e3:.3f} ms")


# 2
def _random_kb(rng: random.Random):
    layout = [[(rng.choice("tti"), rng.randint(0, 10)) for _ in range(rng.randint(1, 16))]
              for _ in range(rng.randint(0, 5))]
    return make_kb(layout, [rng.randint(0, 10) for _ in range(rng.randint(0, 9))])


def test_retrieval_defaults(acceptance):
    rng = random.Random(2024)
    cfg = RetrievalConfig()
    assert (cfg.k, cfg.max_web_images, cfg.max_aux_images, cfg.max_total_images) == (20, 5, 5, 10)
    kbs = [_random_kb(rng) for _ in range(50)]
    t0 = time.perf_counter()
    mismatches = caps = 0
    for kb in kbs:
        out = select_in_doc(kb, cfg)
        spec = [{"doc": e.doc_index, "pos": e.position, "image": e.is_image, "score": e.relevance_score}
                for e in kb.elements()]
        mismatches += [e.ref for e in out] != oracle_select(spec, 20, 5, 5, 10)
        web = sum(e.is_image and not e.is_aux for e in out)
        aux = sum(e.is_aux for e in out)
        caps += web > 5 or aux > 5 or web + aux > 10
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and caps == 0 and elapsed < 5
    assert acceptance("retrieval defaults", ok, f"{mismatches} oracle mismatches, {caps} cap violations, {elapsed:.2f} s")


# 3
def test_recall_saturation(acceptance, two_runs):
    root = two_runs[0][0]
    rows = [json.loads(l) for l in (root / "records" / "reports-multi.jsonl").read_text().splitlines()]
    recalls = {r["query_id"]: r["image_recall"] for r in rows}
    ok = len(recalls) == 3 and all(v == 100.0 for v in recalls.values())
    assert acceptance("recall saturation", ok, f"multi-stage image_recall {recalls}")


# 4
def test_markdown_round_trip(acceptance):
    seen = []

    @settings(max_examples=200, derandomize=True, database=None, deadline=None,
              suppress_health_check=list(HealthCheck))
    @given(element_lists())
    def check(elements):
        seen.append(1)
        rendered = render_context_markdown(elements, RenderMode.DESCRIBED)
        resp = parse_response_markdown(rendered.context_markdown, rendered.url_table)
        got = [(s.element_ref, s.text) for s in resp.segments if s.kind is SegmentKind.IMAGE_SLOT]
        want = [(e.ref, " ".join(e.text.split())) for e in sorted(elements, key=order_key) if e.is_image]
        assert got == want and resp.dropped_refs == 0

    failure = ""
    try:
        check()
    except AssertionError as exc:
        failure = str(exc).splitlines()[0]
    table = {"<IMG_0>": (0, 1), "<IMG_1>": (-1, 0)}
    bad = parse_response_markdown("a ![x](<IMG_0>) b ![y](<IMG_7>) c ![z](<IMG_0>) d ![w](<IMG_1>)", table)
    drops_ok = bad.dropped_refs == 2 and bad.image_refs == [(0, 1), (-1, 0)]
    ok = not failure and len(seen) >= 200 and drops_ok
    detail = f"{len(seen)} generated lists, drop count {bad.dropped_refs}" + (f", {failure}" if failure else "")
    assert acceptance("markdown round-trip", ok, detail)


# 5
def test_phash_dedup(acceptance):
    names = sorted(ORACLE_HASHES)
    hashes = {n: phash_bytes((IMAGES / n).read_bytes()) for n in names}
    matches_oracle = all(f"{hashes[n]:016x}" == ORACLE_HASHES[n] for n in names)
    exact = []
    for n in names:
        data = (IMAGES / n).read_bytes()
        pair = [DedupItem(image_record("a", phash_bytes(data)), None, (0, 0)),
                DedupItem(image_record("b", phash_bytes(data)), None, (0, 1))]
        exact.append(len(dedup_images(pair)) == 1)
    copy_dist = hamming(int(ORACLE_HASHES["root_ball.png"], 16), int(ORACLE_HASHES["root_ball_copy.jpg"], 16))
    items = [DedupItem(image_record(n, hashes[n]), (i * 3) % 11, (i % 3, i)) for i, n in enumerate(names)]
    base = {k.image.image_id for k in dedup_images(items, DedupConfig())}
    rng = random.Random(11)
    stable = True
    for _ in range(20):
        shuffled = items[:]
        rng.shuffle(shuffled)
        stable &= {k.image.image_id for k in dedup_images(shuffled, DedupConfig())} == base
    ok = matches_oracle and all(exact) and copy_dist <= 10 and stable
    assert acceptance("pHash dedup", ok, f"oracle hashes {'match' if matches_oracle else 'differ'}, "
                                         f"re-encode distance {copy_dist}, survivors stable over 20 shuffles: {stable}")


# 6
def test_spearman(acceptance):
    rng = random.Random(99)
    worst = 0.0
    n = 0
    while n < 100:
        size = rng.randint(2, 10)
        xs = [rng.randint(0, 5) for _ in range(size)]
        ys = [rng.randint(0, 5) for _ in range(size)]
        if len(set(xs)) < 2 or len(set(ys)) < 2:
            continue
        worst = max(worst, abs(spearman(xs, ys) - oracle_spearman(xs, ys)))
        n += 1
    v = [3, 1, 4, 1, 5, 9, 2, 6]
    ident, rev = spearman(v, v), spearman([1, 2, 3, 4, 5], [5, 4, 3, 2, 1])
    ok = worst <= 1e-9 and abs(ident - 1.0) <= 1e-9 and abs(rev + 1.0) <= 1e-9
    assert acceptance("Spearman", ok, f"max deviation {worst:.2e}, identical {ident}, reversed {rev}")


# 7
def test_end_to_end_determinism(acceptance, two_runs):
    (a, b), seconds, attempts = two_runs
    fa, fb = _artifacts(a), _artifacts(b)
    diff = sorted(k for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k))
    ok = not diff and attempts == [] and max(seconds) < 60 and len(fa) > 10
    assert acceptance("end-to-end determinism", ok,
                      f"{len(fa)} artifacts, {len(diff)} differ, {len(attempts)} network attempts, "
                      f"slowest run {max(seconds):.1f} s")


# 8
MM = ("coherence", "helpfulness", "reference", "image_recall")
TEN = [(80, 70, 90, 100), (69.9, 90, 90, 100), (70, 60, 70, 90), (90, 59.9, 80, 100), (75, 65, 69.9, 95),
       (100, 100, 100, 89.9), (70, 60, 70, 89.9), (95, 85, 75, 100), (0, 0, 0, 0), (71, 61, 71, 91)]


def test_training_filter_monotonicity(acceptance):
    from m2rag.document import Query, Strategy

    recs = []
    for i, vals in enumerate(TEN):
        rep = MetricReport(f"q{i}", "multi", 50.0, 50.0, 50.0, 50.0, *vals)
        resp = parse_response_markdown("x", {}, query_id=f"q{i}", strategy=Strategy.MULTI)
        recs.append(TrainingCandidate(Query(f"q{i}", "Why?"), [], resp, rep))

    def kept(th):
        return {r.query.id for r in filter_training_samples(recs, dict(zip(MM, th)))}

    rng = random.Random(5)
    violations = 0
    for _ in range(300):
        th = [rng.choice([0, 40, 59.9, 60, 70, 89.9, 90, 100, 101]) for _ in MM]
        base = kept(th)
        for j in range(4):
            up = th[:]
            up[j] += rng.choice([0.1, 1, 10, 50])
            violations += not kept(up) <= base
    everything = kept((0, 0, 0, 0)) == {r.query.id for r in recs}
    nothing = kept((101, 101, 101, 101)) == set()
    ok = violations == 0 and everything and nothing
    assert acceptance("training-filter monotonicity", ok,
                      f"{violations} growth violations over 1200 raises, zeros keep all: {everything}, 101 keeps none: {nothing}")


# 9
def test_stats_oracle(acceptance, two_runs):
    from m2rag.config import load_config
    from m2rag.stages import Pipeline

    root = two_runs[0][0]
    rows = [json.loads(l) for l in (root / "records" / "scored.jsonl").read_text().splitlines()]
    res = Pipeline(load_config(ENGINE, root=root)).run("stats")
    got = [(r.avg, r.std) for r in res.summary["counts"] + res.summary["scores"]]
    ok = got == stats_oracle(rows) == FIXTURE_STATS
    assert acceptance("stats", ok, f"{len(got)} rows, got {got}")


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(pytest.main([__file__, "-q"]))
