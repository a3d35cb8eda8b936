"""Pipeline stages that communicate only through the dataset layout.

Every stage reads its predecessors' record files, writes its own, and leaves
an idempotence stamp in ``.stages/``.  Re-running a stage whose config,
inputs and outputs are unchanged is a no-op.
"""

from __future__ import annotations

import fcntl
import logging
import statistics
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

from .backends import BackendError, CostLedger, ModelBackend, UnscriptedRequest
from .config import EngineConfig, build_backends
from .curation import FixtureCrawler, QueryDecision, classify_query, curate_query, filter_query
from .dataset import Dataset, file_digest, payload_digest
from .document import (
    Element,
    ElementRef,
    Query,
    Record,
    Strategy,
    atomic_write_text,
    dumps,
    element_from_dict,
    element_to_dict,
    query_from_dict,
    query_to_dict,
    response_from_dict,
    response_to_dict,
)
from .evaluation import (
    METRIC_FIELDS,
    EvaluationError,
    MetricReport,
    TrainingCandidate,
    export_training,
    filter_training_samples,
    meta_eval,
    meta_eval_repeated,
    read_annotations,
    round_half_up,
)
from .evaluation.metrics import evaluate_response
from .generation import DescriptionCache, DescriptionError, StrategyConfig, attach_descriptions, generate
from .judge import JudgeProtocolError
from .retrieval import key_images, score_knowledge_base, select_in_doc
from .stats import compute_stats

logger = logging.getLogger(__name__)

STAGES = ("curate", "score", "retrieve", "generate", "evaluate", "export-train", "stats", "meta-eval")

# Errors that fail one record without aborting the stage.
RECORD_ERRORS = (JudgeProtocolError, BackendError, EvaluationError, DescriptionError, UnscriptedRequest, ValueError)


class PreconditionError(RuntimeError):
    def __init__(self, stage: str, detail: str = ""):
        super().__init__(f"stage {stage!r} has not been run" + (f": {detail}" if detail else ""))
        self.stage = stage


class LockBusy(RuntimeError):
    pass


@dataclass
class StageResult:
    stage: str
    skipped: bool = False
    dry_run: bool = False
    processed: list[str] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    summary: Any = None

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0


# -- small helpers ---------------------------------------------------------------------


def _strategy_names(strategy: Strategy) -> tuple[str, str]:
    return f"responses-{strategy.value}", f"reports-{strategy.value}"


def _merge(old: Sequence[dict], new: Sequence[dict], order: Sequence[str], key: Callable[[dict], str]) -> list[dict]:
    """Replace rows for re-processed queries, keep the rest, in input order."""
    by_id = {key(r): r for r in old}
    by_id.update({key(r): r for r in new})
    seen = [q for q in order if q in by_id]
    return [by_id[q] for q in seen]


def _row_qid(row: dict) -> str:
    return row["query"]["id"]


def _ref(x: Sequence[int]) -> ElementRef:
    return (int(x[0]), int(x[1]))


@contextmanager
def dataset_lock(root: Path) -> Iterator[None]:
    root.mkdir(parents=True, exist_ok=True)
    path = root / ".lock"
    with path.open("a") as fh:
        try:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise LockBusy(f"another stage is running on {root}") from None
        try:
            yield
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


# -- the runner ------------------------------------------------------------------------


class Pipeline:
    def __init__(self, cfg: EngineConfig, *, backends: dict[str, ModelBackend] | None = None,
                 ledger: CostLedger | None = None):
        self.cfg = cfg
        self.ds = Dataset(cfg.root)
        self.ledger = ledger if ledger is not None else CostLedger()
        self._backends = backends

    # backends are built lazily so dry runs and no-op stages never touch them
    @property
    def backends(self) -> dict[str, ModelBackend]:
        if self._backends is None:
            self._backends = build_backends(self.cfg, image_loader=self._load_image, ledger=self.ledger)
        return self._backends

    def _load_image(self, image_id: str) -> tuple[bytes, str]:
        matches = sorted(self.ds.images_dir.glob(f"{image_id}.*"))
        if not matches:
            raise FileNotFoundError(f"image {image_id} not in {self.ds.images_dir}")
        ext = matches[0].suffix.lstrip(".")
        return matches[0].read_bytes(), f"image/{'jpeg' if ext == 'jpg' else ext}"

    def _descriptions(self) -> DescriptionCache:
        return DescriptionCache(self.ds.root / "cache" / "descriptions.json")

    # -- idempotence

    def _stamp_path(self, name: str) -> Path:
        return self.ds.root / ".stages" / f"{name}.json"

    def _stamp(self, name: str, inputs: Sequence[Path], outputs: Sequence[Path], selectors: Any) -> dict:
        return {
            "config": payload_digest(self.cfg.fingerprint()),
            "inputs": file_digest(inputs),
            "outputs": file_digest(outputs),
            "selectors": selectors,
        }

    def _up_to_date(self, name: str, inputs: Sequence[Path], outputs: Sequence[Path], selectors: Any) -> bool:
        path = self._stamp_path(name)
        if not path.exists() or not all(p.exists() for p in outputs):
            return False
        import json

        return json.loads(path.read_text(encoding="utf-8")) == self._stamp(name, inputs, outputs, selectors)

    def _write_stamp(self, name: str, inputs: Sequence[Path], outputs: Sequence[Path], selectors: Any) -> None:
        atomic_write_text(self._stamp_path(name), dumps(self._stamp(name, inputs, outputs, selectors)) + "\n")

    def _require(self, name: str) -> Path:
        path = self.ds.record_path(name)
        if not path.exists():
            raise PreconditionError(producer_of(name), f"{path.relative_to(self.ds.root)} is missing")
        return path

    def _write_cost_report(self, stage: str, since: int) -> None:
        summary = self.ledger.summary(since)
        total = sum(v["cost"] for v in summary.values())
        self.ds.write_report(f"cost-{stage}.json", {"backends": summary, "total_cost": total})

    # -- dispatcher

    def run(self, stage: str, *, queries: Sequence[str] | None = None, strategy: Strategy | None = None,
            dry_run: bool = False, repeat: int = 1, annotations: Path | None = None) -> StageResult:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        fn = getattr(self, "_" + stage.replace("-", "_"))
        kwargs: dict[str, Any] = {"queries": list(queries) if queries else None, "dry_run": dry_run}
        if stage in ("generate", "evaluate", "export-train"):
            kwargs["strategy"] = strategy
        if stage == "meta-eval":
            kwargs = {"dry_run": dry_run, "repeat": repeat, "annotations": annotations}
        if dry_run:
            return fn(**kwargs)
        with dataset_lock(self.ds.root):
            return fn(**kwargs)

    def _guarded(self, name: str, inputs: list[Path], outputs: list[Path], selectors: Any,
                 dry_run: bool, result: StageResult, body: Callable[[], None]) -> StageResult:
        result.outputs = [str(p.relative_to(self.ds.root)) for p in outputs]
        if dry_run:
            result.dry_run = True
            return result
        if self._up_to_date(name, inputs, outputs, selectors):
            result.skipped = True
            return result
        since = len(self.ledger.entries)
        body()
        if not result.failures:
            self._write_stamp(name, inputs, outputs, selectors)
        self._write_cost_report(name, since)
        return result

    # -- curate

    def _curate(self, queries: list[str] | None, dry_run: bool) -> StageResult:
        if self.cfg.corpus is None or not (self.cfg.corpus / "crawl.json").exists():
            raise PreconditionError("curate", "config names no corpus with a crawl.json")
        crawler = FixtureCrawler(self.cfg.corpus)
        raw = [q for q in crawler.queries() if not queries or q.id in queries]
        result = StageResult("curate")
        out = self.ds.record_path("curated")
        inputs = crawler.input_files()

        def body() -> None:
            old = [r.to_dict() for r in self.ds.read_kb_records("curated")] if out.exists() else []
            new, report = [], {}
            for rq in raw:
                try:
                    topics: tuple[int, ...] = ()
                    if self.cfg.filter_queries:
                        verdict = filter_query(rq.text, self.backends["judge_text"], retries=self.cfg.judge_retries)
                        if verdict.decision is not QueryDecision.KEEP:
                            report[rq.id] = {"dropped": verdict.decision.value}
                            continue
                        topics = tuple(classify_query(rq.text, self.backends["judge_text"],
                                                      retries=self.cfg.judge_retries))
                    kb, stats = curate_query(rq, crawler, self.ds, self.cfg.curation)
                except RECORD_ERRORS as exc:
                    result.failures[rq.id] = f"{type(exc).__name__}: {exc}"
                    continue
                new.append(Record(Query(rq.id, rq.text, topics), kb).to_dict())
                report[rq.id] = {"documents": len(kb.documents), **vars(stats)}
                result.processed.append(rq.id)
            order = [q.id for q in crawler.queries()]
            rows = _merge(old, new, order, _row_qid)
            self.ds.write_kb_records("curated", [Record.from_dict(r) for r in rows])
            self.ds.write_report("curate.json", {"queries": report, "failures": result.failures})

        return self._guarded("curate", inputs, [out], queries, dry_run, result, body)

    # -- score

    def _score(self, queries: list[str] | None, dry_run: bool) -> StageResult:
        src = self._require("curated")
        out = self.ds.record_path("scored")
        result = StageResult("score")

        def body() -> None:
            records = self.ds.read_kb_records("curated")
            old = [r.to_dict() for r in self.ds.read_kb_records("scored")] if out.exists() else []
            judge_t, judge_i = self.backends["judge_text"], self.backends["judge_image"]
            cache = self._descriptions()
            new, clamped_report = [], {}
            for rec in records:
                if queries and rec.query.id not in queries:
                    continue
                try:
                    kb = rec.kb
                    if not judge_i.supports_images:
                        described = {el.ref: el for el in attach_descriptions(
                            [e for e in kb.elements() if e.is_image], kb, self.backends["describer"], cache=cache)}
                        kb = kb.map_elements(lambda el: described.get(el.ref, el))
                    skb, clamped = score_knowledge_base(rec.query, kb, judge_t, judge_i,
                                                        retries=self.cfg.judge_retries)
                except RECORD_ERRORS as exc:
                    result.failures[rec.query.id] = f"{type(exc).__name__}: {exc}"
                    continue
                extra = {**rec.extra, "clamped_refs": [list(r) for r in clamped]}
                new.append(Record(rec.query, skb.kb, extra).to_dict())
                clamped_report[rec.query.id] = len(clamped)
                result.processed.append(rec.query.id)
            cache.save()
            rows = _merge(old, new, [r.query.id for r in records], _row_qid)
            self.ds.write_kb_records("scored", [Record.from_dict(r) for r in rows])
            self.ds.write_report("score.json", {"clamped": clamped_report, "failures": result.failures})

        return self._guarded("score", [src], [out], queries, dry_run, result, body)

    # -- retrieve

    def _retrieve(self, queries: list[str] | None, dry_run: bool) -> StageResult:
        src = self._require("scored")
        out = self.ds.record_path("retrieved")
        result = StageResult("retrieve")

        def body() -> None:
            records = self.ds.read_kb_records("scored")
            old = self.ds.read_rows("retrieved") if out.exists() else []
            new, report = [], {}
            for rec in records:
                if queries and rec.query.id not in queries:
                    continue
                k_indoc = select_in_doc(rec.kb, self.cfg.retrieval)
                keys = sorted(key_images(rec.kb, self.cfg.retrieval))
                new.append({
                    "query": query_to_dict(rec.query),
                    "k_indoc": [element_to_dict(el) for el in k_indoc],
                    "key_refs": [list(r) for r in keys],
                })
                report[rec.query.id] = {
                    "selected": len(k_indoc),
                    "images": sum(1 for el in k_indoc if el.is_image),
                    "key_images": len(keys),
                }
                result.processed.append(rec.query.id)
            self.ds.write_rows("retrieved", _merge(old, new, [r.query.id for r in records], _row_qid))
            self.ds.write_report("retrieve.json", report)

        return self._guarded("retrieve", [src], [out], queries, dry_run, result, body)

    # -- generate

    def _generate(self, queries: list[str] | None, dry_run: bool, strategy: Strategy | None) -> StageResult:
        src = self._require("retrieved")
        scored = self._require("scored")
        strategy = strategy or self.cfg.strategy.strategy
        scfg: StrategyConfig = replace(self.cfg.strategy, strategy=strategy)
        name, _ = _strategy_names(strategy)
        out = self.ds.record_path(name)
        traces = self.ds.record_path(f"traces-{strategy.value}")
        result = StageResult(f"generate:{strategy.value}")

        def body() -> None:
            rows = self.ds.read_rows("retrieved")
            kbs = {r.query.id: r.kb for r in self.ds.read_kb_records("scored")}
            old = self.ds.read_rows(name) if out.exists() else []
            old_traces = self.ds.read_rows(traces.stem) if traces.exists() else []
            cache = self._descriptions()
            new, new_traces, report = [], [], {}
            for row in rows:
                query = query_from_dict(row["query"])
                if queries and query.id not in queries:
                    continue
                k_indoc = [element_from_dict(e) for e in row["k_indoc"]]
                try:
                    if scfg.describe_images:
                        k_indoc = attach_descriptions(k_indoc, kbs[query.id], self.backends["describer"], cache=cache)
                    response, trace = generate(query, k_indoc, self.backends["generator"], scfg)
                except RECORD_ERRORS as exc:
                    result.failures[query.id] = f"{type(exc).__name__}: {exc}"
                    continue
                new.append({
                    "query": row["query"],
                    "k_indoc": [element_to_dict(el) for el in k_indoc],
                    "key_refs": row["key_refs"],
                    "response": response_to_dict(response),
                })
                new_traces.append({"query": row["query"], "trace": trace.to_dict()})
                report[query.id] = {"images": len(response.image_refs), "dropped_refs": response.dropped_refs}
                result.processed.append(query.id)
            cache.save()
            order = [r["query"]["id"] for r in rows]
            self.ds.write_rows(name, _merge(old, new, order, _row_qid))
            self.ds.write_rows(traces.stem, _merge(old_traces, new_traces, order, _row_qid))
            self.ds.write_report(f"generate-{strategy.value}.json", {"queries": report, "failures": result.failures})

        return self._guarded(f"generate-{strategy.value}", [src, scored], [out, traces], queries, dry_run, result, body)

    # -- evaluate

    def _evaluated_strategies(self, strategy: Strategy | None, stage: str, prefix: str) -> list[Strategy]:
        if strategy is not None:
            return [strategy]
        found = [s for s in Strategy if self.ds.has(f"{prefix}-{s.value}")]
        if not found:
            raise PreconditionError("generate" if prefix == "responses" else "evaluate",
                                    f"no {prefix}-<strategy> records for {stage}")
        return found

    def _evaluate(self, queries: list[str] | None, dry_run: bool, strategy: Strategy | None) -> StageResult:
        result = StageResult("evaluate")
        summaries: dict[str, Any] = {}
        for strat in self._evaluated_strategies(strategy, "evaluate", "responses"):
            sub = self._evaluate_one(strat, queries, dry_run)
            result.failures.update({f"{strat.value}:{k}": v for k, v in sub.failures.items()})
            result.processed.extend(f"{strat.value}:{q}" for q in sub.processed)
            result.outputs.extend(sub.outputs)
            result.skipped = result.skipped or sub.skipped
            result.dry_run = dry_run
            summaries[strat.value] = sub.summary
        result.summary = summaries
        return result

    def _evaluate_one(self, strategy: Strategy, queries: list[str] | None, dry_run: bool) -> StageResult:
        name, out_name = _strategy_names(strategy)
        src = self._require(name)
        out = self.ds.record_path(out_name)
        transcripts = self.ds.record_path(f"transcripts-{strategy.value}")
        result = StageResult(f"evaluate:{strategy.value}")
        summary_path = self.ds.reports_dir / f"evaluate-{strategy.value}.json"

        def body() -> None:
            rows = self.ds.read_rows(name)
            old = self.ds.read_rows(out_name) if out.exists() else []
            old_tr = self.ds.read_rows(transcripts.stem) if transcripts.exists() else []
            judge_t, judge_i = self.backends["judge_text"], self.backends["judge_image"]
            new, new_tr = [], []
            for row in rows:
                query = query_from_dict(row["query"])
                if queries and query.id not in queries:
                    continue
                k_indoc = [element_from_dict(e) for e in row["k_indoc"]]
                response = response_from_dict(row["response"])
                keys = [_ref(r) for r in row["key_refs"]]
                try:
                    report = evaluate_response(query, k_indoc, response, keys, judge_t, judge_i,
                                               retries=self.cfg.judge_retries)
                except RECORD_ERRORS as exc:
                    result.failures[query.id] = f"{type(exc).__name__}: {exc}"
                    continue
                d = report.to_dict(transcripts=False)
                d["transcript_ref"] = f"records/{transcripts.name}#{query.id}"
                new.append(d)
                new_tr.append({"query_id": query.id, "transcripts": report.judge_transcripts})
                result.processed.append(query.id)
            order = [r["query"]["id"] for r in rows]
            merged = _merge(old, new, order, lambda r: r["query_id"])
            self.ds.write_rows(out_name, merged)
            self.ds.write_rows(transcripts.stem, _merge(old_tr, new_tr, order, lambda r: r["query_id"]))
            self.ds.write_report(summary_path.name, {"strategy": strategy.value, "mean": mean_report(merged),
                                                     "n": len(merged), "failures": result.failures})

        res = self._guarded(f"evaluate-{strategy.value}", [src], [out, transcripts], queries, dry_run, result, body)
        if summary_path.exists() and not dry_run:
            import json

            res.summary = json.loads(summary_path.read_text(encoding="utf-8"))
        return res

    # -- export-train

    def _export_train(self, queries: list[str] | None, dry_run: bool, strategy: Strategy | None) -> StageResult:
        strategies = self._evaluated_strategies(strategy, "export-train", "reports")
        inputs: list[Path] = []
        for s in strategies:
            resp_name, rep_name = _strategy_names(s)
            inputs += [self._require(resp_name), self._require(rep_name)]
        out = self.ds.record_path("train")
        result = StageResult("export-train")
        selectors = {"queries": queries, "strategies": [s.value for s in strategies]}

        def body() -> None:
            candidates = []
            for s in strategies:
                resp_name, rep_name = _strategy_names(s)
                reports = {r["query_id"]: MetricReport.from_dict(r) for r in self.ds.read_rows(rep_name)}
                for row in self.ds.read_rows(resp_name):
                    qid = row["query"]["id"]
                    if (queries and qid not in queries) or qid not in reports:
                        continue
                    candidates.append(TrainingCandidate(
                        query_from_dict(row["query"]),
                        [element_from_dict(e) for e in row["k_indoc"]],
                        response_from_dict(row["response"]),
                        reports[qid],
                    ))
            kept = filter_training_samples(candidates, self.cfg.thresholds)
            export_training(self.ds, kept)
            result.processed = [f"{c.response.strategy.value}:{c.query.id}" for c in kept]
            self.ds.write_report("export-train.json", {
                "candidates": len(candidates), "kept": len(kept), "thresholds": dict(sorted(self.cfg.thresholds.items())),
            })

        return self._guarded("export-train", inputs, [out], selectors, dry_run, result, body)

    # -- stats

    def _stats(self, queries: list[str] | None, dry_run: bool) -> StageResult:
        name = "scored" if self.ds.has("scored") else "curated"
        src = self._require(name) if self.ds.root.exists() else None
        result = StageResult("stats")
        if src is None:
            raise PreconditionError("curate", "dataset root does not exist")
        kbs = [r.kb for r in self.ds.read_kb_records(name) if not queries or r.query.id in queries]
        stats = compute_stats(kbs)
        result.summary = stats
        result.processed = [kb.query_id for kb in kbs]
        if dry_run:
            result.dry_run = True
            return result
        self.ds.write_report("stats.json", {k: [r.to_dict() for r in v] for k, v in stats.items()})
        result.outputs = ["reports/stats.json"]
        return result

    # -- meta-eval

    def _meta_eval(self, dry_run: bool, repeat: int, annotations: Path | None) -> StageResult:
        path = annotations or self.cfg.annotations
        if path is None or not Path(path).exists():
            raise PreconditionError("meta-eval", "no annotation file (set `annotations` in the config or pass --annotations)")
        ann = read_annotations(path)
        if len(ann.model_columns) < max(1, repeat):
            raise ValueError(f"--repeat {repeat} needs {repeat} model columns, found {len(ann.model_columns)}")
        cols = ann.model_columns[: max(1, repeat)]
        summary = meta_eval(ann, cols[0]) if repeat <= 1 else meta_eval_repeated(ann, cols)
        summary = {k: {m: round(v, 6) for m, v in d.items()} for k, d in summary.items()}
        result = StageResult("meta-eval", summary={"model_columns": list(cols), **summary})
        if dry_run:
            result.dry_run = True
            return result
        self.ds.write_report("meta-eval.json", result.summary)
        result.outputs = ["reports/meta-eval.json"]
        return result


def producer_of(record_name: str) -> str:
    """The stage whose output a record file is."""
    fixed = {"curated": "curate", "scored": "score", "retrieved": "retrieve", "train": "export-train"}
    if record_name in fixed:
        return fixed[record_name]
    prefix = record_name.split("-", 1)[0]
    return {"responses": "generate", "traces": "generate", "reports": "evaluate", "transcripts": "evaluate"}[prefix]


def mean_report(rows: Sequence[dict]) -> dict[str, float | None]:
    """Per-metric mean over report rows (Table-2 style), half-up to 1 decimal."""
    out: dict[str, float | None] = {}
    for f in (*METRIC_FIELDS, "overall"):
        vals = [r[f] for r in rows if r.get(f) is not None]
        out[f] = round_half_up(statistics.fmean(vals)) if vals else None
    return out


def key_refs_of(row: dict) -> set[ElementRef]:
    return {_ref(r) for r in row.get("key_refs", [])}


def k_indoc_of(row: dict) -> list[Element]:
    return [element_from_dict(e) for e in row["k_indoc"]]
