"""Deterministic scripted backend for tests and offline pipeline runs.

A script is an ordered list of rules.  The first rule whose matcher accepts
the request's ``user_text`` fires.  A rule's outcomes are consumed in order
(the last one repeats), so ``[FAIL, "ok"]`` models a transient failure
followed by success.  Outcomes may be literal strings, ``FAIL`` or a callable
taking the request.
"""

from __future__ import annotations

import hashlib
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence, Union

import yaml

from .base import BackendConfig, CompletionRequest, CostLedger, ModelBackend, TransientBackendError, count_tokens

FAIL = object()
Outcome = Union[str, Callable[[CompletionRequest], str], object]


class UnscriptedRequest(LookupError):
    def __init__(self, backend: str, request: CompletionRequest):
        super().__init__(f"{backend}: no scripted rule matches request:\n{request.user_text}")
        self.request = request


@dataclass
class Rule:
    match: str
    outcomes: Sequence[Outcome]
    kind: str = "exact"  # exact | prefix | regex
    attachment: str | None = None  # optional regex over attachment ids
    _next: int = field(default=0, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in ("exact", "prefix", "regex"):
            raise ValueError(f"unknown matcher kind {self.kind!r}")
        if isinstance(self.outcomes, str) or callable(self.outcomes):
            self.outcomes = [self.outcomes]
        if not self.outcomes:
            raise ValueError("rule needs at least one outcome")
        self._pattern = re.compile(self.match, re.DOTALL) if self.kind == "regex" else None
        self._attach = re.compile(self.attachment) if self.attachment else None

    def matches(self, request: CompletionRequest) -> bool:
        text = request.user_text
        if self.kind == "exact":
            ok = text == self.match
        elif self.kind == "prefix":
            ok = text.startswith(self.match)
        else:
            ok = self._pattern.search(text) is not None  # type: ignore[union-attr]
        if ok and self._attach is not None:
            ok = any(self._attach.search(a) for a in request.image_attachments)
        return ok

    def take(self) -> Outcome:
        out = self.outcomes[min(self._next, len(self.outcomes) - 1)]
        self._next += 1
        return out


class ScriptedBackend(ModelBackend):
    def __init__(self, rules: Sequence[Rule], config: BackendConfig | None = None, *,
                 ledger: CostLedger | None = None, **kw):
        cfg = config or BackendConfig(name="scripted", retry_budget=0, backoff_base_s=0.0)
        super().__init__(cfg, ledger=ledger, **kw)
        self.rules = list(rules)
        self.requests: list[CompletionRequest] = []
        self._lock = threading.Lock()

    def _send(self, request: CompletionRequest) -> tuple[str, int, int]:
        with self._lock:
            self.requests.append(request)
            for rule in self.rules:
                if rule.matches(request):
                    outcome = rule.take()
                    break
            else:
                raise UnscriptedRequest(self.name, request)
        if outcome is FAIL:
            raise TransientBackendError("scripted failure")
        text = outcome(request) if callable(outcome) else str(outcome)
        return text, count_tokens(request.system_text + " " + request.user_text), count_tokens(text)


def scripted_mock(script: Sequence[tuple[str, Any] | Rule], config: BackendConfig | None = None, **kw) -> ScriptedBackend:
    """Build a backend from ``(matcher, reply)`` pairs or ready ``Rule`` objects.

    A bare string matcher is exact; ``"re:..."`` and ``"prefix:..."`` select
    the other matcher kinds.
    """
    rules = []
    for item in script:
        if isinstance(item, Rule):
            rules.append(item)
            continue
        matcher, reply = item
        kind = "exact"
        if matcher.startswith("re:"):
            kind, matcher = "regex", matcher[3:]
        elif matcher.startswith("prefix:"):
            kind, matcher = "prefix", matcher[7:]
        rules.append(Rule(matcher, reply if isinstance(reply, list) else [reply], kind))
    return ScriptedBackend(rules, config, **kw)


# -- built-in responders for script files ---------------------------------------

_PSEUDO = re.compile(r"<IMG_\d+>")
_IMAGE_MD = re.compile(r"!\[[^\]\n]*\]\([^)\n]*\)")


def _digest(request: CompletionRequest) -> int:
    h = hashlib.sha256(request.user_text.encode("utf-8"))
    for a in request.image_attachments:
        h.update(b"\0" + a.encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big")


def _fenced(text: str, title: str) -> str:
    m = re.search(rf"^## {re.escape(title)}\n```markdown\n(.*?)\n```", text, re.DOTALL | re.MULTILINE)
    return m.group(1) if m else ""


def _tail(text: str, title: str) -> str:
    idx = text.find(f"## {title}\n")
    return text[idx + len(title) + 4 :] if idx >= 0 else ""


def _line_section(text: str, title: str) -> str:
    m = re.search(rf"^## {re.escape(title)}\n(.*?)(?=^## |\Z)", text, re.DOTALL | re.MULTILINE)
    return m.group(1).strip() if m else ""


def _sentences(text: str) -> list[str]:
    text = _IMAGE_MD.sub(" ", text)
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    flat = " ".join(" ".join(lines).split())
    return [s.strip() for s in re.split(r"(?<=[.!?])\s+", flat) if len(s.strip()) > 3]


def _paragraphs(context: str) -> list[str]:
    blocks = [b.strip() for b in re.split(r"\n\s*\n", context)]
    return [b for b in blocks if b and not b.startswith("#") and not _IMAGE_MD.fullmatch(b)]


def hash_score(request: CompletionRequest) -> str:
    return f"scripted analysis\n{_digest(request) % 11}"


def hash_score_bare(request: CompletionRequest) -> str:
    return str(_digest(request) % 11)


def hash_binary(request: CompletionRequest) -> str:
    return f"scripted verdict\n{0 if _digest(request) % 4 == 0 else 1}"


def hash_topics(request: CompletionRequest) -> str:
    return f"scripted topics\n{_digest(request) % 10 + 1}"


def always_one(request: CompletionRequest) -> str:
    return "scripted analysis\n1"


def describe(request: CompletionRequest) -> str:
    ids = ",".join(a[:8] for a in request.image_attachments) or "unknown"
    words = " ".join(_fenced(request.user_text, "Surrounding text").split()[:8])
    return f"Illustration {ids} related to: {words or 'the topic'}"


def _snippet(paragraph: str, n: int = 12) -> str:
    words = paragraph.replace("<IMAGE_PLACEHOLDER>", " ").split()[:n]
    return " ".join(words).rstrip(".,;:") + "."


def answer_all_images(request: CompletionRequest) -> str:
    """Single-stage answer that places every pseudo-URL of the context once."""
    context = _tail(request.user_text, "Reference material")
    paras = _paragraphs(context)
    urls = list(dict.fromkeys(_PSEUDO.findall(context)))
    out = ["## Answer", "The sources agree on the main points below."]
    for i, url in enumerate(urls):
        base = paras[i % len(paras)] if paras else "This figure shows a relevant detail"
        out.append(f"Point {i + 1}: {_snippet(base)}")
        out.append(f"![figure {i + 1}]({url})")
    for p in paras[len(urls) : len(urls) + 2]:
        out.append(_snippet(p))
    return "\n\n".join(out)


def draft(request: CompletionRequest) -> str:
    """Plain-text draft with one paragraph per image in the context (at least two)."""
    context = _tail(request.user_text, "Reference material")
    paras = _paragraphs(context)
    n = max(2, len(set(_PSEUDO.findall(context))))
    out = []
    for i in range(n):
        base = paras[i % len(paras)] if paras else "The question has several aspects"
        out.append(f"Part {i + 1}. {_snippet(base)}")
    return "\n\n".join(out)


def first_candidate(request: CompletionRequest) -> str:
    found = _PSEUDO.findall(_line_section(request.user_text, "Candidate images"))
    return found[0] if found else "NONE"


def refine(request: CompletionRequest) -> str:
    segment = _fenced(request.user_text, "Segment")
    return f"{segment} As the figure shows, this step is easier to follow."


def claims(request: CompletionRequest) -> str:
    found = _sentences(_fenced(request.user_text, "Answer"))[:4]
    if not found:
        return "NONE"
    return "\n".join(f"{i}. {s}" for i, s in enumerate(found, start=1))


RESPONDERS: dict[str, Callable[[CompletionRequest], str]] = {
    "hash_score": hash_score,
    "hash_score_bare": hash_score_bare,
    "hash_binary": hash_binary,
    "hash_topics": hash_topics,
    "always_one": always_one,
    "describe": describe,
    "answer_all_images": answer_all_images,
    "draft": draft,
    "first_candidate": first_candidate,
    "refine": refine,
    "claims": claims,
}


def rules_from_spec(entries: Sequence[dict[str, Any]]) -> list[Rule]:
    """Rules from script-file entries.

    Each entry has one of ``exact`` / ``prefix`` / ``regex`` and one of
    ``reply`` (string), ``replies`` (list, ``"FAIL"`` allowed) or
    ``responder`` (name in ``RESPONDERS``); ``attachment`` is optional.
    """
    rules = []
    for i, e in enumerate(entries):
        kinds = [k for k in ("exact", "prefix", "regex") if k in e]
        if len(kinds) != 1:
            raise ValueError(f"script rule {i}: exactly one of exact/prefix/regex required")
        kind = kinds[0]
        if "responder" in e:
            try:
                outcomes: list[Outcome] = [RESPONDERS[e["responder"]]]
            except KeyError:
                raise ValueError(f"script rule {i}: unknown responder {e['responder']!r}") from None
        elif "replies" in e:
            outcomes = [FAIL if r == "FAIL" else str(r) for r in e["replies"]]
        elif "reply" in e:
            outcomes = [str(e["reply"])]
        else:
            raise ValueError(f"script rule {i}: no reply, replies or responder")
        rules.append(Rule(str(e[kind]), outcomes, kind, e.get("attachment")))
    return rules


def load_script(path: str | Path) -> list[Rule]:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or []
    if isinstance(data, dict):
        data = data.get("rules", [])
    return rules_from_spec(data)
