"""Judge output protocols and the re-prompt loop shared by scoring code."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Callable, TypeVar

from .backends import CompletionRequest, ModelBackend
from .document import ParseError

logger = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_JUDGE_RETRIES = 3

_INT = re.compile(r"(?<![\w.])[-+]?\d+(?!\w|\.\d)")
_EMPHASIS = str.maketrans("", "", "*_`#>")


class JudgeProtocolError(RuntimeError):
    def __init__(self, message: str, transcript: list[dict[str, str]]):
        super().__init__(message)
        self.transcript = transcript


@dataclass
class Transcript:
    """Audit trail of judge exchanges."""

    entries: list[dict[str, str]] = field(default_factory=list)

    def add(self, task: str, prompt: str, reply: str) -> None:
        self.entries.append({"task": task, "prompt": prompt, "reply": reply})


def task_of(prompt: str) -> str:
    first = prompt.split("\n", 1)[0]
    return first[len("# Task: "):].strip() if first.startswith("# Task: ") else "prompt"


def parse_two_line_verdict(text: str) -> tuple[str, int]:
    """Return ``(analysis, value)`` from an analysis-then-integer reply.

    The value is the first integer on the last non-empty line holding a
    standalone integer; markdown emphasis is ignored.  Everything before
    that line is the analysis.
    """
    lines = text.strip().splitlines()
    for i in range(len(lines) - 1, -1, -1):
        line = lines[i].translate(_EMPHASIS).strip()
        if not line:
            continue
        m = _INT.search(line)
        if m:
            return "\n".join(lines[:i]).strip(), int(m.group())
    raise ParseError("no integer-bearing line in judge output")


def parse_binary_verdict(text: str) -> tuple[str, bool]:
    lines = text.strip().splitlines()
    if lines:
        last = lines[-1].translate(_EMPHASIS).strip().lower().rstrip(".")
        if last in ("yes", "no"):
            return "\n".join(lines[:-1]).strip(), last == "yes"
    analysis, value = parse_two_line_verdict(text)
    if value not in (0, 1):
        raise ParseError(f"binary verdict must be 0 or 1, got {value}")
    return analysis, bool(value)


def ask(
    backend: ModelBackend,
    request: CompletionRequest,
    parse: Callable[[str], T],
    *,
    retries: int = DEFAULT_JUDGE_RETRIES,
    transcript: Transcript | None = None,
) -> T:
    """Send ``request`` and parse the reply, re-prompting verbatim on parse errors."""
    seen: list[dict[str, str]] = []
    task = task_of(request.user_text)
    for attempt in range(retries + 1):
        reply = backend.complete(request).text
        seen.append({"task": task, "prompt": request.user_text, "reply": reply})
        if transcript is not None:
            transcript.add(task, request.user_text, reply)
        try:
            return parse(reply)
        except (ParseError, ValueError) as exc:
            logger.debug("%s: unparseable reply on attempt %d: %s", task, attempt + 1, exc)
    raise JudgeProtocolError(f"{task}: no parseable reply after {retries + 1} attempts", seen)
