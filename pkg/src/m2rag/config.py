"""Engine configuration loaded from a YAML file.

Relative paths in the file are resolved against the file's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Mapping

import yaml

from .backends import BackendConfig, CostLedger, HttpChatBackend, ModelBackend, ScriptedBackend
from .backends.mock import load_script
from .curation import CleaningRuleSet, CurationConfig, DedupConfig, SegmenterConfig
from .generation import StrategyConfig
from .judge import DEFAULT_JUDGE_RETRIES
from .retrieval import RetrievalConfig

ROLES = ("judge_text", "judge_image", "generator", "describer")
# Judges default to the backend default of 0; the generator samples a little.
DEFAULT_GENERATOR_TEMPERATURE = 0.7


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendSpec:
    config: BackendConfig
    kind: str  # http | scripted
    script: Path | None = None


@dataclass(frozen=True)
class EngineConfig:
    root: Path
    corpus: Path | None = None
    curation: CurationConfig = field(default_factory=CurationConfig)
    filter_queries: bool = False
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    judge_retries: int = DEFAULT_JUDGE_RETRIES
    thresholds: Mapping[str, float] = field(default_factory=dict)
    backends: Mapping[str, BackendSpec] = field(default_factory=dict)
    roles: Mapping[str, str] = field(default_factory=dict)
    annotations: Path | None = None
    source: Path | None = None

    def __post_init__(self) -> None:
        missing = [r for r in ROLES if r not in self.roles]
        if missing:
            raise ConfigError(f"unbound backend roles: {', '.join(missing)}")
        for role, name in self.roles.items():
            if role not in ROLES:
                raise ConfigError(f"unknown role {role!r}")
            if name not in self.backends:
                raise ConfigError(f"role {role!r} names undefined backend {name!r}")
        if self.judge_retries < 0:
            raise ConfigError("judge_retries must be >= 0")

    def fingerprint(self) -> dict[str, Any]:
        """Settings that affect stage outputs, as a JSON-able mapping."""
        return {
            "curation": {
                "patterns": list(self.curation.rules.removal_patterns),
                "placeholder": self.curation.rules.placeholder_token,
                "max_chars": self.curation.segmenter.max_chars,
                "dedup": _plain(self.curation.dedup),
                "min_image_similarity": self.curation.min_image_similarity,
                "filter_queries": self.filter_queries,
            },
            "retrieval": _plain(self.retrieval),
            "strategy": {**_plain(self.strategy), "strategy": self.strategy.strategy.value},
            "judge_retries": self.judge_retries,
            "thresholds": dict(sorted(self.thresholds.items())),
            "roles": dict(sorted(self.roles.items())),
            "backends": {
                name: {**_plain(spec.config), "kind": spec.kind, "script": _script_digest(spec.script)}
                for name, spec in sorted(self.backends.items())
            },
        }


def _plain(obj: Any) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in fields(obj) if f.init}


def _script_digest(path: Path | None) -> str | None:
    if path is None:
        return None
    import hashlib

    return hashlib.sha256(path.read_bytes()).hexdigest()


def _section(data: Mapping[str, Any], key: str) -> dict[str, Any]:
    value = data.get(key) or {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"section {key!r} must be a mapping")
    return dict(value)


def _build(cls: Callable[..., Any], values: Mapping[str, Any], where: str) -> Any:
    allowed = {f.name for f in fields(cls) if f.init}  # type: ignore[arg-type]
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path: str | Path, *, root: str | Path | None = None) -> EngineConfig:
    path = Path(path).resolve()
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    base = path.parent

    def resolve(p: Any) -> Path | None:
        return None if p is None else (base / str(p)).resolve()

    cur = _section(data, "curation")
    patterns = cur.pop("removal_patterns", None)
    rules = CleaningRuleSet() if patterns is None else _build(CleaningRuleSet, {"removal_patterns": tuple(patterns)}, "curation")
    segmenter = _build(SegmenterConfig, {k: cur.pop(k) for k in ("max_chars",) if k in cur}, "curation")
    dedup = _build(DedupConfig, {k: cur.pop(k) for k in ("hamming_threshold", "min_dimension_px", "thumbnail_side_px")
                                 if k in cur}, "curation")
    filter_queries = bool(cur.pop("filter_queries", False))
    curation = _build(CurationConfig, {"rules": rules, "segmenter": segmenter, "dedup": dedup, **cur}, "curation")

    ev = _section(data, "evaluation")
    thresholds = ev.pop("thresholds", None) or {}
    judge_retries = int(ev.pop("judge_retries", DEFAULT_JUDGE_RETRIES))
    # Only the proportion form exists; the rank-weighted variant is reserved.
    cp_mode = ev.pop("context_precision", "proportion")
    if cp_mode != "proportion":
        raise ConfigError(f"evaluation.context_precision: {cp_mode!r} is not implemented (use 'proportion')")
    if ev:
        raise ConfigError(f"evaluation: unknown keys {sorted(ev)}")

    roles = _section(data, "roles")
    backends: dict[str, BackendSpec] = {}
    for i, entry in enumerate(data.get("backends") or []):
        entry = dict(entry)
        if "temperature" not in entry and entry.get("name") == roles.get("generator"):
            entry["temperature"] = DEFAULT_GENERATOR_TEMPERATURE
        kind = entry.pop("kind", "http")
        script = resolve(entry.pop("script", None))
        if kind not in ("http", "scripted"):
            raise ConfigError(f"backends[{i}]: unknown kind {kind!r}")
        if kind == "scripted" and script is None:
            raise ConfigError(f"backends[{i}]: scripted backend needs a script file")
        cfg = _build(BackendConfig, entry, f"backends[{i}]")
        if cfg.name in backends:
            raise ConfigError(f"duplicate backend name {cfg.name!r}")
        backends[cfg.name] = BackendSpec(cfg, kind, script)

    return EngineConfig(
        root=Path(root).resolve() if root else resolve(data.get("root", ".")),  # type: ignore[arg-type]
        corpus=resolve(data.get("corpus")),
        curation=curation,
        filter_queries=filter_queries,
        retrieval=_build(RetrievalConfig, _section(data, "retrieval"), "retrieval"),
        strategy=_build(StrategyConfig, _section(data, "generation"), "generation"),
        judge_retries=judge_retries,
        thresholds={str(k): float(v) for k, v in thresholds.items()},
        backends=backends,
        roles=roles,
        annotations=resolve(data.get("annotations")),
        source=path,
    )


def build_backends(cfg: EngineConfig, *, image_loader: Callable[[str], tuple[bytes, str]] | None = None,
                   ledger: CostLedger | None = None) -> dict[str, ModelBackend]:
    """One backend instance per role; roles naming the same backend share it."""
    ledger = ledger if ledger is not None else CostLedger()
    made: dict[str, ModelBackend] = {}
    for name, spec in cfg.backends.items():
        if name not in cfg.roles.values():
            continue
        if spec.kind == "scripted":
            made[name] = ScriptedBackend(load_script(spec.script), spec.config, ledger=ledger)  # type: ignore[arg-type]
        else:
            made[name] = HttpChatBackend(spec.config, image_loader=image_loader, ledger=ledger)
    return {role: made[name] for role, name in cfg.roles.items()}
