from .base import (
    BackendConfig,
    BackendError,
    CapabilityError,
    Completion,
    CompletionRequest,
    CostLedger,
    LedgerEntry,
    ModelBackend,
    RetriesExhausted,
    TokenBucket,
    TransientBackendError,
    backoff_delays,
)
from .http import HttpChatBackend
from .mock import FAIL, RESPONDERS, Rule, ScriptedBackend, UnscriptedRequest, load_script, scripted_mock

__all__ = [
    "BackendConfig",
    "BackendError",
    "CapabilityError",
    "Completion",
    "CompletionRequest",
    "CostLedger",
    "FAIL",
    "HttpChatBackend",
    "LedgerEntry",
    "ModelBackend",
    "RESPONDERS",
    "RetriesExhausted",
    "Rule",
    "ScriptedBackend",
    "TokenBucket",
    "TransientBackendError",
    "UnscriptedRequest",
    "backoff_delays",
    "load_script",
    "scripted_mock",
]
