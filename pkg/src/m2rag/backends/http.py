"""HTTPS chat-completions client (OpenAI-style message schema)."""

from __future__ import annotations

import base64
from typing import Callable

import httpx

from .base import BackendConfig, BackendError, CompletionRequest, CostLedger, ModelBackend, TransientBackendError

ImageLoader = Callable[[str], tuple[bytes, str]]
"""Maps an image id to (bytes, mime type)."""

_RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


class HttpChatBackend(ModelBackend):
    def __init__(self, config: BackendConfig, *, image_loader: ImageLoader | None = None,
                 ledger: CostLedger | None = None, client: httpx.Client | None = None, **kw):
        super().__init__(config, ledger=ledger, **kw)
        if not config.endpoint:
            raise ValueError(f"backend {config.name!r} has no endpoint")
        self.image_loader = image_loader
        self.client = client or httpx.Client(timeout=config.timeout_s)

    def build_payload(self, request: CompletionRequest) -> dict:
        messages = []
        if request.system_text:
            messages.append({"role": "system", "content": request.system_text})
        if request.image_attachments:
            if self.image_loader is None:
                raise BackendError("image attachments require an image loader")
            parts: list[dict] = [{"type": "text", "text": request.user_text}]
            for image_id in request.image_attachments:
                data, mime = self.image_loader(image_id)
                url = f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"
                parts.append({"type": "image_url", "image_url": {"url": url}})
            messages.append({"role": "user", "content": parts})
        else:
            messages.append({"role": "user", "content": request.user_text})
        return {
            "model": self.config.model,
            "messages": messages,
            "max_tokens": request.max_output_tokens,
            "temperature": request.temperature,
        }

    def _send(self, request: CompletionRequest) -> tuple[str, int, int]:
        headers = {}
        key = self.config.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self.client.post(self.config.endpoint, json=self.build_payload(request), headers=headers)
        except httpx.TransportError as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code in _RETRY_STATUS:
            raise TransientBackendError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        try:
            text = body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion body: {body!r:.200}") from exc
        usage = body.get("usage") or {}
        return text, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))
