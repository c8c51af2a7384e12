from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol, Sequence

import requests
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

from .errors import ConfigError, RateLimited, ReplayMiss, TransportError
from .prompts import PromptBundle

logger = logging.getLogger(__name__)

RETRY_STATUS_CODES = [429, 500, 502, 503, 504]
REPLAY_SUFFIX = ".txt"


@dataclass(frozen=True)
class EndpointConfig:
    """Where chat requests go: a live OpenAI-compatible endpoint or a replay directory."""

    transport: str = "replay"
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o"
    api_key_env: str = "OPENAI_API_KEY"
    timeout_seconds: float = 60.0
    max_retries: int = 5
    backoff_factor: float = 0.8
    replay_dir: str = "replay"
    max_in_flight: int = 4
    min_interval_seconds: float = 0.0
    temperature: float = 0.0
    max_tokens: int = 512
    image_root: str = ""

    def __post_init__(self) -> None:
        if self.transport not in ("http", "replay"):
            raise ConfigError(f"Unknown transport '{self.transport}', expected 'http' or 'replay'.")
        if self.max_retries < 0 or self.max_in_flight < 1 or self.timeout_seconds <= 0:
            raise ConfigError("Endpoint needs max_retries >= 0, max_in_flight >= 1 and a positive timeout.")
        if self.min_interval_seconds < 0 or self.backoff_factor < 0:
            raise ConfigError("Endpoint pacing values must be non-negative.")


class ChatClient(Protocol):
    def complete(self, bundle: PromptBundle) -> str: ...


class ReplayChatClient:
    """Answers from `<replay_dir>/<bundle hash>.txt`."""

    def __init__(self, replay_dir: Path) -> None:
        self.replay_dir = Path(replay_dir)

    def complete(self, bundle: PromptBundle) -> str:
        content_hash = bundle.content_hash()
        path = self.replay_dir / f"{content_hash}{REPLAY_SUFFIX}"
        if not path.exists():
            raise ReplayMiss(content_hash)
        return path.read_text(encoding="utf-8").strip()


class HttpChatClient:
    def __init__(self, config: EndpointConfig) -> None:
        self.config = config
        self.session = requests.Session()
        retry = Retry(
            total=config.max_retries,
            connect=config.max_retries,
            read=config.max_retries,
            status=config.max_retries,
            allowed_methods=["POST"],
            status_forcelist=RETRY_STATUS_CODES,
            backoff_factor=config.backoff_factor,
            respect_retry_after_header=True,
            raise_on_status=False,
        )
        adapter = HTTPAdapter(max_retries=retry)
        self.session.mount("https://", adapter)
        self.session.mount("http://", adapter)
        self.session.headers.update({"User-Agent": "airs-rehab/0.1", "Content-Type": "application/json"})
        api_key = os.getenv(config.api_key_env, "").strip() if config.api_key_env else ""
        if api_key:
            self.session.headers["Authorization"] = f"Bearer {api_key}"
        self._lock = threading.Lock()
        self._last_request = 0.0

    def complete(self, bundle: PromptBundle) -> str:
        self._pace()
        url = f"{self.config.base_url.rstrip('/')}/chat/completions"
        try:
            response = self.session.post(url, json=self._payload(bundle), timeout=self.config.timeout_seconds)
        except requests.RequestException as exc:
            raise TransportError(f"POST {url} failed: {exc}") from exc
        if response.status_code == 429:
            raise RateLimited(f"POST {url} still rate limited after {self.config.max_retries} retries.")
        if response.status_code >= 400:
            raise TransportError(f"POST {url} returned HTTP {response.status_code}: {response.text[:200]}")
        try:
            payload = json.loads(response.text, strict=False)
            content = payload["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"Unexpected chat completion payload from {url}.") from exc
        if isinstance(content, list):
            content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
        return str(content).strip()

    def _pace(self) -> None:
        if self.config.min_interval_seconds <= 0:
            return
        with self._lock:
            wait = self._last_request + self.config.min_interval_seconds - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last_request = time.monotonic()

    def _payload(self, bundle: PromptBundle) -> dict[str, Any]:
        messages: list[dict[str, Any]] = []
        for segment in bundle.segments:
            if messages and messages[-1]["role"] == segment.role and isinstance(messages[-1]["content"], str):
                messages[-1]["content"] += "\n\n" + segment.text
            else:
                messages.append({"role": segment.role, "content": segment.text})
        images = [self._image_part(ref) for ref in bundle.image_refs]
        images = [part for part in images if part is not None]
        if images:
            user = next((message for message in reversed(messages) if message["role"] == "user"), None)
            if user is None:
                user = {"role": "user", "content": ""}
                messages.append(user)
            user["content"] = [{"type": "text", "text": user["content"]}, *images]
        return {
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        }

    def _image_part(self, ref: str) -> dict[str, Any] | None:
        path = Path(self.config.image_root) / ref if self.config.image_root else Path(ref)
        if not path.is_file():
            logger.warning("Image reference %s does not resolve to a file, sent as text only", ref)
            return None
        mime = mimetypes.guess_type(path.name)[0] or "image/png"
        encoded = base64.b64encode(path.read_bytes()).decode("ascii")
        return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{encoded}"}}


def make_client(config: EndpointConfig) -> ChatClient:
    if config.transport == "replay":
        return ReplayChatClient(Path(config.replay_dir))
    return HttpChatClient(config)


def chat(client: ChatClient | EndpointConfig, bundle: PromptBundle) -> str:
    if isinstance(client, EndpointConfig):
        client = make_client(client)
    return client.complete(bundle)


def chat_many(client: ChatClient, bundles: Sequence[PromptBundle], max_in_flight: int = 4) -> list[str]:
    """Concurrent completions; results keep the input order."""
    if not bundles:
        return []
    workers = max(1, min(max_in_flight, len(bundles)))
    if workers == 1:
        return [client.complete(bundle) for bundle in bundles]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(client.complete, bundles))


def write_replay(replay_dir: Path, bundle: PromptBundle, text: str) -> Path:
    replay_dir = Path(replay_dir)
    replay_dir.mkdir(parents=True, exist_ok=True)
    path = replay_dir / f"{bundle.content_hash()}{REPLAY_SUFFIX}"
    path.write_text(text.strip() + "\n", encoding="utf-8")
    return path
