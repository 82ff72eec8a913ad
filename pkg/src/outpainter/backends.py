"""Language-model backends behind one small contract.

A backend answers text prompts (`complete_text`) and, when it supports
images, multimodal prompts (`complete_multimodal`).  Responses are nonempty
strings or an explicit error; callers never see partial output.  Four
implementations ship here:

* ``StubBackend``  - deterministic pure function of (prompt, image digest),
  used by tests and offline runs.
* ``TranscriptBackend`` - replays recorded request/response pairs from a
  JSON Lines file keyed by content hashes.
* ``HttpBackend``  - generic single-endpoint JSON transport configured from
  LLM_ENDPOINT / LLM_API_KEY.
* ``RecordingBackend`` - wraps another backend, keeping every exchange and
  optionally appending it to a transcript file.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import threading

import numpy as np
from PIL import Image

from . import prompts
from .canvas import image_digest, to_uint8
from .validation import BackendError, CapabilityError, ConfigurationError

ENDPOINT_ENV = "LLM_ENDPOINT"
API_KEY_ENV = "LLM_API_KEY"


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class LLMBackend:
    """Contract; concrete backends override the two completion calls."""

    name = "abstract"
    supports_images = False
    max_concurrency: int | None = None  # None = safe for unbounded concurrent calls

    def complete_text(self, prompt: str) -> str:
        raise NotImplementedError

    def complete_multimodal(self, image, prompt: str) -> str:
        raise CapabilityError(f"backend {self.name!r} does not accept images")


class StubBackend(LLMBackend):
    """Deterministic stand-in: replies are a pure function of the request.

    Known prompt shapes get templated answers; anything else gets a stable
    hash-tagged echo.  A call counter is kept for tests; it does not affect
    outputs.
    """

    name = "stub"
    supports_images = True

    def __init__(self):
        self.calls = 0
        self.multimodal_calls = 0

    def complete_text(self, prompt: str) -> str:
        self.calls += 1
        imagined = prompts.parse_imagine_prompt(prompt)
        if imagined is not None:
            annotated, k = imagined
            return "\n".join(
                f"beyond the scene of '{annotated}' (variant {i})" for i in range(1, k + 1)
            )
        summarized = prompts.parse_summarize_prompt(prompt)
        if summarized is not None:
            annotated, locals_ = summarized
            summary = "summary: " + " | ".join((annotated, *locals_))
            return " ".join(summary.split()[:77])
        return f"stub reply #{prompt_digest(prompt)[:12]}"

    def complete_multimodal(self, image, prompt: str) -> str:
        self.calls += 1
        self.multimodal_calls += 1
        direction = prompts.parse_expansion_prompt(prompt)
        if direction is not None:
            return f"continuation({direction}) of image#{image_digest(image)[:12]}"
        return f"stub reply #{prompt_digest(prompt)[:12]} image#{image_digest(image)[:12]}"


class TextOnlyStub(StubBackend):
    """Stub variant that rejects image prompts; used to exercise capability errors."""

    name = "stub-text-only"
    supports_images = False

    def complete_multimodal(self, image, prompt: str) -> str:
        raise CapabilityError("text-only backend cannot accept images")


class TranscriptBackend(LLMBackend):
    """Replays a recorded transcript.

    Transcript files are JSON Lines; each line holds
    ``{"prompt_sha256": ..., "image_sha256": ..., "response": ...}`` with
    ``image_sha256`` null for text-only requests.  Unknown requests raise
    BackendError.
    """

    name = "transcript"
    supports_images = True

    def __init__(self, path):
        self.path = str(path)
        self._responses: dict[tuple[str, str], str] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                key = (entry["prompt_sha256"], entry.get("image_sha256") or "")
                self._responses[key] = entry["response"]

    def _lookup(self, prompt: str, image_sha: str) -> str:
        key = (prompt_digest(prompt), image_sha)
        if key not in self._responses:
            raise BackendError(
                f"transcript {self.path} has no response for prompt sha {key[0][:12]}..."
            )
        return self._responses[key]

    def complete_text(self, prompt: str) -> str:
        return self._lookup(prompt, "")

    def complete_multimodal(self, image, prompt: str) -> str:
        return self._lookup(prompt, image_digest(image))


class HttpBackend(LLMBackend):
    """Single-endpoint JSON transport.

    POSTs ``{"prompt": ..., "image": <base64 PNG, optional>}`` and expects
    ``{"text": ...}`` back.  Endpoint and credential come from the
    LLM_ENDPOINT and LLM_API_KEY environment variables.
    """

    name = "http"
    supports_images = True
    max_concurrency = 4

    def __init__(self, endpoint=None, api_key=None, timeout=60.0):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise ConfigurationError(
                f"http backend needs an endpoint; set {ENDPOINT_ENV} or pass endpoint="
            )
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout

    def _post(self, payload: dict) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendError(f"http backend transport failure: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"http backend returned status {resp.status_code}")
        try:
            text = resp.json()["text"]
        except (ValueError, KeyError) as exc:
            raise BackendError("http backend response is not a {'text': ...} document") from exc
        if not isinstance(text, str):
            raise BackendError("http backend 'text' field is not a string")
        return text

    def complete_text(self, prompt: str) -> str:
        return self._post({"prompt": prompt})

    def complete_multimodal(self, image, prompt: str) -> str:
        buf = io.BytesIO()
        Image.fromarray(to_uint8(np.asarray(image)), mode="RGB").save(buf, format="PNG")
        encoded = base64.b64encode(buf.getvalue()).decode("ascii")
        return self._post({"prompt": prompt, "image": encoded})


class RecordingBackend(LLMBackend):
    """Wraps another backend and records every exchange.

    ``requests`` accumulates (prompt, image_sha256 or None) in call order.
    When `transcript_path` is set, each exchange is appended as a transcript
    line compatible with TranscriptBackend.
    """

    name = "recording"

    def __init__(self, inner: LLMBackend, transcript_path=None):
        self.inner = inner
        self.transcript_path = str(transcript_path) if transcript_path else None
        self.requests: list[tuple[str, str | None]] = []
        self._lock = threading.Lock()

    @property
    def supports_images(self):
        return self.inner.supports_images

    @property
    def max_concurrency(self):
        return self.inner.max_concurrency

    def _record(self, prompt: str, image_sha: str | None, response: str) -> None:
        with self._lock:
            self.requests.append((prompt, image_sha))
            if self.transcript_path:
                entry = {
                    "prompt_sha256": prompt_digest(prompt),
                    "image_sha256": image_sha,
                    "response": response,
                }
                with open(self.transcript_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def complete_text(self, prompt: str) -> str:
        response = self.inner.complete_text(prompt)
        self._record(prompt, None, response)
        return response

    def complete_multimodal(self, image, prompt: str) -> str:
        response = self.inner.complete_multimodal(image, prompt)
        self._record(prompt, image_digest(image), response)
        return response


def make_backend(kind: str, transcript=None) -> LLMBackend:
    """Build a backend from its CLI spelling."""
    if kind == "stub":
        return StubBackend()
    if kind == "transcript":
        if not transcript:
            raise ConfigurationError("transcript backend needs a transcript file path")
        return TranscriptBackend(transcript)
    if kind == "http":
        return HttpBackend()
    raise ConfigurationError(f"unknown backend {kind!r}; expected stub, transcript, or http")
