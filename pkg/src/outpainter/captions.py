"""Caption generation: imagined surroundings, a global summary, and the
per-step continuation caption used while expanding.

Each logical operation makes at most one backend call per attempt, retried up
to a bounded budget; empty or malformed responses are protocol errors and
never surface as silent empties.
"""

from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass
from enum import Enum

from . import prompts
from .backends import LLMBackend
from .canvas import Direction
from .validation import (
    BackendError,
    CapabilityError,
    ProtocolError,
    ValidationError,
    check_image,
)

log = logging.getLogger(__name__)

DEFAULT_RETRIES = 3
DEFAULT_BACKOFF = 0.5


class CaptionKind(str, Enum):
    ANNOTATED = "annotated"
    LOCAL_IMAGINED = "local_imagined"
    GLOBAL = "global"
    LOCAL_INFERENCE = "local_inference"


@dataclass(frozen=True)
class Caption:
    text: str
    kind: CaptionKind

    def __post_init__(self):
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValidationError("caption text must be a nonempty string")
        object.__setattr__(self, "kind", CaptionKind(self.kind))


@dataclass(frozen=True)
class CaptionRecord:
    """One annotated caption with its imagined surroundings and their summary."""

    annotated: Caption
    imagined_locals: tuple[Caption, ...]
    global_caption: Caption


_SENTENCE_RE = re.compile(r"^(.*?[.!?])(?:\s|$)", re.DOTALL)
_LIST_MARKER_RE = re.compile(r"^\s*(?:\d+[.)]\s*|[-*]\s+)")


def _clean(text: str) -> str:
    text = text.strip()
    text = text.strip("\"'“”").strip()
    return text


def first_sentence(text: str) -> str:
    m = _SENTENCE_RE.match(text)
    return m.group(1) if m else text


def _call_with_retries(call, retries: int, backoff: float):
    """Run `call` up to `retries` times total, backing off between attempts.

    Capability errors are not retried; they cannot heal.
    """
    if retries < 1:
        raise ValidationError("retries must be at least 1")
    last = None
    for attempt in range(retries):
        try:
            return call()
        except CapabilityError:
            raise
        except BackendError as exc:
            last = exc
            log.warning("backend attempt %d/%d failed: %s", attempt + 1, retries, exc)
            if attempt < retries - 1 and backoff > 0:
                time.sleep(backoff * (2 ** attempt))
    raise last


def _require_text(response) -> str:
    if not isinstance(response, str) or not response.strip():
        raise ProtocolError("backend returned an empty response")
    return response


def imagine_local_captions(
    annotated: Caption,
    k: int,
    backend: LLMBackend,
    retries: int = DEFAULT_RETRIES,
    backoff: float = DEFAULT_BACKOFF,
) -> list[Caption]:
    """Ask the backend to imagine `k` captions for the scene beyond the image."""
    if annotated.kind is not CaptionKind.ANNOTATED:
        raise ValidationError(f"expected an annotated caption, got kind {annotated.kind.value}")
    if k < 1:
        raise ValidationError(f"k must be at least 1, got {k}")
    prompt = prompts.imagine_prompt(annotated.text, k)

    def attempt():
        response = _require_text(backend.complete_text(prompt))
        lines = [_clean(_LIST_MARKER_RE.sub("", line)) for line in response.splitlines()]
        lines = [line for line in lines if line]
        if len(lines) < k:
            raise ProtocolError(f"backend returned {len(lines)} captions, wanted {k}")
        return [Caption(text, CaptionKind.LOCAL_IMAGINED) for text in lines[:k]]

    return _call_with_retries(attempt, retries, backoff)


def summarize_to_global(
    annotated: Caption,
    locals_: list[Caption],
    backend: LLMBackend,
    retries: int = DEFAULT_RETRIES,
    backoff: float = DEFAULT_BACKOFF,
) -> Caption:
    """Summarize the annotated caption and its imagined locals into one caption."""
    if not locals_:
        raise ValidationError("need at least one local caption to summarize")
    prompt = prompts.summarize_prompt(annotated.text, [c.text for c in locals_])

    def attempt():
        response = _clean(_require_text(backend.complete_text(prompt)))
        if not response:
            raise ProtocolError("backend summary was empty after cleanup")
        return Caption(response, CaptionKind.GLOBAL)

    return _call_with_retries(attempt, retries, backoff)


def inference_local_caption(
    local_image,
    direction,
    backend: LLMBackend,
    retries: int = DEFAULT_RETRIES,
    backoff: float = DEFAULT_BACKOFF,
) -> Caption:
    """Ask the backend for a one-sentence continuation beyond the given window."""
    image = check_image(local_image, "local image")
    direction = Direction.parse(direction)
    if not backend.supports_images:
        raise CapabilityError(
            f"backend {backend.name!r} is text-only; expansion captions need image input"
        )
    prompt = prompts.expansion_prompt(direction)

    def attempt():
        response = first_sentence(_clean(_require_text(backend.complete_multimodal(image, prompt))))
        if not response:
            raise ProtocolError("backend continuation was empty after cleanup")
        return Caption(response, CaptionKind.LOCAL_INFERENCE)

    return _call_with_retries(attempt, retries, backoff)


def build_caption_record(
    annotated: Caption,
    k: int,
    backend: LLMBackend,
    retries: int = DEFAULT_RETRIES,
    backoff: float = DEFAULT_BACKOFF,
) -> CaptionRecord:
    """Two-step record: imagine k local captions, then summarize them globally."""
    locals_ = imagine_local_captions(annotated, k, backend, retries, backoff)
    global_caption = summarize_to_global(annotated, locals_, backend, retries, backoff)
    return CaptionRecord(
        annotated=annotated,
        imagined_locals=tuple(locals_),
        global_caption=global_caption,
    )
