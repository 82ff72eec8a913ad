"""Prompt templates for the caption-generation calls, plus their parsers.

The three instruction strings are fixed verbatim; prompt builders only append
structured material (the captions to work from, the requested count).  The
parsers are the inverse used by the deterministic stub backend.
"""

from __future__ import annotations

import re

from .canvas import Direction

IMAGINE_INSTRUCTION = "Imagine caption for what happen outside of these caption without sound."
SUMMARIZE_INSTRUCTION = "Summarize the captions"
EXPAND_INSTRUCTION_TEMPLATE = (
    "Create a short sentence outside of the given image to expand this image to the {direction}."
)


def imagine_prompt(annotated_text: str, k: int) -> str:
    return (
        f"{IMAGINE_INSTRUCTION}\n"
        f"Caption: {annotated_text}\n"
        f"Write {k} captions, one per line."
    )


def summarize_prompt(annotated_text: str, local_texts) -> str:
    lines = "\n".join(f"- {text}" for text in (annotated_text, *local_texts))
    return f"{SUMMARIZE_INSTRUCTION}\n{lines}"


def expansion_prompt(direction) -> str:
    direction = Direction.parse(direction)
    return EXPAND_INSTRUCTION_TEMPLATE.format(direction=direction.value)


_IMAGINE_RE = re.compile(
    re.escape(IMAGINE_INSTRUCTION) + r"\nCaption: (?P<caption>.*)\nWrite (?P<k>\d+) captions",
    re.DOTALL,
)
_EXPAND_RE = re.compile(r"to expand this image to the (?P<direction>top|bottom|left|right)\.")


def parse_imagine_prompt(prompt: str):
    m = _IMAGINE_RE.match(prompt)
    if not m:
        return None
    return m.group("caption"), int(m.group("k"))


def parse_summarize_prompt(prompt: str):
    if not prompt.startswith(SUMMARIZE_INSTRUCTION + "\n"):
        return None
    body = prompt[len(SUMMARIZE_INSTRUCTION) + 1:]
    texts = [line[2:] for line in body.splitlines() if line.startswith("- ")]
    if not texts:
        return None
    return texts[0], texts[1:]


def parse_expansion_prompt(prompt: str):
    m = _EXPAND_RE.search(prompt)
    return m.group("direction") if m else None
