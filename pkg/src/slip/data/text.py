"""Caption cleaning and sampling."""

from __future__ import annotations

import html
import re
from typing import Sequence, Union

import numpy as np

from ..errors import DataError

# a tag opens with a letter, "/" or "!" so that "1 < 2 and 3 > 2" survives
_TAG = re.compile(r"<!--.*?-->|</?[A-Za-z][^<>]*>|<![^<>]*>", re.DOTALL)
_URL = re.compile(r"(?:https?://|www\.)\S*", re.IGNORECASE)
_SPACE = re.compile(r"\s+")


def _clean_once(text: str) -> str:
    text = html.unescape(text)
    text = _TAG.sub(" ", text)
    text = _URL.sub(" ", text)
    return _SPACE.sub(" ", text).strip()


def clean_caption(raw: Union[str, bytes]) -> str:
    """Unescape HTML entities, strip tags and URLs, collapse whitespace.

    Applied to a fixed point so that ``clean_caption`` is idempotent even on
    doubly escaped input such as ``&amp;lt;b&amp;gt;``.
    """
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    text = raw
    while True:
        # each changing pass shortens the text or only normalizes whitespace, so this terminates
        nxt = _clean_once(text)
        if nxt == text:
            return text
        text = nxt


def sample_caption(captions: Sequence[str], rng: np.random.Generator) -> str:
    """Uniform choice among a record's (already cleaned) captions."""
    if len(captions) == 0:
        raise DataError("record has no valid caption")
    return captions[int(rng.integers(len(captions)))]
