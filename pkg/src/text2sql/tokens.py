"""Pluggable token counting for prompt budgeting."""

from __future__ import annotations

import math
from typing import Callable

TokenCounter = Callable[[str], int]

DEFAULT_TOKENIZER_ID = "bytes4"


def _bytes4(text: str) -> int:
    # Deterministic heuristic: one token per 4 UTF-8 bytes, rounded up.
    return math.ceil(len(text.encode("utf-8")) / 4)


_COUNTERS: dict[str, TokenCounter] = {DEFAULT_TOKENIZER_ID: _bytes4}


def register_counter(tokenizer_id: str, counter: TokenCounter) -> None:
    """Register a model-exact tokenizer under an id usable in RenderBudget."""
    _COUNTERS[tokenizer_id] = counter


def get_counter(tokenizer_id: str) -> TokenCounter:
    try:
        return _COUNTERS[tokenizer_id]
    except KeyError:
        raise KeyError(
            f"unknown tokenizer_id {tokenizer_id!r}; registered: {sorted(_COUNTERS)}"
        ) from None


def count_tokens(text: str, tokenizer_id: str = DEFAULT_TOKENIZER_ID) -> int:
    return get_counter(tokenizer_id)(text)
