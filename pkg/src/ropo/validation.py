"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .preference import PreferencePair


def check_tokens(seq: Sequence[int], vocab_size: int, name: str = "sequence") -> tuple:
    out = tuple(int(t) for t in seq)
    for t in out:
        if not 0 <= t < vocab_size:
            raise ValueError(f"{name}: token id {t} outside vocabulary of size {vocab_size}")
    return out


def check_pairs(X: Iterable, vocab_size: int | None = None, context_length: int | None = None) -> list[PreferencePair]:
    """Accept PreferencePair objects, dicts, or (prompt, chosen, rejected) triples."""
    pairs = []
    for i, item in enumerate(X):
        if isinstance(item, PreferencePair):
            pair = item
        elif isinstance(item, dict):
            pair = PreferencePair(item["prompt"], item["chosen"], item["rejected"])
        else:
            try:
                prompt, chosen, rejected = item
            except (TypeError, ValueError):
                raise ValueError(f"pair {i}: expected (prompt, chosen, rejected)") from None
            pair = PreferencePair(prompt, chosen, rejected)
        if vocab_size is not None:
            for name in ("prompt", "chosen", "rejected"):
                check_tokens(getattr(pair, name), vocab_size, f"pair {i} {name}")
        if context_length is not None:
            longest = len(pair.prompt) + max(len(pair.chosen), len(pair.rejected))
            if longest > context_length:
                raise ValueError(f"pair {i}: length {longest} exceeds context length {context_length}")
        pairs.append(pair)
    if not pairs:
        raise ValueError("at least one preference pair is required")
    return pairs


def check_sequences(X: Iterable, vocab_size: int | None = None) -> tuple[list, list]:
    """Split ``(prompt, completion)`` items into two lists."""
    prompts, completions = [], []
    for i, item in enumerate(X):
        try:
            prompt, completion = item
        except (TypeError, ValueError):
            raise ValueError(f"item {i}: expected (prompt, completion)") from None
        if len(prompt) == 0:
            raise ValueError(f"item {i}: prompt must be non-empty")
        if vocab_size is not None:
            check_tokens(prompt, vocab_size, f"item {i} prompt")
            check_tokens(completion, vocab_size, f"item {i} completion")
        prompts.append(list(prompt))
        completions.append(list(completion))
    if not prompts:
        raise ValueError("at least one sequence is required")
    return prompts, completions


def check_unit_vector(x, name: str = "vector", tol: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    norm = np.linalg.norm(x)
    if abs(norm - 1.0) > tol:
        raise ValueError(f"{name} must have unit norm, got {norm!r}")
    return x
