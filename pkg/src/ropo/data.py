"""Synthetic preference data: seeded progressions with verbose or drifting rejects.

Content tokens ``1 .. vocab_size-1`` are visited through a grammar-seeded
permutation. A prompt lists consecutive terms of an arithmetic progression in
that permuted space; the preferred completion continues it for
``target_length`` terms and then ends. Rejected completions either pad a
correct prefix with repeated bigrams (the verbose failure) or continue with
the wrong stride.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .policy import EOS
from .preference import PreferencePair

__all__ = ["SyntheticTask", "generate_pairs", "sft_examples", "save_pairs", "load_pairs"]


@dataclass(frozen=True)
class SyntheticTask:
    grammar_seed: int = 0
    vocab_size: int = 32
    target_length: int = 5
    prompt_lengths: tuple = (3, 6)
    strides: tuple = (1, 2, 3, 5)
    repeat_penalty: float = 1.0
    length_penalty: float = 0.5
    missing_end_penalty: float = 1.0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")
        lo, hi = self.prompt_lengths
        if lo < 2 or hi < lo:
            raise ValueError("prompt lengths must satisfy 2 <= lo <= hi")
        m = self.vocab_size - 1
        if any(s % m == 0 for s in self.strides):
            raise ValueError("strides must be non-zero modulo the content vocabulary")

    @property
    def modulus(self) -> int:
        return self.vocab_size - 1

    @property
    def permutation(self) -> np.ndarray:
        rng = np.random.default_rng([self.grammar_seed, 7919])
        return rng.permutation(self.modulus) + 1

    def _decode(self, prompt: Sequence[int]) -> tuple[int, int] | None:
        inv = np.empty(self.vocab_size, dtype=np.int64)
        inv[self.permutation] = np.arange(self.modulus)
        if len(prompt) < 2 or any(not 1 <= t < self.vocab_size for t in prompt):
            return None
        idx = [int(inv[t]) for t in prompt]
        stride = (idx[1] - idx[0]) % self.modulus
        for a, b in zip(idx, idx[1:]):
            if (b - a) % self.modulus != stride:
                return None
        return idx[-1], stride

    def progression(self, start: int, stride: int, count: int) -> list[int]:
        perm = self.permutation
        return [int(perm[(start + k * stride) % self.modulus]) for k in range(count)]

    def expected_continuation(self, prompt: Sequence[int]) -> list[int] | None:
        decoded = self._decode(prompt)
        if decoded is None:
            return None
        last, stride = decoded
        return self.progression(last + stride, stride, self.target_length)

    def score(self, prompt: Sequence[int], completion: Sequence[int]) -> float:
        """Deterministic quality of ``completion`` given ``prompt``.

        One point per position matching the intended continuation, minus
        penalties for repeated bigrams, extra length and a missing end token.
        """
        completion = list(completion)
        ended = bool(completion) and completion[-1] == EOS
        body = completion[:-1] if ended else completion
        expected = self.expected_continuation(prompt) or []
        hits = sum(1 for a, b in zip(body, expected) if a == b)
        bigrams = list(zip(body, body[1:]))
        repeats = len(bigrams) - len(set(bigrams))
        excess = max(0, len(body) - self.target_length)
        return (
            hits
            - self.repeat_penalty * repeats
            - self.length_penalty * excess
            - (0.0 if ended else self.missing_end_penalty)
        )

    def sample_prompt(self, rng: np.random.Generator) -> list[int]:
        lo, hi = self.prompt_lengths
        length = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(self.modulus))
        stride = int(rng.choice(self.strides))
        return self.progression(start, stride, length)

    def chosen(self, prompt: Sequence[int]) -> list[int]:
        return self.expected_continuation(prompt) + [EOS]

    def rejected(self, prompt: Sequence[int], rng: np.random.Generator) -> list[int]:
        good = self.expected_continuation(prompt)
        if rng.random() < 0.5:
            keep = int(rng.integers(2, self.target_length + 1))
            body = good[:keep]
            bigram = body[-2:]
            reps = int(rng.integers(2, 5))
            return body + bigram * reps + [EOS]
        last, stride = self._decode(prompt)
        wrong = [s for s in self.strides if s != stride] or [stride + 1]
        alt = int(rng.choice(wrong))
        return self.progression(last + alt, alt, self.target_length) + [EOS]


def generate_pairs(task: SyntheticTask, count: int, seed: int) -> list[PreferencePair]:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < count:
        prompt = task.sample_prompt(rng)
        chosen = task.chosen(prompt)
        rejected = task.rejected(prompt, rng)
        if task.score(prompt, chosen) > task.score(prompt, rejected):
            pairs.append(PreferencePair(prompt, chosen, rejected))
    return pairs


def sft_examples(task: SyntheticTask, count: int, seed: int) -> tuple[list[list[int]], list[list[int]]]:
    """Prompts and preferred completions for supervised fine-tuning."""
    rng = np.random.default_rng(seed)
    prompts = [task.sample_prompt(rng) for _ in range(count)]
    return prompts, [task.chosen(p) for p in prompts]


def save_pairs(pairs: Sequence[PreferencePair], path) -> None:
    with Path(path).open("w") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_dict()) + "\n")


def load_pairs(path) -> list[PreferencePair]:
    with Path(path).open() as fh:
        return [PreferencePair(**json.loads(line)) for line in fh if line.strip()]
