"""Adam, the warmup-cosine schedule, and the supervised fine-tuning step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .policy import PolicyModel, make_batch


def lr_at(step: int, total_steps: int, peak: float, warmup_fraction: float = 0.1) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then cosine decay to 0."""
    if not 0.0 <= warmup_fraction < 1.0:
        raise ValueError("warmup_fraction must be in [0, 1)")
    warmup = int(math.ceil(warmup_fraction * total_steps))
    if step < warmup:
        return peak * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([float(self.t)])}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    @classmethod
    def from_state_arrays(cls, arrays: dict[str, np.ndarray]) -> "Adam":
        opt = cls()
        opt.t = int(arrays.get("adam.t", np.zeros(1))[0])
        for key, value in arrays.items():
            if key.startswith("adam.m."):
                name = key[len("adam.m.") :]
                opt.m[name] = np.array(value)
                opt.v[name] = np.array(arrays["adam.v." + name])
        return opt


@dataclass
class SFTReport:
    step: int
    lr: float
    loss: float


def sft_loss(model: PolicyModel, prompts, completions):
    """Mean per-token cross-entropy over completion tokens, plus its tape."""
    batch = make_batch(prompts, completions, model.config)
    tape = ad.Tape()
    nodes = model.leaves(tape)
    total = ad.sum(ad.mul(model.token_logprobs(nodes, batch), batch.mask))
    loss = ad.scale(total, -1.0 / batch.mask.sum())
    return loss, tape, nodes


def sft_step(model: PolicyModel, opt: Adam, prompts, completions, lr: float, step: int) -> SFTReport:
    try:
        loss, tape, nodes = sft_loss(model, prompts, completions)
    except ad.NonFiniteError as exc:
        raise FloatingPointError(f"non-finite SFT loss at step {step}: {exc}") from None
    value = float(loss.value)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite SFT loss at step {step}")
    names = sorted(model.trainable)
    grads = tape.gradient(loss, [nodes[n] for n in names])
    opt.step(model.params, dict(zip(names, grads)), lr)
    return SFTReport(step, lr, value)


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Batch for ``step``; a pure function of its arguments so runs can resume."""
    rng = np.random.default_rng([seed, step])
    return rng.choice(n, size=batch_size, replace=batch_size > n)


def fit_sft(model: PolicyModel, prompts, completions, hyper, opt: Adam | None = None,
            start: int = 0, stop: int | None = None, on_step=None) -> Adam:
    """Run SFT steps ``start .. stop-1`` of a ``hyper.steps``-step schedule."""
    opt = opt or Adam()
    stop = hyper.steps if stop is None else stop
    for step in range(start, stop):
        idx = batch_indices(hyper.seed, step, len(prompts), hyper.batch_size)
        lr = lr_at(step, hyper.steps, hyper.lr, hyper.warmup_fraction)
        report = sft_step(model, opt, [prompts[i] for i in idx], [completions[i] for i in idx], lr, step)
        if on_step is not None:
            on_step(report)
    return opt
