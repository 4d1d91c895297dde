"""DPO objective, implicit-reward bookkeeping, and the preference training step."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .policy import PolicyModel, make_batch
from .training import Adam, batch_indices, lr_at

__all__ = [
    "PreferencePair",
    "PairLogps",
    "TrainHyperparams",
    "StepReport",
    "DivergenceRecord",
    "dpo_loss",
    "preference_probability",
    "reward_accuracy",
    "pair_logps",
    "train_step",
    "track_divergence",
    "fit_preference",
]


@dataclass(frozen=True)
class PreferencePair:
    prompt: tuple
    chosen: tuple
    rejected: tuple

    def __post_init__(self):
        if len(self.prompt) == 0:
            raise ValueError("prompt must be non-empty")
        for name in ("prompt", "chosen", "rejected"):
            object.__setattr__(self, name, tuple(int(t) for t in getattr(self, name)))

    def to_dict(self) -> dict:
        return {"prompt": list(self.prompt), "chosen": list(self.chosen), "rejected": list(self.rejected)}


@dataclass(frozen=True)
class PairLogps:
    """Sequence log-likelihoods (nats); fields may be floats or equal-length arrays."""

    policy_chosen: float | np.ndarray
    policy_rejected: float | np.ndarray
    ref_chosen: float | np.ndarray
    ref_rejected: float | np.ndarray

    def arrays(self):
        return tuple(np.asarray(getattr(self, f.name), dtype=np.float64) for f in fields(self))

    def __len__(self) -> int:
        return int(np.size(self.policy_chosen))


@dataclass(frozen=True)
class TrainHyperparams:
    beta: float = 0.1
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 1000
    warmup_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")


def _margin(logps: PairLogps, beta: float) -> np.ndarray:
    pc, pr, rc, rr = logps.arrays()
    for arr in (pc, pr, rc, rr):
        if not np.all(np.isfinite(arr)):
            raise ValueError("log-probabilities must be finite")
    return beta * ((pc - rc) - (pr - rr))


def dpo_loss(logps: PairLogps, beta: float) -> tuple[float, float]:
    """Mean ``-log sigmoid(margin)`` and mean margin over the pairs."""
    margin = _margin(logps, beta)
    loss = np.logaddexp(0.0, -margin)
    return float(np.mean(loss)), float(np.mean(margin))


def preference_probability(logps: PairLogps, beta: float):
    """``sigmoid(beta * log(pi(y_w)/pi(y_l)) - gamma)``, gamma from the reference."""
    pc, pr, rc, rr = logps.arrays()
    gamma = beta * (rc - rr)
    z = beta * (pc - pr) - gamma
    p = np.exp(-np.logaddexp(0.0, -z))
    return float(p) if p.ndim == 0 else p


def reward_accuracy(logps: PairLogps, beta: float) -> float:
    """Fraction of pairs with positive margin; exact ties count one half."""
    margin = np.atleast_1d(_margin(logps, beta))
    if margin.size == 0:
        raise ValueError("reward accuracy of an empty batch is undefined")
    return float((np.sum(margin > 0) + 0.5 * np.sum(margin == 0)) / margin.size)


def _chosen_rejected_batches(pairs: Sequence[PreferencePair], config):
    prompts = [p.prompt for p in pairs]
    return (
        make_batch(prompts, [p.chosen for p in pairs], config),
        make_batch(prompts, [p.rejected for p in pairs], config),
    )


def pair_logps(model: PolicyModel, reference: PolicyModel, pairs: Sequence[PreferencePair], chunk: int = 128) -> PairLogps:
    """Gradient-free sequence log-likelihoods for many pairs."""
    if not pairs:
        raise ValueError("no pairs given")
    cols = [[], [], [], []]
    for start in range(0, len(pairs), chunk):
        part = pairs[start : start + chunk]
        bc, br = _chosen_rejected_batches(part, model.config)
        cols[0].append(model.evaluate(bc)[0])
        cols[1].append(model.evaluate(br)[0])
        cols[2].append(reference.evaluate(bc)[0])
        cols[3].append(reference.evaluate(br)[0])
    return PairLogps(*(np.concatenate(c) for c in cols))


@dataclass(frozen=True)
class StepReport:
    step: int
    lr: float
    loss: float
    reward_accuracy: float
    policy_chosen: float
    policy_rejected: float
    ref_chosen: float
    ref_rejected: float


def train_step(
    model: PolicyModel,
    reference: PolicyModel,
    pairs: Sequence[PreferencePair],
    hyper: TrainHyperparams,
    opt: Adam,
    lr: float,
    step: int = 0,
) -> StepReport:
    """One Adam update on the mean DPO loss of ``pairs``."""
    if not reference.frozen:
        raise ValueError("reference model must be a frozen snapshot")
    bc, br = _chosen_rejected_batches(pairs, model.config)
    ref_c = reference.evaluate(bc)[0]
    ref_r = reference.evaluate(br)[0]

    tape = ad.Tape()
    nodes = model.leaves(tape)
    try:
        pol_c = model.sequence_logprobs(nodes, bc)
        pol_r = model.sequence_logprobs(nodes, br)
    except ad.NonFiniteError as exc:
        raise FloatingPointError(f"non-finite DPO loss at step {step}: {exc}") from None
    # margin = beta * ((pc - rc) - (pr - rr)); the reference part is a constant
    diff = ad.add(ad.add(pol_c, ad.neg(pol_r)), -(ref_c - ref_r))
    margin = ad.scale(diff, hyper.beta)
    loss = ad.neg(ad.mean(ad.log_sigmoid(margin)))

    value = float(loss.value)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite DPO loss at step {step}")
    names = sorted(model.trainable)
    grads = tape.gradient(loss, [nodes[n] for n in names])
    logps = PairLogps(pol_c.value, pol_r.value, ref_c, ref_r)
    report = StepReport(
        step=step,
        lr=lr,
        loss=value,
        reward_accuracy=reward_accuracy(logps, hyper.beta),
        policy_chosen=float(np.mean(pol_c.value)),
        policy_rejected=float(np.mean(pol_r.value)),
        ref_chosen=float(np.mean(ref_c)),
        ref_rejected=float(np.mean(ref_r)),
    )
    opt.step(model.params, dict(zip(names, grads)), lr)
    return report


@dataclass(frozen=True)
class DivergenceRecord:
    """Suppression proxies on held-out completions, all in nats.

    ``token_*`` pool every completion token; ``seq_*`` average per sequence;
    ``kl_full_*`` is the exact per-position KL(policy || reference) over the
    vocabulary, averaged over completion positions.
    """

    token_chosen: float
    token_rejected: float
    seq_chosen: float
    seq_rejected: float
    kl_full_chosen: float
    kl_full_rejected: float


def _full_kl(model, reference, batch) -> tuple[float, float]:
    p = model.next_token_distributions(batch)
    q = reference.next_token_distributions(batch)
    kl = np.sum(p * (np.log(p) - np.log(q)), axis=-1)
    return float(np.sum(kl * batch.mask)), float(batch.mask.sum())


def track_divergence(
    model: PolicyModel, reference: PolicyModel, pairs: Sequence[PreferencePair], chunk: int = 128
) -> DivergenceRecord:
    if not pairs:
        raise ValueError("held-out set is empty")
    sums = np.zeros(4)  # token-sum chosen, rejected; kl-sum chosen, rejected
    counts = np.zeros(2)
    seq = [[], []]
    for start in range(0, len(pairs), chunk):
        part = pairs[start : start + chunk]
        for k, batch in enumerate(_chosen_rejected_batches(part, model.config)):
            gap = reference.evaluate(batch)[0] - model.evaluate(batch)[0]
            seq[k].append(gap)
            sums[k] += gap.sum()
            counts[k] += batch.mask.sum()
            kl, _ = _full_kl(model, reference, batch)
            sums[2 + k] += kl
    seq_c, seq_r = (np.concatenate(s) for s in seq)
    return DivergenceRecord(
        token_chosen=float(sums[0] / counts[0]),
        token_rejected=float(sums[1] / counts[1]),
        seq_chosen=float(np.mean(seq_c)),
        seq_rejected=float(np.mean(seq_r)),
        kl_full_chosen=float(sums[2] / counts[0]),
        kl_full_rejected=float(sums[3] / counts[1]),
    )


def fit_preference(model: PolicyModel, reference: PolicyModel, pairs: Sequence[PreferencePair],
                   hyper: TrainHyperparams, opt: Adam | None = None, start: int = 0,
                   stop: int | None = None, on_step=None) -> Adam:
    """Run DPO steps ``start .. stop-1`` of a ``hyper.steps``-step schedule."""
    opt = opt or Adam()
    stop = hyper.steps if stop is None else stop
    for step in range(start, stop):
        idx = batch_indices(hyper.seed, step, len(pairs), hyper.batch_size)
        lr = lr_at(step, hyper.steps, hyper.lr, hyper.warmup_fraction)
        report = train_step(model, reference, [pairs[i] for i in idx], hyper, opt, lr, step)
        if on_step is not None:
            on_step(report)
    return opt
