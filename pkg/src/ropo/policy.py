"""A tiny decoder-only language model built on the tape.

Single-head causal attention, RMS-style pre-norm, a SiLU MLP and a learned
positional table. In ``wrap_mode="ropo"`` the query and value projections of
every layer become :class:`~ropo.layer.DecomposedWeight` instances and only
their rotation and magnitude parameters are trainable.

Token id 0 is the end-of-sequence marker.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .layer import DecomposedWeight, column_norms, merge, ropo_forward_node

EOS = 0
WRAPPED = ("q", "v")
ROPO_SUFFIXES = ("theta", "v1", "v2", "m")
_MASK = -1e30
_RMS_EPS = 1e-8

__all__ = [
    "EOS",
    "PolicyConfig",
    "PolicyModel",
    "Batch",
    "make_batch",
    "sequence_logprob",
    "sample",
    "snapshot_reference",
]


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int = 32
    d_model: int = 32
    context_length: int = 64
    num_layers: int = 2
    mlp_hidden: int = 64
    wrap_mode: str = "none"
    tie_embeddings: bool = True
    rotation_trainable: bool = True
    init_seed: int = 0

    def __post_init__(self):
        if self.d_model < 2:
            raise ValueError("d_model must be >= 2")
        if self.context_length < 2:
            raise ValueError("context_length must be >= 2")
        for name in ("vocab_size", "num_layers", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.wrap_mode not in ("none", "ropo"):
            raise ValueError(f"wrap_mode must be 'none' or 'ropo', got {self.wrap_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    """Right-padded token matrix with next-token targets and a completion mask."""

    tokens: np.ndarray  # (B, L) int
    targets: np.ndarray  # (B, L) int, targets[:, t] = tokens[:, t + 1]
    mask: np.ndarray  # (B, L) float, 1 where targets[:, t] is a completion token

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def make_batch(prompts: Sequence[Sequence[int]], completions: Sequence[Sequence[int]], config: PolicyConfig) -> Batch:
    if len(prompts) != len(completions):
        raise ValueError("prompts and completions must pair up")
    seqs = []
    for p, c in zip(prompts, completions):
        if len(p) == 0:
            raise ValueError("prompt must be non-empty")
        seq = list(p) + list(c)
        if len(seq) > config.context_length:
            raise ValueError(f"sequence length {len(seq)} exceeds context length {config.context_length}")
        for tok in seq:
            if not 0 <= tok < config.vocab_size:
                raise ValueError(f"token id {tok} outside vocabulary of size {config.vocab_size}")
        seqs.append(seq)
    L = max(len(s) for s in seqs)
    B = len(seqs)
    tokens = np.full((B, L), EOS, dtype=np.int64)
    mask = np.zeros((B, L))
    for b, (p, s) in enumerate(zip(prompts, seqs)):
        tokens[b, : len(s)] = s
        mask[b, len(p) - 1 : len(s) - 1] = 1.0
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    return Batch(tokens, targets, mask)


def _layer_names(l: int) -> dict[str, str]:
    base = f"layers.{l}"
    return {
        "norm1": f"{base}.norm1",
        "q": f"{base}.attn.q",
        "k": f"{base}.attn.k",
        "v": f"{base}.attn.v",
        "o": f"{base}.attn.o",
        "norm2": f"{base}.norm2",
        "w1": f"{base}.mlp.w1",
        "w2": f"{base}.mlp.w2",
    }


class PolicyModel:
    """Parameters live in a flat ``name -> ndarray`` mapping.

    ``trainable`` is the set of names that receive gradients; everything else
    enters the tape as a constant.
    """

    def __init__(self, config: PolicyConfig, params: dict[str, np.ndarray], trainable=None, frozen: bool = False):
        self.config = config
        self.params = params
        self.frozen = frozen
        if trainable is None:
            trainable = set() if frozen else self.default_trainable()
        self.trainable = set(trainable)

    # ------------------------------------------------------------------ setup

    @classmethod
    def init(cls, config: PolicyConfig, seed: int | None = None) -> "PolicyModel":
        if config.wrap_mode != "none":
            raise ValueError("initialize a dense model, then call wrap()")
        rng = np.random.default_rng(config.init_seed if seed is None else seed)
        d, h, V = config.d_model, config.mlp_hidden, config.vocab_size
        p = {
            "embed": rng.normal(0.0, d**-0.5, (V, d)),
            "pos": rng.normal(0.0, 0.1, (config.context_length, d)),
            "norm_f": np.ones(d),
        }
        if not config.tie_embeddings:
            p["head"] = rng.normal(0.0, d**-0.5, (d, V))
        for l in range(config.num_layers):
            n = _layer_names(l)
            p[n["norm1"]] = np.ones(d)
            p[n["norm2"]] = np.ones(d)
            for key in ("q", "k", "v", "o"):
                p[n[key] + ".weight"] = rng.normal(0.0, d**-0.5, (d, d))
            p[n["w1"]] = rng.normal(0.0, d**-0.5, (d, h))
            p[n["w2"]] = rng.normal(0.0, h**-0.5, (h, d))
        return cls(config, p)

    def default_trainable(self) -> set[str]:
        if self.config.wrap_mode == "none":
            return set(self.params)
        keep = ("m",) if not self.config.rotation_trainable else ROPO_SUFFIXES
        return {name for name in self.params if name.rsplit(".", 1)[-1] in keep and ".attn." in name}

    def wrapped_names(self) -> list[str]:
        """Prefixes of the query/value projections, e.g. ``layers.0.attn.q``."""
        return [_layer_names(l)[key] for l in range(self.config.num_layers) for key in WRAPPED]

    def wrap(self) -> "PolicyModel":
        """RoPO-wrapped copy: q/v weights become frozen directions plus trainables."""
        if self.config.wrap_mode == "ropo":
            raise ValueError("model is already wrapped")
        cfg = PolicyConfig(**{**self.config.to_dict(), "wrap_mode": "ropo"})
        params = {k: v.copy() for k, v in self.params.items()}
        d = cfg.d_model
        for prefix in self.wrapped_names():
            W = params[prefix + ".weight"]
            norms = column_norms(W)
            params[prefix + ".direction"] = W / norms
            params[prefix + ".theta"] = np.zeros(d - 1)
            e1 = np.zeros(d)
            e1[0] = 1.0
            params[prefix + ".v1"] = e1.copy()
            params[prefix + ".v2"] = e1.copy()
            params[prefix + ".m"] = norms.copy()
        return PolicyModel(cfg, params)

    def decomposed(self, prefix: str) -> DecomposedWeight:
        if self.config.wrap_mode != "ropo":
            raise ValueError("model is not RoPO-wrapped")
        p = self.params
        base = DecomposedWeight.from_weight(p[prefix + ".weight"])
        return base.with_params(p[prefix + ".theta"], p[prefix + ".v1"], p[prefix + ".v2"], p[prefix + ".m"])

    def effective_weight(self, prefix: str) -> np.ndarray:
        """Dense weight a projection currently applies (merged if wrapped)."""
        if self.config.wrap_mode == "ropo" and prefix in self.wrapped_names():
            return merge(self.decomposed(prefix))
        return self.params[prefix + ".weight"]

    def merged(self) -> "PolicyModel":
        """Dense model whose q/v weights are the merged RoPO matrices."""
        if self.config.wrap_mode != "ropo":
            return self.copy()
        cfg = PolicyConfig(**{**self.config.to_dict(), "wrap_mode": "none"})
        params = {}
        for name, value in self.params.items():
            if name.rsplit(".", 1)[-1] in ROPO_SUFFIXES + ("direction",):
                continue
            params[name] = value.copy()
        for prefix in self.wrapped_names():
            params[prefix + ".weight"] = self.effective_weight(prefix)
        return PolicyModel(cfg, params)

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.config, {k: v.copy() for k, v in self.params.items()}, set(self.trainable), self.frozen)

    def num_trainable(self) -> int:
        return int(np.sum([self.params[n].size for n in self.trainable]))

    # ---------------------------------------------------------------- forward

    def leaves(self, tape: ad.Tape) -> dict[str, ad.Node]:
        return {name: tape.leaf(value, trainable=name in self.trainable) for name, value in self.params.items()}

    def _project(self, x, nodes, prefix):
        if self.config.wrap_mode == "ropo" and prefix.rsplit(".", 1)[-1] in WRAPPED:
            return ropo_forward_node(
                x,
                self.params[prefix + ".direction"],
                nodes[prefix + ".theta"],
                nodes[prefix + ".v1"],
                nodes[prefix + ".v2"],
                nodes[prefix + ".m"],
            )
        return ad.matmul(x, nodes[prefix + ".weight"])

    @staticmethod
    def _rms_norm(x, gain):
        ms = ad.mean(ad.mul(x, x), axis=-1, keepdims=True)
        inv = ad.exp(ad.scale(ad.log(ad.add(ms, _RMS_EPS)), -0.5))
        return ad.mul(ad.mul(x, inv), gain)

    def logits(self, nodes: dict[str, ad.Node], tokens: np.ndarray) -> ad.Node:
        cfg = self.config
        B, L = tokens.shape
        if L > cfg.context_length:
            raise ValueError(f"sequence length {L} exceeds context length {cfg.context_length}")
        x = ad.add(ad.gather_rows(nodes["embed"], tokens), ad.gather_rows(nodes["pos"], np.arange(L)))
        causal = np.triu(np.full((L, L), _MASK), k=1)
        inv_sqrt_d = 1.0 / np.sqrt(cfg.d_model)
        for l in range(cfg.num_layers):
            n = _layer_names(l)
            h = self._rms_norm(x, nodes[n["norm1"]])
            q = self._project(h, nodes, n["q"])
            k = self._project(h, nodes, n["k"])
            v = self._project(h, nodes, n["v"])
            scores = ad.add(ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt_d), causal)
            att = ad.matmul(ad.softmax(scores), v)
            x = ad.add(x, self._project(att, nodes, n["o"]))
            h = self._rms_norm(x, nodes[n["norm2"]])
            a = ad.matmul(h, nodes[n["w1"]])
            a = ad.mul(a, ad.sigmoid(a))
            x = ad.add(x, ad.matmul(a, nodes[n["w2"]]))
        x = self._rms_norm(x, nodes["norm_f"])
        head = ad.transpose(nodes["embed"]) if cfg.tie_embeddings else nodes["head"]
        return ad.matmul(x, head)

    def token_logprobs(self, nodes, batch: Batch) -> ad.Node:
        """Log-probability of each next token, shape ``(B, L)`` (unmasked)."""
        return ad.take_last(ad.log_softmax(self.logits(nodes, batch.tokens)), batch.targets)

    def sequence_logprobs(self, nodes, batch: Batch) -> ad.Node:
        """Summed completion log-likelihood per row, shape ``(B,)``."""
        return ad.sum(ad.mul(self.token_logprobs(nodes, batch), batch.mask), axis=1)

    def evaluate(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        """Gradient-free ``(sequence logps, per-token logps)`` as arrays."""
        tape = ad.Tape(record=False)
        tok = self.token_logprobs(self.leaves(tape), batch).value
        return (tok * batch.mask).sum(axis=1), tok

    def next_token_distributions(self, batch: Batch) -> np.ndarray:
        """Full softmax over the vocabulary at every position, ``(B, L, V)``."""
        tape = ad.Tape(record=False)
        return np.exp(ad.log_softmax(self.logits(self.leaves(tape), batch.tokens)).value)


def sequence_logprob(model: PolicyModel, prompt: Sequence[int], completion: Sequence[int]) -> float:
    if len(completion) == 0:
        if len(prompt) == 0:
            raise ValueError("prompt must be non-empty")
        make_batch([prompt], [[]], model.config)
        return 0.0
    batch = make_batch([prompt], [completion], model.config)
    return float(model.evaluate(batch)[0][0])


def sample(
    model: PolicyModel,
    prompt: Sequence[int],
    max_new_tokens: int,
    temperature: float = 1.0,
    top_k: int | None = None,
    seed: int = 0,
) -> list[int]:
    """Sample a completion; the terminating end token is not included."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if top_k is not None and top_k < 1:
        raise ValueError("top_k must be >= 1")
    rng = np.random.default_rng(seed)
    seq = list(prompt)
    make_batch([seq], [[]], model.config)
    out: list[int] = []
    V = model.config.vocab_size
    for _ in range(max_new_tokens):
        if len(seq) >= model.config.context_length:
            break
        tape = ad.Tape(record=False)
        logits = model.logits(model.leaves(tape), np.asarray([seq])).value[0, -1] / temperature
        if top_k is not None and top_k < V:
            cutoff = np.sort(logits)[-top_k]
            logits = np.where(logits >= cutoff, logits, -np.inf)
        if top_k == 1:
            tok = int(np.argmax(logits))
        else:
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            tok = int(rng.choice(V, p=probs))
        if tok == EOS:
            break
        out.append(tok)
        seq.append(tok)
    return out


def snapshot_reference(model: PolicyModel) -> PolicyModel:
    """Frozen deep copy; its parameters are read-only and never trainable."""
    params = {}
    for name, value in model.params.items():
        arr = np.array(value, copy=True)
        arr.setflags(write=False)
        params[name] = arr
    return PolicyModel(copy.deepcopy(model.config), params, trainable=set(), frozen=True)
