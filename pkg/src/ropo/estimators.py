"""scikit-learn style front ends for the two training stages.

>>> sft = SFTEstimator(steps=200).fit(examples)            # doctest: +SKIP
>>> po = PreferenceEstimator(base_model=sft.model_).fit(pairs)  # doctest: +SKIP
>>> po.score(heldout)                                      # doctest: +SKIP

``score`` is reward accuracy against the frozen reference;
``predict_proba`` returns ``[P(rejected wins), P(chosen wins)]`` per pair.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .policy import PolicyConfig, PolicyModel, make_batch, snapshot_reference
from .preference import (
    PairLogps,
    TrainHyperparams,
    dpo_loss,
    fit_preference,
    pair_logps,
    preference_probability,
    reward_accuracy,
)
from .training import fit_sft
from .validation import check_pairs, check_sequences

__all__ = ["SFTEstimator", "PreferenceEstimator"]


class SFTEstimator(BaseEstimator):
    """Train a dense policy by next-token cross-entropy on completions."""

    def __init__(
        self,
        vocab_size=32,
        d_model=32,
        context_length=64,
        num_layers=2,
        mlp_hidden=64,
        lr=1e-3,
        steps=2000,
        batch_size=32,
        warmup_fraction=0.1,
        random_state=0,
    ):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.context_length = context_length
        self.num_layers = num_layers
        self.mlp_hidden = mlp_hidden
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.warmup_fraction = warmup_fraction
        self.random_state = random_state

    def _policy_config(self) -> PolicyConfig:
        return PolicyConfig(
            vocab_size=self.vocab_size,
            d_model=self.d_model,
            context_length=self.context_length,
            num_layers=self.num_layers,
            mlp_hidden=self.mlp_hidden,
            init_seed=self.random_state,
        )

    def fit(self, X, y=None):
        prompts, completions = check_sequences(X, self.vocab_size)
        model = PolicyModel.init(self._policy_config())
        hyper = TrainHyperparams(
            lr=self.lr, steps=self.steps, batch_size=self.batch_size,
            warmup_fraction=self.warmup_fraction, seed=self.random_state,
        )
        losses = []
        fit_sft(model, prompts, completions, hyper, on_step=lambda r: losses.append(r.loss))
        self.model_ = model
        self.loss_curve_ = np.array(losses)
        return self

    def predict_log_proba(self, X) -> np.ndarray:
        """Completion log-likelihood of each ``(prompt, completion)`` item."""
        check_is_fitted(self, "model_")
        prompts, completions = check_sequences(X, self.vocab_size)
        return self.model_.evaluate(make_batch(prompts, completions, self.model_.config))[0]

    def score(self, X, y=None) -> float:
        """Negative mean per-token cross-entropy (higher is better)."""
        check_is_fitted(self, "model_")
        prompts, completions = check_sequences(X, self.vocab_size)
        batch = make_batch(prompts, completions, self.model_.config)
        seq = self.model_.evaluate(batch)[0]
        return float(seq.sum() / batch.mask.sum())


class PreferenceEstimator(BaseEstimator):
    """DPO on top of a dense base model, full-parameter or RoPO-wrapped.

    ``base_model`` is the SFT policy; it becomes the frozen reference and the
    starting point of training. With ``method="ropo"`` only the rotation and
    magnitude parameters of the query/value projections move.
    """

    def __init__(
        self,
        base_model=None,
        method="ropo",
        beta=0.1,
        lr=1e-3,
        steps=1000,
        batch_size=32,
        warmup_fraction=0.1,
        rotation_trainable=True,
        random_state=0,
    ):
        self.base_model = base_model
        self.method = method
        self.beta = beta
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.warmup_fraction = warmup_fraction
        self.rotation_trainable = rotation_trainable
        self.random_state = random_state

    def _hyper(self) -> TrainHyperparams:
        return TrainHyperparams(
            beta=self.beta, lr=self.lr, steps=self.steps, batch_size=self.batch_size,
            warmup_fraction=self.warmup_fraction, seed=self.random_state,
        )

    def fit(self, X, y=None):
        if not isinstance(self.base_model, PolicyModel):
            raise ValueError("base_model must be a PolicyModel")
        if self.method not in ("ropo", "dpo-full"):
            raise ValueError(f"method must be 'ropo' or 'dpo-full', got {self.method!r}")
        cfg = self.base_model.config
        pairs = check_pairs(X, cfg.vocab_size, cfg.context_length)
        base = self.base_model.merged() if cfg.wrap_mode == "ropo" else self.base_model
        self.reference_ = snapshot_reference(base)
        if self.method == "ropo":
            model = base.wrap()
            if not self.rotation_trainable:
                model = PolicyModel(replace(model.config, rotation_trainable=False), model.params)
        else:
            model = PolicyModel(base.config, {k: v.copy() for k, v in base.params.items()})
        history = []
        fit_preference(model, self.reference_, pairs, self._hyper(), on_step=history.append)
        self.model_ = model
        self.history_ = history
        self.n_trainable_ = model.num_trainable()
        return self

    def _logps(self, X) -> PairLogps:
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        return pair_logps(self.model_, self.reference_, check_pairs(X, cfg.vocab_size, cfg.context_length))

    def decision_function(self, X) -> np.ndarray:
        """Implicit-reward margin of each pair."""
        pc, pr, rc, rr = self._logps(X).arrays()
        return self.beta * ((pc - rc) - (pr - rr))

    def predict_proba(self, X) -> np.ndarray:
        p = np.atleast_1d(preference_probability(self._logps(X), self.beta))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        """1 where the chosen completion is preferred, else 0."""
        return (self.decision_function(X) > 0).astype(int)

    def loss(self, X) -> float:
        return dpo_loss(self._logps(X), self.beta)[0]

    def score(self, X, y=None) -> float:
        return reward_accuracy(self._logps(X), self.beta)
