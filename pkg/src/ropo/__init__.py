"""Preference optimization through frozen-direction rotations, on a desk-scale decoder."""

from .layer import DecomposedWeight, footprint, merge, ropo_forward
from .metrics import delta_he, distinct_n, diversity, hyperspherical_energy, length_weighted_winrate
from .policy import PolicyConfig, PolicyModel, sample, sequence_logprob, snapshot_reference
from .preference import PairLogps, PreferencePair, TrainHyperparams, dpo_loss, preference_probability, reward_accuracy
from .rotations import MultiGranularityRotation, apply_fast, materialize, solve_ladder_angles

__version__ = "0.1.0"

__all__ = [
    "DecomposedWeight",
    "footprint",
    "merge",
    "ropo_forward",
    "delta_he",
    "distinct_n",
    "diversity",
    "hyperspherical_energy",
    "length_weighted_winrate",
    "PolicyConfig",
    "PolicyModel",
    "sample",
    "sequence_logprob",
    "snapshot_reference",
    "PairLogps",
    "PreferencePair",
    "TrainHyperparams",
    "dpo_loss",
    "preference_probability",
    "reward_accuracy",
    "MultiGranularityRotation",
    "apply_fast",
    "materialize",
    "solve_ladder_angles",
]
