import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ropo.data import SyntheticTask, generate_pairs, sft_examples
from ropo.estimators import PreferenceEstimator, SFTEstimator

TASK = SyntheticTask(vocab_size=11, prompt_lengths=(3, 4), target_length=3, strides=(1, 2))
SMALL = dict(vocab_size=11, d_model=6, context_length=16, num_layers=1, mlp_hidden=8)


@pytest.fixture(scope="module")
def sft():
    prompts, completions = sft_examples(TASK, 64, seed=0)
    return SFTEstimator(**SMALL, steps=40, batch_size=8, lr=1e-2).fit(list(zip(prompts, completions)))


@pytest.fixture(scope="module")
def pairs():
    return generate_pairs(TASK, 32, seed=1)


def test_params_round_trip():
    est = SFTEstimator(steps=5, lr=0.1)
    assert est.get_params()["steps"] == 5
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(batch_size=4)
    assert est.batch_size == 4


def test_sft_fit_and_score(sft):
    assert sft.loss_curve_.shape == (40,)
    assert sft.loss_curve_[-5:].mean() < sft.loss_curve_[0]
    prompts, completions = sft_examples(TASK, 8, seed=9)
    X = list(zip(prompts, completions))
    lp = sft.predict_log_proba(X)
    assert lp.shape == (8,) and np.all(lp <= 0)
    assert sft.score(X) > -np.log(11)


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        SFTEstimator().score([([1, 2], [3])])
    with pytest.raises(NotFittedError):
        PreferenceEstimator().predict([([1, 2], [3], [4])])


def test_preference_estimator_requires_model(pairs):
    with pytest.raises(ValueError, match="base_model"):
        PreferenceEstimator().fit(pairs)


@pytest.mark.parametrize("method", ["ropo", "dpo-full"])
def test_preference_fit_predict(sft, pairs, method):
    before = {k: v.copy() for k, v in sft.model_.params.items()}
    est = PreferenceEstimator(base_model=sft.model_, method=method, steps=20, batch_size=8, lr=1e-2)
    est.fit(pairs)
    assert len(est.history_) == 20
    proba = est.predict_proba(pairs)
    assert proba.shape == (32, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(np.unique(est.predict(pairs))) <= {0, 1}
    assert est.score(pairs) > 0.5
    assert est.loss(pairs) < np.log(2)
    if method == "ropo":
        assert est.n_trainable_ == 2 * (4 * 6 - 1)
    for k, v in before.items():
        assert np.array_equal(sft.model_.params[k], v)


def test_magnitude_only_ablation(sft, pairs):
    est = PreferenceEstimator(base_model=sft.model_, steps=2, batch_size=4, rotation_trainable=False).fit(pairs)
    assert est.n_trainable_ == 2 * 6


def test_bad_method(sft, pairs):
    with pytest.raises(ValueError, match="method"):
        PreferenceEstimator(base_model=sft.model_, method="ppo").fit(pairs)
