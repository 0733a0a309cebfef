import numpy as np
import pytest

from spire.policies import (
    CategoricalMLPPolicy,
    GaussianMLPPolicy,
    ResidualGaussianPolicy,
    TabularPolicy,
    dumps_policy,
    load_policy,
    policy_from_state,
    policy_state,
    save_policy,
)


def test_uniform_logits_give_log_quarter():
    pol = TabularPolicy(3, 4)
    obs = np.repeat(np.arange(3), 4)
    acts = np.tile(np.arange(4), 3)
    assert np.allclose(pol.log_prob(obs, acts), np.log(0.25))


def test_gaussian_log_prob_peaks_at_mean(rng):
    pol = GaussianMLPPolicy(3, 2, (8,), std=0.3, rng=0)
    obs = rng.normal(size=(1, 3))
    mu = pol.mean(obs)
    at_mean = pol.log_prob(obs, mu)[0]
    for _ in range(50):
        off = mu + rng.normal(scale=0.1, size=mu.shape)
        assert pol.log_prob(obs, off)[0] < at_mean


@pytest.mark.parametrize("kind", ["categorical", "gaussian"])
def test_mc_log_prob_matches_negative_entropy(kind, rng):
    if kind == "categorical":
        pol = TabularPolicy(1, 5, rng.normal(size=(1, 5)))
        obs = np.zeros(100_000, dtype=int)
    else:
        pol = GaussianMLPPolicy(2, 2, (8,), std=0.05, rng=0, out_scale=0.01)
        obs = np.zeros((100_000, 2))
    a = pol.sample(obs, rng)
    est = -np.mean(pol.log_prob(obs, a))
    assert est == pytest.approx(pol.entropy(obs[:1])[0], rel=0.01)


def test_categorical_sampling_frequencies(rng):
    pol = TabularPolicy(1, 3, np.log([[0.2, 0.3, 0.5]]))
    a = pol.sample(np.zeros(50_000, dtype=int), rng)
    assert np.allclose(np.bincount(a, minlength=3) / len(a), [0.2, 0.3, 0.5], atol=0.01)


def test_mean_action_is_mode_and_samples_are_clipped(rng):
    pol = TabularPolicy(2, 3, np.array([[0, 2.0, 1], [5, 0, 0]]))
    assert pol.mean_action(np.array([0, 1])).tolist() == [1, 0]
    g = GaussianMLPPolicy(2, 2, (4,), std=10.0, rng=0)
    a = g.sample(rng.normal(size=(500, 2)), rng)
    assert a.min() >= -1 and a.max() <= 1


def test_tabular_rejects_bad_observation():
    pol = TabularPolicy(3, 2)
    with pytest.raises((IndexError, ValueError)):
        pol.log_prob(np.array([5]), np.array([0]))


def test_gaussian_rejects_wrong_obs_width():
    pol = GaussianMLPPolicy(3, 2, (4,), rng=0)
    with pytest.raises(ValueError):
        pol.mean(np.zeros((2, 5)))


def test_residual_gaussian_composition(rng):
    ref = GaussianMLPPolicy(3, 2, (8,), std=0.4, rng=1)
    res = GaussianMLPPolicy(3, 2, (8,), std=0.2, rng=2)
    pol = ResidualGaussianPolicy(ref, res)
    obs = rng.normal(size=(4, 3))
    assert np.allclose(pol.mean(obs), ref.mean(obs) + res.mean(obs))
    assert pol.std == 0.2
    a = rng.uniform(-1, 1, size=(4, 2))
    # oracle: density of mean(ref) + residual sample with the residual's std
    mu = ref.mean(obs) + res.mean(obs)
    z = (a - mu) / 0.2
    oracle = (-0.5 * z**2 - np.log(0.2) - 0.5 * np.log(2 * np.pi)).sum(axis=1)
    assert np.allclose(pol.log_prob(obs, a), oracle)


@pytest.mark.parametrize(
    "make",
    [
        lambda: TabularPolicy(4, 3, np.arange(12.0).reshape(4, 3)),
        lambda: CategoricalMLPPolicy(3, 4, (5,), rng=0),
        lambda: GaussianMLPPolicy(3, 2, (5, 5), std=0.3, rng=0),
        lambda: ResidualGaussianPolicy(GaussianMLPPolicy(3, 2, (5,), rng=0), GaussianMLPPolicy(3, 2, (5,), rng=1)),
    ],
)
def test_persistence_round_trip(make, tmp_path):
    pol = make()
    path = tmp_path / "p.json"
    save_policy(path, pol, {"note": 1})
    back, extra = load_policy(path)
    assert extra["note"] == 1
    assert np.array_equal(back.get_flat(), pol.get_flat())
    assert type(back) is type(pol)
    assert dumps_policy(policy_from_state(policy_state(pol))) == dumps_policy(pol)


def test_flat_parameter_round_trip():
    pol = GaussianMLPPolicy(3, 2, (5,), rng=0)
    v = pol.get_flat() + 1.0
    pol.set_flat(v)
    assert np.array_equal(pol.get_flat(), v)
