import math
import warnings

import numpy as np
import pytest

from spire.core import Transition
from spire.envs import GridChain, PointChain
from spire.errors import ArchitectureMismatch, ConfigError
from spire.finetune import (
    CURVE_COLUMNS,
    FinetuneConfig,
    Learner,
    NStepAccumulator,
    NStepItem,
    ReplayBuffer,
    architecture,
    finetune_update,
    gail_discriminator_oracle,
    gail_objective,
    kl_divergence,
    run_finetuning,
    warmstart,
)
from spire.policies import GaussianMLPPolicy, TabularPolicy
from spire.verify import actor_gradient_check, gail_random_mdps, kl_checks


@pytest.fixture
def tab_bc(rng):
    return TabularPolicy(100, 5, rng.normal(scale=2, size=(100, 5)))


@pytest.fixture
def gauss_bc():
    return GaussianMLPPolicy(4, 2, (16, 16), std=0.3, rng=0)


# -- warmstart ---------------------------------------------------------------


def test_init_mode_copies_behaviour(tab_bc, gauss_bc, rng):
    pol = warmstart(tab_bc, "init")
    s = np.arange(100)
    a = rng.integers(0, 5, 100)
    assert np.max(np.abs(pol.log_prob(s, a) - tab_bc.log_prob(s, a))) < 1e-9
    assert pol.table is not tab_bc.table
    g = warmstart(gauss_bc, "init")
    obs = rng.normal(size=(100, 4))
    act = rng.uniform(-1, 1, (100, 2))
    assert np.max(np.abs(g.log_prob(obs, act) - gauss_bc.log_prob(obs, act))) < 1e-9


def test_residual_mode_starts_near_reference(tab_bc, gauss_bc, rng):
    obs = rng.normal(size=(100, 4))
    r = warmstart(gauss_bc, "residual", seed=3)
    assert np.max(np.linalg.norm(r.mean_action(obs) - gauss_bc.mean_action(obs), axis=1)) < 1e-3
    rc = warmstart(tab_bc, "residual")
    s = np.arange(100)
    assert np.allclose(rc.probs(s), tab_bc.probs(s))
    # reference stays frozen while the residual moves
    rc.params[0] += 1.0
    assert np.allclose(rc.reference.probs(s), tab_bc.probs(s))


def test_residual_sampling_matches_composed_oracle(gauss_bc, rng):
    r = warmstart(gauss_bc, "residual", seed=1)
    r.std = 0.05
    obs = np.tile(rng.normal(size=(1, 4)), (20000, 1))
    a = r.sample(obs, np.random.default_rng(9))
    target_mu = gauss_bc.mean(obs[:1]) + r.residual.mean(obs[:1])
    assert np.allclose(a.mean(axis=0), target_mu[0], atol=2e-3)
    assert np.allclose(a.std(axis=0), 0.05, rtol=0.03)


def test_architecture_mismatch(gauss_bc):
    other = architecture(GaussianMLPPolicy(4, 2, (8,), rng=0))
    with pytest.raises(ArchitectureMismatch):
        warmstart(gauss_bc, "init", target_arch=other)
    assert warmstart(gauss_bc, "init", target_arch=architecture(gauss_bc)) is not None
    with pytest.raises(ConfigError):
        warmstart(gauss_bc, "bogus")


# -- KL -----------------------------------------------------------------------


def test_kl_hand_value():
    p = TabularPolicy(1, 2, np.log([[0.5, 0.5]]))
    q = TabularPolicy(1, 2, np.log([[0.9, 0.1]]))
    expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert kl_divergence(p, q, np.array([0])) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.5108, abs=1e-4)


def test_kl_self_is_zero(tab_bc, gauss_bc, rng):
    assert kl_divergence(tab_bc, tab_bc.copy(), np.arange(100)) == 0.0
    est = kl_divergence(gauss_bc, gauss_bc.copy(), rng.normal(size=(50, 4)), rng=0)
    assert abs(est) < 1e-12


def test_gaussian_kl_matches_closed_form(rng):
    p = GaussianMLPPolicy(1, 1, (4,), std=0.5, rng=0)
    q = p.copy()
    q.net.params[-1][...] += 0.4  # shift the output bias
    obs = rng.normal(size=(200, 1))
    closed = np.mean(((p.mean(obs) - q.mean(obs)) ** 2).sum(axis=1) / (2 * 0.5**2))
    est = kl_divergence(p, q, obs, n_samples=512, rng=1)
    assert est == pytest.approx(closed, rel=0.02)
    assert np.mean(p.kl(q, obs)) == pytest.approx(closed, rel=1e-9)


def test_kl_support_violation_is_infinite():
    p = TabularPolicy(1, 2, np.log([[0.5, 0.5]]))
    q = TabularPolicy(1, 2, np.array([[0.0, -np.inf]]))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert kl_divergence(p, q, np.array([0])) == math.inf
    assert w


def test_kl_nonnegative_and_penalty_gradient_vanishes():
    mn, mg = kl_checks(seed=1, trials=100)
    assert mn >= 0 and mg < 1e-6


# -- replay and n-step ----------------------------------------------------------


def test_nstep_success_does_not_bootstrap_but_truncation_does():
    acc = NStepAccumulator(3, 0.9)
    items = []
    for t, (r, done, trunc) in enumerate([(0, False, False), (0, False, False), (1, True, False)]):
        items += acc.push(0, t, Transition(t, 0, t + 1, r, 1, done, trunc), t + 1)
    assert [i.discount for i in items] == [0.0, 0.0, 0.0]
    assert items[0].ret == pytest.approx(0.81) and items[2].ret == 1.0
    acc = NStepAccumulator(3, 0.9)
    items = []
    for t in range(2):
        items += acc.push(0, t, Transition(t, 0, t + 1, 0, 1, False, t == 1), t + 1)
    assert [i.discount for i in items] == pytest.approx([0.81, 0.9])
    assert items[0].next_obs == 2


def test_nstep_streams_are_per_worker():
    acc = NStepAccumulator(2, 0.5)
    out = acc.push(0, "a", Transition(0, 0, 0, 0, 1), "b")
    out += acc.push(1, "x", Transition(0, 0, 0, 0, 1), "y")
    assert out == []
    out = acc.push(0, "b", Transition(0, 0, 0, 0, 1), "c")
    assert len(out) == 1 and out[0].obs == "a" and out[0].next_obs == "c"


def test_replay_capacity_and_reward_guard():
    buf = ReplayBuffer(5, seed=0)
    for k in range(12):
        buf.add(NStepItem(k, 0, k % 2, 0.0, k, 0.0, 1))
    assert len(buf) == 5
    assert {i.obs for i in buf.sample(200)} == {7, 8, 9, 10, 11}
    with pytest.raises(ValueError):
        buf.add(NStepItem(0, 0, 2, 0.0, 0, 0.0, 1))


# -- updates -------------------------------------------------------------------


def _batch(states, acts, rewards, n_next=None):
    return [NStepItem(int(s), int(a), int(r), float(r), int(s), 0.0, 1) for s, a, r in zip(states, acts, rewards)]


def test_huge_alpha_pulls_policy_to_reference(rng):
    ref = TabularPolicy(10, 4, rng.normal(size=(10, 4)))
    pol = TabularPolicy(10, 4, rng.normal(size=(10, 4)))
    learner = Learner(pol, ref, FinetuneConfig(alpha=1e6, actor_lr=1e-3))
    s = np.arange(10)
    k0 = kl_divergence(pol, ref, s)
    for _ in range(200):
        st = rng.integers(0, 10, 64)
        rep = finetune_update(learner, _batch(st, pol.sample(st, rng), np.zeros(64)))
        assert not rep.aborted
    assert kl_divergence(pol, ref, s) <= k0


def test_bandit_plain_policy_gradient():
    rng = np.random.default_rng(0)
    pol = TabularPolicy(1, 2)
    learner = Learner(pol, pol.copy(), FinetuneConfig(alpha=0.0, actor_lr=0.05, critic="tabular"))
    for _ in range(1000):
        s = np.zeros(32, dtype=int)
        a = pol.sample(s, rng)
        finetune_update(learner, _batch(s, a, (a == 1).astype(int)))
    assert pol.probs(np.array([0]))[0, 1] >= 0.99


@pytest.mark.parametrize("seed", [0, 1])
def test_actor_gradient_matches_finite_differences(seed):
    assert actor_gradient_check(seed=seed) < 5e-2


def test_nan_gradient_aborts_without_touching_parameters(rng):
    pol = TabularPolicy(3, 2)
    learner = Learner(pol, pol.copy(), FinetuneConfig())
    before = pol.get_flat().copy()
    bad = [NStepItem(0, 1, 0, float("nan"), 1, 0.0, 1)]
    rep = finetune_update(learner, bad)
    assert rep.aborted and "non-finite" in rep.diagnostic
    assert np.array_equal(pol.get_flat(), before)


def test_report_fields(rng):
    pol = TabularPolicy(3, 2, rng.normal(size=(3, 2)))
    learner = Learner(pol, pol.copy(), FinetuneConfig())
    rep = finetune_update(learner, _batch([0, 1, 2], [0, 1, 0], [0, 1, 0]))
    assert rep.reward_mean == pytest.approx(1 / 3) and rep.kl == pytest.approx(0.0)
    assert np.isfinite(rep.actor_loss) and np.isfinite(rep.critic_loss)


def test_adaptive_alpha_reacts_to_kl(rng):
    ref = TabularPolicy(5, 3)
    pol = TabularPolicy(5, 3, rng.normal(scale=3, size=(5, 3)))
    learner = Learner(pol, ref, FinetuneConfig(alpha=0.1, adaptive_alpha=True, target_kl=0.01))
    finetune_update(learner, _batch(np.arange(5), np.zeros(5), np.zeros(5)))
    assert learner.alpha > 0.1


def test_config_validation():
    with pytest.raises(ConfigError):
        FinetuneConfig(alpha=-1)
    with pytest.raises(ConfigError):
        FinetuneConfig(n_step=0)


# -- driver ------------------------------------------------------------------


def _small_cfg(**kw):
    base = dict(total_frames=1500, seed_frames=300, batch_size=32, eval_every=500, eval_rollouts=5)
    base.update(kw)
    return FinetuneConfig(**base)


def _grid_bc():
    from spire.envs import ScriptedExpert
    from spire.imitation import BCConfig, collect_demos, train_bc

    env = GridChain(k=1)
    return train_bc(collect_demos(env, ScriptedExpert(env, 0.1, seed=0), 3, seed=0), BCConfig(epochs=100)).policy


def _evaluator():
    from spire.harness import evaluate_policy

    env = GridChain(k=1)
    return lambda p: evaluate_policy(p, env, 5, seed=0)


def test_zero_updates_returns_warmstart():
    bc = _grid_bc()
    res = run_finetuning(lambda i: GridChain(k=1), bc, _small_cfg(total_frames=0), evaluator=_evaluator())
    s = np.arange(bc.n_obs)
    assert np.array_equal(res.policy.probs(s), bc.probs(s))
    res = run_finetuning(lambda i: GridChain(k=1), bc, _small_cfg(seed_frames=10**6))
    assert np.array_equal(res.final_policy.probs(s), bc.probs(s))


def test_finetuning_is_reproducible_and_writes_layout(tmp_path):
    bc = _grid_bc()
    a = run_finetuning(lambda i: GridChain(k=1), bc, _small_cfg(), _evaluator(), run_dir=str(tmp_path))
    b = run_finetuning(lambda i: GridChain(k=1), bc, _small_cfg(), _evaluator())
    strip = lambda c: [{k: v for k, v in r.items() if k != "wall_seconds"} for r in c]
    assert strip(a.curve) == strip(b.curve)
    assert np.array_equal(a.final_policy.get_flat(), b.final_policy.get_flat())
    header = (tmp_path / "curves.csv").read_text().splitlines()[0]
    assert header == ",".join(CURVE_COLUMNS)
    assert (tmp_path / "checkpoints" / "best.json").exists()
    assert a.stats.frames == 1500


def test_residual_and_gaussian_runs_are_finite():
    bc = _grid_bc()
    res = run_finetuning(lambda i: GridChain(k=1), bc, _small_cfg(mode="residual"))
    assert not res.aborted and not res.error
    g = GaussianMLPPolicy(3, 2, (16, 16), std=0.3, rng=0)
    res = run_finetuning(lambda i: PointChain(k=1), g, _small_cfg(total_frames=600, seed_frames=200))
    assert not res.aborted and not res.error
    assert np.all(np.isfinite(res.final_policy.get_flat()))


# -- discriminator oracle ------------------------------------------------------------


def test_discriminator_uniform_expert():
    rep = gail_discriminator_oracle(np.full((3, 2), 0.5))
    assert np.allclose(rep.D, 0.5, atol=1e-4)


def test_discriminator_single_state():
    rep = gail_discriminator_oracle(np.array([[0.7, 0.3]]))
    assert np.allclose(rep.D, [[0.7, 0.3]], atol=1e-4)
    assert rep.log_error < 1e-4


def test_discriminator_is_local_max(rng):
    pi = rng.dirichlet(np.ones(3), size=4)
    rho = rng.dirichlet(np.ones(4))
    rep = gail_discriminator_oracle(pi, rho)
    best = gail_objective(rep.D, pi, rho)
    for _ in range(100):
        D = rep.D.copy()
        i, j = rng.integers(4), rng.integers(3)
        D[i, j] *= np.exp(rng.choice([-1, 1]) * rng.uniform(1e-3, 0.2))
        assert gail_objective(D, pi, rho) < best


def test_discriminator_random_mdps():
    assert max(gail_random_mdps(5, seed=3)) < 1e-3


def test_discriminator_rejects_partial_support():
    with pytest.raises(ValueError):
        gail_discriminator_oracle(np.array([[1.0, 0.0]]))
