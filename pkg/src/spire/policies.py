"""Stochastic policies: categorical (tabular or MLP) and Gaussian with scheduled std.

Every policy exposes the same small surface used by behavioral cloning and
finetuning:

``log_prob(obs, a)``, ``sample(obs, rng)``, ``mean_action(obs)``,
``entropy(obs)``, ``kl(ref, obs)`` (exact, per state), and the gradient
helpers ``grad_log_prob(obs, a, w)`` and ``grad_kl(ref, obs, w)`` returning
gradients with respect to ``params`` of the weighted sums.

Observations are batched: integer indices for tabular policies, 2-D float
arrays for MLP policies.
"""

from __future__ import annotations

import io
import json

import numpy as np

from .nn import MLP, flatten, unflatten

LOG_2PI = np.log(2 * np.pi)
FORMAT_VERSION = 1


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Policy:
    family = ""
    kind = ""

    @property
    def params(self):
        raise NotImplementedError

    def get_flat(self):
        return flatten(self.params)

    def set_flat(self, vec):
        for p, new in zip(self.params, unflatten(vec, self.params)):
            p[...] = new

    def act(self, obs, rng=None, mode="sample"):
        obs_b = self._batch(obs)
        if mode == "mean" or rng is None:
            return self.mean_action(obs_b)[0]
        return self.sample(obs_b, rng)[0]

    def _batch(self, obs):
        raise NotImplementedError

    def copy(self):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# categorical


class CategoricalPolicy(Policy):
    family = "categorical"

    def __init__(self, n_actions):
        self.n_actions = int(n_actions)

    def _forward(self, obs):
        raise NotImplementedError

    def _backward(self, cache, dlogits):
        raise NotImplementedError

    def log_probs_all(self, obs):
        logits, _ = self._forward(obs)
        return _log_softmax(logits)

    def probs(self, obs):
        return np.exp(self.log_probs_all(obs))

    def log_prob(self, obs, a):
        lp = self.log_probs_all(obs)
        a = np.asarray(a, dtype=int).reshape(-1)
        return lp[np.arange(len(a)), a]

    def sample(self, obs, rng):
        p = self.probs(obs)
        u = rng.uniform(size=(p.shape[0], 1))
        a = (np.cumsum(p, axis=1) < u).sum(axis=1)
        return np.minimum(a, self.n_actions - 1)

    def mean_action(self, obs):
        return np.argmax(self.log_probs_all(obs), axis=1)

    def entropy(self, obs):
        lp = self.log_probs_all(obs)
        return -(np.exp(lp) * lp).sum(axis=1)

    def kl(self, ref, obs):
        lp = self.log_probs_all(obs)
        lq = ref.log_probs_all(obs)
        with np.errstate(invalid="ignore"):
            terms = np.where(lp > -np.inf, np.exp(lp) * (lp - lq), 0.0)
        return terms.sum(axis=1)

    def grad_log_prob(self, obs, a, w):
        logits, cache = self._forward(obs)
        p = np.exp(_log_softmax(logits))
        a = np.asarray(a, dtype=int).reshape(-1)
        d = -p
        d[np.arange(len(a)), a] += 1.0
        d *= np.asarray(w, dtype=float)[:, None]
        return self._backward(cache, d)

    def grad_kl(self, ref, obs, w):
        logits, cache = self._forward(obs)
        lp = _log_softmax(logits)
        lq = ref.log_probs_all(obs)
        p = np.exp(lp)
        diff = lp - lq
        kl = (p * diff).sum(axis=1, keepdims=True)
        d = p * (diff - kl) * np.asarray(w, dtype=float)[:, None]
        return self._backward(cache, d)

    def grad_expected(self, obs, values, w):
        """Gradient of ``sum_i w_i sum_a pi(a|s_i) values[i, a]``."""
        logits, cache = self._forward(obs)
        p = np.exp(_log_softmax(logits))
        ev = (p * values).sum(axis=1, keepdims=True)
        d = p * (values - ev) * np.asarray(w, dtype=float)[:, None]
        return self._backward(cache, d)


class TabularPolicy(CategoricalPolicy):
    """Softmax over a logit table indexed by enumerated observation."""

    kind = "tabular"

    def __init__(self, n_obs, n_actions, table=None):
        super().__init__(n_actions)
        self.n_obs = int(n_obs)
        self.table = np.zeros((self.n_obs, self.n_actions)) if table is None else np.array(table, dtype=float)

    @property
    def params(self):
        return [self.table]

    def _idx(self, obs):
        idx = np.asarray(obs).reshape(-1)
        if idx.dtype.kind not in "iu" or (idx.size and (idx.min() < 0 or idx.max() >= self.n_obs)):
            raise ValueError(f"observation indices must be integers in [0, {self.n_obs})")
        return idx

    def _batch(self, obs):
        return np.asarray([obs]).reshape(-1)

    def _forward(self, obs):
        idx = self._idx(obs)
        return self.table[idx], idx

    def _backward(self, idx, dlogits):
        g = np.zeros_like(self.table)
        np.add.at(g, idx, dlogits)
        return [g]

    def copy(self):
        return TabularPolicy(self.n_obs, self.n_actions, self.table.copy())

    def meta(self):
        return {"n_obs": self.n_obs, "n_actions": self.n_actions}


class CategoricalMLPPolicy(CategoricalPolicy):
    kind = "categorical_mlp"

    def __init__(self, obs_dim, n_actions, hidden=(64, 64), rng=None, net=None):
        super().__init__(n_actions)
        self.obs_dim = int(obs_dim)
        self.hidden = tuple(hidden)
        self.net = net if net is not None else MLP((obs_dim, *hidden, n_actions), rng, out_scale=0.01)

    @property
    def params(self):
        return self.net.params

    def _batch(self, obs):
        return np.atleast_2d(np.asarray(obs, dtype=float))

    def _forward(self, obs):
        return self.net.forward(obs)

    def _backward(self, acts, dlogits):
        return self.net.backward(acts, dlogits)

    def copy(self):
        return CategoricalMLPPolicy(self.obs_dim, self.n_actions, self.hidden, net=self.net.copy())

    def meta(self):
        return {"obs_dim": self.obs_dim, "n_actions": self.n_actions, "hidden": list(self.hidden)}


class ResidualCategoricalPolicy(CategoricalPolicy):
    """Frozen reference log-probabilities plus a learned residual logit table."""

    kind = "residual_categorical"

    def __init__(self, reference: CategoricalPolicy, residual: TabularPolicy):
        super().__init__(reference.n_actions)
        self.reference = reference
        self.residual = residual

    @property
    def params(self):
        return self.residual.params

    def _batch(self, obs):
        return self.reference._batch(obs)

    def _forward(self, obs):
        ref = self.reference.log_probs_all(obs)
        res, cache = self.residual._forward(obs)
        return ref + res, cache

    def _backward(self, cache, dlogits):
        return self.residual._backward(cache, dlogits)

    def copy(self):
        return ResidualCategoricalPolicy(self.reference, self.residual.copy())


# ---------------------------------------------------------------------------
# Gaussian


class GaussianPolicy(Policy):
    """Diagonal Gaussian with a state-dependent mean and one global std.

    The std is not learned; training code sets ``policy.std`` from a schedule.
    Samples are clamped to ``[-1, 1]``.
    """

    family = "gaussian"

    def __init__(self, action_dim, std=0.5):
        self.action_dim = int(action_dim)
        self.std = float(std)

    def _forward(self, obs):
        raise NotImplementedError

    def _backward(self, cache, dmean):
        raise NotImplementedError

    def mean(self, obs):
        return self._forward(obs)[0]

    def log_prob(self, obs, a):
        mu = self.mean(obs)
        a = np.atleast_2d(np.asarray(a, dtype=float))
        z = (a - mu) / self.std
        return -0.5 * (z * z).sum(axis=1) - self.action_dim * (np.log(self.std) + 0.5 * LOG_2PI)

    def sample(self, obs, rng):
        mu = self.mean(obs)
        return np.clip(mu + self.std * rng.standard_normal(mu.shape), -1.0, 1.0)

    def mean_action(self, obs):
        return np.clip(self.mean(obs), -1.0, 1.0)

    def entropy(self, obs):
        n = len(self.mean(obs))
        return np.full(n, self.action_dim * (0.5 * np.log(2 * np.pi * np.e) + np.log(self.std)))

    def kl(self, ref, obs):
        mp, mq = self.mean(obs), ref.mean(obs)
        sp, sq = self.std, ref.std
        per_dim = np.log(sq / sp) + (sp**2 + (mp - mq) ** 2) / (2 * sq**2) - 0.5
        return per_dim.sum(axis=1)

    def grad_log_prob(self, obs, a, w):
        mu, cache = self._forward(obs)
        a = np.atleast_2d(np.asarray(a, dtype=float))
        d = (a - mu) / self.std**2 * np.asarray(w, dtype=float)[:, None]
        return self._backward(cache, d)

    def grad_kl(self, ref, obs, w):
        mu, cache = self._forward(obs)
        d = (mu - ref.mean(obs)) / ref.std**2 * np.asarray(w, dtype=float)[:, None]
        return self._backward(cache, d)

    def _batch(self, obs):
        return np.atleast_2d(np.asarray(obs, dtype=float))


class GaussianMLPPolicy(GaussianPolicy):
    kind = "gaussian_mlp"

    def __init__(self, obs_dim, action_dim, hidden=(64, 64), std=0.5, rng=None, out_scale=1.0, net=None):
        super().__init__(action_dim, std)
        self.obs_dim = int(obs_dim)
        self.hidden = tuple(hidden)
        self.net = net if net is not None else MLP((obs_dim, *hidden, action_dim), rng, out_scale=out_scale)

    @property
    def params(self):
        return self.net.params

    def _forward(self, obs):
        return self.net.forward(obs)

    def _backward(self, acts, dmean):
        return self.net.backward(acts, dmean)

    def copy(self):
        return GaussianMLPPolicy(self.obs_dim, self.action_dim, self.hidden, self.std, net=self.net.copy())

    def meta(self):
        return {"obs_dim": self.obs_dim, "action_dim": self.action_dim, "hidden": list(self.hidden), "std": self.std}


class ResidualGaussianPolicy(GaussianPolicy):
    """Action mean = reference mean + residual mean; std is the residual's.

    Only the reference *mean* enters the composition; the reference std is
    never sampled.
    """

    kind = "residual_gaussian"

    def __init__(self, reference: GaussianPolicy, residual: GaussianMLPPolicy):
        super().__init__(reference.action_dim, residual.std)
        self.reference = reference
        self.residual = residual

    @property
    def std(self):
        return self.residual.std

    @std.setter
    def std(self, value):
        if hasattr(self, "residual"):
            self.residual.std = float(value)

    @property
    def params(self):
        return self.residual.params

    def residual_mean(self, obs):
        return self.residual.mean(obs)

    def _forward(self, obs):
        res, cache = self.residual._forward(obs)
        return self.reference.mean(obs) + res, cache

    def _backward(self, cache, dmean):
        return self.residual._backward(cache, dmean)

    def copy(self):
        return ResidualGaussianPolicy(self.reference, self.residual.copy())


# ---------------------------------------------------------------------------
# persistence


def policy_state(policy) -> dict:
    state = {"kind": policy.kind, "version": FORMAT_VERSION}
    if isinstance(policy, (ResidualGaussianPolicy, ResidualCategoricalPolicy)):
        state["reference"] = policy_state(policy.reference)
        state["residual"] = policy_state(policy.residual)
        return state
    state["meta"] = policy.meta()
    state["params"] = [p.tolist() for p in policy.params]
    return state


def policy_from_state(state) -> Policy:
    kind = state["kind"]
    if state.get("version", 0) > FORMAT_VERSION:
        raise ValueError(f"checkpoint format {state['version']} is newer than supported")
    if kind == "residual_gaussian":
        return ResidualGaussianPolicy(policy_from_state(state["reference"]), policy_from_state(state["residual"]))
    if kind == "residual_categorical":
        return ResidualCategoricalPolicy(policy_from_state(state["reference"]), policy_from_state(state["residual"]))
    meta = state["meta"]
    params = [np.array(p, dtype=float) for p in state["params"]]
    if kind == "tabular":
        return TabularPolicy(meta["n_obs"], meta["n_actions"], params[0])
    if kind == "gaussian_mlp":
        pol = GaussianMLPPolicy(meta["obs_dim"], meta["action_dim"], meta["hidden"], meta["std"], rng=0)
    elif kind == "categorical_mlp":
        pol = CategoricalMLPPolicy(meta["obs_dim"], meta["n_actions"], meta["hidden"], rng=0)
    else:
        raise ValueError(f"unknown policy kind {kind!r}")
    for p, new in zip(pol.params, params):
        p[...] = new
    return pol


def save_policy(path, policy, extra=None):
    blob = {"policy": policy_state(policy), "extra": extra or {}}
    with open(path, "w") as fh:
        json.dump(blob, fh)


def load_policy(path):
    with open(path) as fh:
        blob = json.load(fh)
    return policy_from_state(blob["policy"]), blob.get("extra", {})


def dumps_policy(policy) -> str:
    buf = io.StringIO()
    json.dump(policy_state(policy), buf)
    return buf.getvalue()
