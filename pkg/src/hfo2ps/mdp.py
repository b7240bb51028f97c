"""Tabular episodic linear mixture MDPs.

Arrays follow one layout throughout the package:

* features ``phi[s_next, s, a, :]``
* kernel ``P[s, a, s_next]``
* policy ``pi[h, s, a]``
* occupancy ``z[h, s, a, s_next]``
* reward ``r[s, a]`` (homogeneous across stages)

Stages are 0-based in code; stage ``h`` here is stage ``h + 1`` in the usual
1-based episodic notation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy import sparse

ALGEBRA_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class LinearMixtureModel:
    """Episodic homogeneous MDP whose kernel is ``<phi(s'|s,a), theta_star>``.

    ``theta_star`` is hidden from learners; only evaluation code reads it.
    """

    features: np.ndarray
    theta_star: np.ndarray
    horizon: int
    norm_bound: float
    initial_state: int = 0

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=float)
        theta = np.ascontiguousarray(self.theta_star, dtype=float)
        if feats.ndim != 4 or feats.shape[0] != feats.shape[1]:
            raise ValueError(f"features must have shape (S, S, A, d), got {feats.shape}")
        if theta.shape != (feats.shape[3],):
            raise ValueError("theta_star dimension does not match features")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 <= self.initial_state < feats.shape[0]:
            raise ValueError("initial_state out of range")
        feats.setflags(write=False)
        theta.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "theta_star", theta)

    @property
    def num_states(self) -> int:
        return self.features.shape[0]

    @property
    def num_actions(self) -> int:
        return self.features.shape[2]

    @property
    def dim(self) -> int:
        return self.features.shape[3]

    @cached_property
    def kernel(self) -> np.ndarray:
        """True transition kernel ``P[s, a, s']``."""
        P = np.einsum("tsad,d->sat", self.features, self.theta_star)
        P.setflags(write=False)
        return P

    @cached_property
    def kernel_matrix(self) -> sparse.csr_matrix:
        """Kernel as a sparse ``(S*A, S)`` matrix; deterministic trees stay cheap."""
        S, A = self.num_states, self.num_actions
        P = self.kernel.reshape(S * A, S)
        return sparse.csr_matrix(np.where(np.abs(P) > 0.0, P, 0.0))

    @cached_property
    def feature_rows(self) -> np.ndarray:
        """``B[s, a]``: the ``(S, d)`` matrix stacking ``phi(.|s,a)``, shape (S, A, S, d)."""
        B = np.ascontiguousarray(np.transpose(self.features, (1, 2, 0, 3)))
        B.setflags(write=False)
        return B

    def check_invariants(self, n_random: int = 100, seed: int = 0) -> dict[str, float]:
        """Return the worst violation of each model invariant (0 means satisfied).

        Keys: ``row_sum`` (|sum_s' P - 1|), ``negativity`` (-min P),
        ``theta_norm`` (||theta*|| - B), ``phi_norm`` (max ||phi_V|| - 1).
        """
        P = self.kernel
        rng = np.random.default_rng(seed)
        S = self.num_states
        tests = [np.ones(S), np.zeros(S), *np.eye(S), *rng.random((n_random, S))]
        worst_phi = max(float(np.linalg.norm(phi_v_all(self, V), axis=-1).max()) for V in tests)
        return {
            "row_sum": float(np.abs(P.sum(axis=2) - 1.0).max()),
            "negativity": max(0.0, -float(P.min())),
            "theta_norm": max(0.0, float(np.linalg.norm(self.theta_star)) - self.norm_bound),
            "phi_norm": max(0.0, worst_phi - 1.0),
        }

    def validate(self, tol: float = ALGEBRA_TOL, n_random: int = 100) -> None:
        v = self.check_invariants(n_random=n_random)
        bad = {k: x for k, x in v.items() if x > tol}
        if bad:
            raise ValueError(f"linear mixture model invariants violated: {bad}")

    def to_json(self) -> str:
        S, _, A, d = self.features.shape
        return json.dumps(
            {
                "num_states": S,
                "num_actions": A,
                "horizon": self.horizon,
                "dim": d,
                "initial_state": self.initial_state,
                "norm_bound": self.norm_bound,
                "features": self.features.ravel(order="C").tolist(),
                "theta_star": self.theta_star.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "LinearMixtureModel":
        doc = json.loads(text)
        S, A, d = doc["num_states"], doc["num_actions"], doc["dim"]
        feats = np.asarray(doc["features"], dtype=float).reshape(S, S, A, d)
        return cls(
            features=feats,
            theta_star=np.asarray(doc["theta_star"], dtype=float),
            horizon=int(doc["horizon"]),
            norm_bound=float(doc["norm_bound"]),
            initial_state=int(doc.get("initial_state", 0)),
        )


@dataclass(frozen=True, eq=False)
class RewardFunction:
    """Homogeneous reward table ``r(s, a)`` with entries in ``[0, 1/H]``."""

    values: np.ndarray
    horizon: int

    def __post_init__(self):
        r = np.array(self.values, dtype=float)
        if r.ndim != 2:
            raise ValueError("reward table must be 2-d (S, A)")
        cap = 1.0 / self.horizon
        if r.min() < 0.0 or r.max() > cap * (1.0 + 1e-12):
            raise ValueError(f"reward entries must lie in [0, 1/H] = [0, {cap}]")
        r.setflags(write=False)
        object.__setattr__(self, "values", r)


@dataclass(frozen=True, eq=False)
class StochasticPolicy:
    """Stage-dependent policy ``pi[h, s, a]``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 3:
            raise ValueError("policy must have shape (H, S, A)")
        if p.min() < 0.0 or np.abs(p.sum(axis=2) - 1.0).max() > ALGEBRA_TOL:
            raise ValueError("each policy row must be a probability vector")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, H: int, S: int, A: int) -> "StochasticPolicy":
        return cls(np.full((H, S, A), 1.0 / A))

    @classmethod
    def deterministic(cls, actions: np.ndarray, num_actions: int) -> "StochasticPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros(actions.shape + (num_actions,))
        np.put_along_axis(probs, actions[..., None], 1.0, axis=-1)
        return cls(probs)


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    """Stagewise occupancy ``z[h, s, a, s']``."""

    z: np.ndarray

    def __post_init__(self):
        z = np.array(self.z, dtype=float)
        if z.ndim != 4 or z.shape[1] != z.shape[3]:
            raise ValueError("occupancy must have shape (H, S, A, S)")
        if z.min() < 0.0:
            raise ValueError("occupancy entries must be nonnegative")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    def residuals(self, initial_state: int) -> dict[str, float]:
        """Max violation of normalization, flow conservation and initial support."""
        return occupancy_residuals(self.z, initial_state)


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("trajectory needs H+1 states for H actions")
        if self.rewards is not None and len(self.rewards) != len(self.actions):
            raise ValueError("one reward per action expected")


class InducedModel(NamedTuple):
    policy: StochasticPolicy
    transition: np.ndarray  # (H, S, A, S)
    unvisited_states: np.ndarray  # bool (H, S): policy row defaulted to uniform
    unvisited_pairs: np.ndarray  # bool (H, S, A): transition row defaulted to uniform


def occupancy_residuals(z: np.ndarray, initial_state: int) -> dict[str, float]:
    out_mass = z.sum(axis=(2, 3))  # (H, S)
    in_mass = z.sum(axis=(1, 2))  # (H, S) mass arriving at s' after stage h
    e0 = np.zeros(z.shape[1])
    e0[initial_state] = 1.0
    return {
        "normalization": float(np.abs(z.sum(axis=(1, 2, 3)) - 1.0).max()),
        "flow": float(np.abs(out_mass[1:] - in_mass[:-1]).max()) if z.shape[0] > 1 else 0.0,
        "initial": float(np.abs(out_mass[0] - e0).max()),
        "negativity": max(0.0, -float(z.min())),
    }


def phi_v(model: LinearMixtureModel, V: np.ndarray, s: int, a: int) -> np.ndarray:
    """Value-aggregated feature ``sum_s' phi(s'|s,a) V(s')``."""
    V = np.asarray(V, dtype=float)
    if V.shape != (model.num_states,):
        raise ValueError("value vector has wrong length")
    _check_pair(model, s, a)
    return model.features[:, s, a, :].T @ V


def phi_v_all(model: LinearMixtureModel, V: np.ndarray) -> np.ndarray:
    """``phi_V(s, a)`` for every pair, shape (S, A, d)."""
    return np.einsum("tsad,t->sad", model.features, np.asarray(V, dtype=float))


def _check_pair(model: LinearMixtureModel, s: int, a: int) -> None:
    if not (0 <= s < model.num_states and 0 <= a < model.num_actions):
        raise IndexError(f"state-action pair ({s}, {a}) out of range")


def transition_probs(model: LinearMixtureModel, s: int, a: int) -> np.ndarray:
    _check_pair(model, s, a)
    return model.kernel[s, a].copy()


def conditional_variance(model: LinearMixtureModel, V: np.ndarray, s: int, a: int) -> float:
    _check_pair(model, s, a)
    p = model.kernel[s, a]
    V = np.asarray(V, dtype=float)
    mean = p @ V
    # centred form avoids cancellation in E[V^2] - E[V]^2
    return float(max(0.0, p @ (V - mean) ** 2))


def sample_episode(
    model: LinearMixtureModel,
    policy: StochasticPolicy,
    reward: RewardFunction | None = None,
    seed: int | np.random.Generator | None = None,
) -> Trajectory:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    H = model.horizon
    if policy.probs.shape[0] != H:
        raise ValueError("policy horizon does not match model")
    states = np.empty(H + 1, dtype=int)
    actions = np.empty(H, dtype=int)
    states[0] = model.initial_state
    P = model.kernel
    for h in range(H):
        s = states[h]
        a = _draw(rng, policy.probs[h, s])
        actions[h] = a
        states[h + 1] = _draw(rng, P[s, a])
    rewards = None
    if reward is not None:
        rewards = reward.values[states[:-1], actions]
    return Trajectory(states, actions, rewards)


def _draw(rng: np.random.Generator, p: np.ndarray) -> int:
    # inverse-CDF on one uniform: a point mass needs no randomness at all
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(p) - 1))


def policy_value(
    model: LinearMixtureModel, policy: StochasticPolicy, reward: RewardFunction | np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact backward evaluation. Returns ``V`` (H+1, S) and ``Q`` (H, S, A)."""
    r = reward.values if isinstance(reward, RewardFunction) else np.asarray(reward, dtype=float)
    H, S, A = model.horizon, model.num_states, model.num_actions
    Pm = model.kernel_matrix
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, A))
    for h in range(H - 1, -1, -1):
        Q[h] = r + (Pm @ V[h + 1]).reshape(S, A)
        V[h] = np.einsum("sa,sa->s", policy.probs[h], Q[h])
    return V, Q


def optimal_values(model: LinearMixtureModel, reward: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bellman optimality recursion; ties resolve to the lowest action index."""
    H, S, A = model.horizon, model.num_states, model.num_actions
    Pm = model.kernel_matrix
    V = np.zeros((H + 1, S))
    greedy = np.zeros((H, S), dtype=int)
    for h in range(H - 1, -1, -1):
        Q = reward + (Pm @ V[h + 1]).reshape(S, A)
        greedy[h] = np.argmax(Q, axis=1)
        V[h] = Q[np.arange(S), greedy[h]]
    return V, greedy


def best_hindsight_policy(
    model: LinearMixtureModel, rewards: list[RewardFunction] | np.ndarray
) -> tuple[StochasticPolicy, float]:
    """Best fixed deterministic policy for a reward sequence, with its total value.

    For one kernel, the sum of per-episode values is the value of the summed
    reward, so a single DP on ``sum_k r^k`` is exact.
    """
    if isinstance(rewards, np.ndarray):
        total = rewards.sum(axis=0) if rewards.ndim == 3 else rewards
    else:
        if not rewards:
            raise ValueError("need at least one reward function")
        total = np.sum([r.values for r in rewards], axis=0)
    V, greedy = optimal_values(model, total)
    policy = StochasticPolicy.deterministic(greedy, model.num_actions)
    return policy, float(V[0, model.initial_state])


def occupancy_of_policy(model: LinearMixtureModel, policy: StochasticPolicy) -> OccupancyMeasure:
    H, S = model.horizon, model.num_states
    P = model.kernel
    z = np.zeros((H, S, model.num_actions, S))
    mu = np.zeros(S)
    mu[model.initial_state] = 1.0
    for h in range(H):
        z[h] = mu[:, None, None] * policy.probs[h][:, :, None] * P
        mu = z[h].sum(axis=(0, 1))
    return OccupancyMeasure(z)


def occupancy_value(z: OccupancyMeasure | np.ndarray, reward: RewardFunction | np.ndarray) -> float:
    zz = z.z if isinstance(z, OccupancyMeasure) else np.asarray(z)
    r = reward.values if isinstance(reward, RewardFunction) else np.asarray(reward)
    return float(np.einsum("hsat,sa->", zz, r))


def occupancy_to_policy_and_transition(
    z: OccupancyMeasure | np.ndarray, floor: float = 1e-300
) -> InducedModel:
    """Induced policy and per-stage kernel of an occupancy measure.

    Rows whose visit mass is at most ``floor`` are undefined by the ratio
    formulas; they default to uniform and are flagged.
    """
    zz = z.z if isinstance(z, OccupancyMeasure) else np.asarray(z, dtype=float)
    H, S, A, _ = zz.shape
    pair_mass = zz.sum(axis=3)  # (H, S, A)
    state_mass = pair_mass.sum(axis=2)  # (H, S)
    bad_s = state_mass <= floor
    bad_sa = pair_mass <= floor
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = np.where(bad_s[..., None], 1.0 / A, pair_mass / state_mass[..., None])
        P = np.where(bad_sa[..., None], 1.0 / S, zz / pair_mass[..., None])
    pi /= pi.sum(axis=2, keepdims=True)
    return InducedModel(StochasticPolicy(pi), P, bad_s, bad_sa)
