"""Instance generators: random basis-mixture models, complete trees, reward schedules."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mdp import LinearMixtureModel, RewardFunction, Trajectory

MAX_TREE_LEAVES = 10**6

SCHEDULE_KINDS = ("fixed", "iid-expert-rademacher", "oblivious-sequence", "degenerate-fixed")


def make_basis_mixture(
    num_states: int,
    num_actions: int,
    horizon: int,
    dim: int,
    norm_bound: float,
    seed: int | None = None,
    concentration: float = 1.0,
    initial_state: int = 0,
    weights: np.ndarray | None = None,
) -> LinearMixtureModel:
    """Mixture of ``dim`` random Dirichlet kernels.

    ``phi(s'|s,a) = (P_1(s'|s,a), ..., P_d(s'|s,a)) / sqrt(d)`` and
    ``theta* = sqrt(d) w`` for a Dirichlet(1) simplex weight ``w``, so the true
    kernel is ``sum_i w_i P_i``. Each coordinate of ``phi_V`` is an expectation
    of ``V`` scaled by ``1/sqrt(d)``, which gives ``||phi_V|| <= 1``.
    ``weights`` fixes ``w`` instead of drawing it.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    S, A, d = num_states, num_actions, dim
    base = rng.dirichlet(np.full(S, concentration), size=(d, S, A))  # (d, s, a, s')
    w = rng.dirichlet(np.ones(d)) if d > 1 else np.ones(1)
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.shape != (d,) or w.min() < 0 or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector of length dim")
    theta = np.sqrt(d) * w
    if np.linalg.norm(theta) > norm_bound:
        raise ValueError(
            f"norm bound B={norm_bound} too small: ||theta*|| = {np.linalg.norm(theta):.6g} "
            f"(d={d}; sqrt(d) always suffices)"
        )
    feats = np.transpose(base, (3, 1, 2, 0)) / np.sqrt(d)
    model = LinearMixtureModel(feats, theta, horizon, float(norm_bound), initial_state)
    model.validate(tol=1e-12)
    return model


def tree_state_index(depth: int, position: int, num_actions: int) -> int:
    """Flat index of the node at ``depth`` (root = 0) and ``position`` (0-based)."""
    return (num_actions**depth - 1) // (num_actions - 1) + position


def tree_num_states(num_actions: int, tree_height: int) -> int:
    return (num_actions ** (tree_height + 1) - 1) // (num_actions - 1)


def make_tree_mdp(num_actions: int, tree_height: int) -> LinearMixtureModel:
    """Complete ``|A|``-ary tree of height ``tree_height`` with deterministic moves.

    Action ``n`` at node ``(l, m)`` leads to ``(l + 1, m |A| + n)``; leaves
    absorb. The episode horizon equals the tree height, ``d = 1`` and
    ``theta* = 1``.
    """
    A, Ht = num_actions, tree_height
    if A < 2 or Ht < 1:
        raise ValueError("need |A| >= 2 and tree height >= 1")
    if A**Ht > MAX_TREE_LEAVES:
        raise ValueError(f"tree has {A**Ht} leaves, above the {MAX_TREE_LEAVES} guard")
    S = tree_num_states(A, Ht)
    feats = np.zeros((S, S, A, 1))
    for depth in range(Ht + 1):
        for m in range(A**depth):
            s = tree_state_index(depth, m, A)
            for n in range(A):
                nxt = s if depth == Ht else tree_state_index(depth + 1, m * A + n, A)
                feats[nxt, s, n, 0] = 1.0
    return LinearMixtureModel(feats, np.ones(1), Ht, 1.0, 0)


def tree_shape(model: LinearMixtureModel) -> tuple[int, int] | None:
    """``(|A|, height)`` if ``model`` is exactly a ``make_tree_mdp`` tree, else None."""
    A, H = model.num_actions, model.horizon
    if model.dim != 1 or model.num_states != tree_num_states(A, H):
        return None
    ref = make_tree_mdp(A, H)
    if np.array_equal(ref.features, model.features) and np.array_equal(model.theta_star, [1.0]):
        return A, H
    return None


class RevealOrderError(RuntimeError):
    """A reward was requested before the episode's trajectory was committed."""


@dataclass
class AdversarySchedule:
    """Oblivious reward sequence ``r^1..r^K`` with reveal-after-episode enforcement.

    The sequence is fixed at construction (oblivious). ``reveal(k)`` returns
    ``r^k`` only after ``commit_trajectory(k, ...)``; episodes must be
    committed in order.
    """

    kind: str
    num_episodes: int
    horizon: int
    shape: tuple[int, int]
    params: dict
    seed: int | None
    _tables: np.ndarray | None = field(default=None, repr=False)
    _expert_bits: np.ndarray | None = field(default=None, repr=False)
    _expert_map: np.ndarray | None = field(default=None, repr=False)
    _committed: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def commit_trajectory(self, k: int, trajectory: Trajectory | None = None) -> None:
        if k != self._committed + 1:
            raise RevealOrderError(f"episode {k} committed out of order (next is {self._committed + 1})")
        if trajectory is not None and len(trajectory.actions) != self.horizon:
            raise ValueError("trajectory length does not match the schedule horizon")
        self._committed = k

    def reveal(self, k: int) -> RewardFunction:
        """Reward of episode ``k`` (1-based), available once that episode is committed."""
        if not 1 <= k <= self.num_episodes:
            raise IndexError(f"episode {k} outside 1..{self.num_episodes}")
        if k > self._committed:
            raise RevealOrderError(f"reward of episode {k} requested before its trajectory was committed")
        return RewardFunction(self._table(k), self.horizon)

    def _table(self, k: int) -> np.ndarray:
        if self._tables is not None:
            return self._tables[0] if len(self._tables) == 1 else self._tables[k - 1]
        bits = self._expert_bits[k - 1]
        r = np.where(self._expert_map >= 0, bits[np.maximum(self._expert_map, 0)], 0.0)
        return r / self.horizon

    def all_rewards(self) -> np.ndarray:
        """Whole sequence ``(K, S, A)``; evaluation-side only (hindsight comparator)."""
        if self._tables is not None and len(self._tables) == self.num_episodes:
            return self._tables.copy()
        return np.stack([self._table(k) for k in range(1, self.num_episodes + 1)])

    def reward_sum(self) -> np.ndarray:
        """``sum_k r^k`` without materializing the sequence."""
        if self._tables is not None:
            if len(self._tables) == 1:
                return self._tables[0] * self.num_episodes
            return self._tables.sum(axis=0)
        counts = self._expert_bits.sum(axis=0)
        r = np.where(self._expert_map >= 0, counts[np.maximum(self._expert_map, 0)], 0.0)
        return r / self.horizon

    def fresh(self) -> "AdversarySchedule":
        """Same sequence with the reveal cursor reset."""
        return AdversarySchedule(
            self.kind, self.num_episodes, self.horizon, self.shape, self.params, self.seed,
            self._tables, self._expert_bits, self._expert_map,
        )

    def to_json(self) -> str:
        doc = {
            "kind": self.kind,
            "num_episodes": self.num_episodes,
            "horizon": self.horizon,
            "shape": list(self.shape),
            "params": self.params,
            "seed": self.seed,
        }
        if self.kind == "degenerate-fixed":
            doc["table"] = self._tables[0].tolist()
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str, model: LinearMixtureModel | None = None) -> "AdversarySchedule":
        doc = json.loads(text)
        kind, K = doc["kind"], doc["num_episodes"]
        if kind == "degenerate-fixed":
            return degenerate_fixed(np.asarray(doc["table"]), K, doc["horizon"])
        if kind == "iid-expert-rademacher":
            if model is None:
                raise ValueError("expert schedules need the tree model to rebuild")
            return make_expert_reward_schedule(model, K, kind, doc["seed"], **doc["params"])
        S, A = doc["shape"]
        return make_reward_schedule(S, A, doc["horizon"], K, kind, doc["seed"], **doc["params"])


def make_reward_schedule(
    num_states: int,
    num_actions: int,
    horizon: int,
    num_episodes: int,
    kind: str,
    seed: int | None = None,
    persistence: float = 0.5,
) -> AdversarySchedule:
    """Reward schedules for general models.

    ``fixed``: one uniform random table in ``[0, 1/H]`` for every episode.
    ``oblivious-sequence``: ``r^k = (rho b + (1 - rho) u^k) / H`` with a fixed
    base table ``b`` and fresh ``u^k``, all uniform on ``[0, 1]`` and drawn up
    front; ``rho = persistence``.
    """
    rng = np.random.default_rng(seed)
    S, A, H, K = num_states, num_actions, horizon, num_episodes
    if kind == "fixed":
        tables = rng.random((1, S, A)) / H
        params = {}
    elif kind == "oblivious-sequence":
        if not 0.0 <= persistence <= 1.0:
            raise ValueError("persistence must lie in [0, 1]")
        base = rng.random((S, A))
        tables = (persistence * base + (1.0 - persistence) * rng.random((K, S, A))) / H
        params = {"persistence": persistence}
    elif kind in ("iid-expert-rademacher", "degenerate-fixed"):
        raise ValueError(f"kind {kind!r} needs its dedicated constructor")
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return AdversarySchedule(kind, K, H, (S, A), params, seed, _tables=tables)


def degenerate_fixed(table: np.ndarray, num_episodes: int, horizon: int) -> AdversarySchedule:
    """Adversary that plays one known table forever: the stochastic-reward special case."""
    r = RewardFunction(table, horizon).values
    return AdversarySchedule(
        "degenerate-fixed", num_episodes, horizon, r.shape, {}, None, _tables=r[None].copy()
    )


def expert_edge_map(model: LinearMixtureModel, stages: int = 2) -> np.ndarray:
    """Expert id owning each ``(s, a)`` edge of a tree, ``-1`` for unrewarded edges.

    ``stages=2``: experts are the ``|A|^{H/2}`` nodes at depth ``H/2``; every
    edge leaving a node of that expert's subtree (depths ``H/2 .. H-1``) is
    owned by it. ``stages=1``: experts are the leaf-entering edges.
    """
    shape = tree_shape(model)
    if shape is None:
        raise ValueError("expert schedules need a tree model")
    A, H = shape
    S = model.num_states
    owner = np.full((S, A), -1, dtype=np.int64)
    if stages == 2:
        if H % 2:
            raise ValueError("the two-stage expert reward needs an even tree height")
        half = H // 2
        for depth in range(half, H):
            span = A ** (depth - half)
            for m in range(A**depth):
                owner[tree_state_index(depth, m, A), :] = m // span
    elif stages == 1:
        for m in range(A ** (H - 1)):
            owner[tree_state_index(H - 1, m, A), :] = m * A + np.arange(A)
    else:
        raise ValueError("stages must be 1 or 2")
    return owner


def make_expert_reward_schedule(
    model: LinearMixtureModel,
    num_episodes: int,
    kind: str = "iid-expert-rademacher",
    seed: int | None = None,
    stages: int = 2,
    mean: float = 0.5,
) -> AdversarySchedule:
    """Expert-advice rewards on a tree.

    Each episode every expert draws an i.i.d. coin ``Bernoulli(mean)`` and all
    edges it owns pay ``coin / H``. Kinds other than the i.i.d. one are
    delegated to the general constructors.
    """
    H = model.horizon
    S, A = model.num_states, model.num_actions
    if kind == "degenerate-fixed":
        raise ValueError("use degenerate_fixed(table, K, H)")
    if kind != "iid-expert-rademacher":
        if tree_shape(model) is None:
            raise ValueError("expert schedules need a tree model")
        return make_reward_schedule(S, A, H, num_episodes, kind, seed)
    owner = expert_edge_map(model, stages)
    n_experts = int(owner.max()) + 1
    rng = np.random.default_rng(seed)
    bits = (rng.random((num_episodes, n_experts)) < mean).astype(float)
    return AdversarySchedule(
        kind, num_episodes, H, (S, A), {"stages": stages, "mean": mean}, seed,
        _expert_bits=bits, _expert_map=owner,
    )
