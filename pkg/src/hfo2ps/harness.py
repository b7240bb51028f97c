"""Experiment driver: the episode loop, baselines, regret accounting and output files."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable

import numpy as np

from . import instances as inst
from .mdp import (
    LinearMixtureModel,
    StochasticPolicy,
    best_hindsight_policy,
    policy_value,
    sample_episode,
)
from .omd import OMDLearner, SupportLayout, build_feasible_set, compressed_value, extract_policy
from .vtr import (
    ConfidenceSet,
    MomentBank,
    confidence_contains,
    confidence_radius,
    home_variances,
    optimistic_backup,
    power_targets,
    theory_defaults,
    weighted_norm_inv,
)

ALGORITHMS = ("hf-o2ps", "omd-known-transition", "uniform-policy", "greedy-no-bonus")
SWEEP_AXES = {"K": "K", "H": "horizon", "d": "dim", "|S|": "num_states", "S": "num_states"}
SUMMARY_SCHEMA_ID = "hfo2ps.summary/1"

_INSTANCE_KEYS = {
    "basis-mixture": {"generator", "num_states", "num_actions", "horizon", "dim", "norm_bound", "seed", "concentration"},
    "tree": {"generator", "num_actions", "height"},
}
_ADVERSARY_KEYS = {
    "fixed": {"kind", "seed"},
    "oblivious-sequence": {"kind", "seed", "persistence"},
    "iid-expert-rademacher": {"kind", "seed", "stages", "mean"},
    "degenerate-fixed": {"kind", "seed", "table"},
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """One run. Parameter fields left as ``None`` take the theory defaults."""

    instance: dict = field(default_factory=lambda: {"generator": "basis-mixture"})
    adversary: dict = field(default_factory=lambda: {"kind": "oblivious-sequence"})
    K: int = 100
    algorithm: str = "hf-o2ps"
    seed: int = 0
    alpha: float | None = None
    xi: float | None = None
    gamma: float | None = None
    lam: float | None = None
    levels: int | None = None
    delta: float = 0.01
    tol: float = 1e-10
    max_sweeps: int = 5000
    inner_tol: float = 1e-13
    record_steps: bool = True
    timing: bool = False  # wall_time stays 0.0 when off so outputs are byte-reproducible
    out_dir: str | None = None
    name: str = "run"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if not isinstance(self.K, int) or self.K < 1:
            raise ConfigError("K must be a positive integer")
        for name in ("alpha", "xi", "gamma", "lam", "levels", "delta", "tol", "inner_tol"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_sweeps < 1:
            raise ConfigError("max_sweeps must be positive")
        gen = self.instance.get("generator", "basis-mixture")
        if gen not in _INSTANCE_KEYS:
            raise ConfigError(f"unknown instance generator {gen!r}")
        extra = set(self.instance) - _INSTANCE_KEYS[gen]
        if extra:
            raise ConfigError(f"unknown instance keys {sorted(extra)}")
        kind = self.adversary.get("kind", "oblivious-sequence")
        if kind not in _ADVERSARY_KEYS:
            raise ConfigError(f"unknown adversary kind {kind!r}")
        extra = set(self.adversary) - _ADVERSARY_KEYS[kind]
        if extra:
            raise ConfigError(f"unknown adversary keys {sorted(extra)}")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        doc = self.to_dict()
        doc.update(changes)
        return ExperimentConfig.from_dict(doc)


@dataclass
class Resolved:
    """Numeric parameters after applying theory defaults."""

    alpha: float
    xi: float
    gamma: float
    lam: float
    levels: int
    delta: float


def build_model(config: ExperimentConfig) -> LinearMixtureModel:
    spec = dict(config.instance)
    gen = spec.pop("generator", "basis-mixture")
    if gen == "tree":
        return inst.make_tree_mdp(spec.get("num_actions", 2), spec.get("height", 4))
    return inst.make_basis_mixture(
        spec.get("num_states", 5),
        spec.get("num_actions", 3),
        spec.get("horizon", 10),
        spec.get("dim", 4),
        spec.get("norm_bound", 2.0),
        seed=spec.get("seed", config.seed),
        concentration=spec.get("concentration", 1.0),
    )


def build_schedule(config: ExperimentConfig, model: LinearMixtureModel) -> inst.AdversarySchedule:
    spec = dict(config.adversary)
    kind = spec.pop("kind", "oblivious-sequence")
    seed = spec.pop("seed", config.seed + 7919)
    S, A, H, K = model.num_states, model.num_actions, model.horizon, config.K
    if kind == "iid-expert-rademacher":
        return inst.make_expert_reward_schedule(model, K, kind, seed, **spec)
    if kind == "degenerate-fixed":
        table = spec.get("table")
        if table is None:
            table = np.random.default_rng(seed).random((S, A)) / H
        return inst.degenerate_fixed(np.asarray(table, dtype=float), K, H)
    return inst.make_reward_schedule(S, A, H, K, kind, seed, **spec)


def resolve(config: ExperimentConfig, model: LinearMixtureModel) -> Resolved:
    td = theory_defaults(config.K, model.horizon, model.dim, model.norm_bound)
    out = Resolved(
        alpha=config.alpha or td.alpha,
        xi=config.xi or td.xi,
        gamma=config.gamma or td.gamma,
        lam=config.lam or td.lam,
        levels=config.levels or td.levels,
        delta=config.delta,
    )
    if config.algorithm in ("hf-o2ps", "greedy-no-bonus"):
        if out.gamma**2 / out.xi <= 1.0:
            raise ConfigError(
                f"the confidence radius needs gamma^2 / xi > 1 (got {out.gamma**2 / out.xi:.3g}); "
                "increase K * H or override xi / gamma"
            )
        if out.delta >= 1.0:
            raise ConfigError("delta must lie in (0, 1)")
    return out


@dataclass
class EpisodeRecord:
    k: int
    realized_return: float
    v_bar: float  # occupancy value <z^k, r^k>
    v_opt: float  # optimistic V_{k,1}(s_1)
    v_policy: float  # exact V^{pi^k}_{k,1}(s_1)
    v_comparator: float  # V^{pi*}_{k,1}(s_1), filled after the run
    regret_increment: float
    beta: float
    contained: bool
    margin: float
    det_indicator: int  # I_H^k
    r0_increment: float
    projection_sweeps: int
    projection_tv: float
    inner_iterations: int
    infeasible_pairs: int
    affine_residual: float
    ellipsoid_residual: float
    wall_time: float


CSV_COLUMNS = tuple(f.name for f in fields(EpisodeRecord))
_BOOL_COLS = {"contained"}
_INT_COLS = {"k", "det_indicator", "projection_sweeps", "inner_iterations", "infeasible_pairs"}


@dataclass
class RunResult:
    config: ExperimentConfig
    params: Resolved
    records: list[EpisodeRecord]
    comparator_total: float
    steps: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def regret(self) -> np.ndarray:
        return compute_regret(self.records)

    @property
    def final_regret(self) -> float:
        r = self.regret
        return float(r[-1]) if r.size else 0.0

    def summary(self) -> dict:
        return summarize(self)


def compute_regret(records: list[EpisodeRecord], comparator: np.ndarray | None = None) -> np.ndarray:
    """Cumulative ``sum_k (V*_k - V^{pi^k}_k)``; ``comparator`` overrides the stored ``v_comparator``."""
    if not records:
        return np.zeros(0)
    vstar = np.array([r.v_comparator for r in records]) if comparator is None else np.asarray(comparator)
    vpi = np.array([r.v_policy for r in records])
    return np.cumsum(vstar - vpi)


def _state_action_occupancy(model: LinearMixtureModel, policy: StochasticPolicy) -> np.ndarray:
    """``q_h(s, a)`` under the true kernel (sparse forward pass)."""
    H, S = model.horizon, model.num_states
    Pm = model.kernel_matrix
    q = np.zeros((H, S, model.num_actions))
    mu = np.zeros(S)
    mu[model.initial_state] = 1.0
    for h in range(H):
        q[h] = mu[:, None] * policy.probs[h]
        mu = Pm.T @ q[h].ravel()
    return q


class _Learner:
    """Common interface: ``policy(k)`` before the episode, ``learn(...)`` after the reveal."""

    def policy(self, k: int) -> tuple[StochasticPolicy, dict]:
        raise NotImplementedError

    def learn(self, k: int, traj, reward: np.ndarray, policy: StochasticPolicy) -> dict:
        raise NotImplementedError


class _Uniform(_Learner):
    def __init__(self, model):
        self.pi = StochasticPolicy.uniform(model.horizon, model.num_states, model.num_actions)

    def policy(self, k):
        return self.pi, {}

    def learn(self, k, traj, reward, policy):
        return {}


class _KnownTransitionOMD(_Learner):
    def __init__(self, model: LinearMixtureModel, params: Resolved, config: ExperimentConfig):
        self.model = model
        self.layout = SupportLayout.from_features(model.features)
        cs = ConfidenceSet(model.theta_star, np.eye(model.dim), 0.0)
        self.fs = build_feasible_set(cs, model.features, model.horizon, model.initial_state, self.layout)
        self.omd = OMDLearner(self.layout, model.horizon, model.initial_state, params.alpha,
                              config.tol, config.max_sweeps, config.inner_tol)

    def policy(self, k):
        z = self.omd.step(self.fs)
        pi, _ = extract_policy(z)
        return pi, _projection_diag(self.omd)

    def learn(self, k, traj, reward, policy):
        self.omd.observe(reward)
        return {"v_bar": compressed_value(self.omd.z, reward), "v_opt": math.nan}


def _projection_diag(omd: OMDLearner) -> dict:
    rep = omd.last_report
    res = rep.residuals
    return {
        "projection_sweeps": rep.sweeps,
        "projection_tv": rep.tv_change,
        "inner_iterations": rep.inner_iterations,
        "infeasible_pairs": rep.infeasible_pairs,
        "affine_residual": max(res["normalization"], res["flow"], res["initial"], res["negativity"]),
        "ellipsoid_residual": res["ellipsoid"],
    }


class _VTRLearner(_Learner):
    """Shared regression machinery for the full algorithm and the greedy baseline."""

    def __init__(self, model: LinearMixtureModel, params: Resolved, config: ExperimentConfig,
                 radius_fn: Callable[[int], float] | None = None):
        self.model = model
        self.feats = model.features
        self.params = params
        self.config = config
        H, d = model.horizon, model.dim
        self.bank = MomentBank(d, params.levels, params.lam, params.xi, params.gamma)
        self.radius_fn = radius_fn or (
            lambda k: confidence_radius(k, d, H, params.xi, params.gamma, params.lam, model.norm_bound, params.delta)
        )
        self.beta = 0.0
        self.cs: ConfidenceSet | None = None
        K, M = config.K, params.levels
        # per-step HOME diagnostics for every level m
        self.steps = {
            "sigma2": np.full((K, H, M), np.nan),
            "true_var": np.full((K, H, M), np.nan),
            "vbar": np.full((K, H, M), np.nan),
            "tilde_norm": np.full((K, H, M), np.nan),
            "contained": np.zeros(K, dtype=bool),
        } if config.record_steps else None

    def _confidence(self, k):
        self.beta = self.radius_fn(k)
        self.cs = self.bank.confidence_set(self.beta, self.params.delta)
        return self.cs

    def _regress(self, k, traj, V):
        """Regression updates along the trajectory with targets ``V^{2^m}``."""
        model, bank, p = self.model, self.bank, self.params
        H, M = model.horizon, p.levels
        targets = power_targets(V, M)  # (M, H+1, S)
        bank.begin_episode()
        r0 = 0.0
        ind = 1
        P = model.kernel
        for h in range(H):
            s, a, s_next = traj.states[h], traj.actions[h], traj.states[h + 1]
            phis = targets[:, h + 1, :] @ self.feats[:, s, a, :]  # (M, d)
            ind = bank.det_ratio_indicator()
            sigma2, vbar, _ = home_variances(
                phis, bank.theta_hat, bank.chol_hat, bank.chol_tilde, self.beta, p.xi, p.gamma
            )
            r0 += ind * min(1.0, self.beta * float(weighted_norm_inv(bank.chol_hat[0], phis[0])))
            if self.steps is not None:
                v = targets[:, h + 1]  # (M, S)
                prob = P[s, a]
                dev = v - (v @ prob)[:, None]
                self.steps["sigma2"][k - 1, h] = sigma2
                self.steps["vbar"][k - 1, h] = vbar
                self.steps["true_var"][k - 1, h] = np.maximum(0.0, (dev * dev) @ prob)
                # the floor uses the running covariance before this step's update
                self.steps["tilde_norm"][k - 1, h] = weighted_norm_inv(bank.chol_tilde, phis)
            bank.update_all(phis, targets[:, h + 1, s_next], sigma2)
        bank.end_episode()
        return {"det_indicator": ind, "r0_increment": r0}

    def containment(self):
        ok, margin = confidence_contains(self.cs, self.model.theta_star)
        return ok, margin


class _HFO2PS(_VTRLearner):
    def __init__(self, model, params, config, radius_fn=None):
        super().__init__(model, params, config, radius_fn)
        self.layout = SupportLayout.from_features(model.features)
        self.omd = OMDLearner(self.layout, model.horizon, model.initial_state, params.alpha,
                              config.tol, config.max_sweeps, config.inner_tol)

    def policy(self, k):
        cs = self._confidence(k)
        fs = build_feasible_set(cs, self.feats, self.model.horizon, self.model.initial_state, self.layout)
        z = self.omd.step(fs)
        pi, _ = extract_policy(z)
        return pi, _projection_diag(self.omd)

    def learn(self, k, traj, reward, policy):
        self.omd.observe(reward)
        opt = optimistic_backup(reward, policy, self.bank.theta_hat[0], self.bank.sigma_hat[0], self.beta, self.feats)
        out = {"v_bar": compressed_value(self.omd.z, reward), "v_opt": float(opt.V[0, self.model.initial_state])}
        out.update(self._regress(k, traj, opt.V))
        return out


class _GreedyNoBonus(_VTRLearner):
    """Plug-in planner: greedy for the mean revealed reward under ``theta_hat``, no bonus."""

    def __init__(self, model, params, config, radius_fn=None):
        super().__init__(model, params, config, radius_fn)
        self.reward_sum = np.zeros((model.num_states, model.num_actions))
        self.seen = 0

    def policy(self, k):
        self._confidence(k)
        model = self.model
        H, S, A = model.horizon, model.num_states, model.num_actions
        r = self.reward_sum / max(self.seen, 1)
        theta = self.bank.theta_hat[0]
        Phat = np.einsum("tsad,d->sat", self.feats, theta)
        V = np.zeros(S)
        greedy = np.zeros((H, S), dtype=int)
        for h in range(H - 1, -1, -1):
            Q = np.clip(r + Phat @ V, 0.0, 1.0)
            greedy[h] = np.argmax(Q, axis=1)
            V = Q[np.arange(S), greedy[h]]
        return StochasticPolicy.deterministic(greedy, A), {}

    def learn(self, k, traj, reward, policy):
        self.reward_sum += reward
        self.seen += 1
        plug = optimistic_backup(reward, policy, self.bank.theta_hat[0], self.bank.sigma_hat[0], 0.0, self.feats)
        out = {"v_opt": float(plug.V[0, self.model.initial_state])}
        out.update(self._regress(k, traj, plug.V))
        return out


def make_learner(config: ExperimentConfig, model: LinearMixtureModel, params: Resolved,
                 radius_fn: Callable[[int], float] | None = None) -> _Learner:
    if config.algorithm == "hf-o2ps":
        return _HFO2PS(model, params, config, radius_fn)
    if config.algorithm == "omd-known-transition":
        return _KnownTransitionOMD(model, params, config)
    if config.algorithm == "greedy-no-bonus":
        return _GreedyNoBonus(model, params, config, radius_fn)
    return _Uniform(model)


def run_experiment(
    config: ExperimentConfig,
    model: LinearMixtureModel | None = None,
    schedule: inst.AdversarySchedule | None = None,
    radius_fn: Callable[[int], float] | None = None,
    progress: Callable[[EpisodeRecord], None] | None = None,
) -> RunResult:
    """Run one configuration end to end. Deterministic given the config seeds."""
    model = model or build_model(config)
    schedule = (schedule or build_schedule(config, model)).fresh()
    if schedule.num_episodes < config.K:
        raise ConfigError("schedule shorter than K")
    params = resolve(config, model)
    learner = make_learner(config, model, params, radius_fn)
    rng = np.random.default_rng(config.seed)
    s1 = model.initial_state
    records: list[EpisodeRecord] = []
    for k in range(1, config.K + 1):
        t0 = time.perf_counter()
        try:
            pi, diag = learner.policy(k)
            traj = sample_episode(model, pi, None, rng)
            schedule.commit_trajectory(k, traj)
            reward = schedule.reveal(k).values
            info = learner.learn(k, traj, reward, pi)
        except Exception as exc:  # annotate with the episode index
            raise RuntimeError(f"episode {k}: {exc}") from exc
        Vpi, _ = policy_value(model, pi, reward)
        contained, margin = (learner.containment() if isinstance(learner, _VTRLearner) else (True, math.inf))
        if isinstance(learner, _VTRLearner) and learner.steps is not None:
            learner.steps["contained"][k - 1] = contained
        rec = EpisodeRecord(
            k=k,
            realized_return=float(reward[traj.states[:-1], traj.actions].sum()),
            v_bar=float(info.get("v_bar", math.nan)),
            v_opt=float(info.get("v_opt", math.nan)),
            v_policy=float(Vpi[0, s1]),
            v_comparator=math.nan,
            regret_increment=math.nan,
            beta=float(getattr(learner, "beta", 0.0)),
            contained=bool(contained),
            margin=float(margin),
            det_indicator=int(info.get("det_indicator", 1)),
            r0_increment=float(info.get("r0_increment", 0.0)),
            projection_sweeps=int(diag.get("projection_sweeps", 0)),
            projection_tv=float(diag.get("projection_tv", 0.0)),
            inner_iterations=int(diag.get("inner_iterations", 0)),
            infeasible_pairs=int(diag.get("infeasible_pairs", 0)),
            affine_residual=float(diag.get("affine_residual", 0.0)),
            ellipsoid_residual=float(diag.get("ellipsoid_residual", 0.0)),
            wall_time=time.perf_counter() - t0 if config.timing else 0.0,
        )
        records.append(rec)
        if progress:
            progress(rec)
    # hindsight comparator from the whole revealed sequence
    comp_pi, total = best_hindsight_policy(model, schedule.reward_sum())
    q_star = _state_action_occupancy(model, comp_pi).sum(axis=0)
    for rec in records:
        r = schedule.reveal(rec.k).values
        rec.v_comparator = float(np.sum(q_star * r))
        rec.regret_increment = rec.v_comparator - rec.v_policy
    steps = getattr(learner, "steps", None) or {}
    return RunResult(config, params, records, total, steps)


def summarize(result: RunResult) -> dict:
    recs = result.records
    regret = result.regret
    cfg = result.config
    return {
        "schema": SUMMARY_SCHEMA_ID,
        "config": cfg.to_dict(),
        "params": asdict(result.params),
        "episodes": len(recs),
        "final_regret": float(regret[-1]) if len(recs) else 0.0,
        "comparator_total": result.comparator_total,
        "mean_v_policy": float(np.mean([r.v_policy for r in recs])) if recs else 0.0,
        "containment_rate": float(np.mean([r.contained for r in recs])) if recs else 1.0,
        "all_contained": bool(all(r.contained for r in recs)),
        "r0_total": float(sum(r.r0_increment for r in recs)),
        "max_projection_sweeps": int(max((r.projection_sweeps for r in recs), default=0)),
        "max_affine_residual": float(max((r.affine_residual for r in recs), default=0.0)),
        "max_ellipsoid_residual": float(max((r.ellipsoid_residual for r in recs), default=0.0)),
        "wall_time": float(sum(r.wall_time for r in recs)),
    }


SUMMARY_SCHEMA = {
    "schema": str,
    "config": dict,
    "params": dict,
    "episodes": int,
    "final_regret": float,
    "comparator_total": float,
    "mean_v_policy": float,
    "containment_rate": float,
    "all_contained": bool,
    "r0_total": float,
    "max_projection_sweeps": int,
    "max_affine_residual": float,
    "max_ellipsoid_residual": float,
    "wall_time": float,
}


def validate_summary(doc: dict) -> list[str]:
    """Problems with a summary document (empty list means valid)."""
    problems = []
    for key, typ in SUMMARY_SCHEMA.items():
        if key not in doc:
            problems.append(f"missing {key}")
        elif typ is float and not isinstance(doc[key], (int, float)):
            problems.append(f"{key} should be a number")
        elif typ is int and (not isinstance(doc[key], int) or isinstance(doc[key], bool)):
            problems.append(f"{key} should be an integer")
        elif typ not in (float, int) and not isinstance(doc[key], typ):
            problems.append(f"{key} should be {typ.__name__}")
    extra = set(doc) - set(SUMMARY_SCHEMA)
    if extra:
        problems.append(f"unexpected keys {sorted(extra)}")
    if doc.get("schema") != SUMMARY_SCHEMA_ID:
        problems.append("wrong schema id")
    return problems


# ---------------------------------------------------------------- sweeps


def loglog_slope(xs, ys) -> float:
    x = np.log(np.asarray(xs, dtype=float))
    y = np.log(np.maximum(np.asarray(ys, dtype=float), 1e-300))
    return float(np.polyfit(x, y, 1)[0])


def _apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from K, H, d, |S|")
    target = SWEEP_AXES[axis]
    if target == "K":
        return config.replace(K=int(value))
    instance = dict(config.instance)
    if instance.get("generator", "basis-mixture") != "basis-mixture":
        raise ConfigError(f"axis {axis} needs a basis-mixture instance")
    instance[target] = int(value)
    return config.replace(instance=instance)


def _sweep_cell(args):
    config, axis, value, seed = args
    cfg = _apply_axis(config, axis, value)
    inst_spec = dict(cfg.instance)
    if inst_spec.get("generator", "basis-mixture") == "basis-mixture":
        inst_spec["seed"] = seed
    adv = dict(cfg.adversary)
    if "table" not in adv:
        adv["seed"] = 10_000 + seed
    cfg = cfg.replace(seed=seed, record_steps=False, out_dir=None, instance=inst_spec, adversary=adv)
    return value, seed, run_experiment(cfg).final_regret


def sweep(
    config: ExperimentConfig,
    axis: str,
    values: list,
    seeds: list[int] | int = 1,
    workers: int = 1,
) -> dict:
    """Independent runs over one axis; mean and standard error of final regret per value."""
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if any(not v > 0 for v in values):
        raise ConfigError("sweep values must be positive")
    jobs = [(config, axis, v, s) for v in values for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            out = list(ex.map(_sweep_cell, jobs))
    else:
        out = [_sweep_cell(j) for j in jobs]
    rows = []
    for v in values:
        regs = np.array([r for (vv, _, r) in out if vv == v])
        se = float(regs.std(ddof=1) / math.sqrt(regs.size)) if regs.size > 1 else 0.0
        rows.append({"value": v, "runs": int(regs.size), "mean_regret": float(regs.mean()), "stderr": se,
                     "regrets": regs.tolist()})
    table = {"axis": axis, "rows": rows}
    if len(values) > 1 and all(r["mean_regret"] > 0 for r in rows):
        table["loglog_slope"] = loglog_slope(values, [r["mean_regret"] for r in rows])
    return table


# ---------------------------------------------------------------- output


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def records_to_csv(records: list[EpisodeRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def records_from_csv(text: str) -> list[EpisodeRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValueError("CSV header does not match the record columns")
    out = []
    for row in rows[1:]:
        vals: dict[str, Any] = {}
        for c, v in zip(CSV_COLUMNS, row):
            if c in _BOOL_COLS:
                vals[c] = v == "1"
            elif c in _INT_COLS:
                vals[c] = int(v)
            else:
                vals[c] = float(v)
        out.append(EpisodeRecord(**vals))
    return out


def regret_svg(series: np.ndarray | dict, width: int = 640, height: int = 400, title: str = "cumulative regret") -> str:
    """Self-contained SVG line plot of one or more cumulative regret series."""
    curves = series if isinstance(series, dict) else {"regret": series}
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    pad = 50
    n = max((len(v) for v in curves.values()), default=0)
    all_y = np.concatenate([np.asarray(v, dtype=float) for v in curves.values()]) if curves else np.zeros(1)
    all_y = all_y[np.isfinite(all_y)] if all_y.size else np.zeros(1)
    ymin, ymax = min(0.0, float(all_y.min(initial=0.0))), float(all_y.max(initial=1.0))
    if ymax <= ymin:
        ymax = ymin + 1.0
    def px(i):
        return pad + (width - 2 * pad) * (i / max(n - 1, 1))
    def py(y):
        return height - pad - (height - 2 * pad) * (y - ymin) / (ymax - ymin)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">episode</text>',
        f'<text x="{pad - 6}" y="{py(ymax):.1f}" text-anchor="end" font-family="sans-serif" font-size="11">{ymax:.3g}</text>',
        f'<text x="{pad - 6}" y="{py(ymin):.1f}" text-anchor="end" font-family="sans-serif" font-size="11">{ymin:.3g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 16}" text-anchor="end" font-family="sans-serif" font-size="11">{n}</text>',
    ]
    for i, (name, ys) in enumerate(curves.items()):
        ys = np.asarray(ys, dtype=float)
        stride = max(1, len(ys) // 2000)
        pts = " ".join(f"{px(j):.2f},{py(ys[j]):.2f}" for j in range(0, len(ys), stride))
        c = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" fill="{c}" font-family="sans-serif" font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit(result: RunResult | dict, out_dir: str, formats=("csv", "json"), stem: str | None = None) -> list[str]:
    """Write a run (CSV / JSON summary / SVG) or a sweep table (JSON / CSV) to ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if isinstance(result, RunResult):
        stem = stem or result.config.name
        for fmt in formats:
            path = os.path.join(out_dir, f"{stem}.{fmt}")
            if fmt == "csv":
                text = records_to_csv(result.records)
            elif fmt == "json":
                text = json.dumps(result.summary(), indent=2, sort_keys=True) + "\n"
            elif fmt == "svg":
                text = regret_svg(result.regret, title=f"cumulative regret ({result.config.algorithm})")
            else:
                raise ValueError(f"unknown format {fmt!r}")
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            written.append(path)
        return written
    stem = stem or f"sweep_{result['axis'].strip('|')}"
    for fmt in formats:
        path = os.path.join(out_dir, f"{stem}.{fmt}")
        if fmt == "json":
            text = json.dumps(result, indent=2, sort_keys=True) + "\n"
        elif fmt == "csv":
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["value", "runs", "mean_regret", "stderr"])
            for row in result["rows"]:
                w.writerow([_fmt(row["value"]), row["runs"], _fmt(row["mean_regret"]), _fmt(row["stderr"])])
            text = buf.getvalue()
        elif fmt == "svg":
            text = regret_svg({"mean regret": [r["mean_regret"] for r in result["rows"]]}, title=f"mean final regret vs {result['axis']}")
        else:
            raise ValueError(f"unknown format {fmt!r}")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        written.append(path)
    return written
