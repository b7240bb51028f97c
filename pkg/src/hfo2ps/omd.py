"""Mirror descent over occupancy measures with an entropic mirror map.

Each episode multiplies the previous occupancy by ``exp(alpha r)`` and takes
the KL (Bregman) projection onto the feasible set: stagewise normalization,
flow conservation, the initial state, and one realizability constraint per
``(h, s, a)`` saying that the normalized row ``z_h(s, a, .)`` is a kernel
``B_sa theta`` for some ``theta`` in the confidence ellipsoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .mdp import LinearMixtureModel, OccupancyMeasure, StochasticPolicy
from .projection import Z_MIN, pseudo_inverse, slice_geometry
from .vtr import ConfidenceSet



class DegenerateFeatureError(ValueError):
    """A state-action pair has all-zero features; no kernel row is realizable."""


class ProjectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class MirrorMap:
    """Unnormalized negative entropy ``sum z (log z - 1)``; ``z_min`` floors logs only."""

    z_min: float = Z_MIN

    def potential(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float)
        pos = z > 0
        return float(np.sum(z[pos] * (np.log(z[pos]) - 1.0)))

    def divergence(self, x: np.ndarray, y: np.ndarray) -> float:
        return bregman_divergence(x, y)


def bregman_divergence(x: np.ndarray, y: np.ndarray) -> float:
    """``sum x log(x/y) - x + y`` with ``0 log 0 = 0``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any((y <= 0) & (x > 0)):
        raise ValueError("divergence undefined: y vanishes where x is positive")
    pos = x > 0
    return float(np.sum(x[pos] * np.log(x[pos] / y[pos])) - x.sum() + y.sum())


def exp_reward_step(z_prev: np.ndarray, reward: np.ndarray, alpha: float) -> np.ndarray:
    """``w_h(s, a, s') = z_h(s, a, s') exp(alpha r(s, a))`` for dense or compressed ``z``."""
    r = reward.values if hasattr(reward, "values") else np.asarray(reward, dtype=float)
    return z_prev * np.exp(alpha * r)[None, :, :, None]


@dataclass(frozen=True, eq=False)
class SupportLayout:
    """Compressed occupancy layout built from the feature tensor.

    ``supp[s, a, :nsupp[s, a]]`` lists the next states whose feature row is
    nonzero. ``in_ptr``/``in_pair``/``in_slot`` index, for every next state,
    the ``(s*A + a, j)`` slots that point to it.
    """

    num_states: int
    num_actions: int
    supp: np.ndarray
    nsupp: np.ndarray
    in_ptr: np.ndarray
    in_pair: np.ndarray
    in_slot: np.ndarray

    @classmethod
    def from_features(cls, features: np.ndarray) -> "SupportLayout":
        S, _, A, _ = features.shape
        nz = np.any(features != 0.0, axis=3)  # (s', s, a)
        nsupp = nz.sum(axis=0).astype(np.int64)  # (s, a)
        L = max(int(nsupp.max()), 1)
        supp = np.full((S, A, L), -1, dtype=np.int64)
        lists = [[] for _ in range(S)]
        for s in range(S):
            for a in range(A):
                idx = np.flatnonzero(nz[:, s, a])
                supp[s, a, : idx.size] = idx
                for j, t in enumerate(idx):
                    lists[t].append((s * A + a, j))
        in_ptr = np.zeros(S + 1, dtype=np.int64)
        in_ptr[1:] = np.cumsum([len(x) for x in lists])
        flat = [e for x in lists for e in x]
        in_pair = np.array([e[0] for e in flat], dtype=np.int64)
        in_slot = np.array([e[1] for e in flat], dtype=np.int64)
        return cls(S, A, supp, nsupp, in_ptr, in_pair, in_slot)

    @property
    def width(self) -> int:
        return self.supp.shape[2]

    @property
    def is_identity(self) -> bool:
        """True when every pair supports every next state (both layouts coincide)."""
        return self.width == self.num_states and bool(
            np.all(self.supp == np.arange(self.num_states))
        )

    def is_compressed(self, z: np.ndarray) -> bool:
        return z.shape[-1] != self.num_states or self.is_identity

    def compress(self, z: np.ndarray) -> np.ndarray:
        """Dense ``(H, S, A, S)`` to compressed; mass off the support is dropped."""
        idx = np.maximum(self.supp, 0)
        out = np.take_along_axis(z, np.broadcast_to(idx[None], (z.shape[0],) + idx.shape), axis=3)
        return np.where(self.supp[None] >= 0, out, 0.0)

    def expand(self, zc: np.ndarray) -> np.ndarray:
        H = zc.shape[0]
        S, A = self.num_states, self.num_actions
        z = np.zeros((H, S, A, S))
        valid = self.supp >= 0
        hh, ss, aa, jj = np.nonzero(np.broadcast_to(valid[None], zc.shape))
        z[hh, ss, aa, self.supp[ss, aa, jj]] = zc[hh, ss, aa, jj]
        return z

    def off_support_mass(self, z: np.ndarray) -> float:
        return float(np.abs(z).sum() - np.abs(self.compress(z)).sum())


@dataclass(eq=False)
class FeasibleSet:
    """Constraint system of one episode, precomputed per state-action pair.

    For each pair the realizable normalized rows ``{B theta : theta in C, 1^T B theta = 1}``
    are parametrized as ``pc + M y`` with ``y^T Q y <= 1`` (``y`` lives in
    the null space of ``a = B^T 1``). ``pinv``/``center_rows`` give the
    pseudoinverse form used for membership checks.
    """

    layout: SupportLayout
    horizon: int
    initial_state: int
    confidence: ConfidenceSet
    mode: np.ndarray
    pc: np.ndarray
    M: np.ndarray
    Q: np.ndarray
    Aw: np.ndarray
    y0: np.ndarray
    basis: np.ndarray  # (S, A, d, r) null-space basis per pair
    theta_c: np.ndarray  # (S, A, d) slice centres
    pinv: np.ndarray  # (S, A, d, L)
    center_rows: np.ndarray  # (S, A, L) = B theta_hat on the support
    B: np.ndarray  # (S, A, L, d)
    infeasible_pairs: np.ndarray = field(default=None)

    @property
    def slice_dim(self) -> int:
        return self.M.shape[3]

    def warm_from_thetas(self, thetas: np.ndarray) -> np.ndarray:
        """Slice coordinates of per-row parameters ``thetas`` (H, S, A, d)."""
        return np.einsum("sadr,hsad->hsar", self.basis, thetas - self.theta_c[None])

    def thetas_from_warm(self, Y: np.ndarray) -> np.ndarray:
        return self.theta_c[None] + np.einsum("sadr,hsar->hsad", self.basis, Y)

    def membership(self, z: np.ndarray, compressed: bool | None = None) -> dict[str, float]:
        """Worst residual of every constraint family (0 means satisfied)."""
        zz = z.z if isinstance(z, OccupancyMeasure) else np.asarray(z, dtype=float)
        is_c = self.layout.is_compressed(zz) if compressed is None else compressed
        zc = zz if is_c else self.layout.compress(zz)
        res = _compressed_affine_residuals(self.layout, zc, self.initial_state)
        res["ellipsoid"] = ellipsoid_violation(self, zc)
        if not is_c:
            res["off_support"] = self.layout.off_support_mass(zz)
        return res

    def contains(self, z: np.ndarray, tol: float = 1e-8, compressed: bool | None = None) -> bool:
        return max(self.membership(z, compressed).values()) <= tol


def _as_compressed(layout: SupportLayout, z, compressed: bool | None) -> np.ndarray:
    zz = z.z if isinstance(z, OccupancyMeasure) else np.asarray(z, dtype=float)
    if compressed is None:
        compressed = layout.is_compressed(zz)
    return zz if compressed else layout.compress(zz)


def _compressed_affine_residuals(layout: SupportLayout, zc: np.ndarray, s1: int) -> dict[str, float]:
    H = zc.shape[0]
    S = layout.num_states
    out_mass = zc.sum(axis=(2, 3))
    valid = layout.supp >= 0
    in_mass = np.zeros((H, S))
    for h in range(H):
        in_mass[h] = np.bincount(layout.supp[valid], weights=zc[h][valid], minlength=S)
    e0 = np.zeros(S)
    e0[s1] = 1.0
    return {
        "normalization": float(np.abs(zc.sum(axis=(1, 2, 3)) - 1.0).max()),
        "flow": float(np.abs(out_mass[1:] - in_mass[:-1]).max()) if H > 1 else 0.0,
        "initial": float(np.abs(out_mass[0] - e0).max()),
        "negativity": max(0.0, -float(zc.min())),
    }


def ellipsoid_violation(fs: FeasibleSet, zc: np.ndarray) -> float:
    """Largest violation of the pseudoinverse form of the row constraints.

    For a row ``v`` with mass ``n = ||v||_1 > 0`` the constraint reads
    ``||pinv (v - n B theta_hat)|| <= n beta`` together with ``v - n B theta_hat``
    lying in the range of ``B``. Rows are compared after dividing by ``n``.
    """
    n1 = zc.sum(axis=3)  # (H, S, A)
    live = n1 > 0
    if not live.any():
        return 0.0
    hh, ss, aa = np.nonzero(live)
    v = zc[hh, ss, aa] / n1[hh, ss, aa, None]
    e = v - fs.center_rows[ss, aa]
    u = np.einsum("nkl,nl->nk", fs.pinv[ss, aa], e)
    norm_excess = np.linalg.norm(u, axis=1) - fs.confidence.radius
    recon = np.einsum("nlk,nk->nl", fs.B[ss, aa], u)
    # (B L^{-T})(B L^{-T})^+ e reconstructs e iff e is in the range
    range_resid = np.abs(recon - e).max(axis=1)
    return float(max(0.0, norm_excess.max(), range_resid.max()))


def build_feasible_set(
    confidence: ConfidenceSet,
    features: np.ndarray | LinearMixtureModel,
    horizon: int | None = None,
    initial_state: int = 0,
    layout: SupportLayout | None = None,
    sigma_tol: float = 1e-10,
) -> FeasibleSet:
    """Precompute every realizability constraint for one confidence ellipsoid."""
    if isinstance(features, LinearMixtureModel):
        horizon = features.horizon if horizon is None else horizon
        initial_state = features.initial_state
        feats = features.features
    else:
        feats = np.asarray(features, dtype=float)
    if horizon is None:
        raise ValueError("horizon is required with a raw feature tensor")
    lay = layout or SupportLayout.from_features(feats)
    S, _, A, d = feats.shape
    L = lay.width
    r = max(d - 1, 1)
    Sigma = np.asarray(confidence.shape, dtype=float)
    theta_hat = confidence.center
    beta = float(confidence.radius)
    Lc = np.linalg.cholesky(Sigma)
    Sigma_inv = np.linalg.inv(Sigma)
    Sigma_inv = 0.5 * (Sigma_inv + Sigma_inv.T)

    mode = np.zeros((S, A), dtype=np.int64)
    pc = np.zeros((S, A, L))
    Mm = np.zeros((S, A, L, r))
    Qm = np.zeros((S, A, r, r))
    Aw = np.zeros((S, A, r, r))
    y0 = np.zeros((S, A, r))
    basis = np.zeros((S, A, d, r))
    theta_c = np.zeros((S, A, d))
    pinv = np.zeros((S, A, d, L))
    center_rows = np.zeros((S, A, L))
    Bs = np.zeros((S, A, L, d))
    infeasible = np.zeros((S, A), dtype=bool)
    # (B L^{-T}) for all pairs; L^{-T} replaces Sigma^{-1/2} (same norms)
    LinvT = np.linalg.inv(Lc).T

    for s in range(S):
        for a in range(A):
            n = lay.nsupp[s, a]
            if n == 0:
                raise DegenerateFeatureError(f"pair (s={s}, a={a}) has all-zero features")
            idx = lay.supp[s, a, :n]
            B = feats[idx, s, a, :]  # (n, d)
            Bs[s, a, :n] = B
            center_rows[s, a, :n] = B @ theta_hat
            W = B @ LinvT
            pinv[s, a, :, :n] = pseudo_inverse(W, sigma_tol)
            # the reconstruction check needs W pinv_w e; store W in place of B
            Bs[s, a, :n] = W
            if not np.any(B.sum(axis=0)):
                raise DegenerateFeatureError(f"pair (s={s}, a={a}) has features summing to zero")
            g = slice_geometry(B, theta_hat, Sigma, beta, Sigma_inv)
            mode[s, a] = g.mode
            infeasible[s, a] = g.infeasible
            theta_c[s, a] = g.theta_c
            basis[s, a] = g.basis
            pc[s, a, :n] = g.pc
            Mm[s, a, :n] = g.M
            Qm[s, a] = g.Q
            Aw[s, a] = g.Aw
            y0[s, a] = g.y0
    return FeasibleSet(
        lay, int(horizon), int(initial_state), confidence, mode, pc, Mm, Qm, Aw, y0,
        basis, theta_c, pinv, center_rows, Bs, infeasible,
    )


@dataclass
class ProjectionReport:
    sweeps: int
    tv_change: float
    inner_iterations: int
    status: int
    infeasible_pairs: int
    residuals: dict


def project_occupancy(
    w: np.ndarray,
    fs: FeasibleSet,
    warm: np.ndarray | None = None,
    eps: float = 1e-10,
    max_sweeps: int = 5000,
    inner_tol: float = 1e-13,
    inner_max: int = 200,
    z_min: float = Z_MIN,
) -> tuple[np.ndarray, np.ndarray, ProjectionReport]:
    """KL projection of compressed ``w`` onto ``fs`` by Dykstra's method.

    ``warm`` holds per-row slice coordinates (H, S, A, r) to start the row
    solvers from. Returns ``(z, warm_out, report)``.
    """
    H = fs.horizon
    lay = fs.layout
    z = np.ascontiguousarray(w, dtype=float).copy()
    if z.shape != (H, lay.num_states, lay.num_actions, lay.width):
        raise ValueError("w must be in the compressed layout")
    Y = np.empty((H,) + fs.y0.shape)
    Y[:] = fs.y0[None]
    if warm is not None:
        ok = _warm_ok(fs, warm)
        Y[ok] = warm[ok]
    corr = np.zeros_like(z)
    sweeps, tv, inner, status = kern.dykstra_occupancy(
        z, lay.nsupp, lay.in_ptr, lay.in_pair, lay.in_slot, fs.initial_state,
        fs.mode, fs.pc, fs.M, fs.Q, fs.Aw, Y, corr,
        eps, max_sweeps, inner_tol, inner_max, z_min,
    )
    res = fs.membership(z, compressed=True)
    rep = ProjectionReport(int(sweeps), float(tv), int(inner), int(status), int(fs.infeasible_pairs.sum()), res)
    return z, Y, rep


def _warm_ok(fs: FeasibleSet, Y: np.ndarray) -> np.ndarray:
    p = fs.pc[None] + np.einsum("salr,hsar->hsal", fs.M, Y)
    valid = (fs.layout.supp >= 0)[None]
    pos = np.all(np.where(valid, p > 0, True), axis=3)
    inside = np.einsum("hsar,sarq,hsaq->hsa", Y, fs.Q, Y) < 1.0
    return pos & inside & (fs.mode == kern.MODE_SLICE)[None]


def uniform_occupancy(layout: SupportLayout, horizon: int) -> np.ndarray:
    """Uniform over supported ``(s, a, s')`` per stage, compressed."""
    z = (layout.supp >= 0).astype(float)[None].repeat(horizon, axis=0)
    return z / z[0].sum()


def initial_occupancy(fs: FeasibleSet, eps: float = 1e-13, max_sweeps: int = 100000) -> np.ndarray:
    """Uniform occupancy projected once onto the affine pieces."""
    lay = fs.layout
    z = uniform_occupancy(lay, fs.horizon)
    kern.affine_project(z, lay.nsupp, lay.in_ptr, lay.in_pair, lay.in_slot, fs.initial_state, eps, max_sweeps)
    return z


class OMDLearner:
    """Occupancy mirror descent state for one run (single writer)."""

    def __init__(self, layout: SupportLayout, horizon: int, initial_state: int, alpha: float,
                 eps: float = 1e-10, max_sweeps: int = 5000, inner_tol: float = 1e-13):
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        self.layout = layout
        self.horizon = horizon
        self.initial_state = initial_state
        self.alpha = alpha
        self.eps, self.max_sweeps, self.inner_tol = eps, max_sweeps, inner_tol
        self.z = None
        self.reward_prev = np.zeros((layout.num_states, layout.num_actions))
        self.thetas = None
        self.last_report: ProjectionReport | None = None
        self.last_target: np.ndarray | None = None

    def step(self, fs: FeasibleSet) -> np.ndarray:
        if self.z is None:
            self.z = initial_occupancy(fs)
        w = exp_reward_step(self.z, self.reward_prev, self.alpha)
        self.last_target = w
        warm = fs.warm_from_thetas(self.thetas) if self.thetas is not None else None
        z, Y, rep = project_occupancy(w, fs, warm, self.eps, self.max_sweeps, self.inner_tol)
        if fs.basis.shape[2] > 1:
            self.thetas = fs.thetas_from_warm(Y)
        self.z = z
        self.last_report = rep
        return z

    def observe(self, reward: np.ndarray) -> None:
        self.reward_prev = reward.values if hasattr(reward, "values") else np.asarray(reward)


def omd_update(
    z_prev: np.ndarray,
    reward_prev: np.ndarray,
    alpha: float,
    fs: FeasibleSet,
    tol: float = 1e-10,
    max_sweeps: int = 5000,
    compressed: bool | None = None,
) -> np.ndarray:
    """One mirror descent step ``argmin_{z in D} D(z, z_prev exp(alpha r))``.

    Accepts and returns the same layout (dense ``(H, S, A, S)`` or compressed).
    """
    zc = _as_compressed(fs.layout, z_prev, compressed)
    w = exp_reward_step(zc, reward_prev, alpha)
    z, _, rep = project_occupancy(w, fs, eps=tol, max_sweeps=max_sweeps)
    if rep.sweeps >= max_sweeps and rep.tv_change > tol:
        raise ProjectionError(f"projection did not converge: TV change {rep.tv_change:.3g} after {rep.sweeps} sweeps")
    zz = z_prev.z if isinstance(z_prev, OccupancyMeasure) else np.asarray(z_prev)
    is_c = fs.layout.is_compressed(zz) if compressed is None else compressed
    return z if is_c else fs.layout.expand(z)


def extract_policy(z: np.ndarray, floor: float = 0.0) -> tuple[StochasticPolicy, np.ndarray]:
    """``pi_h(a|s) proportional to sum_x z_h(s, a, x)``; unvisited states get uniform rows.

    Works on dense or compressed ``z`` (only the last axis is summed).
    Returns the policy and the (H, S) mask of unvisited states.
    """
    zz = z.z if isinstance(z, OccupancyMeasure) else np.asarray(z)
    pair = zz.sum(axis=3)
    tot = pair.sum(axis=2)
    bad = tot <= floor
    A = pair.shape[2]
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = np.where(bad[..., None], 1.0 / A, pair / np.where(bad, 1.0, tot)[..., None])
    pi = pi / pi.sum(axis=2, keepdims=True)
    return StochasticPolicy(pi), bad


def compressed_value(zc: np.ndarray, reward: np.ndarray) -> float:
    r = reward.values if hasattr(reward, "values") else np.asarray(reward)
    return float(np.einsum("hsa,sa->", zc.sum(axis=3), r))
