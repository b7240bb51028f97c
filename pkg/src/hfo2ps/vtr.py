"""Variance-aware value-targeted regression and the optimistic value pass.

One weighted ridge regression per moment level ``m`` estimates ``theta*``
from the targets ``V^{2^m}(s')``; the high-order moment estimator (HOME)
sets the regression weights from the next level's estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

from .mdp import LinearMixtureModel, StochasticPolicy


class TheoryDefaults(NamedTuple):
    levels: int
    xi: float
    gamma: float
    lam: float
    alpha: float


def theory_defaults(K: int, H: int, d: int, B: float) -> TheoryDefaults:
    """Theory-default parameter bindings: ``M = ceil(log2(4KH))`` etc."""
    return TheoryDefaults(
        levels=max(1, math.ceil(math.log2(4 * K * H))),
        xi=math.sqrt(d / (K * H)),
        gamma=d ** (-0.25),
        lam=d / B**2,
        alpha=H / math.sqrt(K),
    )


def confidence_radius(
    k: int, d: int, H: int, xi: float, gamma: float, lam: float, B: float, delta: float,
    terms: tuple[bool, bool, bool] = (True, True, True),
) -> float:
    """Confidence radius of episode ``k`` (natural logarithms).

    ``terms`` switches the three summands on or off (used to check the
    decomposition in isolation).
    """
    if min(k, d, H, xi, gamma, lam, delta) <= 0 or B < 0:
        raise ValueError("confidence_radius needs positive parameters")
    if delta >= 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if gamma**2 / xi <= 1.0:
        raise ValueError("confidence_radius needs gamma^2 / xi > 1")
    inner = math.log(gamma**2 / xi) + 1.0
    arg1 = 1.0 + k * H / (xi**2 * d * lam)
    arg2 = 32.0 * inner * k**2 * H**2 / delta
    if arg1 <= 0 or arg2 <= 0:
        raise ValueError("confidence_radius log argument not positive")
    log2 = math.log(arg2)
    if log2 < 0:
        raise ValueError("confidence_radius: log(32(...)k^2H^2/delta) is negative")
    t1 = 12.0 * math.sqrt(d * math.log(arg1) * log2)
    t2 = 30.0 * log2 / gamma**2
    t3 = math.sqrt(lam) * B
    return float(terms[0] * t1 + terms[1] * t2 + terms[2] * t3)


RadiusFn = Callable[[int], float]


@dataclass(frozen=True, eq=False)
class ConfidenceSet:
    """Ellipsoid ``{theta : ||Sigma^{1/2}(theta - center)|| <= radius}``."""

    center: np.ndarray
    shape: np.ndarray
    radius: float
    delta: float = 0.0

    def __post_init__(self):
        if not self.radius >= 0.0:
            raise ValueError("radius must be nonnegative")
        c = np.array(self.center, dtype=float)
        sh = np.array(self.shape, dtype=float)
        if sh.shape != (c.size, c.size):
            raise ValueError("shape must be a d x d matrix")
        c.setflags(write=False)
        sh.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "shape", sh)

    @property
    def dim(self) -> int:
        return self.center.size

    def norm(self, theta: np.ndarray) -> float:
        diff = np.asarray(theta, dtype=float) - self.center
        return float(math.sqrt(max(diff @ self.shape @ diff, 0.0)))


def confidence_contains(cs: ConfidenceSet, theta: np.ndarray) -> tuple[bool, float]:
    """Membership and margin ``radius - ||Sigma^{1/2}(theta - center)||``."""
    margin = cs.radius - cs.norm(theta)
    return margin >= 0.0, margin


def weighted_norm_inv(chol: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``sqrt(x^T Sigma^{-1} x)`` from lower Cholesky factors of ``Sigma``.

    ``chol`` (..., d, d) and ``x`` (..., d) broadcast together.
    """
    y = np.linalg.solve(chol, x[..., None])[..., 0]
    return np.sqrt(np.sum(y * y, axis=-1))


class OptimisticValues(NamedTuple):
    Q: np.ndarray  # (H, S, A)
    V: np.ndarray  # (H+1, S)


def optimistic_backup(
    reward: np.ndarray,
    policy: StochasticPolicy,
    theta_hat: np.ndarray,
    sigma_hat: np.ndarray,
    beta: float,
    features: np.ndarray | LinearMixtureModel,
) -> OptimisticValues:
    """Backward pass ``Q = [r + <theta, phi_V> + beta ||phi_V||_{Sigma^{-1}}]_[0,1]``, ``V = E_pi Q``."""
    feats = features.features if isinstance(features, LinearMixtureModel) else features
    S, _, A, d = feats.shape
    H = policy.probs.shape[0]
    r = reward.values if hasattr(reward, "values") else np.asarray(reward)
    L = np.linalg.cholesky(sigma_hat)
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, A))
    flat = feats.reshape(S, S * A * d)
    for h in range(H - 1, -1, -1):
        phi = (V[h + 1] @ flat).reshape(S * A, d)
        mean = phi @ theta_hat
        z = solve_triangular(L, phi.T, lower=True, check_finite=False)
        bonus = beta * np.sqrt(np.sum(z * z, axis=0))
        Q[h] = np.clip(r + (mean + bonus).reshape(S, A), 0.0, 1.0)
        # rounding in the policy average can overshoot 1 by an ulp
        V[h] = np.clip(np.einsum("sa,sa->s", policy.probs[h], Q[h]), 0.0, 1.0)
    return OptimisticValues(Q, V)


def power_targets(V: np.ndarray, levels: int) -> np.ndarray:
    """``V^{2^m}`` for ``m < levels`` by repeated squaring, clipped to [0, 1] first."""
    out = np.empty((levels,) + V.shape)
    cur = np.clip(V, 0.0, 1.0)
    for m in range(levels):
        out[m] = cur
        cur = np.clip(cur * cur, 0.0, 1.0)
    return out


def home_variances(
    phis: np.ndarray,
    theta_hat: np.ndarray,
    chol_hat: np.ndarray,
    chol_tilde: np.ndarray,
    beta: float,
    xi: float,
    gamma: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """High-order moment estimator: regression weights for every level.

    ``phis`` (M, d) are this step's features, ``theta_hat`` (M, d) the
    episode estimates, ``chol_hat``/``chol_tilde`` (M, d, d) lower Cholesky
    factors of the episode and running covariances.

    Returns ``(sigma2, vbar, err)``; ``vbar``/``err`` are NaN on the top level.
    The exploration floor uses ``gamma^2 ||phi||_{Sigma_tilde^{-1}}`` (a norm,
    not its square).
    """
    M = phis.shape[0]
    tilde_norm = weighted_norm_inv(chol_tilde, phis)
    hat_norm = weighted_norm_inv(chol_hat, phis)
    means = np.clip(np.einsum("md,md->m", phis, theta_hat), 0.0, 1.0)
    vbar = np.full(M, np.nan)
    err = np.full(M, np.nan)
    sigma2 = np.empty(M)
    if M > 1:
        vbar[:-1] = means[1:] - means[:-1] ** 2
        err[:-1] = np.minimum(1.0, 2.0 * beta * hat_norm[:-1]) + np.minimum(1.0, beta * hat_norm[1:])
        sigma2[:-1] = np.maximum(np.maximum(vbar[:-1] + err[:-1], xi**2), gamma**2 * tilde_norm[:-1])
    sigma2[-1] = max(1.0, xi**2, gamma**2 * tilde_norm[-1])
    return sigma2, vbar, err


class MomentBank:
    """Per-level weighted ridge state, stacked over levels ``m = 0..M-1``.

    ``sigma_hat``, ``b_hat``, ``theta_hat`` are frozen for the episode;
    ``sigma_tilde``, ``b_tilde`` accumulate within it and are promoted by
    ``end_episode``. Cholesky factors are recomputed after every update
    (d is small) so no incremental drift builds up.
    """

    def __init__(self, d: int, levels: int, lam: float, xi: float, gamma: float):
        if min(d, levels) < 1 or min(lam, xi, gamma) <= 0:
            raise ValueError("MomentBank needs d, M >= 1 and positive lam, xi, gamma")
        self.d, self.levels = d, levels
        self.lam, self.xi, self.gamma = lam, xi, gamma
        self.sigma_hat = np.repeat(lam * np.eye(d)[None], levels, axis=0)
        self.b_hat = np.zeros((levels, d))
        self.theta_hat = np.zeros((levels, d))
        self.chol_hat = np.linalg.cholesky(self.sigma_hat)
        self.begin_episode()

    def begin_episode(self) -> None:
        self.sigma_tilde = self.sigma_hat.copy()
        self.b_tilde = self.b_hat.copy()
        self.chol_tilde = self.chol_hat.copy()

    def update(self, m: int, phi: np.ndarray, target: float, sigma_bar: float) -> None:
        """Rank-one update of level ``m`` with weight ``1/sigma_bar^2``."""
        if not sigma_bar > 0:
            raise ValueError("sigma_bar must be positive")
        w = 1.0 / sigma_bar**2
        self.sigma_tilde[m] += w * np.outer(phi, phi)
        self.b_tilde[m] += w * target * phi
        self.chol_tilde[m] = np.linalg.cholesky(self.sigma_tilde[m])

    def update_all(self, phis: np.ndarray, targets: np.ndarray, sigma2: np.ndarray) -> None:
        """Same as ``update`` on every level at once; ``sigma2`` are squared weights."""
        if np.any(~(sigma2 > 0)):
            raise ValueError("sigma_bar must be positive")
        w = 1.0 / sigma2
        self.sigma_tilde += w[:, None, None] * phis[:, :, None] * phis[:, None, :]
        self.b_tilde += (w * targets)[:, None] * phis
        self.chol_tilde = np.linalg.cholesky(self.sigma_tilde)

    def end_episode(self) -> None:
        self.sigma_hat = self.sigma_tilde.copy()
        self.b_hat = self.b_tilde.copy()
        self.chol_hat = self.chol_tilde.copy()
        y = np.linalg.solve(self.chol_hat, self.b_hat[..., None])
        self.theta_hat = np.linalg.solve(np.swapaxes(self.chol_hat, 1, 2), y)[..., 0]

    def det_ratio_indicator(self, threshold: float = 4.0) -> int:
        """1 iff ``det(Sigma_hat^{-1/2}) / det(Sigma_tilde^{-1/2}) <= threshold`` at every level."""
        half_logdet_hat = np.log(np.diagonal(self.chol_hat, axis1=1, axis2=2)).sum(axis=1)
        half_logdet_tilde = np.log(np.diagonal(self.chol_tilde, axis1=1, axis2=2)).sum(axis=1)
        ratio = half_logdet_tilde - half_logdet_hat
        return int(np.all(ratio <= math.log(threshold) + 1e-12))

    def check_invariants(self) -> dict[str, float]:
        eig = np.linalg.eigvalsh(np.concatenate([self.sigma_hat, self.sigma_tilde]))
        resid = np.abs(np.einsum("mij,mj->mi", self.sigma_hat, self.theta_hat) - self.b_hat)
        return {
            "min_eig_minus_lambda": float(eig.min() - self.lam),
            "normal_eq_residual": float(resid.max() / max(1.0, np.abs(self.b_hat).max())),
        }

    def confidence_set(self, radius: float, delta: float = 0.0) -> ConfidenceSet:
        return ConfidenceSet(self.theta_hat[0], self.sigma_hat[0], radius, delta)

    def bonus_norm(self, phi: np.ndarray, m: int = 0) -> float:
        """``||phi||_{Sigma_hat_m^{-1}}``."""
        return float(weighted_norm_inv(self.chol_hat[m], phi))


def update_regression(bank: MomentBank, m: int, phi: np.ndarray, target: float, sigma_bar: float) -> MomentBank:
    bank.update(m, phi, target, sigma_bar)
    return bank
