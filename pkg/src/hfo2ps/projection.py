"""Bregman projections onto intersections of simple convex pieces.

Three piece types: hyperplanes ``A x = b``, halfspaces ``c^T x <= d`` and
occupancy ellipsoid rows (nonnegative vectors ``v`` with ``v / ||v||_1 = B theta``
for some ``theta`` in a confidence ellipsoid). ``dykstra`` cycles through the
pieces with dual corrections under either the entropic or the Euclidean
potential.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import null_space

from . import _kernels as kern

Z_MIN = 1e-12
SIGMA_TOL = 1e-10


# ---------------------------------------------------------------- closed forms


def euclid_project_hyperplane(x: np.ndarray, A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x - A^T (A A^T)^{-1} (A x - b)``; ``A`` must have full row rank."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    x = np.asarray(x, dtype=float)
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise np.linalg.LinAlgError("hyperplane matrix is rank deficient")
    return x - A.T @ np.linalg.solve(A @ A.T, A @ x - b)


def euclid_project_halfspace(x: np.ndarray, c: np.ndarray, d: float) -> np.ndarray:
    """``x - ([c^T x - d]_+ / ||c||^2) c``."""
    c = np.asarray(c, dtype=float)
    x = np.asarray(x, dtype=float)
    cc = c @ c
    if cc == 0.0:
        raise ValueError("halfspace normal must be nonzero")
    return x - (max(c @ x - d, 0.0) / cc) * c


def lin_opt_ellipsoid(A: np.ndarray, x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Maximizer ``x + A c / sqrt(c^T A c)`` of ``c^T y`` over ``||y - x||_{A^{-1}} <= 1``."""
    A = np.asarray(A, dtype=float)
    c = np.asarray(c, dtype=float)
    if not np.any(c):
        raise ValueError("direction c must be nonzero")
    np.linalg.cholesky(A)  # raises unless A is positive definite
    return kern.lin_opt_ellipsoid(np.ascontiguousarray(A), np.asarray(x, dtype=float), c)


# ---------------------------------------------------------------- pieces


@dataclass(frozen=True, eq=False)
class Hyperplane:
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if b.shape != (A.shape[0],):
            raise ValueError("b must have one entry per row of A")
        if np.linalg.matrix_rank(A) < A.shape[0]:
            raise ValueError("hyperplane matrix must have full row rank")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    def residual(self, x: np.ndarray) -> float:
        return float(np.abs(self.A @ x - self.b).max())


@dataclass(frozen=True, eq=False)
class Halfspace:
    c: np.ndarray
    d: float

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        if not np.any(c):
            raise ValueError("halfspace normal must be nonzero")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", float(self.d))

    def residual(self, x: np.ndarray) -> float:
        return max(0.0, float(self.c @ x - self.d))


class SliceGeometry(NamedTuple):
    """Normalized rows ``pc + M y`` with ``y^T Q y <= 1`` (see ``slice_geometry``)."""

    mode: int
    pc: np.ndarray
    M: np.ndarray
    Q: np.ndarray
    Aw: np.ndarray
    y0: np.ndarray
    basis: np.ndarray
    theta_c: np.ndarray
    infeasible: bool


def slice_geometry(B: np.ndarray, theta_hat: np.ndarray, Sigma: np.ndarray, beta: float,
                   Sigma_inv: np.ndarray | None = None) -> SliceGeometry:
    """Parametrize ``{B theta : ||Sigma^{1/2}(theta - theta_hat)|| <= beta, 1^T B theta = 1}``.

    With ``a = B^T 1`` the constraint ``a^T theta = 1`` cuts the ellipsoid in a
    lower-dimensional ellipsoid centred at ``theta_c`` with squared radius
    ``rho^2 = beta^2 - (1 - a^T theta_hat)^2 / (a^T Sigma^{-1} a)``. Writing
    ``theta = theta_c + U y`` with ``U`` an orthonormal basis of ``null(a^T)``
    gives ``y^T (U^T Sigma U / rho^2) y <= 1``. A single point (``d = 1`` or
    ``rho = 0``) is a ray; a negative ``rho^2`` means the slice is empty.
    """
    B = np.asarray(B, dtype=float)
    n, d = B.shape
    r = max(d - 1, 1)
    Sigma_inv = np.linalg.inv(Sigma) if Sigma_inv is None else Sigma_inv
    avec = B.sum(axis=0)
    if not np.any(avec):
        raise ValueError("feature rows sum to zero; no normalized kernel is realizable")
    Sa = Sigma_inv @ avec
    den = avec @ Sa
    gap = 1.0 - avec @ theta_hat
    tc = theta_hat + Sa * gap / den
    rho2 = beta * beta - gap * gap / den
    pcv = B @ tc
    zeros_r = np.zeros((n, r))
    eye_r = np.eye(r)
    if d == 1 or rho2 <= 1e-12 * beta * beta:
        infeasible = rho2 < -1e-10 * max(1.0, beta * beta) or bool(np.any(pcv < -1e-12))
        mode = kern.MODE_INFEASIBLE if infeasible else kern.MODE_RAY
        return SliceGeometry(mode, _clip_row(pcv), zeros_r, eye_r, eye_r, np.zeros(r),
                             np.zeros((d, r)), tc, infeasible)
    U = null_space(avec[None, :])
    Q = (U.T @ Sigma @ U) / rho2
    Q = 0.5 * (Q + Q.T)
    Mr = B @ U
    start = _feasible_start(pcv, Mr, Q, U, tc, avec)
    if start is None:
        return SliceGeometry(kern.MODE_INFEASIBLE, _clip_row(pcv), Mr, Q, np.linalg.inv(Q),
                             np.zeros(r), U, tc, True)
    return SliceGeometry(kern.MODE_SLICE, pcv, Mr, Q, np.linalg.inv(Q), start, U, tc, False)


def _clip_row(p: np.ndarray) -> np.ndarray:
    q = np.maximum(p, 0.0)
    tot = q.sum()
    return q / tot if tot > 0 else np.full_like(p, 1.0 / p.size)


def _feasible_start(pc, Mr, Q, U, tc, avec):
    """A slice point with a strictly positive row inside the ellipsoid, or None."""
    y_ln = U.T @ (avec / (avec @ avec) - tc)  # least-norm point of a^T theta = 1
    for y in (np.zeros(Q.shape[0]), y_ln):
        if np.all(pc + Mr @ y > 0) and y @ Q @ y < 1.0:
            return y
    if not np.all(pc + Mr @ y_ln > 0):
        return None
    # positivity holds at the least-norm end, the ellipsoid at the centre end
    for t in np.linspace(0.0, 1.0, 201)[1:]:
        y = t * y_ln
        if np.all(pc + Mr @ y > 0) and y @ Q @ y < 1.0:
            return y
    return None


def pseudo_inverse(W: np.ndarray, sigma_tol: float = SIGMA_TOL) -> np.ndarray:
    """SVD pseudoinverse dropping singular values below ``sigma_tol * sigma_max``."""
    U, sv, Vt = np.linalg.svd(W, full_matrices=False)
    if sv.size == 0 or sv[0] == 0.0:
        return np.zeros((W.shape[1], W.shape[0]))
    keep = sv > sigma_tol * sv[0]
    return (Vt[keep].T / sv[keep]) @ U[:, keep].T


@dataclass(frozen=True, eq=False)
class OccupancyEllipsoid:
    """Row constraint: ``v >= 0`` and ``v = ||v||_1 B theta`` for some ``theta`` in the ellipsoid.

    ``coords`` selects the entries of the full vector that form the row; the
    constraint is vacuous on a zero row. ``pinv`` is ``(B Sigma^{-1/2})^+``
    (a Cholesky factor stands in for the square root; norms agree).
    """

    B: np.ndarray
    theta_hat: np.ndarray
    Sigma: np.ndarray
    beta: float
    coords: np.ndarray
    index: tuple = ()
    geometry: SliceGeometry = field(init=False, repr=False)
    pinv: np.ndarray = field(init=False, repr=False)
    center_row: np.ndarray = field(init=False, repr=False)
    whitened: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        Sigma = np.asarray(self.Sigma, dtype=float)
        th = np.asarray(self.theta_hat, dtype=float)
        coords = np.asarray(self.coords, dtype=np.int64)
        if B.shape != (coords.size, th.size):
            raise ValueError("B must be (len(coords), d)")
        L = np.linalg.cholesky(Sigma)
        W = B @ np.linalg.inv(L).T
        for name, val in (("B", B), ("Sigma", Sigma), ("theta_hat", th), ("coords", coords)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "geometry", slice_geometry(B, th, Sigma, float(self.beta)))
        object.__setattr__(self, "whitened", W)
        object.__setattr__(self, "pinv", pseudo_inverse(W))
        object.__setattr__(self, "center_row", B @ th)

    def residual(self, x: np.ndarray) -> float:
        v = np.asarray(x, dtype=float)[self.coords]
        n1 = np.abs(v).sum()
        neg = max(0.0, -float(v.min(initial=0.0)))
        if n1 == 0.0:
            return 0.0
        e = v / n1 - self.center_row
        u = self.pinv @ e
        range_resid = float(np.abs(self.whitened @ u - e).max())
        return max(neg, float(np.linalg.norm(u)) - self.beta, range_resid, 0.0)


Piece = Hyperplane | Halfspace | OccupancyEllipsoid


# ---------------------------------------------------------------- potentials


@dataclass(frozen=True)
class EntropyPotential:
    """``Phi(z) = sum z (log z - 1)``; logs floor at ``z_min``."""

    z_min: float = Z_MIN

    def grad(self, x):
        return np.log(np.maximum(x, self.z_min))

    def grad_conj(self, g):
        return np.exp(g)

    def divergence(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        pos = x > 0
        return float(np.sum(x[pos] * np.log(x[pos] / np.maximum(y[pos], self.z_min))) - x.sum() + y.sum())

    def conj_shift(self, w, v):
        """``F*(v)`` for ``F = D(., w)``."""
        return float(np.sum(np.asarray(w) * np.expm1(v)))


@dataclass(frozen=True)
class EuclideanPotential:
    """``Phi(z) = ||z||^2 / 2``."""

    def grad(self, x):
        return np.asarray(x, dtype=float)

    def grad_conj(self, g):
        return np.asarray(g, dtype=float)

    def divergence(self, x, y):
        d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        return 0.5 * float(d @ d)

    def conj_shift(self, w, v):
        v = np.asarray(v, dtype=float)
        return float(0.5 * v @ v + v @ np.asarray(w, dtype=float))


class InnerResult(NamedTuple):
    point: np.ndarray
    iterations: int
    converged: bool
    gap: float


def kl_project_piece(piece: Piece, target: np.ndarray, potential=None, inner_tol: float = 1e-12,
                     max_iter: int = 10000) -> InnerResult:
    """Approximate Bregman projection of ``target`` onto one piece.

    Entropic potential: projected gradient descent with Euclidean
    sub-projections and exact line search for hyperplanes and halfspaces;
    Frank-Wolfe with Newton acceleration for ellipsoid rows. The Euclidean
    potential uses the exact closed forms.
    """
    potential = potential or EntropyPotential()
    y = np.asarray(target, dtype=float)
    if isinstance(potential, EuclideanPotential):
        if isinstance(piece, Hyperplane):
            return InnerResult(euclid_project_hyperplane(y, piece.A, piece.b), 0, True, 0.0)
        if isinstance(piece, Halfspace):
            return InnerResult(euclid_project_halfspace(y, piece.c, piece.d), 0, True, 0.0)
        raise TypeError("ellipsoid rows are only supported under the entropic potential")
    if isinstance(piece, OccupancyEllipsoid):
        return _project_ellipsoid_row(piece, y, inner_tol, max_iter, potential.z_min)
    if isinstance(piece, Halfspace):
        if piece.c @ y <= piece.d:
            return InnerResult(y.copy(), 0, True, 0.0)
        # a violated halfspace projects onto its boundary
        return _pgd_affine(y, piece.c[None, :], np.array([piece.d]), inner_tol, max_iter, potential.z_min)
    if isinstance(piece, Hyperplane):
        return _pgd_affine(y, piece.A, piece.b, inner_tol, max_iter, potential.z_min)
    raise TypeError(f"unknown piece {type(piece).__name__}")


def _pgd_affine(y, A, b, tol, max_iter, z_min) -> InnerResult:
    """Minimize ``sum x log(x/y) - x + y`` over ``A x = b`` by projected gradient.

    The start is the Euclidean projection of ``y``; if that leaves the
    positive orthant the start falls back to the exact dual solution
    ``y exp(A^T mu)``, which is already optimal.
    """
    x = euclid_project_hyperplane(y, A, b)
    if np.any(x <= 0):
        x, ok = _dual_newton_affine(y, A, b)
        return InnerResult(x, 0, ok, 0.0)
    AAt = A @ A.T
    ly = np.log(np.maximum(y, z_min))
    for it in range(max_iter):
        g = np.log(x) - ly
        d = -(g - A.T @ np.linalg.solve(AAt, A @ g))  # projected onto null(A)
        dec = -(g @ d)
        if dec <= tol:
            return InnerResult(x, it, True, dec)
        neg = d < 0
        t_max = 0.999 * float(np.min(-x[neg] / d[neg])) if neg.any() else np.inf
        t = _affine_line_search(x, d, ly, t_max)
        x = x + t * d
    return InnerResult(x, max_iter, False, dec)


def _affine_line_search(x, d, ly, t_max):
    lo, hi = 0.0, t_max if np.isfinite(t_max) else 1.0
    if not np.isfinite(t_max):
        while (d @ (np.log(x + hi * d) - ly)) < 0:
            hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if d @ (np.log(x + mid * d) - ly) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return lo


def _dual_newton_affine(y, A, b, tol=1e-14, max_iter=200):
    mu = np.zeros(A.shape[0])
    for _ in range(max_iter):
        x = y * np.exp(A.T @ mu)
        r = A @ x - b
        if np.abs(r).max() <= tol * max(1.0, np.abs(b).max()):
            return x, True
        J = (A * x) @ A.T
        step = np.linalg.solve(J, r)
        t = 1.0
        base = np.abs(r).sum()
        while t > 1e-12:
            x_new = y * np.exp(A.T @ (mu - t * step))
            if np.abs(A @ x_new - b).sum() < base:
                break
            t *= 0.5
        mu = mu - t * step
    return y * np.exp(A.T @ mu), False


def _project_ellipsoid_row(piece: OccupancyEllipsoid, y, tol, max_iter, z_min) -> InnerResult:
    g = piece.geometry
    out = y.copy()
    row = np.ascontiguousarray(y[piece.coords])
    if np.any(row < 0):
        raise ValueError("target must be nonnegative")
    n = row.size
    res = np.empty(n)
    work = np.empty(n)
    yy = g.y0.copy()
    it, status = kern.project_row(row, n, g.mode, g.pc, np.ascontiguousarray(g.M), g.Q, g.Aw,
                                  yy, tol, max_iter, z_min, res, work, True)
    out[piece.coords] = res
    return InnerResult(out, int(it), status == kern.CONE_OK, 0.0)


# ---------------------------------------------------------------- Dykstra


@dataclass
class DykstraState:
    x: np.ndarray
    corrections: list
    anchors: list
    sweeps: int = 0

    def dual_value(self, start: np.ndarray, potential) -> float:
        """Fenchel dual objective ``-F*(-sum q_i) - sum_i <q_i, x_i>`` of ``min D(x, start)``.

        ``x_i`` is the point where ``q_i`` was last set; ``q_i`` lies in the
        normal cone there, so the inner product is the support function.
        Dykstra is exact block ascent on this value.
        """
        qsum = np.sum(self.corrections, axis=0)
        supp = sum(float(q @ a) for q, a in zip(self.corrections, self.anchors))
        return -potential.conj_shift(start, -qsum) - supp


class DykstraResult(NamedTuple):
    point: np.ndarray
    sweeps: int
    tv_change: float
    converged: bool
    residuals: list


def dykstra(pieces: Sequence[Piece], start: np.ndarray, potential=None, eps: float = 1e-10,
            max_sweeps: int = 5000, inner_tol: float = 1e-12, trace: list | None = None) -> DykstraResult:
    """Cyclic Bregman projections with dual corrections.

    ``x_n = P_n(grad_conj(grad(x_{n-1}) + q_{n-N}))`` and
    ``q_n = grad(x_{n-1}) + q_{n-N} - grad(x_n)``. Stops when a full sweep
    moves the iterate by at most ``eps`` in total variation
    (``0.5 ||x - x_prev||_1``). On hitting ``max_sweeps`` the last iterate is
    returned with ``converged=False``. ``trace`` collects
    ``(sweep, tv, residuals, dual_value)`` per sweep.
    """
    potential = potential or EntropyPotential()
    x = np.asarray(start, dtype=float).copy()
    if isinstance(potential, EntropyPotential) and np.any(x <= 0):
        raise ValueError("entropic Dykstra needs a strictly positive start")
    state = DykstraState(x, [np.zeros_like(x) for _ in pieces], [x.copy() for _ in pieces])
    x0 = x.copy()
    tv = np.inf
    for sweep in range(max_sweeps):
        prev = state.x.copy()
        for i, piece in enumerate(pieces):
            gx = potential.grad(state.x)
            y = potential.grad_conj(gx + state.corrections[i])
            new = kl_project_piece(piece, y, potential, inner_tol).point
            state.corrections[i] = gx + state.corrections[i] - potential.grad(new)
            if isinstance(potential, EntropyPotential):
                # zero entries carry no usable dual information
                state.corrections[i][new <= 0] = 0.0
            state.anchors[i] = new
            state.x = new
        state.sweeps = sweep + 1
        tv = 0.5 * float(np.abs(state.x - prev).sum())
        if trace is not None:
            trace.append((state.sweeps, tv, [p.residual(state.x) for p in pieces], state.dual_value(x0, potential)))
        if tv <= eps:
            break
    res = [p.residual(state.x) for p in pieces]
    return DykstraResult(state.x, state.sweeps, tv, tv <= eps, res)
