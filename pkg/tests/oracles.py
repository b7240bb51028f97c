"""Independent reference computations shared by the unit and acceptance tests."""

import itertools

import numpy as np
from scipy.special import logsumexp, xlogy

from hfo2ps.instances import tree_state_index


def kl(x, y):
    """Unnormalized KL ``sum x log(x/y) - x + y``, with ``0 log 0 = 0``."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    return float(np.sum(xlogy(x, x) - xlogy(x, y)) - x.sum() + y.sum())


# ---------------------------------------------------------------- tree experts


def tree_paths(A, Ht):
    """Every root-to-leaf path as a list of ``(state, action)`` edges, in base-``A`` order."""
    out = []
    for digits in itertools.product(range(A), repeat=Ht):
        m, edges = 0, []
        for depth, n in enumerate(digits):
            edges.append((tree_state_index(depth, m, A), n))
            m = m * A + n
        out.append(edges)
    return out


def leaf_distribution(z, A, Ht):
    """Probability of each leaf under a tree occupancy ``z`` (dense or compressed)."""
    out = []
    for m in range(A ** (Ht - 1)):
        s = tree_state_index(Ht - 1, m, A)
        out.extend(z[Ht - 1, s, :, :].sum(axis=1))
    return np.array(out)


def flat_hedge(A, Ht, R):
    """Exponential weights over paths with path score ``sum of R`` along the path."""
    score = np.array([sum(R[s, n] for s, n in p) for p in tree_paths(A, Ht)])
    return np.exp(score - logsumexp(score))


def nested_hedge(A, Ht, R):
    """Leaf distribution of the stagewise-entropy projection on a deterministic tree.

    A node with ``tau`` remaining stages plays a softmax with temperature
    ``tau`` over ``R(s, a) + value(child)``; its value is ``tau * logsumexp``.
    """
    V = np.zeros(A**Ht)
    probs = {}
    for depth in range(Ht - 1, -1, -1):
        tau = Ht - depth
        Vn = np.zeros(A**depth)
        for m in range(A**depth):
            s = tree_state_index(depth, m, A)
            x = (R[s] + V[m * A + np.arange(A)]) / tau
            Vn[m] = tau * logsumexp(x)
            probs[depth, m] = np.exp(x - logsumexp(x))
        V = Vn
    leaf = np.ones(1)
    for depth in range(Ht):
        leaf = np.concatenate([leaf[m] * probs[depth, m] for m in range(A**depth)])
    return leaf


# ---------------------------------------------------------------- tiny projection grid


def row_interval(B, center, Sigma, beta):
    """Range of ``p(s'=0)`` over normalized rows ``B theta`` with ``theta`` in the ellipsoid.

    Only for ``|S| = 2`` and ``d = 2``: the normalized parameters form a line,
    which meets the ellipsoid in a segment.
    """
    a = B.sum(axis=0)
    th0 = a / (a @ a)
    v = np.array([-a[1], a[0]])
    e = th0 - center
    qa, qb, qc = v @ Sigma @ v, 2 * v @ Sigma @ e, e @ Sigma @ e - beta**2
    disc = qb * qb - 4 * qa * qc
    if disc < 0:
        return None
    t = np.array([(-qb - np.sqrt(disc)) / (2 * qa), (-qb + np.sqrt(disc)) / (2 * qa)])
    p = B[0] @ (th0[:, None] + v[:, None] * t[None])
    lo, hi = max(p.min(), 0.0), min(p.max(), 1.0)
    return (lo, hi) if lo <= hi else None


def _row_cost(pgrid, wrow):
    """``min_p KL(p || w / |w|) - log |w|`` on a 1-D grid of ``p(s'=0)``; returns values per p."""
    tot = wrow.sum()
    q = wrow / tot
    P = np.stack([pgrid, 1.0 - pgrid], axis=-1)
    return np.sum(xlogy(P, P) - xlogy(P, q), axis=-1) - np.log(tot)


def grid_projection_value(w, intervals, s1=0, n0=41, zooms=6, fine=20001):
    """Minimal ``KL(z || w)`` over the tiny (|S| = 2, |A| = 2, H = 2) feasible set.

    ``w`` is dense ``(2, 2, 2, 2)`` and ``intervals[s][a]`` the allowed range
    of ``p(s'=0)``. Rows with mass ``n`` and distribution ``p`` cost
    ``n log n - n + n (KL(p || w_hat) - log |w|)``. The three coupled
    first-stage parameters are searched on a zooming grid; second-stage
    rows and action splits are searched on fine 1-D grids.
    """
    const = float(w.sum())
    # second stage: best row per (s, a) on a fine grid, then the best action split per state
    c1 = np.zeros((2, 2))
    for s in range(2):
        for a in range(2):
            lo, hi = intervals[s][a]
            c1[s, a] = _row_cost(np.linspace(lo, hi, fine), w[1, s, a]).min()
    q = np.linspace(0.0, 1.0, 200001)
    g = np.array([np.min(xlogy(q, q) + xlogy(1 - q, 1 - q) + q * c1[s, 0] + (1 - q) * c1[s, 1]) for s in range(2)])

    def f(mass, gs):
        return xlogy(mass, mass) - mass + mass * gs

    lo0, hi0 = intervals[s1][0]
    lo1, hi1 = intervals[s1][1]
    box = np.array([[0.0, 1.0], [lo0, hi0], [lo1, hi1]])
    best = np.inf
    for _ in range(zooms):
        axes = [np.linspace(l, h, n0) for l, h in box]
        X, P0, P1 = np.meshgrid(*axes, indexing="ij")
        n = [X, 1.0 - X]
        cost = 0.0
        for a, P in enumerate((P0, P1)):
            cost = cost + xlogy(n[a], n[a]) - n[a] + n[a] * _row_cost(P, w[0, s1, a])
        m0 = X * P0 + (1 - X) * P1
        cost = cost + f(m0, g[0]) + f(1 - m0, g[1])
        i = np.unravel_index(np.argmin(cost), cost.shape)
        best = min(best, float(cost[i]))
        centre = np.array([axes[j][i[j]] for j in range(3)])
        half = (box[:, 1] - box[:, 0]) / (n0 - 1) * 2
        full = np.array([[0.0, 1.0], [lo0, hi0], [lo1, hi1]])
        box = np.stack([np.maximum(centre - half, full[:, 0]), np.minimum(centre + half, full[:, 1])], axis=1)
    return best + const
