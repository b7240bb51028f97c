"""Compiled inner loops for the occupancy projection.

Occupancies are held in a compressed layout: ``z[h, s, a, j]`` is the mass on
next state ``supp[s, a, j]`` (padding entries have ``supp == -1`` and stay 0).
The support of a pair is the set of next states whose feature row is nonzero,
so every kernel realizable by the model lives inside it.
"""

import numpy as np
from numba import njit

# status codes returned by the per-row solver
CONE_OK = 0
CONE_MAXITER = 1
CONE_INFEASIBLE = 2

MODE_EMPTY = 0  # zero support, nothing to do
MODE_RAY = 1  # the normalized row is pinned to a single vector
MODE_SLICE = 2  # normalized row ranges over an ellipsoidal slice
MODE_INFEASIBLE = 3  # slice empty, ray fallback (flagged)


@njit(cache=True)
def lin_opt_ellipsoid(A, x, c):
    """Maximizer of ``c @ y`` over ``(y - x) A^{-1} (y - x) <= 1``."""
    Ac = A @ c
    den = np.sqrt(max(c @ Ac, 0.0))
    return x + Ac / den


@njit(cache=True)
def _kl_rows(p, w_hat, n, z_min):
    f = 0.0
    for j in range(n):
        if p[j] > 0.0:
            f += p[j] * np.log(p[j] / max(w_hat[j], z_min))
    return f


@njit(cache=True)
def _line_search(p, Md, w_hat, n, t_max, z_min):
    """Minimize t -> KL(p + t Md || w_hat) on [0, t_max] (convex in t)."""

    def deriv(t):
        g = 0.0
        c = 0.0
        for j in range(n):
            pj = p[j] + t * Md[j]
            if pj <= 0.0:
                if Md[j] < 0.0:
                    return np.inf, np.inf
                continue
            g += Md[j] * np.log(pj / max(w_hat[j], z_min))
            c += Md[j] * Md[j] / pj
        return g, c

    g0, _ = deriv(0.0)
    if g0 >= 0.0:
        return 0.0
    gm, _ = deriv(t_max)
    if gm <= 0.0:
        return t_max
    lo, hi = 0.0, t_max
    t = 0.5 * t_max
    for _ in range(100):
        g, c = deriv(t)
        if g > 0.0:
            hi = t
        else:
            lo = t
        if abs(g) <= 1e-15 or hi - lo <= 1e-16 * max(1.0, t_max):
            break
        tn = t - g / c if c > 0.0 and np.isfinite(c) else 0.5 * (lo + hi)
        if not (lo < tn < hi):
            tn = 0.5 * (lo + hi)
        t = tn
    return t


@njit(cache=True)
def _ellipsoid_step_max(y, d, Q):
    """Largest t >= 0 with (y + t d)^T Q (y + t d) <= 1."""
    Qd = Q @ d
    a = d @ Qd
    b = 2.0 * (y @ Qd)
    c = y @ (Q @ y) - 1.0
    if a <= 0.0:
        return np.inf
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return 0.0
    return max(0.0, (-b + np.sqrt(disc)) / (2.0 * a))


@njit(cache=True)
def cone_solve(w_hat, n, pc, M, Q, Aw, y, tol, max_iter, z_min, polish=False):
    """Minimize ``KL(pc + M y || w_hat)`` over ``y^T Q y <= 1`` with ``pc + M y >= 0``.

    Frank-Wolfe over the ellipsoid (linear oracle ``lin_opt_ellipsoid`` with
    shape ``Aw = Q^{-1}``) interleaved with Newton steps truncated to the
    ellipsoid. Each direction is followed by an exact line search. The
    Frank-Wolfe duality gap bounds the suboptimality and is the stopping
    certificate. ``y`` is a feasible start on entry and the solution on exit.
    ``polish`` runs up to three more iterations after the certificate holds,
    taking the point from ``sqrt(tol)`` to near machine accuracy.

    Returns (objective, gap, iterations, status).
    """
    r = y.shape[0]
    p = np.empty(n)
    lr = np.empty(n)
    Md = np.empty(n)
    zero = np.zeros(r)
    gap = np.inf
    f = 0.0
    extra = 0
    for it in range(max_iter):
        for j in range(n):
            acc = pc[j]
            for i in range(r):
                acc += M[j, i] * y[i]
            p[j] = acc
        f = 0.0
        for j in range(n):
            if p[j] > 0.0:
                lr[j] = np.log(p[j] / max(w_hat[j], z_min))
                f += p[j] * lr[j]
            else:
                lr[j] = 0.0
        g = np.zeros(r)
        Hm = np.zeros((r, r))
        for j in range(n):
            if p[j] <= 0.0:
                continue
            inv = 1.0 / p[j]
            for i in range(r):
                g[i] += M[j, i] * lr[j]
                for l in range(r):
                    Hm[i, l] += M[j, i] * M[j, l] * inv
        s = lin_opt_ellipsoid(Aw, zero, -g) if np.any(g != 0.0) else y.copy()
        gap = g @ (y - s)
        if gap <= tol:
            if not polish or extra >= 3 or gap <= 0.0:
                return f, gap, it, CONE_OK
            extra += 1
        if _boundary_newton(y, g, Hm, f, pc, M, Q, w_hat, n, r, z_min, p):
            continue
        # Newton direction, truncated to the ellipsoid
        for i in range(r):
            Hm[i, i] += 1e-14 * (1.0 + Hm[i, i])
        dn = -np.linalg.solve(Hm, g)
        t_ell = _ellipsoid_step_max(y, dn, Q)
        # interior optimum: a small Newton decrement bounds the gap to the
        # unconstrained minimum, which is a lower bound for the constrained one
        if t_ell >= 1.0 and -(g @ dn) <= tol and (not polish or extra >= 3):
            return f, -(g @ dn), it, CONE_OK
        if t_ell >= 1.0 and -(g @ dn) <= tol:
            extra += 1
        truncated = t_ell < 1.0
        t_max = min(1.0, t_ell)
        _apply(M, dn, Md, n, r)
        t_pos = _positivity_max(p, Md, n)
        if t_pos < t_max:
            t_max = t_pos
        t = _line_search(p, Md, w_hat, n, t_max, z_min)
        for i in range(r):
            y[i] += t * dn[i]
        if truncated or t < t_max * 0.5:
            # Frank-Wolfe step from the updated point toward the oracle vertex
            for j in range(n):
                p[j] += t * Md[j]
            gf = np.zeros(r)
            for j in range(n):
                if p[j] > 0.0:
                    lj = np.log(p[j] / max(w_hat[j], z_min))
                    for i in range(r):
                        gf[i] += M[j, i] * lj
            if np.any(gf != 0.0):
                s = lin_opt_ellipsoid(Aw, zero, -gf)
                dfw = s - y
                _apply(M, dfw, Md, n, r)
                tmx = min(1.0, _positivity_max(p, Md, n))
                t = _line_search(p, Md, w_hat, n, tmx, z_min)
                for i in range(r):
                    y[i] += t * dfw[i]
    return f, gap, max_iter, CONE_MAXITER


@njit(cache=True)
def _boundary_newton(y, g, Hm, f, pc, M, Q, w_hat, n, r, z_min, buf):
    """One Newton step on the KKT system of ``min f s.t. y^T Q y = 1``.

    Used when ``y`` sits on the ellipsoid with a positive multiplier, where
    Frank-Wolfe alone converges slowly. The step is retracted radially onto
    the ellipsoid and kept only if the row stays positive and ``f`` drops.
    """
    Qy = Q @ y
    yQy = y @ Qy
    if yQy < 1.0 - 1e-9:
        return False
    nu = -(g @ y) / (2.0 * yQy)
    if nu <= 0.0:
        return False
    K = np.zeros((r + 1, r + 1))
    rhs = np.empty(r + 1)
    for i in range(r):
        for l in range(r):
            K[i, l] = Hm[i, l] + 2.0 * nu * Q[i, l]
        K[i, r] = 2.0 * Qy[i]
        K[r, i] = 2.0 * Qy[i]
        rhs[i] = -(g[i] + 2.0 * nu * Qy[i])
    rhs[r] = -(yQy - 1.0)
    sol = np.linalg.solve(K, rhs)
    yc = y + sol[:r]
    q = yc @ (Q @ yc)
    if not q > 0.0:
        return False
    yc = yc / np.sqrt(q)
    for j in range(n):
        acc = pc[j]
        for i in range(r):
            acc += M[j, i] * yc[i]
        if acc <= 0.0:
            return False
        buf[j] = acc
    if _kl_rows(buf, w_hat, n, z_min) > f:
        return False
    for i in range(r):
        y[i] = yc[i]
    return True


@njit(cache=True)
def _apply(M, d, out, n, r):
    for j in range(n):
        acc = 0.0
        for i in range(r):
            acc += M[j, i] * d[i]
        out[j] = acc


@njit(cache=True)
def _positivity_max(p, Md, n):
    # stop short of the boundary; the entropy gradient blows up there
    t = np.inf
    for j in range(n):
        if Md[j] < 0.0 and p[j] > 0.0:
            t = min(t, -p[j] / Md[j])
    return 0.999 * t if np.isfinite(t) else np.inf


@njit(cache=True)
def project_row(x, n, mode, pc, M, Q, Aw, y, tol, max_iter, z_min, out, w_hat, polish=False):
    """KL projection of a nonnegative row ``x`` onto the cone of realizable rows.

    The cone is ``{t p : t >= 0, p in slice}``. For fixed ``p`` the optimal
    scale is ``t = sum(x) exp(-KL(p || x / sum(x)))``, so the row problem
    reduces to minimizing that KL over the slice.

    Returns (iterations, status).
    """
    W = 0.0
    for j in range(n):
        W += x[j]
    if W <= 0.0 or mode == MODE_EMPTY:
        for j in range(n):
            out[j] = 0.0
        return 0, CONE_OK
    for j in range(n):
        w_hat[j] = x[j] / W
    it = 0
    status = CONE_OK
    if mode == MODE_SLICE:
        f, gap, it, status = cone_solve(w_hat, n, pc, M, Q, Aw, y, tol, max_iter, z_min, polish)
        for j in range(n):
            acc = pc[j]
            for i in range(y.shape[0]):
                acc += M[j, i] * y[i]
            out[j] = max(acc, 0.0)
    else:
        for j in range(n):
            out[j] = pc[j]
        if mode == MODE_INFEASIBLE:
            status = CONE_INFEASIBLE
    f = _kl_rows(out, w_hat, n, z_min)
    scale = W * np.exp(-f)
    for j in range(n):
        out[j] *= scale
    return it, status


@njit(cache=True)
def active_states(z, nsupp, in_ptr, in_pair, in_slot):
    """Per-stage lists of states with outgoing or incoming mass.

    Returns ``(ptr, states)`` with stage ``h`` owning ``states[ptr[h]:ptr[h+1]]``.
    Multiplicative updates never revive a zero entry, so these lists stay
    valid for a whole projection.
    """
    H, S, A, L = z.shape
    ptr = np.zeros(H + 1, dtype=np.int64)
    buf = np.empty(H * S, dtype=np.int64)
    cnt = 0
    for h in range(H):
        for s in range(S):
            live = False
            for a in range(A):
                for j in range(nsupp[s, a]):
                    if z[h, s, a, j] > 0.0:
                        live = True
            if not live and h > 0:
                for e in range(in_ptr[s], in_ptr[s + 1]):
                    pr = in_pair[e]
                    if z[h - 1, pr // A, pr % A, in_slot[e]] > 0.0:
                        live = True
                        break
            if live:
                buf[cnt] = s
                cnt += 1
        ptr[h + 1] = cnt
    return ptr, buf[:cnt].copy()


@njit(cache=True)
def balance_initial(z, nsupp, s1, act_ptr, act):
    H, S, A, L = z.shape
    tot = 0.0
    for e in range(act_ptr[0], act_ptr[1]):
        s = act[e]
        for a in range(A):
            for j in range(nsupp[s, a]):
                if s != s1:
                    z[0, s, a, j] = 0.0
                else:
                    tot += z[0, s, a, j]
    if tot > 0.0:
        for a in range(A):
            for j in range(nsupp[s1, a]):
                z[0, s1, a, j] /= tot


@njit(cache=True)
def balance_normalization(z, nsupp, h, act_ptr, act):
    A = nsupp.shape[1]
    tot = 0.0
    for e in range(act_ptr[h], act_ptr[h + 1]):
        s = act[e]
        for a in range(A):
            for j in range(nsupp[s, a]):
                tot += z[h, s, a, j]
    if tot > 0.0:
        for e in range(act_ptr[h], act_ptr[h + 1]):
            s = act[e]
            for a in range(A):
                for j in range(nsupp[s, a]):
                    z[h, s, a, j] /= tot


@njit(cache=True)
def balance_flow(z, nsupp, in_ptr, in_pair, in_slot, h, act_ptr, act):
    """Exact KL projection onto the stage-``h`` flow constraints (all states at once).

    Out-mass of ``s`` at stage ``h`` and in-mass of ``s`` from stage ``h-1``
    involve disjoint entries for distinct ``s``, so the block separates into
    two-sided balancing problems with the closed form ``sqrt`` rescaling.
    """
    A = nsupp.shape[1]
    for e0 in range(act_ptr[h], act_ptr[h + 1]):
        s = act[e0]
        out_m = 0.0
        for a in range(A):
            for j in range(nsupp[s, a]):
                out_m += z[h, s, a, j]
        in_m = 0.0
        for e in range(in_ptr[s], in_ptr[s + 1]):
            pr = in_pair[e]
            in_m += z[h - 1, pr // A, pr % A, in_slot[e]]
        if out_m == in_m:
            continue
        if out_m <= 0.0 or in_m <= 0.0:
            fo = 0.0
            fi = 0.0
        else:
            fo = np.sqrt(in_m / out_m)
            fi = 1.0 / fo
        for a in range(A):
            for j in range(nsupp[s, a]):
                z[h, s, a, j] *= fo
        for e in range(in_ptr[s], in_ptr[s + 1]):
            pr = in_pair[e]
            z[h - 1, pr // A, pr % A, in_slot[e]] *= fi


@njit(cache=True)
def affine_block(z, nsupp, in_ptr, in_pair, in_slot, s1, act_ptr, act):
    H = z.shape[0]
    for h in range(H):
        balance_normalization(z, nsupp, h, act_ptr, act)
    for h in range(1, H):
        balance_flow(z, nsupp, in_ptr, in_pair, in_slot, h, act_ptr, act)
    balance_initial(z, nsupp, s1, act_ptr, act)


@njit(cache=True)
def affine_project(z, nsupp, in_ptr, in_pair, in_slot, s1, eps, max_sweeps):
    """Cyclic exact projections onto the affine pieces only; returns sweeps used."""
    act_ptr, act = active_states(z, nsupp, in_ptr, in_pair, in_slot)
    H, S, A, L = z.shape
    prev = z.copy()
    for sweep in range(max_sweeps):
        affine_block(z, nsupp, in_ptr, in_pair, in_slot, s1, act_ptr, act)
        tv = 0.0
        for h in range(H):
            acc = 0.0
            for s in range(S):
                for a in range(A):
                    for j in range(nsupp[s, a]):
                        acc += abs(z[h, s, a, j] - prev[h, s, a, j])
                        prev[h, s, a, j] = z[h, s, a, j]
            tv = max(tv, 0.5 * acc)
        if tv <= eps:
            return sweep + 1
    return max_sweeps


@njit(cache=True)
def dykstra_occupancy(
    z, nsupp, in_ptr, in_pair, in_slot, s1,
    mode, pc, M, Q, Aw, Y, corr,
    eps, max_sweeps, inner_tol, inner_max, z_min,
):
    """Cyclic Bregman projections with dual corrections over the occupancy pieces.

    Piece order per sweep: stage normalizations, flow stages, initial state,
    then one realizability cone per ``(h, s, a)``. The affine pieces are
    projected exactly; their dual corrections lie in the span of the
    constraint normals and cancel, so only cone pieces carry corrections
    (``corr``, same layout as ``z``). ``Y`` holds per-row warm starts.

    Returns (sweeps, last TV change, max inner iterations, worst status).
    """
    H, S, A, L = z.shape
    act_ptr, act = active_states(z, nsupp, in_ptr, in_pair, in_slot)
    prev = z.copy()
    xin = np.empty(L)
    out = np.empty(L)
    w_hat = np.empty(L)
    worst = CONE_OK
    max_inner = 0
    tv = np.inf
    sweeps = 0
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        affine_block(z, nsupp, in_ptr, in_pair, in_slot, s1, act_ptr, act)
        for h in range(H):
            for e in range(act_ptr[h], act_ptr[h + 1]):
                s = act[e]
                for a in range(A):
                    n = nsupp[s, a]
                    row_mass = 0.0
                    for j in range(n):
                        row_mass += z[h, s, a, j]
                    if row_mass <= 0.0:
                        # zero rows are absorbing under multiplicative updates
                        continue
                    for j in range(n):
                        xin[j] = z[h, s, a, j] * np.exp(corr[h, s, a, j])
                    if mode[s, a] == MODE_RAY:
                        # pinned row: scale pc by sum(x) exp(-KL(pc || x/sum(x)))
                        W = 0.0
                        for j in range(n):
                            W += xin[j]
                        f = 0.0
                        for j in range(n):
                            pj = pc[s, a, j]
                            if pj > 0.0:
                                f += pj * np.log(pj * W / max(xin[j], z_min * W))
                        sc = W * np.exp(-f)
                        for j in range(n):
                            out[j] = pc[s, a, j] * sc
                        it = 0
                        st = CONE_OK
                    else:
                        it, st = project_row(
                            xin, n, mode[s, a], pc[s, a], M[s, a], Q[s, a], Aw[s, a],
                            Y[h, s, a], inner_tol, inner_max, z_min, out, w_hat,
                        )
                    if it > max_inner:
                        max_inner = it
                    if st > worst:
                        worst = st
                    for j in range(n):
                        if out[j] > 0.0 and xin[j] > 0.0:
                            corr[h, s, a, j] = np.log(xin[j] / out[j])
                        else:
                            corr[h, s, a, j] = 0.0
                        z[h, s, a, j] = out[j]
        tv = 0.0
        for h in range(H):
            acc = 0.0
            for e in range(act_ptr[h], act_ptr[h + 1]):
                s = act[e]
                for a in range(A):
                    for j in range(nsupp[s, a]):
                        acc += abs(z[h, s, a, j] - prev[h, s, a, j])
                        prev[h, s, a, j] = z[h, s, a, j]
            tv = max(tv, 0.5 * acc)
        if tv <= eps:
            break
    return sweeps, tv, max_inner, worst
