"""Compiled kernels for the joint trajopt solve.

Everything here is numba-jitted and operates on plain arrays plus the
PotentialPack namedtuple from costs.py; no other project imports, so the
module can be compiled and cached independently. The math mirrors the
reference implementations in costs.py term for term (smooth reverse penalty
variant) — tests assert the two agree.

Hessians of the hinge/collision terms are Gauss-Newton (curvature of the
active residual only), which keeps every state-cost block positive
semidefinite and the backward pass stable; cross terms l_ux are identically
zero because no cost couples x and u.
"""
from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def stage_cost_pack(x, u, pack):
    """Running cost at one step: goal/input quadratics, smooth reverse
    penalty, obstacle/boundary hinges, velocity/control bound hinges, and
    pairwise collision hinges."""
    n = pack.goals.shape[0]
    total = 0.0
    for i in range(n):
        o = 4 * i
        # goal + input quadratics
        for c in range(4):
            dx = x[o + c] - pack.goals[i, c]
            total += pack.Q[i, c] * dx * dx
        for c in range(2):
            uc = u[2 * i + c]
            total += pack.R[i, c] * uc * uc
        # smooth reverse penalty (one-sided Huber: exactly 0 for v >= 0)
        v = x[o + 3]
        if v < 0.0:
            if v > -pack.smooth_eps:
                total += pack.B[i] * v * v / (2.0 * pack.smooth_eps)
            else:
                total += pack.B[i] * (-v - 0.5 * pack.smooth_eps)
        # obstacle hinges
        keep_out = pack.margin + pack.body_radius[i]
        px = x[o]
        py = x[o + 1]
        for ci in range(pack.circles.shape[0]):
            sd = (
                math.hypot(px - pack.circles[ci, 0], py - pack.circles[ci, 1])
                - pack.circles[ci, 2]
            )
            h = keep_out - sd
            if h > 0.0:
                total += pack.obstacle_weight * h * h
        for ri in range(pack.rects.shape[0]):
            dxr = abs(px - pack.rects[ri, 0]) - pack.rects[ri, 2]
            dyr = abs(py - pack.rects[ri, 1]) - pack.rects[ri, 3]
            if dxr > 0.0 or dyr > 0.0:
                sd = math.hypot(max(dxr, 0.0), max(dyr, 0.0))
            else:
                sd = max(dxr, dyr)
            h = keep_out - sd
            if h > 0.0:
                total += pack.obstacle_weight * h * h
        # boundary wall hinges
        h = keep_out - (px - pack.bounds[0])
        if h > 0.0:
            total += pack.boundary_weight * h * h
        h = keep_out - (pack.bounds[1] - px)
        if h > 0.0:
            total += pack.boundary_weight * h * h
        h = keep_out - (py - pack.bounds[2])
        if h > 0.0:
            total += pack.boundary_weight * h * h
        h = keep_out - (pack.bounds[3] - py)
        if h > 0.0:
            total += pack.boundary_weight * h * h
        # velocity band hinge
        if v > pack.v_upper[i]:
            total += pack.bounds_weight * (v - pack.v_upper[i]) ** 2
        elif v < pack.v_lower[i]:
            total += pack.bounds_weight * (pack.v_lower[i] - v) ** 2
        # control box hinge (inert once controls are clamped)
        for c in range(2):
            uc = u[2 * i + c]
            if uc > pack.u_upper[2 * i + c]:
                total += pack.bounds_weight * (uc - pack.u_upper[2 * i + c]) ** 2
            elif uc < pack.u_lower[2 * i + c]:
                total += pack.bounds_weight * (pack.u_lower[2 * i + c] - uc) ** 2
    # pairwise collision hinges
    for i in range(n):
        for j in range(i + 1, n):
            dxp = x[4 * i] - x[4 * j]
            dyp = x[4 * i + 1] - x[4 * j + 1]
            d = math.hypot(dxp, dyp)
            ds = pack.d_safe[i, j]
            if d < ds:
                total += (d - ds) ** 2 * pack.D_pair[i, j]
    return total


@njit(**_JIT)
def terminal_cost_pack(x, pack):
    n = pack.goals.shape[0]
    total = 0.0
    for i in range(n):
        for c in range(4):
            dx = x[4 * i + c] - pack.goals[i, c]
            total += pack.Q[i, c] * dx * dx
    return total


@njit(**_JIT)
def quadraticize_stage(x, u, pack, lx, lu, lxx, luu):
    """Gradient and Gauss-Newton Hessian of stage_cost_pack; fills the
    preallocated outputs (cross term is identically zero)."""
    n = pack.goals.shape[0]
    lx[:] = 0.0
    lu[:] = 0.0
    lxx[:, :] = 0.0
    luu[:, :] = 0.0
    for i in range(n):
        o = 4 * i
        for c in range(4):
            dx = x[o + c] - pack.goals[i, c]
            lx[o + c] += 2.0 * pack.Q[i, c] * dx
            lxx[o + c, o + c] += 2.0 * pack.Q[i, c]
        for c in range(2):
            uc = u[2 * i + c]
            lu[2 * i + c] += 2.0 * pack.R[i, c] * uc
            luu[2 * i + c, 2 * i + c] += 2.0 * pack.R[i, c]
        v = x[o + 3]
        if v < 0.0:
            if v > -pack.smooth_eps:
                lx[o + 3] += pack.B[i] * v / pack.smooth_eps
                lxx[o + 3, o + 3] += pack.B[i] / pack.smooth_eps
            else:
                lx[o + 3] += -pack.B[i]
        keep_out = pack.margin + pack.body_radius[i]
        px = x[o]
        py = x[o + 1]
        for ci in range(pack.circles.shape[0]):
            rx = px - pack.circles[ci, 0]
            ry = py - pack.circles[ci, 1]
            dc = math.hypot(rx, ry)
            sd = dc - pack.circles[ci, 2]
            h = keep_out - sd
            if h > 0.0:
                if dc > 1e-9:
                    nx = rx / dc
                    ny = ry / dc
                else:
                    nx = 1.0
                    ny = 0.0
                g = -2.0 * pack.obstacle_weight * h
                lx[o] += g * nx
                lx[o + 1] += g * ny
                w2 = 2.0 * pack.obstacle_weight
                lxx[o, o] += w2 * nx * nx
                lxx[o, o + 1] += w2 * nx * ny
                lxx[o + 1, o] += w2 * nx * ny
                lxx[o + 1, o + 1] += w2 * ny * ny
        for ri in range(pack.rects.shape[0]):
            ax = px - pack.rects[ri, 0]
            ay = py - pack.rects[ri, 1]
            dxr = abs(ax) - pack.rects[ri, 2]
            dyr = abs(ay) - pack.rects[ri, 3]
            sx = 1.0 if ax >= 0.0 else -1.0
            sy = 1.0 if ay >= 0.0 else -1.0
            if dxr > 0.0 or dyr > 0.0:
                ex = max(dxr, 0.0)
                ey = max(dyr, 0.0)
                sd = math.hypot(ex, ey)
                nx = sx * ex / sd
                ny = sy * ey / sd
            elif dxr >= dyr:
                sd = dxr
                nx = sx
                ny = 0.0
            else:
                sd = dyr
                nx = 0.0
                ny = sy
            h = keep_out - sd
            if h > 0.0:
                g = -2.0 * pack.obstacle_weight * h
                lx[o] += g * nx
                lx[o + 1] += g * ny
                w2 = 2.0 * pack.obstacle_weight
                lxx[o, o] += w2 * nx * nx
                lxx[o, o + 1] += w2 * nx * ny
                lxx[o + 1, o] += w2 * nx * ny
                lxx[o + 1, o + 1] += w2 * ny * ny
        h = keep_out - (px - pack.bounds[0])
        if h > 0.0:
            lx[o] += -2.0 * pack.boundary_weight * h
            lxx[o, o] += 2.0 * pack.boundary_weight
        h = keep_out - (pack.bounds[1] - px)
        if h > 0.0:
            lx[o] += 2.0 * pack.boundary_weight * h
            lxx[o, o] += 2.0 * pack.boundary_weight
        h = keep_out - (py - pack.bounds[2])
        if h > 0.0:
            lx[o + 1] += -2.0 * pack.boundary_weight * h
            lxx[o + 1, o + 1] += 2.0 * pack.boundary_weight
        h = keep_out - (pack.bounds[3] - py)
        if h > 0.0:
            lx[o + 1] += 2.0 * pack.boundary_weight * h
            lxx[o + 1, o + 1] += 2.0 * pack.boundary_weight
        if v > pack.v_upper[i]:
            lx[o + 3] += 2.0 * pack.bounds_weight * (v - pack.v_upper[i])
            lxx[o + 3, o + 3] += 2.0 * pack.bounds_weight
        elif v < pack.v_lower[i]:
            lx[o + 3] += -2.0 * pack.bounds_weight * (pack.v_lower[i] - v)
            lxx[o + 3, o + 3] += 2.0 * pack.bounds_weight
        for c in range(2):
            uc = u[2 * i + c]
            if uc > pack.u_upper[2 * i + c]:
                lu[2 * i + c] += 2.0 * pack.bounds_weight * (uc - pack.u_upper[2 * i + c])
                luu[2 * i + c, 2 * i + c] += 2.0 * pack.bounds_weight
            elif uc < pack.u_lower[2 * i + c]:
                lu[2 * i + c] += -2.0 * pack.bounds_weight * (pack.u_lower[2 * i + c] - uc)
                luu[2 * i + c, 2 * i + c] += 2.0 * pack.bounds_weight
    for i in range(n):
        for j in range(i + 1, n):
            dxp = x[4 * i] - x[4 * j]
            dyp = x[4 * i + 1] - x[4 * j + 1]
            d = math.hypot(dxp, dyp)
            ds = pack.d_safe[i, j]
            if d < ds:
                if d > 1e-9:
                    nx = dxp / d
                    ny = dyp / d
                else:
                    nx = 1.0
                    ny = 0.0
                D2 = 2.0 * pack.D_pair[i, j]
                g = D2 * (d - ds)
                oi = 4 * i
                oj = 4 * j
                lx[oi] += g * nx
                lx[oi + 1] += g * ny
                lx[oj] -= g * nx
                lx[oj + 1] -= g * ny
                hxx = D2 * nx * nx
                hxy = D2 * nx * ny
                hyy = D2 * ny * ny
                lxx[oi, oi] += hxx
                lxx[oi, oi + 1] += hxy
                lxx[oi + 1, oi] += hxy
                lxx[oi + 1, oi + 1] += hyy
                lxx[oj, oj] += hxx
                lxx[oj, oj + 1] += hxy
                lxx[oj + 1, oj] += hxy
                lxx[oj + 1, oj + 1] += hyy
                lxx[oi, oj] -= hxx
                lxx[oi, oj + 1] -= hxy
                lxx[oi + 1, oj] -= hxy
                lxx[oi + 1, oj + 1] -= hyy
                lxx[oj, oi] -= hxx
                lxx[oj, oi + 1] -= hxy
                lxx[oj + 1, oi] -= hxy
                lxx[oj + 1, oi + 1] -= hyy


@njit(**_JIT)
def quadraticize_terminal(x, pack, lx, lxx):
    lx[:] = 0.0
    lxx[:, :] = 0.0
    n = pack.goals.shape[0]
    for i in range(n):
        o = 4 * i
        for c in range(4):
            dx = x[o + c] - pack.goals[i, c]
            lx[o + c] += 2.0 * pack.Q[i, c] * dx
            lxx[o + c, o + c] += 2.0 * pack.Q[i, c]


@njit(**_JIT)
def rollout_pack(x0, U, ts, X):
    """Forward simulation of stacked unicycles into preallocated X (T+1, n)."""
    n = x0.shape[0]
    T = U.shape[0]
    for c in range(n):
        X[0, c] = x0[c]
    for k in range(T):
        for i in range(n // 4):
            o = 4 * i
            th = X[k, o + 2]
            v = X[k, o + 3]
            X[k + 1, o] = X[k, o] + ts * v * math.cos(th)
            X[k + 1, o + 1] = X[k, o + 1] + ts * v * math.sin(th)
            X[k + 1, o + 2] = th + ts * U[k, 2 * i + 1]
            X[k + 1, o + 3] = v + ts * U[k, 2 * i]
    return X


@njit(**_JIT)
def traj_cost_pack(X, U, pack):
    T = U.shape[0]
    total = 0.0
    for k in range(T):
        total += stage_cost_pack(X[k], U[k], pack)
    return total + terminal_cost_pack(X[T], pack)


@njit(**_JIT)
def _cholesky(A, L):
    """In-place lower Cholesky; returns False on a non-PD pivot."""
    m = A.shape[0]
    for i in range(m):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 1e-12:
                    return False
                L[i, i] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
        for j in range(i + 1, m):
            L[i, j] = 0.0
    return True


@njit(**_JIT)
def _chol_solve_vec(L, b, out):
    m = L.shape[0]
    for i in range(m):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * out[k]
        out[i] = s / L[i, i]
    for i in range(m - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, m):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]


@njit(**_JIT)
def backward_pass(X, U, ts, mu, pack, kff, K, ws):
    """Riccati sweep with value-Hessian regularization mu.

    ws is the preallocated workspace tuple; returns (ok, dV1, dV2) where the
    dV terms predict the line-search cost change a*dV1 + a^2*dV2.
    """
    (lx, lu, lxx, luu, Vx, Vxx, A, Bm, Qx, Qu, Qxx, Qux, Quu, L, QK, tmpn, tmpm, qk) = ws
    T = U.shape[0]
    n = X.shape[1]
    m = U.shape[1]
    quadraticize_terminal(X[T], pack, Vx, Vxx)
    dV1 = 0.0
    dV2 = 0.0
    for k in range(T - 1, -1, -1):
        quadraticize_stage(X[k], U[k], pack, lx, lu, lxx, luu)
        # dynamics Jacobians at X[k] (block unicycle structure)
        A[:, :] = 0.0
        Bm[:, :] = 0.0
        for i in range(n // 4):
            o = 4 * i
            th = X[k, o + 2]
            v = X[k, o + 3]
            A[o, o] = 1.0
            A[o + 1, o + 1] = 1.0
            A[o + 2, o + 2] = 1.0
            A[o + 3, o + 3] = 1.0
            A[o, o + 2] = -ts * v * math.sin(th)
            A[o, o + 3] = ts * math.cos(th)
            A[o + 1, o + 2] = ts * v * math.cos(th)
            A[o + 1, o + 3] = ts * math.sin(th)
            Bm[o + 2, 2 * i + 1] = ts
            Bm[o + 3, 2 * i] = ts
        # Qx = lx + A^T Vx ; Qu = lu + B^T Vx
        for a in range(n):
            s = lx[a]
            for b in range(n):
                s += A[b, a] * Vx[b]
            Qx[a] = s
        for a in range(m):
            s = lu[a]
            for b in range(n):
                s += Bm[b, a] * Vx[b]
            Qu[a] = s
        # Qxx = lxx + A^T Vxx A
        for a in range(n):
            for c in range(n):
                s = 0.0
                for e in range(n):
                    s += A[e, a] * Vxx[e, c]
                tmpn[c] = s
            for b in range(n):
                s = 0.0
                for c in range(n):
                    s += tmpn[c] * A[c, b]
                Qxx[a, b] = lxx[a, b] + s
        # Qux = B^T (Vxx + mu I) A ; Quu = luu + B^T (Vxx + mu I) B
        for a in range(m):
            for c in range(n):
                s = 0.0
                for e in range(n):
                    vv = Vxx[e, c]
                    if e == c:
                        vv += mu
                    s += Bm[e, a] * vv
                tmpn[c] = s
            for b in range(n):
                s = 0.0
                for c in range(n):
                    s += tmpn[c] * A[c, b]
                Qux[a, b] = s
            for b in range(m):
                s = luu[a, b]
                for c in range(n):
                    s += tmpn[c] * Bm[c, b]
                Quu[a, b] = s
        if not _cholesky(Quu, L):
            return False, 0.0, 0.0
        # kff = -Quu^-1 Qu ; K = -Quu^-1 Qux
        _chol_solve_vec(L, Qu, tmpm)
        for a in range(m):
            kff[k, a] = -tmpm[a]
        for b in range(n):
            for a in range(m):
                tmpm[a] = Qux[a, b]
            _chol_solve_vec(L, tmpm, tmpm)
            for a in range(m):
                K[k, a, b] = -tmpm[a]
        # expected improvement bookkeeping; qk = Quu kff reused below
        for a in range(m):
            s = 0.0
            for b in range(m):
                s += Quu[a, b] * kff[k, b]
            qk[a] = s
        for a in range(m):
            dV1 += kff[k, a] * Qu[a]
            dV2 += 0.5 * kff[k, a] * qk[a]
        # Vx = Qx + K^T (Quu kff + Qu) + Qux^T kff
        for a in range(n):
            s = Qx[a]
            for b in range(m):
                s += K[k, b, a] * (qk[b] + Qu[b]) + Qux[b, a] * kff[k, b]
            Vx[a] = s
        # QK = Quu K, then Vxx = Qxx + K^T QK + K^T Qux + Qux^T K
        for a in range(m):
            for b in range(n):
                s = 0.0
                for c in range(m):
                    s += Quu[a, c] * K[k, c, b]
                QK[a, b] = s
        for a in range(n):
            for b in range(n):
                s = Qxx[a, b]
                for c in range(m):
                    s += K[k, c, a] * (QK[c, b] + Qux[c, b]) + Qux[c, a] * K[k, c, b]
                Vxx[a, b] = s
        for a in range(n):
            for b in range(a + 1, n):
                s = 0.5 * (Vxx[a, b] + Vxx[b, a])
                Vxx[a, b] = s
                Vxx[b, a] = s
    return True, dV1, dV2


@njit(**_JIT)
def forward_pass(X, U, kff, K, alpha, ts, pack, Xn, Un):
    """Line-search rollout with clamped controls; returns the new cost."""
    T = U.shape[0]
    n = X.shape[1]
    m = U.shape[1]
    for c in range(n):
        Xn[0, c] = X[0, c]
    total = 0.0
    for k in range(T):
        for a in range(m):
            du = alpha * kff[k, a]
            for b in range(n):
                du += K[k, a, b] * (Xn[k, b] - X[k, b])
            un = U[k, a] + du
            if un > pack.u_upper[a]:
                un = pack.u_upper[a]
            elif un < pack.u_lower[a]:
                un = pack.u_lower[a]
            Un[k, a] = un
        total += stage_cost_pack(Xn[k], Un[k], pack)
        if not math.isfinite(total):
            return math.inf
        for i in range(n // 4):
            o = 4 * i
            th = Xn[k, o + 2]
            v = Xn[k, o + 3]
            Xn[k + 1, o] = Xn[k, o] + ts * v * math.cos(th)
            Xn[k + 1, o + 1] = Xn[k, o + 1] + ts * v * math.sin(th)
            Xn[k + 1, o + 2] = th + ts * Un[k, 2 * i + 1]
            Xn[k + 1, o + 3] = v + ts * Un[k, 2 * i]
    total += terminal_cost_pack(Xn[T], pack)
    if not math.isfinite(total):
        return math.inf
    return total


@njit(**_JIT)
def solve_pack(x0, U0, ts, pack, max_iter, tol, mu0, mu_min, mu_max, n_alpha):
    """Full iLQR loop. Returns (X, U, cost, iterations, converged, healthy).

    healthy=False means the initial rollout already produced a non-finite
    cost; the caller treats that as a hard solver failure.
    """
    T = U0.shape[0]
    n = x0.shape[0]
    m = U0.shape[1]
    U = np.empty((T, m))
    # clamp the seed controls before the first rollout
    for k in range(T):
        for a in range(m):
            un = U0[k, a]
            if un > pack.u_upper[a]:
                un = pack.u_upper[a]
            elif un < pack.u_lower[a]:
                un = pack.u_lower[a]
            U[k, a] = un
    X = np.empty((T + 1, n))
    rollout_pack(x0, U, ts, X)
    cost = traj_cost_pack(X, U, pack)
    if not math.isfinite(cost):
        return X, U, cost, 0, False, False
    kff = np.empty((T, m))
    K = np.empty((T, m, n))
    Xn = np.empty((T + 1, n))
    Un = np.empty((T, m))
    ws = (
        np.empty(n),  # lx
        np.empty(m),  # lu
        np.empty((n, n)),  # lxx
        np.empty((m, m)),  # luu
        np.empty(n),  # Vx
        np.empty((n, n)),  # Vxx
        np.empty((n, n)),  # A
        np.empty((n, m)),  # B
        np.empty(n),  # Qx
        np.empty(m),  # Qu
        np.empty((n, n)),  # Qxx
        np.empty((m, n)),  # Qux
        np.empty((m, m)),  # Quu
        np.empty((m, m)),  # chol factor
        np.empty((m, n)),  # Quu K
        np.empty(n),
        np.empty(m),
        np.empty(m),  # Quu kff
    )
    mu = mu0
    converged = False
    iters = 0
    while iters < max_iter:
        iters += 1
        ok, dV1, dV2 = backward_pass(X, U, ts, mu, pack, kff, K, ws)
        if not ok:
            mu *= 10.0
            if mu > mu_max:
                break
            continue
        # tiny feedforward => stationary point
        gmax = 0.0
        for k in range(T):
            for a in range(m):
                g = abs(kff[k, a])
                if g > gmax:
                    gmax = g
        if gmax < 1e-10:
            converged = True
            break
        accepted = False
        alpha = 1.0
        for _ in range(n_alpha):
            new_cost = forward_pass(X, U, kff, K, alpha, ts, pack, Xn, Un)
            if new_cost < cost:
                improvement = cost - new_cost
                for kk in range(T + 1):
                    for c in range(n):
                        X[kk, c] = Xn[kk, c]
                for kk in range(T):
                    for a in range(m):
                        U[kk, a] = Un[kk, a]
                cost = new_cost
                accepted = True
                mu = max(mu * 0.5, mu_min)
                if improvement < tol:
                    converged = True
                break
            alpha *= 0.5
        if not accepted:
            mu *= 10.0
            if mu > mu_max:
                break
        elif converged:
            break
    return X, U, cost, iters, converged, True


@njit(**_JIT)
def feasible_pack(X, pack):
    """No body-disc overlap between agents, with obstacles, or with the
    boundary at any rollout step."""
    n_agents = pack.goals.shape[0]
    for k in range(X.shape[0]):
        for i in range(n_agents):
            oi = 4 * i
            px = X[k, oi]
            py = X[k, oi + 1]
            body = pack.body_radius[i]
            for j in range(i + 1, n_agents):
                oj = 4 * j
                d = math.hypot(px - X[k, oj], py - X[k, oj + 1])
                if d < body + pack.body_radius[j]:
                    return False
            for ci in range(pack.circles.shape[0]):
                sd = (
                    math.hypot(px - pack.circles[ci, 0], py - pack.circles[ci, 1])
                    - pack.circles[ci, 2]
                )
                if sd < body:
                    return False
            for ri in range(pack.rects.shape[0]):
                dxr = abs(px - pack.rects[ri, 0]) - pack.rects[ri, 2]
                dyr = abs(py - pack.rects[ri, 1]) - pack.rects[ri, 3]
                if dxr > 0.0 or dyr > 0.0:
                    sd = math.hypot(max(dxr, 0.0), max(dyr, 0.0))
                else:
                    sd = max(dxr, dyr)
                if sd < body:
                    return False
            if (
                px - pack.bounds[0] < body
                or pack.bounds[1] - px < body
                or py - pack.bounds[2] < body
                or pack.bounds[3] - py < body
            ):
                return False
    return True
