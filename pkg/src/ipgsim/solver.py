"""Iterative LQR over the joint navigation problem.

Two execution paths solve the same algorithm: a compiled kernel path for
problems built from a GameSpec (carrying a flattened parameter pack) and a
generic numpy path for arbitrary cost callables. Both use Levenberg-style
regularization of the value Hessian (x10 on rejection, /2 on acceptance,
floored), backtracking line search over {1, 1/2, ..., 1/64} accepting any
cost decrease, and clamp controls to their boxes in every forward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import fast_core
from .dynamics import rollout
from .geometry import signed_distance

ALPHA_COUNT = 7  # 1, 1/2, ..., 1/64


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    tolerance: float = 1e-4  # absolute cost decrease
    reg_init: float = 1.0
    reg_growth: float = 10.0
    reg_shrink: float = 0.5
    reg_floor: float = 1e-6
    reg_ceiling: float = 1e8
    n_alphas: int = ALPHA_COUNT
    feasibility_margin: float = 0.0  # extra clearance required by the feasible flag

    def __post_init__(self):
        if self.max_iterations < 1 or self.tolerance <= 0:
            raise ValueError("max_iterations >= 1 and tolerance > 0 required")
        if min(self.reg_init, self.reg_floor, self.reg_ceiling) <= 0:
            raise ValueError("regularization parameters must be positive")
        if not (self.reg_growth > 1 and 0 < self.reg_shrink < 1):
            raise ValueError("need reg_growth > 1 and reg_shrink in (0, 1)")


DEFAULT_CONFIG = SolverConfig()


@dataclass(frozen=True)
class OCProblem:
    """Joint optimal-control problem over stacked unicycle agents."""

    x0: np.ndarray
    horizon: int
    ts: float
    running_cost: Callable[[np.ndarray, np.ndarray], float]
    terminal_cost: Callable[[np.ndarray], float]
    u_lower: np.ndarray
    u_upper: np.ndarray
    n_agents: int
    pack: object = None  # costs.PotentialPack enabling the compiled path
    game: object = None  # costs.GameSpec enabling game-aware helpers
    running_quad: Optional[Callable] = None  # (x,u) -> (lx, lu, lxx, luu, lux)
    terminal_quad: Optional[Callable] = None  # (x)   -> (lx, lxx)

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        object.__setattr__(self, "u_lower", np.asarray(self.u_lower, dtype=float).reshape(-1))
        object.__setattr__(self, "u_upper", np.asarray(self.u_upper, dtype=float).reshape(-1))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.x0.shape[0] != 4 * self.n_agents:
            raise ValueError("x0 must stack 4 states per agent")
        if self.u_lower.shape[0] != 2 * self.n_agents:
            raise ValueError("limits must stack 2 controls per agent")

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    @property
    def m(self) -> int:
        return 2 * self.n_agents

    def clamp(self, U: np.ndarray) -> np.ndarray:
        return np.clip(U, self.u_lower[None, :], self.u_upper[None, :])

    def trajectory_cost(self, X: np.ndarray, U: np.ndarray) -> float:
        total = 0.0
        for k in range(self.horizon):
            total += self.running_cost(X[k], U[k])
        return total + self.terminal_cost(X[self.horizon])


@dataclass(frozen=True)
class Solution:
    U: np.ndarray
    X: np.ndarray
    cost: float
    converged: bool
    feasible: bool
    iterations: int
    diagnostic: str = ""


def solution_feasible(problem: OCProblem, X: np.ndarray, margin: float = 0.0) -> bool:
    """Body discs never overlap each other, obstacles, or the boundary."""
    game = problem.game
    if game is None:
        return True
    n = game.n_players
    players = game.players
    for k in range(X.shape[0]):
        for i in range(n):
            px, py = X[k, 4 * i], X[k, 4 * i + 1]
            body = players[i].body_radius + margin
            for j in range(i + 1, n):
                d = math.hypot(px - X[k, 4 * j], py - X[k, 4 * j + 1])
                if d < body + players[j].body_radius:
                    return False
            if game.world is not None:
                for obs in game.world.obstacles:
                    if signed_distance((px, py), obs) < body:
                        return False
                b = game.world.boundary
                if (
                    px - b.x_min < body
                    or b.x_max - px < body
                    or py - b.y_min < body
                    or b.y_max - py < body
                ):
                    return False
    return True


def _feasible(problem: OCProblem, X: np.ndarray, config: SolverConfig) -> bool:
    if problem.game is None:
        return True
    if problem.pack is not None and config.feasibility_margin == 0.0 and fast_core.HAVE_NUMBA:
        return bool(fast_core.feasible_pack(X, problem.pack))
    return solution_feasible(problem, X, config.feasibility_margin)


def solve(problem: OCProblem, U_init: Optional[np.ndarray] = None, config: Optional[SolverConfig] = None) -> Solution:
    """Minimize the problem cost starting from U_init (zeros when omitted)."""
    config = config or DEFAULT_CONFIG
    T, m = problem.horizon, problem.m
    if U_init is None:
        U0 = np.zeros((T, m))
    else:
        U0 = np.asarray(U_init, dtype=float).reshape(T, m).copy()
    if problem.pack is not None and fast_core.HAVE_NUMBA:
        X, U, cost, iters, converged, healthy = fast_core.solve_pack(
            problem.x0,
            U0,
            problem.ts,
            problem.pack,
            config.max_iterations,
            config.tolerance,
            config.reg_init,
            config.reg_floor,
            config.reg_ceiling,
            config.n_alphas,
        )
        X = np.ascontiguousarray(X)
        U = np.ascontiguousarray(U)
        diag = "" if healthy else "non-finite cost on initial rollout"
    else:
        X, U, cost, iters, converged, healthy = _solve_generic(problem, U0, config)
        diag = "" if healthy else "non-finite cost encountered"
    feasible = healthy and _feasible(problem, X, config)
    return Solution(
        U=U, X=X, cost=float(cost), converged=bool(converged and healthy),
        feasible=bool(feasible), iterations=int(iters), diagnostic=diag,
    )


# ---------------------------------------------------------------------------
# generic numpy path


def _fd_quad(f, x, u, h=1e-5):
    """Central finite-difference gradient/Hessian of f(x, u)."""
    n, m = x.shape[0], u.shape[0]
    z = np.concatenate([x, u])

    def fz(zz):
        return f(zz[:n], zz[n:])

    g = np.zeros(n + m)
    for a in range(n + m):
        zp, zm = z.copy(), z.copy()
        zp[a] += h
        zm[a] -= h
        g[a] = (fz(zp) - fz(zm)) / (2 * h)
    H = np.zeros((n + m, n + m))
    f0 = fz(z)
    for a in range(n + m):
        for b in range(a, n + m):
            zpp, zpm, zmp, zmm = z.copy(), z.copy(), z.copy(), z.copy()
            zpp[a] += h
            zpp[b] += h
            zpm[a] += h
            zpm[b] -= h
            zmp[a] -= h
            zmp[b] += h
            zmm[a] -= h
            zmm[b] -= h
            if a == b:
                H[a, a] = (fz(zpp) - 2 * f0 + fz(zmm)) / (4 * h * h)
            else:
                H[a, b] = H[b, a] = (fz(zpp) - fz(zpm) - fz(zmp) + fz(zmm)) / (4 * h * h)
    return g[:n], g[n:], H[:n, :n], H[n:, n:], H[n:, :n]


def _fd_quad_terminal(f, x, h=1e-5):
    n = x.shape[0]
    g = np.zeros(n)
    H = np.zeros((n, n))
    f0 = f(x)
    for a in range(n):
        xp, xm = x.copy(), x.copy()
        xp[a] += h
        xm[a] -= h
        g[a] = (f(xp) - f(xm)) / (2 * h)
    for a in range(n):
        for b in range(a, n):
            xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
            xpp[a] += h
            xpp[b] += h
            xpm[a] += h
            xpm[b] -= h
            xmp[a] -= h
            xmp[b] += h
            xmm[a] -= h
            xmm[b] -= h
            if a == b:
                H[a, a] = (f(xpp) - 2 * f0 + f(xmm)) / (4 * h * h)
            else:
                H[a, b] = H[b, a] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4 * h * h)
    return g, H


def _joint_jacobians(x: np.ndarray, ts: float):
    n = x.shape[0]
    A = np.eye(n)
    B = np.zeros((n, n // 2))
    for i in range(n // 4):
        o, c = 4 * i, 2 * i
        th, v = x[o + 2], x[o + 3]
        A[o, o + 2] = -ts * v * math.sin(th)
        A[o, o + 3] = ts * math.cos(th)
        A[o + 1, o + 2] = ts * v * math.cos(th)
        A[o + 1, o + 3] = ts * math.sin(th)
        B[o + 2, c + 1] = ts
        B[o + 3, c] = ts
    return A, B


def _solve_generic(problem: OCProblem, U0: np.ndarray, config: SolverConfig):
    T = problem.horizon
    n, m = problem.n, problem.m
    U = problem.clamp(U0)
    X = rollout(problem.x0, U, problem.ts)
    cost = problem.trajectory_cost(X, U)
    if not math.isfinite(cost):
        return X, U, cost, 0, False, False

    rquad = problem.running_quad or (
        lambda x, u: _fd_quad(problem.running_cost, x, u)
    )
    tquad = problem.terminal_quad or (
        lambda x: _fd_quad_terminal(problem.terminal_cost, x)
    )

    mu = config.reg_init
    converged = False
    iters = 0
    kff = np.zeros((T, m))
    K = np.zeros((T, m, n))
    while iters < config.max_iterations:
        iters += 1
        ok = True
        Vx, Vxx = tquad(X[T])
        for k in range(T - 1, -1, -1):
            lx, lu, lxx, luu, lux = rquad(X[k], U[k])
            A, B = _joint_jacobians(X[k], problem.ts)
            Qx = lx + A.T @ Vx
            Qu = lu + B.T @ Vx
            Qxx = lxx + A.T @ Vxx @ A
            Vreg = Vxx + mu * np.eye(n)
            Qux = lux + B.T @ Vreg @ A
            Quu = luu + B.T @ Vreg @ B
            try:
                L = np.linalg.cholesky(0.5 * (Quu + Quu.T))
            except np.linalg.LinAlgError:
                ok = False
                break
            rhs = np.column_stack([Qu, Qux])
            sol = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
            kff[k] = -sol[:, 0]
            K[k] = -sol[:, 1:]
            Vx = Qx + K[k].T @ Quu @ kff[k] + K[k].T @ Qu + Qux.T @ kff[k]
            Vxx = Qxx + K[k].T @ Quu @ K[k] + K[k].T @ Qux + Qux.T @ K[k]
            Vxx = 0.5 * (Vxx + Vxx.T)
        if not ok:
            mu *= config.reg_growth
            if mu > config.reg_ceiling:
                break
            continue
        if np.max(np.abs(kff)) < 1e-10:
            converged = True
            break
        accepted = False
        alpha = 1.0
        for _ in range(config.n_alphas):
            Xn = np.empty_like(X)
            Un = np.empty_like(U)
            Xn[0] = X[0]
            new_cost = 0.0
            bad = False
            for k in range(T):
                du = alpha * kff[k] + K[k] @ (Xn[k] - X[k])
                Un[k] = np.clip(U[k] + du, problem.u_lower, problem.u_upper)
                new_cost += problem.running_cost(Xn[k], Un[k])
                if not math.isfinite(new_cost):
                    bad = True
                    break
                Xn[k + 1] = _step_joint(Xn[k], Un[k], problem.ts)
            if not bad:
                new_cost += problem.terminal_cost(Xn[T])
            if not bad and new_cost < cost:
                improvement = cost - new_cost
                X, U, cost = Xn, Un, new_cost
                accepted = True
                mu = max(mu * config.reg_shrink, config.reg_floor)
                if improvement < config.tolerance:
                    converged = True
                break
            alpha *= 0.5
        if not accepted:
            mu *= config.reg_growth
            if mu > config.reg_ceiling:
                break
        elif converged:
            break
    return X, U, cost, iters, converged, True


def _step_joint(x: np.ndarray, u: np.ndarray, ts: float) -> np.ndarray:
    out = x.copy()
    px, py, th, v = x[0::4], x[1::4], x[2::4], x[3::4]
    out[0::4] = px + ts * v * np.cos(th)
    out[1::4] = py + ts * v * np.sin(th)
    out[2::4] = th + ts * u[1::2]
    out[3::4] = v + ts * u[0::2]
    return out


# ---------------------------------------------------------------------------
# initialization strategies

NOISE_BIAS = 0.5
NOISE_STD = 0.2


def _biased_candidates(T: int, n_agents: int, rng: np.random.Generator) -> list:
    """Four control-sequence seeds nudged toward accelerate / decelerate /
    turn left / turn right, with elementwise Gaussian jitter."""
    m = 2 * n_agents
    out = []
    for mean_a, mean_w in ((NOISE_BIAS, 0.0), (-NOISE_BIAS, 0.0), (0.0, NOISE_BIAS), (0.0, -NOISE_BIAS)):
        U = rng.normal(0.0, NOISE_STD, size=(T, m))
        U[:, 0::2] += mean_a
        U[:, 1::2] += mean_w
        out.append(U)
    return out


def _pivot_candidates(problem: OCProblem, warm: np.ndarray) -> list:
    """Two turn-hard-then-roll seeds for the first player, left and right.

    A unicycle stopped in front of a flat obstacle is a stationary point of
    the local model (at v = 0, heading has no first-order position effect),
    and jittered seeds almost never assemble a coherent quarter turn. A
    deterministic pivot seed puts the solve into the sideways basin; the
    other players keep the warm-start blocks.
    """
    game = problem.game
    if game is not None:
        lim = game.players[0].limits
        w_max, a_max = lim.w_max, lim.a_max
    else:
        w_max = a_max = 1.0
    T = problem.horizon
    turn = max(1, T // 2)
    out = []
    for sign in (1.0, -1.0):
        U = warm.copy()
        U[:turn, 0] = 0.0
        U[:turn, 1] = sign * w_max
        U[turn:, 0] = 0.5 * a_max
        U[turn:, 1] = 0.0
        out.append(U)
    return out


def _aim_candidate(problem: OCProblem, warm: np.ndarray) -> list:
    """Steer-at-goal-and-brake seed for the first player.

    Near the goal the quadratic pull is too weak to buy a late heading
    correction, so gradient descent from a gliding warm start settles on a
    near-miss pass-by. A proportional aim-and-stop rollout seeds the basin
    where the player arrives centered and parks; the other players keep
    their warm-start blocks.
    """
    game = problem.game
    if game is None:
        return []
    p0 = game.players[0]
    lim = p0.limits
    gx, gy = float(p0.goal[0]), float(p0.goal[1])
    T = problem.horizon
    ts = problem.ts
    U = warm.copy()
    x = problem.x0[:4].astype(float).copy()
    for k in range(T):
        dx, dy = gx - x[0], gy - x[1]
        dist = math.hypot(dx, dy)
        err = math.atan2(dy, dx) - x[2]
        err = (err + math.pi) % (2.0 * math.pi) - math.pi
        w = min(lim.w_max, max(lim.w_min, 2.0 * err))
        # ramp the target speed down with range; stand still to turn around
        v_des = min(lim.v_max, dist) if abs(err) < 1.5 else 0.0
        a = min(lim.a_max, max(lim.a_min, 0.5 * (v_des - x[3]) / ts))
        U[k, 0], U[k, 1] = a, w
        x = np.array([
            x[0] + ts * x[3] * math.cos(x[2]),
            x[1] + ts * x[3] * math.sin(x[2]),
            x[2] + ts * w,
            x[3] + ts * a,
        ])
    return [U]


def _single_agent_candidate(problem: OCProblem, config: SolverConfig, warm=None) -> Optional[np.ndarray]:
    """Per-player independent solves stacked into one joint seed."""
    from .costs import GameSpec, assemble_potential_ocp

    game = problem.game
    if game is None:
        return None
    T = problem.horizon
    U = np.zeros((T, problem.m))
    for i, player in enumerate(game.players):
        sub = GameSpec(
            players=(player,),
            obstacle_weight=game.obstacle_weight,
            boundary_weight=game.boundary_weight,
            bounds_weight=game.bounds_weight,
            horizon=T,
            ts=game.ts,
            world=game.world,
            margin=game.margin,
            smooth_eps=game.smooth_eps,
        )
        sp = assemble_potential_ocp(sub, problem.x0[4 * i : 4 * i + 4])
        w = warm[i] if warm is not None and warm[i] is not None else None
        sol = solve(sp, w, config)
        U[:, 2 * i : 2 * i + 2] = sol.U
    return U


def multi_start_solve(
    problem: OCProblem,
    prev_solution: Optional[Solution],
    rng: np.random.Generator,
    config: Optional[SolverConfig] = None,
    single_agent_warm=None,
) -> Solution:
    """Solve from several initializations and keep the best.

    Candidates, in tie-break order: previous solution if feasible else zeros,
    four biased-noise seeds, stacked single-agent solutions, two pivot seeds
    and an aim-and-stop seed for the first player. Feasible solutions beat
    infeasible ones; cost breaks ties within each class.
    """
    config = config or DEFAULT_CONFIG
    T = problem.horizon
    if prev_solution is not None and prev_solution.feasible:
        warm = np.vstack([prev_solution.U[1:], prev_solution.U[-1:]])
    else:
        warm = np.zeros((T, problem.m))
    candidates = [warm]
    candidates.extend(_biased_candidates(T, problem.n_agents, rng))
    single = _single_agent_candidate(problem, config, single_agent_warm)
    if single is not None:
        candidates.append(single)
    candidates.extend(_pivot_candidates(problem, warm))
    candidates.extend(_aim_candidate(problem, warm))

    best = None
    best_key = None
    for idx, U0 in enumerate(candidates):
        sol = solve(problem, U0, config)
        key = (0 if sol.feasible else 1, sol.cost, idx)
        if best_key is None or key < best_key:
            best, best_key = sol, key
    assert best is not None
    tag = f"candidate={best_key[2]}"
    if best.diagnostic:
        tag += ";" + best.diagnostic
    return replace(best, diagnostic=tag)


def single_agent_reference(
    world,
    start,
    goal,
    player=None,
    horizon: int = 50,
    ts: float = 0.1,
    config: Optional[SolverConfig] = None,
    warm: Optional[np.ndarray] = None,
):
    """One-player plan ignoring every other agent; used as the ORCA/Blind
    reference and as a multi-start seed. Deterministic (no rng): a fixed
    bias-candidate set stands in for the noise draws."""
    from .costs import GameSpec, PlayerSpec, assemble_potential_ocp

    config = config or DEFAULT_CONFIG
    if player is None:
        player = PlayerSpec(goal=goal)
    else:
        player = replace(player, goal=_as_goal(goal))
    game = GameSpec(players=(player,), horizon=horizon, ts=ts, world=world)
    problem = assemble_potential_ocp(game, np.asarray(start, dtype=float))
    T = game.horizon
    seeds = [np.zeros((T, 2))] if warm is None else [np.asarray(warm, dtype=float).reshape(T, 2)]
    for mean_a, mean_w in ((NOISE_BIAS, 0.0), (-NOISE_BIAS, 0.0), (0.0, NOISE_BIAS), (0.0, -NOISE_BIAS)):
        U = np.zeros((T, 2))
        U[:, 0] += mean_a
        U[:, 1] += mean_w
        seeds.append(U)
    best = None
    best_key = None
    for idx, U0 in enumerate(seeds):
        sol = solve(problem, U0, config)
        key = (0 if sol.feasible else 1, sol.cost, idx)
        if best_key is None or key < best_key:
            best, best_key = sol, key
    return best


def _as_goal(goal):
    from .costs import _as_goal_array

    arr = np.asarray(goal, dtype=float).reshape(-1)
    if arr.shape[0] == 2:
        arr = np.array([arr[0], arr[1], 0.0, 0.0])
    return _as_goal_array(arr)


def nash_deviation_gap(
    solution: Solution,
    game,
    i: int,
    n_samples: int = 100,
    rng: Optional[np.random.Generator] = None,
    step: float = 0.05,
) -> float:
    """Largest sampled one-sided improvement available to player i by
    unilaterally perturbing its own controls (clamped to its limits).
    Nonpositive-ish values certify no sampled profitable deviation."""
    from .costs import individual_cost

    rng = rng or np.random.default_rng(0)
    x0 = solution.X[0]
    U = solution.U
    base = individual_cost(x0, U, game, i, smooth=True)
    lim = game.players[i].limits
    gap = -math.inf
    for _ in range(n_samples):
        delta = rng.normal(0.0, step, size=(game.horizon, 2))
        U_dev = U.copy()
        block = U_dev[:, 2 * i : 2 * i + 2] + delta
        U_dev[:, 2 * i : 2 * i + 2] = np.clip(block, lim.u_lower, lim.u_upper)
        dev = individual_cost(x0, U_dev, game, i, smooth=True)
        gap = max(gap, base - dev)
    return gap
