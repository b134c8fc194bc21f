"""Cost terms for the joint navigation game and assembly into one trajopt problem.

The running cost every agent imagines is a shared potential: per-player goal
tracking + input effort, pairwise collision penalties, reverse-motion
penalties, plus per-player obstacle/boundary/limit hinge penalties. Each
player's own cost L_i equals the potential p plus a term c_i that depends only
on the other players, so minimizing the potential yields an open-loop Nash
point of the underlying game.

Two evaluation flavors exist: ``smooth=True`` replaces the |v| reverse kink
with a one-sided Huber blend (what the solver minimizes), ``smooth=False`` is the exact
reported form. Both decompose identically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .dynamics import AgentState, Limits, rollout
from .geometry import DEFAULT_BODY_RADIUS, Circle, Rect, Scenario

BIG_BOUND = 1e9  # stand-in half-width of "no boundary"

# stiff enough that a yielder shoved by a raised safety distance cannot buy
# useful pair clearance by shaving the wall margin (soft hinges trade off:
# the pair gradient under a doubled safety distance reaches ~170 per meter,
# and the wall gradient 2*w*pen must dominate it at penetrations well short
# of the 0.1 m buffer — w=6400 balances at ~1.3 cm)
DEFAULT_OBSTACLE_WEIGHT = 6400.0
DEFAULT_BOUNDARY_WEIGHT = 6400.0
DEFAULT_BOUNDS_WEIGHT = 100.0
DEFAULT_MARGIN = 0.1
DEFAULT_SMOOTH_EPS = 0.05


def _as_goal_array(g) -> np.ndarray:
    if isinstance(g, AgentState):
        arr = g.as_array()
    else:
        arr = np.asarray(g, dtype=float).reshape(-1)
    if arr.shape != (4,):
        raise ValueError("goal must be a 4-vector (px, py, theta, v)")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CostWeights:
    """Quadratic goal weight Q (4), input weight R (2), collision D, reverse B."""

    Q: np.ndarray = None
    R: np.ndarray = None
    D: float = 40.0
    B: float = 10.0

    def __post_init__(self):
        q = np.array([0.01, 0.01, 0.0, 0.0]) if self.Q is None else np.asarray(self.Q, dtype=float)
        r = np.array([1.0, 1.0]) if self.R is None else np.asarray(self.R, dtype=float)
        if q.shape != (4,) or r.shape != (2,):
            raise ValueError("Q must be a 4-vector and R a 2-vector")
        if (q < 0).any() or (r < 0).any() or self.D < 0 or self.B < 0:
            raise ValueError("cost weights must be nonnegative")
        q, r = q.copy(), r.copy()
        q.flags.writeable = False
        r.flags.writeable = False
        object.__setattr__(self, "Q", q)
        object.__setattr__(self, "R", r)


@dataclass(frozen=True)
class PlayerSpec:
    """One participant of the joint problem: goal state, weights, radii, limits."""

    goal: np.ndarray
    weights: CostWeights = field(default_factory=CostWeights)
    safety_radius: float = 1.5
    limits: Limits = field(default_factory=Limits)
    body_radius: float = DEFAULT_BODY_RADIUS

    def __post_init__(self):
        object.__setattr__(self, "goal", _as_goal_array(self.goal))
        if self.safety_radius <= 0:
            raise ValueError("safety_radius must be positive")
        if self.body_radius <= 0:
            raise ValueError("body_radius must be positive")


def shared_safety_matrix(n: int, d_safe: float) -> np.ndarray:
    """All pairs use one safety distance (how an agent imagines its game)."""
    m = np.full((n, n), float(d_safe))
    np.fill_diagonal(m, 0.0)
    return m


def pairwise_max_safety_matrix(radii: Sequence[float]) -> np.ndarray:
    """Pair (i, j) uses max(r_i, r_j); the centralized reference convention."""
    r = np.asarray(radii, dtype=float)
    m = np.maximum(r[:, None], r[None, :])
    np.fill_diagonal(m, 0.0)
    return m


@dataclass(frozen=True)
class GameSpec:
    """The joint problem one agent assembles: players (ego first), pair safety
    distances, penalty weights, horizon, and the static world."""

    players: tuple
    d_safe_matrix: np.ndarray = None
    obstacle_weight: float = DEFAULT_OBSTACLE_WEIGHT
    boundary_weight: float = DEFAULT_BOUNDARY_WEIGHT
    bounds_weight: float = DEFAULT_BOUNDS_WEIGHT
    horizon: int = 50
    ts: float = 0.1
    world: Optional[Scenario] = None
    margin: float = DEFAULT_MARGIN
    smooth_eps: float = DEFAULT_SMOOTH_EPS

    def __post_init__(self):
        players = tuple(self.players)
        if not players:
            raise ValueError("need at least one player")
        object.__setattr__(self, "players", players)
        n = len(players)
        m = self.d_safe_matrix
        if m is None:
            m = shared_safety_matrix(n, players[0].safety_radius)
        m = np.asarray(m, dtype=float)
        if m.shape != (n, n):
            raise ValueError("d_safe_matrix shape must be (n_players, n_players)")
        if not np.array_equal(m, m.T):
            raise ValueError("d_safe_matrix must be symmetric")
        off = ~np.eye(n, dtype=bool)
        if n > 1 and (m[off] <= 0).any():
            raise ValueError("pairwise safety distances must be positive")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "d_safe_matrix", m)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.ts <= 0:
            raise ValueError("ts must be positive")

    @property
    def n_players(self) -> int:
        return len(self.players)

    def pair_collision_weight(self, i: int, j: int) -> float:
        # kept symmetric for heterogeneous weights; identical weights reduce to D
        return 0.5 * (self.players[i].weights.D + self.players[j].weights.D)


# ---------------------------------------------------------------------------
# elementary terms


def stage_cost(x_i: np.ndarray, u_i, player: PlayerSpec) -> float:
    """Goal-tracking quadratic plus input effort; pass u_i=None for the
    terminal variant (goal term only)."""
    dx = np.asarray(x_i, dtype=float) - player.goal
    c = float(np.dot(dx * player.weights.Q, dx))
    if u_i is not None:
        u = np.asarray(u_i, dtype=float)
        c += float(np.dot(u * player.weights.R, u))
    return c


def collision_cost(x_i, x_j, d_safe: float, D: float) -> float:
    """Quadratic hinge on the center distance, active below d_safe only."""
    dx = float(x_i[0]) - float(x_j[0])
    dy = float(x_i[1]) - float(x_j[1])
    d = math.hypot(dx, dy)
    if d >= d_safe:
        return 0.0
    return (d - d_safe) ** 2 * D


def reverse_cost(v: float, B: float) -> float:
    """Exact backward-motion penalty |v|*B for v < 0."""
    return -v * B if v < 0 else 0.0


def smooth_reverse_cost(v: float, B: float, eps: float = DEFAULT_SMOOTH_EPS) -> float:
    """One-sided Huber relaxation of reverse_cost: exactly zero for v >= 0,
    quadratic blend on (-eps, 0), slope -B beyond. C^1 everywhere.

    Exact zero on the forward side matters: any residual cost at v = 0 makes
    stopping strictly worse than drifting forward, and agents that should
    park at their goals wander instead.
    """
    if v >= 0.0:
        return 0.0
    if v > -eps:
        return B * v * v / (2.0 * eps)
    return B * (-v - 0.5 * eps)


def obstacle_penalty(
    x_i,
    world: Optional[Scenario],
    weight: float = DEFAULT_OBSTACLE_WEIGHT,
    margin: float = DEFAULT_MARGIN,
    body_radius: float = DEFAULT_BODY_RADIUS,
    boundary_weight: Optional[float] = None,
) -> float:
    """Sum of quadratic hinges on clearance to every obstacle and boundary wall.

    A term activates once signed distance drops below margin + body_radius, so
    the penalty is zero exactly when every clearance exceeds the margin.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if world is None:
        return 0.0
    bw = weight if boundary_weight is None else boundary_weight
    px, py = float(x_i[0]), float(x_i[1])
    keep_out = margin + body_radius
    total = 0.0
    for obs in world.obstacles:
        if isinstance(obs, Circle):
            sd = math.hypot(px - obs.center.x, py - obs.center.y) - obs.radius
        else:
            dx = abs(px - obs.center.x) - obs.width / 2
            dy = abs(py - obs.center.y) - obs.height / 2
            if dx > 0 or dy > 0:
                sd = math.hypot(max(dx, 0.0), max(dy, 0.0))
            else:
                sd = max(dx, dy)
        h = keep_out - sd
        if h > 0:
            total += weight * h * h
    b = world.boundary
    for clear in (px - b.x_min, b.x_max - px, py - b.y_min, b.y_max - py):
        h = keep_out - clear
        if h > 0:
            total += bw * h * h
    return total


def bounds_penalty(x_i, u_i, player: PlayerSpec, weight: float = DEFAULT_BOUNDS_WEIGHT) -> float:
    """Soft hinges outside the velocity band and the control box. The forward
    pass clamps controls, so the control part is usually inert; the velocity
    part is the only enforcement of v limits."""
    lim = player.limits
    v = float(x_i[3])
    total = 0.0
    if v > lim.v_max:
        total += weight * (v - lim.v_max) ** 2
    elif v < lim.v_min:
        total += weight * (lim.v_min - v) ** 2
    if u_i is not None:
        a, w = float(u_i[0]), float(u_i[1])
        if a > lim.a_max:
            total += weight * (a - lim.a_max) ** 2
        elif a < lim.a_min:
            total += weight * (lim.a_min - a) ** 2
        if w > lim.w_max:
            total += weight * (w - lim.w_max) ** 2
        elif w < lim.w_min:
            total += weight * (lim.w_min - w) ** 2
    return total


# ---------------------------------------------------------------------------
# joint assembly and the potential decomposition


def _player_block(x: np.ndarray, i: int) -> np.ndarray:
    return x[4 * i : 4 * i + 4]


def _control_block(u: np.ndarray, i: int) -> np.ndarray:
    return u[2 * i : 2 * i + 2]


def _player_running_terms(x, u, game: GameSpec, i: int, smooth: bool) -> float:
    p = game.players[i]
    xi = _player_block(x, i)
    ui = _control_block(u, i)
    t = stage_cost(xi, ui, p)
    v = float(xi[3])
    if smooth:
        t += smooth_reverse_cost(v, p.weights.B, game.smooth_eps)
    else:
        t += reverse_cost(v, p.weights.B)
    t += obstacle_penalty(
        xi, game.world, game.obstacle_weight, game.margin, p.body_radius, game.boundary_weight
    )
    t += bounds_penalty(xi, ui, p, game.bounds_weight)
    return t


def _pair_term(x, game: GameSpec, i: int, j: int) -> float:
    return collision_cost(
        _player_block(x, i),
        _player_block(x, j),
        float(game.d_safe_matrix[i, j]),
        game.pair_collision_weight(i, j),
    )


def running_potential(x, u, game: GameSpec, smooth: bool = False) -> float:
    """p(x, u): the shared running cost the joint problem minimizes."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = game.n_players
    total = 0.0
    for i in range(n):
        total += _player_running_terms(x, u, game, i, smooth)
    for i in range(n):
        for j in range(i + 1, n):
            total += _pair_term(x, game, i, j)
    return total


def running_c_i(x, u, game: GameSpec, i: int, smooth: bool = False) -> float:
    """c_i(x_-i, u_-i): minus everything in p that does not involve player i."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = game.n_players
    total = 0.0
    for j in range(n):
        if j != i:
            total += _player_running_terms(x, u, game, j, smooth)
    for j in range(n):
        for k in range(j + 1, n):
            if j != i and k != i:
                total += _pair_term(x, game, j, k)
    return -total


def running_L_i(x, u, game: GameSpec, i: int, smooth: bool = False) -> float:
    """Player i's own running cost: its terms plus every pair involving it."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    total = _player_running_terms(x, u, game, i, smooth)
    for j in range(game.n_players):
        if j != i:
            total += _pair_term(x, game, min(i, j), max(i, j))
    return total


def terminal_potential(x, game: GameSpec) -> float:
    x = np.asarray(x, dtype=float)
    return sum(
        stage_cost(_player_block(x, i), None, game.players[i]) for i in range(game.n_players)
    )


def terminal_L_i(x, game: GameSpec, i: int) -> float:
    return stage_cost(_player_block(np.asarray(x, dtype=float), i), None, game.players[i])


def terminal_c_i(x, game: GameSpec, i: int) -> float:
    x = np.asarray(x, dtype=float)
    return -sum(
        stage_cost(_player_block(x, j), None, game.players[j])
        for j in range(game.n_players)
        if j != i
    )


def individual_cost(x0, U, game: GameSpec, i: int, smooth: bool = False) -> float:
    """J_i: roll x0 under the joint controls U and total player i's cost."""
    U = np.asarray(U, dtype=float)
    if U.shape[0] != game.horizon:
        raise ValueError("control sequence length must equal the game horizon")
    X = rollout(x0, U, game.ts)
    total = 0.0
    for k in range(game.horizon):
        total += running_L_i(X[k], U[k], game, i, smooth)
    return total + terminal_L_i(X[-1], game, i)


def joint_limit_arrays(game: GameSpec) -> tuple[np.ndarray, np.ndarray]:
    lower = np.concatenate([p.limits.u_lower for p in game.players])
    upper = np.concatenate([p.limits.u_upper for p in game.players])
    return lower, upper


def assemble_potential_ocp(game: GameSpec, x0, smooth: bool = True):
    """Build the joint trajopt problem whose optimum is a Nash point.

    Running cost: potential p (+ per-player penalty terms); terminal: summed
    goal quadratics. Returns a solver OCProblem carrying the game for
    game-aware helpers and a flattened parameter pack for the compiled path.
    """
    from .solver import OCProblem

    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != 4 * game.n_players:
        raise ValueError("x0 must stack 4 states per player")
    lower, upper = joint_limit_arrays(game)

    def run_cost(x, u, _g=game, _s=smooth):
        return running_potential(x, u, _g, smooth=_s)

    def term_cost(x, _g=game):
        return terminal_potential(x, _g)

    return OCProblem(
        x0=x0,
        horizon=game.horizon,
        ts=game.ts,
        running_cost=run_cost,
        terminal_cost=term_cost,
        u_lower=lower,
        u_upper=upper,
        n_agents=game.n_players,
        pack=build_pack(game) if smooth else None,
        game=game,
    )


# ---------------------------------------------------------------------------
# flattened parameter pack consumed by the compiled kernels


class PotentialPack(NamedTuple):
    goals: np.ndarray  # (N, 4)
    Q: np.ndarray  # (N, 4)
    R: np.ndarray  # (N, 2)
    D_pair: np.ndarray  # (N, N)
    B: np.ndarray  # (N,)
    d_safe: np.ndarray  # (N, N)
    body_radius: np.ndarray  # (N,)
    u_lower: np.ndarray  # (2N,)
    u_upper: np.ndarray  # (2N,)
    v_lower: np.ndarray  # (N,)
    v_upper: np.ndarray  # (N,)
    circles: np.ndarray  # (n_c, 3): cx, cy, radius
    rects: np.ndarray  # (n_r, 4): cx, cy, half_w, half_h
    bounds: np.ndarray  # (4,): x_min, x_max, y_min, y_max
    obstacle_weight: float
    boundary_weight: float
    bounds_weight: float
    margin: float
    smooth_eps: float
    ts: float


def build_pack(game: GameSpec) -> PotentialPack:
    n = game.n_players
    goals = np.stack([p.goal for p in game.players]).astype(float)
    Q = np.stack([p.weights.Q for p in game.players]).astype(float)
    R = np.stack([p.weights.R for p in game.players]).astype(float)
    D_pair = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                D_pair[i, j] = game.pair_collision_weight(i, j)
    B = np.array([p.weights.B for p in game.players], dtype=float)
    body = np.array([p.body_radius for p in game.players], dtype=float)
    lower, upper = joint_limit_arrays(game)
    v_lo = np.array([p.limits.v_min for p in game.players], dtype=float)
    v_hi = np.array([p.limits.v_max for p in game.players], dtype=float)
    if game.world is not None:
        circles = [o for o in game.world.obstacles if isinstance(o, Circle)]
        rects = [o for o in game.world.obstacles if isinstance(o, Rect)]
        carr = np.array(
            [[c.center.x, c.center.y, c.radius] for c in circles], dtype=float
        ).reshape(-1, 3)
        rarr = np.array(
            [[r.center.x, r.center.y, r.width / 2, r.height / 2] for r in rects], dtype=float
        ).reshape(-1, 4)
        b = game.world.boundary
        bounds = np.array([b.x_min, b.x_max, b.y_min, b.y_max], dtype=float)
    else:
        carr = np.zeros((0, 3))
        rarr = np.zeros((0, 4))
        bounds = np.array([-BIG_BOUND, BIG_BOUND, -BIG_BOUND, BIG_BOUND])
    return PotentialPack(
        goals=goals,
        Q=Q,
        R=R,
        D_pair=D_pair,
        B=B,
        d_safe=game.d_safe_matrix.copy(),
        body_radius=body,
        u_lower=lower,
        u_upper=upper,
        v_lower=v_lo,
        v_upper=v_hi,
        circles=carr,
        rects=rarr,
        bounds=bounds,
        obstacle_weight=float(game.obstacle_weight),
        boundary_weight=float(game.boundary_weight),
        bounds_weight=float(game.bounds_weight),
        margin=float(game.margin),
        smooth_eps=float(game.smooth_eps),
        ts=float(game.ts),
    )
