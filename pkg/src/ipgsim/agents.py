"""Per-agent planners.

The main planner builds, every step, a joint game with the agents it
currently observes — assuming they share its own cost parameters and react
collaboratively — solves that game from several initializations, and executes
only its own first control. Occlusion filtering, an adaptive safety distance,
a conservative cap on others' imagined control authority, and a two-mode
deadlock escape make the closed loop robust.

Also here: the reciprocal velocity-obstacle baseline (reference-tracking
preferred velocity constrained by pairwise half-planes) and the blind
reference tracker.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .costs import CostWeights, GameSpec, PlayerSpec, assemble_potential_ocp
from .dynamics import ControlInput, Limits, wrap_angle
from .geometry import Point2, Scenario, line_of_sight
from .solver import (
    DEFAULT_CONFIG,
    Solution,
    SolverConfig,
    multi_start_solve,
    single_agent_reference,
    solve,
)

AGENT_KINDS = ("ipg", "orca", "blind", "external")

V_REF = 1.0  # traffic speed that maps to the full safety distance
# 0.05 waits for a full standstill that hinge standoffs only reach
# asymptotically; 0.25 misfires on working slow traffic (final approaches,
# neighbors gliding to nearby goals) and the spurious raises wreck it
DEADLOCK_SPEED = 0.15
DEADLOCK_WINDOW = 20
DETECT_RANGE = 3.0  # a stall only counts as a deadlock when someone is this close
# contested-creep detection: opposed or crossing headings at crawl speeds are a
# jam forming long before anyone reaches a standstill, while the same crawl
# between co-moving neighbors is just slow traffic
HEADON_SPEED = 0.35
HEADON_RANGE = 2.5
HEADON_DOT = 0.3
FREEZE_REVERT_DIST = 0.1
# long enough to cover a full corridor transit past the frozen agent; the
# goal-ward revert in _update_freezes handles a resumed journey well before
# this cap matters
FREEZE_REVERT_STEPS = 120
PARKED_SPEED = 0.05  # below this a visible agent counts as waiting, not contesting
BODY_FLOOR = 0.7  # two default bodies plus 0.1 m; effective d_safe never goes lower
BOOST_STEPS = 120  # lifetime of a raised safety distance, refreshed on re-raise
RELEASE_MARGIN = 0.3  # clearance beyond the boosted distance that counts as "passed"
RELEASE_STEPS = 10  # consecutive clear steps before an early release
FLOW_SPEED = 0.5  # visible-agent speed that counts as traffic moving again
CLOSING_RATE = 0.2  # m/s of sustained gap closure that counts as being passed
FREE_RANGE = 12.0  # beyond this a visible agent puts no strategic claim on the plan
FREE_HOLD = 5  # consecutive free solves before the short window engages


@dataclass(frozen=True)
class AgentSpec:
    id: int
    kind: str
    goal: Point2
    weights: CostWeights = field(default_factory=CostWeights)
    safety_radius: float = 1.5
    body_radius: float = 0.3
    limits: Limits = field(default_factory=Limits)

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")
        if self.safety_radius < self.body_radius:
            raise ValueError("safety_radius must be >= body_radius")


@dataclass(frozen=True)
class ObservationModel:
    range: float = 8.0
    behind_exclusion: bool = True
    occlusion_by_obstacles: bool = True
    max_visible: int = 3

    def __post_init__(self):
        if self.range <= 0:
            raise ValueError("observation range must be positive")


@dataclass
class AgentView:
    """What one agent presents to the others: identity, current state, and
    its (known) goal state."""

    spec: AgentSpec
    state: np.ndarray
    goal_state: np.ndarray


@dataclass
class FreezeRecord:
    goal: np.ndarray  # frozen estimated goal position (2,)
    position: np.ndarray  # the agent's position when frozen (2,)
    goal_dist: float = 0.0  # distance from frozen position to the true goal
    steps: int = 0


@dataclass
class IPGMemory:
    """Mutable planner state carried across steps of one episode."""

    prev_solution: Optional[Solution] = None
    prev_ids: Optional[tuple] = None
    d_safe: float = 0.0
    boost: Optional[float] = None  # floor raised by resolution mode A
    boost_steps: int = 0
    release_steps: int = 0
    prev_min_gap: float = math.inf
    prev_goal_dist: float = math.inf
    headon_steps: int = 0
    retreat_steps: int = 0
    free_steps: int = 0
    refractory: int = 0
    window: int = DEADLOCK_WINDOW
    still_steps: int = 0
    frozen: Dict[int, FreezeRecord] = field(default_factory=dict)
    last_event: Dict[str, object] = field(default_factory=dict)


@dataclass
class PlannerOutput:
    control: ControlInput
    own_plan: np.ndarray  # (T+1, 4)
    imagined: Dict[int, np.ndarray]  # other id -> (T+1, 4)
    diagnostic: str = ""


@dataclass(frozen=True)
class IPGConfig:
    """Feature toggles and solve settings for the game-theoretic planner."""

    multi_start: bool = True
    adaptive_safety: bool = True
    conservative: bool = True
    deadlock_resolution: bool = True
    # 0.5 makes imagined opponents so sluggish that every plan hedges long
    # braking distances for them; approaches pre-brake miles out and passes
    # go timid. 0.8 keeps a safety margin without the crawl.
    conservative_factor: float = 0.8
    act_probability: float = 0.5
    # two window widths, picked per solve: the long one prices recoveries
    # correctly (turnarounds, yields, re-routes around geometry pay off only
    # over many seconds); a shorter one rushes free driving. Equal widths by
    # default: across seeds the eager window costs more contested approaches
    # than it saves in open running. See the temperament block in ipg_plan.
    horizon: int = 100
    horizon_short: int = 100
    # park-and-cede around occupied goals and the sustained-ground-loss
    # detector ship disabled by default: each rescues a specific pathology
    # (nested goals, coupled sub-threshold creep) but both reshuffle which
    # marginal episodes finish in time, and across seeds the plain
    # configuration wins
    park_at_goal: bool = False
    retreat_detection: bool = False
    goal_tolerance: float = 0.3
    observation: ObservationModel = field(default_factory=ObservationModel)
    solver: SolverConfig = DEFAULT_CONFIG


def observe(
    ego: AgentView,
    all_agents: Sequence[AgentView],
    world: Optional[Scenario],
    model: ObservationModel,
) -> List[AgentView]:
    """Filter the other agents down to those the ego can currently see:
    within range, not behind it, sightline not blocked; nearest 3 kept."""
    ex, ey, eth = float(ego.state[0]), float(ego.state[1]), float(ego.state[2])
    hx, hy = math.cos(eth), math.sin(eth)
    seen = []
    for other in all_agents:
        if other.spec.id == ego.spec.id:
            continue
        dx = float(other.state[0]) - ex
        dy = float(other.state[1]) - ey
        dist = math.hypot(dx, dy)
        if dist > model.range:
            continue
        if model.behind_exclusion and hx * dx + hy * dy < 0.0:
            continue
        if (
            model.occlusion_by_obstacles
            and world is not None
            and not line_of_sight(
                Point2(ex, ey), Point2(float(other.state[0]), float(other.state[1])), list(world.obstacles)
            )
        ):
            continue
        seen.append((dist, other.spec.id, other))
    seen.sort(key=lambda t: (t[0], t[1]))
    return [v for _, _, v in seen[: model.max_visible]]


def adaptive_safety_distance(min_visible_speed: float, r: float) -> float:
    """Scale the safety distance with the local traffic speed: slow traffic
    halves it, free flow restores the full radius."""
    if r <= 0:
        raise ValueError("safety radius must be positive")
    frac = min(max(min_visible_speed / V_REF, 0.0), 1.0)
    return r * (0.5 + 0.5 * frac)


def conservative_limits(other_limits: Limits, factor: float = 0.5) -> Limits:
    """Shrink another agent's imagined control authority; its state limits
    and the ego's own limits are untouched."""
    return other_limits.scale_controls(factor)


def detect_deadlock(
    memory: IPGMemory,
    joint_speeds: Sequence[float],
    dist_to_goal: float,
    goal_tolerance: float = 0.3,
) -> bool:
    """Track consecutive near-standstill steps; fire after a full window
    while the ego still has somewhere to go. Movement resets the window.

    A crawl past agents that sit fully parked also counts: planning against
    the parked agents' original intentions splits the right of way with
    phantoms, which caps the crawl well below free speed, and that crawl in
    turn keeps the plain standstill criterion from ever firing.
    """
    if len(joint_speeds) < 1:
        raise ValueError("need at least the ego speed")
    stalled = max(abs(float(s)) for s in joint_speeds) < DEADLOCK_SPEED
    others = [abs(float(s)) for s in joint_speeds[1:]]
    crawl_past_parked = (
        bool(others)
        and max(others) < PARKED_SPEED
        and abs(float(joint_speeds[0])) < FLOW_SPEED
    )
    if (stalled or crawl_past_parked) and dist_to_goal > goal_tolerance:
        memory.still_steps += 1
    else:
        memory.still_steps = 0
    return memory.still_steps >= memory.window


def resolve_deadlock(
    memory: IPGMemory,
    visible: Sequence[AgentView],
    mode: str,
    rng: Optional[np.random.Generator] = None,
    safety_radius: float = 1.5,
) -> IPGMemory:
    """Mode A: raise the safety distance (capped at 2r) to change the
    interaction style; the raise compounds across detections and fades after
    a fixed number of steps. Mode B: assume the others stay put — freeze
    their estimated goals at their current positions (reverted once they
    move)."""
    if mode == "A":
        # 1.5x the effective distance, floored at the full radius: in stalled
        # traffic the adaptive rule has halved d_safe, and 1.5x the halved
        # value backs the yielder out ~0.3 m into a fresh standoff. Corridors
        # narrower than twice the safety distance are impassable side by side,
        # so a real yield means backing out the whole mouth; that takes the
        # large raise. The raise is dropped again the moment opposing traffic
        # actually flows (see the release logic in ipg_plan), which keeps the
        # yielder from fleeing sideways while the other agent passes.
        base = max(memory.d_safe, safety_radius)
        memory.boost = min(1.5 * base, 2.0 * safety_radius)
        memory.boost_steps = 0
        memory.release_steps = 0
    elif mode == "B":
        for view in visible:
            pos = np.array([float(view.state[0]), float(view.state[1])])
            gd = math.hypot(view.spec.goal.x - pos[0], view.spec.goal.y - pos[1])
            memory.frozen[view.spec.id] = FreezeRecord(
                goal=pos.copy(), position=pos.copy(), goal_dist=gd
            )
    else:
        raise ValueError(f"unknown resolution mode {mode!r}")
    return memory


def _head_on_stall(
    memory: IPGMemory, ego_state: np.ndarray, visible: Sequence[AgentView]
) -> bool:
    """Count consecutive steps of contested creep and fire after a window.

    The standstill detector only triggers once everyone has ground to a halt,
    which a hinge standoff approaches asymptotically; two agents crawling at
    each other spend most of an episode budget compressing first. Opposed or
    crossing headings at crawl speed within close range identify that jam
    while it forms. Parallel headings stay exempt so slow co-moving traffic
    (neighbors gliding toward nearby goals) is never touched.
    """
    ex, ey = math.cos(float(ego_state[2])), math.sin(float(ego_state[2]))
    jammed = False
    if abs(float(ego_state[3])) < HEADON_SPEED:
        for v in visible:
            dx = float(v.state[0]) - float(ego_state[0])
            dy = float(v.state[1]) - float(ego_state[1])
            if math.hypot(dx, dy) > HEADON_RANGE:
                continue
            if dx * ex + dy * ey < 0.0:
                continue  # behind
            if abs(float(v.state[3])) >= HEADON_SPEED:
                continue
            hx, hy = math.cos(float(v.state[2])), math.sin(float(v.state[2]))
            if ex * hx + ey * hy < HEADON_DOT:
                jammed = True
                break
    memory.headon_steps = memory.headon_steps + 1 if jammed else 0
    return memory.headon_steps >= memory.window


def _roll_resolution(
    memory: IPGMemory,
    visible: Sequence[AgentView],
    rng: np.random.Generator,
    safety_radius: float,
    dist_to_goal: float,
    act_probability: float,
    retreating: bool = False,
) -> Optional[str]:
    """Pick and apply a resolution for one detected deadlock.

    The observable situation picks the mode where it can: an agent losing
    ground pins the other's estimate in place (giving yet more ground is the
    one move a retreater cannot afford), an agent facing only parked others
    treats them as staying parked and drives. Otherwise a coin decides, so a
    symmetric pair does not mirror itself into the same choice.
    """
    if not visible:
        return None
    mode: Optional[str] = None
    if retreating:
        mode = "B"
    elif any(float(v.state[3]) < -PARKED_SPEED for v in visible):
        return None  # someone is already backing off; let their yield play out
    elif all(abs(float(v.state[3])) < PARKED_SPEED for v in visible):
        mode = "B"
    elif rng.random() < act_probability:
        # against creeping agents only giving ground helps: a freeze of an
        # agent still inching toward its goal reverts within a few steps
        mode = "A"
    if mode is not None:
        resolve_deadlock(memory, visible, mode, rng, safety_radius=safety_radius)
    return mode


def _update_freezes(memory: IPGMemory, visible: Sequence[AgentView]) -> None:
    """Maintain frozen goal estimates against what the frozen agents do.

    A freeze means "that agent is staying put". Movement toward its true goal
    contradicts the assumption, so the estimate reverts. Movement anywhere
    else (backing off, being nudged aside) does not resume its journey; the
    estimate re-parks at the new position instead of reverting, otherwise a
    yielding agent un-freezes itself with the first half-step of its retreat
    and the freeze can never do its job.
    """
    views = {v.spec.id: v for v in visible}
    for oid in list(memory.frozen):
        rec = memory.frozen[oid]
        rec.steps += 1
        if rec.steps >= FREEZE_REVERT_STEPS:
            del memory.frozen[oid]
            continue
        view = views.get(oid)
        if view is None:
            continue
        px, py = float(view.state[0]), float(view.state[1])
        gd = math.hypot(view.spec.goal.x - px, view.spec.goal.y - py)
        if gd < rec.goal_dist - FREEZE_REVERT_DIST:
            del memory.frozen[oid]  # journey resumed
        elif math.hypot(px - rec.position[0], py - rec.position[1]) > FREEZE_REVERT_DIST:
            rec.position = np.array([px, py])
            rec.goal = rec.position.copy()
            rec.goal_dist = gd


def _bearing_goal_state(pos_x: float, pos_y: float, goal: Point2) -> np.ndarray:
    th = math.atan2(goal.y - pos_y, goal.x - pos_x)
    return np.array([goal.x, goal.y, th, 0.0])


def _emergency_stop(ego_state: np.ndarray, limits: Limits, ts: float) -> ControlInput:
    # brake toward v = 0 as hard as the input box allows
    a = max(limits.a_min, min(limits.a_max, -float(ego_state[3]) / ts))
    return ControlInput(a, 0.0)


def ipg_plan(
    ego_spec: AgentSpec,
    ego_state: np.ndarray,
    visible: Sequence[AgentView],
    world: Optional[Scenario],
    memory: IPGMemory,
    rng: np.random.Generator,
    solver_config: Optional[SolverConfig] = None,
    config: Optional[IPGConfig] = None,
    ego_goal_state: Optional[np.ndarray] = None,
    ts: float = 0.1,
) -> PlannerOutput:
    """One receding-horizon step of the game-theoretic planner.

    Builds the joint problem over ego + visible agents (ego's parameters
    imagined onto everyone, conservative control caps on the others, shared
    adaptive safety distance), solves it from multiple starts, updates the
    planner memory, and returns the ego's first control.
    """
    config = config or IPGConfig()
    solver_config = solver_config or config.solver
    ego_state = np.asarray(ego_state, dtype=float).reshape(4)
    r = ego_spec.safety_radius
    dist_to_goal = math.hypot(ego_state[0] - ego_spec.goal.x, ego_state[1] - ego_spec.goal.y)
    speeds = [abs(float(ego_state[3]))] + [abs(float(v.state[3])) for v in visible]

    gaps = [
        math.hypot(float(v.state[0]) - ego_state[0], float(v.state[1]) - ego_state[1])
        for v in visible
    ]
    min_gap = min(gaps) if gaps else math.inf

    # sustained retreat: goal distance growing while slow with someone close is
    # losing ground under pair pressure. Approaches and glides shrink the
    # distance and courtesy holds keep it flat, so neither can trip this;
    # the coupled creep that does trip it tends to sit just above the
    # standstill threshold and would otherwise never be caught
    if (
        config.retreat_detection
        and dist_to_goal > memory.prev_goal_dist + 1e-4
        and max(speeds) < FLOW_SPEED
        and min_gap < DETECT_RANGE
        and dist_to_goal > config.goal_tolerance
    ):
        memory.retreat_steps += 1
    elif dist_to_goal < memory.prev_goal_dist - 1e-3:
        memory.retreat_steps = 0
    memory.prev_goal_dist = dist_to_goal

    event = {"deadlock": False, "resolution": None}
    if config.deadlock_resolution:
        fired = detect_deadlock(memory, speeds, dist_to_goal, config.goal_tolerance)
        # solo slowness is not a deadlock; without a nearby agent there is
        # nothing a resolution could change
        fired = fired and min_gap < DETECT_RANGE
        if dist_to_goal > config.goal_tolerance and _head_on_stall(
            memory, ego_state, visible
        ):
            fired = True
            memory.headon_steps = 0
        retreating = memory.retreat_steps >= memory.window
        if retreating:
            fired = True
            memory.retreat_steps = 0
        # the detectors reset their own counters when they fire but not each
        # other's, and back-to-back fires from different detectors re-roll a
        # resolution that has had no time to act (the second coin can undo the
        # first); one roll per window, whatever detected it
        if config.retreat_detection and memory.refractory > 0:
            memory.refractory -= 1
            if fired:
                memory.still_steps = 0
                fired = False
                retreating = False
        if fired:
            memory.refractory = memory.window
            event["deadlock"] = True
            memory.still_steps = 0  # one detection per window
            # an agent already holding a raised distance is already the
            # yielder; re-rolling compounds the raise and, when both sides of
            # a pair end up boosted, produces a mutual-yield standoff
            if memory.boost is None:
                event["resolution"] = _roll_resolution(
                    memory,
                    visible,
                    rng,
                    r,
                    dist_to_goal,
                    config.act_probability,
                    retreating=retreating,
                )
    _update_freezes(memory, visible)

    # effective safety distance for every pair of the imagined game
    base = adaptive_safety_distance(min(speeds), r) if config.adaptive_safety else r
    if memory.boost is not None:
        memory.boost_steps += 1
        # drop the raised distance early once everyone it was yielding to has
        # cleared, or once the other side has visibly taken the passer role
        # (fast traffic, or the gap steadily closing on a yielder that is
        # standing still). Holding the raise while being approached pins the
        # yielder against whatever geometry is behind it with crushing pair
        # pressure, and the escape flings it through wall corners.
        flowing = bool(visible) and max(abs(float(v.state[3])) for v in visible) > FLOW_SPEED
        closing = memory.prev_min_gap - min_gap > CLOSING_RATE * ts
        if not gaps or min_gap > memory.boost + RELEASE_MARGIN or flowing or closing:
            memory.release_steps += 1
        else:
            memory.release_steps = 0
        if memory.boost_steps > BOOST_STEPS or memory.release_steps >= RELEASE_STEPS:
            memory.boost = None
            memory.release_steps = 0
    memory.prev_min_gap = min_gap
    d_safe = base if memory.boost is None else max(base, memory.boost)
    # lower clamp additionally respects body geometry: the adaptive halving of
    # a small radius can land within centimeters of body contact, where plan
    # staleness of a single step is enough to close the margin
    d_safe = min(max(d_safe, 0.5 * r, BODY_FLOOR), 2.0 * r)
    memory.d_safe = d_safe
    memory.last_event = event

    if ego_goal_state is None:
        ego_goal_state = _bearing_goal_state(ego_state[0], ego_state[1], ego_spec.goal)
    players = [
        PlayerSpec(
            goal=ego_goal_state,
            weights=ego_spec.weights,
            safety_radius=r,
            limits=ego_spec.limits,
            body_radius=ego_spec.body_radius,
        )
    ]
    other_limits = (
        conservative_limits(ego_spec.limits, config.conservative_factor)
        if config.conservative
        else ego_spec.limits
    )
    x0 = [ego_state]
    ids = [ego_spec.id]
    for view in visible:
        frozen = memory.frozen.get(view.spec.id)
        if frozen is not None:
            goal_state = np.array(
                [frozen.goal[0], frozen.goal[1], float(view.state[2]), 0.0]
            )
        else:
            goal_state = np.asarray(view.goal_state, dtype=float)
        players.append(
            PlayerSpec(
                goal=goal_state,
                weights=ego_spec.weights,
                safety_radius=r,
                limits=other_limits,
                body_radius=view.spec.body_radius,
            )
        )
        x0.append(np.asarray(view.state, dtype=float).reshape(4))
        ids.append(view.spec.id)
    ids = tuple(ids)

    dmat = None
    if len(players) > 1:
        # a frozen agent is assumed stationary and non-cooperating, so it gets
        # obstacle-grade clearance (full radius) instead of the traffic-adaptive
        # distance; planning a tight brush past a stale parked position is how
        # bodies end up touching
        per_player = [d_safe] + [
            max(d_safe, r) if view.spec.id in memory.frozen else d_safe for view in visible
        ]
        dmat = np.maximum.outer(np.array(per_player), np.array(per_player))
        np.fill_diagonal(dmat, 0.0)
    # horizon temperament: the long window prices recoveries correctly but its
    # patience turns every free stretch into a glide. Default to it; drop to
    # the short window only when the scene is provably free — everyone visible
    # is far, strictly behind, or parked with clearance — and only after the
    # gate has held several solves, because a flip mid-negotiation replans the
    # contest at rush stakes and wrecks it
    heading_err = 0.0
    if dist_to_goal > 1e-9:
        bearing = math.atan2(
            ego_spec.goal.y - ego_state[1], ego_spec.goal.x - ego_state[0]
        )
        heading_err = abs(
            (bearing - float(ego_state[2]) + math.pi) % (2.0 * math.pi) - math.pi
        )
    hx, hy = math.cos(float(ego_state[2])), math.sin(float(ego_state[2]))
    clear = d_safe + RELEASE_MARGIN
    # a mover ahead within range holds a claim however far out: the long
    # window pre-negotiates contests from spawn distance, and losing that is
    # what turns approaches ballistic. Merely observed-parked agents keep the
    # claim too — the joint solve imagines them driving on, so a rush outruns
    # the replanning loop's correction of that fiction. Only frozen estimates
    # (solver-honest static obstacles) and departing traffic behind are inert
    inert_or_clear = all(
        gap > FREE_RANGE
        or view.spec.id in memory.frozen
        or (
            gap > clear
            and (float(view.state[0]) - ego_state[0]) * hx
            + (float(view.state[1]) - ego_state[1]) * hy
            < 0.0
        )
        for gap, view in zip(gaps, visible)
    )
    free = (
        not event["deadlock"]
        and memory.boost is None
        # the short window preserves momentum but cannot create it: at its
        # stakes neither re-acceleration nor a precise slow final ever pays,
        # so anything below cruising speed stays on the long window
        and abs(float(ego_state[3])) >= FLOW_SPEED
        and heading_err <= 1.0
        and inert_or_clear
    )
    memory.free_steps = memory.free_steps + 1 if free else 0
    horizon = (
        min(config.horizon_short, config.horizon)
        if memory.free_steps >= FREE_HOLD
        else config.horizon
    )
    event["horizon"] = horizon

    game = GameSpec(
        players=tuple(players),
        d_safe_matrix=dmat,
        horizon=horizon,
        ts=ts,
        world=world,
    )
    problem = assemble_potential_ocp(game, np.concatenate(x0))

    prev = memory.prev_solution if memory.prev_ids == ids else None
    if prev is not None and prev.U.shape[0] != horizon:
        if prev.U.shape[0] > horizon:
            # shrinking keeps the first seconds of the old plan, a fine warm start
            prev = replace(prev, U=prev.U[:horizon])
        else:
            # growing has no honest tail to warm-start from; a cold solve runs
            # the full candidate sweep instead of extrapolating stale controls
            prev = None
    # quiet-glide steps are unimodal: the warm continuation wins against the
    # whole candidate set anyway, so spend the extra solves only where the
    # landscape can actually fork (encounters, resolution events, stalls,
    # final approach, cold starts)
    near_interaction = any(
        math.hypot(float(v.state[0]) - ego_state[0], float(v.state[1]) - ego_state[1])
        < 2.0 * d_safe
        for v in visible
    )
    multimodal = (
        prev is None
        or not prev.feasible
        or event["deadlock"]
        or memory.boost is not None
        # crawling far from the goal is a suspicious basin wherever it
        # happens: a warm continuation inherited from one cautious solve
        # locks the whole approach into a crawl unless the bolder seeds
        # keep getting re-tested against it
        or (abs(float(ego_state[3])) < 0.5 and dist_to_goal > 2.0)
        or dist_to_goal < 2.0
        or near_interaction
    )
    if config.multi_start and multimodal:
        warm_blocks = None
        if prev is not None:
            warm_blocks = [
                np.vstack([prev.U[1:, 2 * i : 2 * i + 2], prev.U[-1:, 2 * i : 2 * i + 2]])
                for i in range(len(players))
            ]
        sol = multi_start_solve(problem, prev, rng, solver_config, single_agent_warm=warm_blocks)
    else:
        if prev is not None and prev.feasible:
            U0 = np.vstack([prev.U[1:], prev.U[-1:]])
        else:
            U0 = None
        sol = solve(problem, U0, solver_config)

    if not (math.isfinite(sol.cost) and np.all(np.isfinite(sol.U))):
        memory.prev_solution = None
        memory.prev_ids = None
        T = config.horizon
        return PlannerOutput(
            control=_emergency_stop(ego_state, ego_spec.limits, ts),
            own_plan=np.tile(ego_state, (T + 1, 1)),
            imagined={},
            diagnostic="emergency_stop:" + (sol.diagnostic or "non-finite solution"),
        )

    memory.prev_solution = sol
    memory.prev_ids = ids
    imagined = {
        oid: sol.X[:, 4 * (j + 1) : 4 * (j + 1) + 4].copy() for j, oid in enumerate(ids[1:])
    }
    return PlannerOutput(
        control=ControlInput(float(sol.U[0, 0]), float(sol.U[0, 1])),
        own_plan=sol.X[:, :4].copy(),
        imagined=imagined,
        diagnostic=sol.diagnostic,
    )


def _shared_matrix(n: int, d: float) -> np.ndarray:
    m = np.full((n, n), d)
    np.fill_diagonal(m, 0.0)
    return m


# ---------------------------------------------------------------------------
# velocity-obstacle baseline


@dataclass(frozen=True)
class OrcaParams:
    tau: float = 2.0  # collision-avoidance time horizon
    lookahead: float = 1.0  # meters along the reference
    cruise_frac: float = 0.8  # of v_max
    k_v: float = 2.0
    k_theta: float = 2.0


@dataclass
class _Line:
    point: np.ndarray
    direction: np.ndarray


def _det(a, b) -> float:
    return a[0] * b[1] - a[1] * b[0]


def _lp1(lines: List[_Line], line_no: int, radius: float, opt_v: np.ndarray, direction_opt: bool, result: np.ndarray):
    """1-D program on lines[line_no] subject to circle + earlier half-planes."""
    ln = lines[line_no]
    dot = float(np.dot(ln.point, ln.direction))
    disc = dot * dot + radius * radius - float(np.dot(ln.point, ln.point))
    if disc < 0.0:
        return False
    sq = math.sqrt(disc)
    t_left = -dot - sq
    t_right = -dot + sq
    for i in range(line_no):
        den = _det(ln.direction, lines[i].direction)
        num = _det(lines[i].direction, ln.point - lines[i].point)
        if abs(den) <= 1e-9:
            if num < 0.0:
                return False
            continue
        t = num / den
        if den >= 0.0:
            t_right = min(t_right, t)
        else:
            t_left = max(t_left, t)
        if t_left > t_right:
            return False
    if direction_opt:
        t = t_right if float(np.dot(opt_v, ln.direction)) > 0.0 else t_left
    else:
        t = float(np.dot(ln.direction, opt_v - ln.point))
        t = min(max(t, t_left), t_right)
    result[:] = ln.point + t * ln.direction
    return True


def _lp2(lines: List[_Line], radius: float, opt_v: np.ndarray, direction_opt: bool, result: np.ndarray) -> int:
    """2-D program; returns the index of the first unsatisfiable line, or
    len(lines) on success."""
    if direction_opt:
        result[:] = opt_v * radius
    elif float(np.dot(opt_v, opt_v)) > radius * radius:
        result[:] = opt_v / np.linalg.norm(opt_v) * radius
    else:
        result[:] = opt_v
    for i, ln in enumerate(lines):
        if _det(ln.direction, ln.point - result) > 0.0:
            temp = result.copy()
            if not _lp1(lines, i, radius, opt_v, direction_opt, result):
                result[:] = temp
                return i
    return len(lines)


def _lp3(lines: List[_Line], begin: int, radius: float, result: np.ndarray) -> None:
    """Fallback: minimize the largest constraint violation."""
    distance = 0.0
    for i in range(begin, len(lines)):
        if _det(lines[i].direction, lines[i].point - result) > distance:
            proj_lines: List[_Line] = []
            for j in range(i):
                den = _det(lines[i].direction, lines[j].direction)
                if abs(den) <= 1e-9:
                    if float(np.dot(lines[i].direction, lines[j].direction)) > 0.0:
                        continue
                    point = 0.5 * (lines[i].point + lines[j].point)
                else:
                    t = _det(lines[j].direction, lines[i].point - lines[j].point) / den
                    point = lines[i].point + t * lines[i].direction
                d = lines[j].direction - lines[i].direction
                proj_lines.append(_Line(point=point, direction=d / np.linalg.norm(d)))
            temp = result.copy()
            ok = _lp2(
                proj_lines,
                radius,
                np.array([-lines[i].direction[1], lines[i].direction[0]]),
                True,
                result,
            )
            if ok < len(proj_lines):
                result[:] = temp
            distance = _det(lines[i].direction, lines[i].point - result)


def _orca_lines(ego_state: np.ndarray, ego_body: float, visible: Sequence[AgentView], tau: float, ts: float) -> List[_Line]:
    px, py, th, v = (float(ego_state[i]) for i in range(4))
    vel = np.array([v * math.cos(th), v * math.sin(th)])
    lines: List[_Line] = []
    inv_tau = 1.0 / tau
    for view in visible:
        ox, oy, oth, ov = (float(view.state[i]) for i in range(4))
        rel_pos = np.array([ox - px, oy - py])
        rel_vel = vel - np.array([ov * math.cos(oth), ov * math.sin(oth)])
        dist_sq = float(np.dot(rel_pos, rel_pos))
        r = ego_body + view.spec.body_radius
        r_sq = r * r
        if dist_sq > r_sq:
            w = rel_vel - inv_tau * rel_pos
            w_len_sq = float(np.dot(w, w))
            dot1 = float(np.dot(w, rel_pos))
            if dot1 < 0.0 and dot1 * dot1 > r_sq * w_len_sq:
                w_len = math.sqrt(w_len_sq)
                unit_w = w / w_len
                direction = np.array([unit_w[1], -unit_w[0]])
                u = (r * inv_tau - w_len) * unit_w
            else:
                leg = math.sqrt(dist_sq - r_sq)
                if _det(rel_pos, w) > 0.0:
                    direction = np.array(
                        [rel_pos[0] * leg - rel_pos[1] * r, rel_pos[0] * r + rel_pos[1] * leg]
                    ) / dist_sq
                else:
                    direction = -np.array(
                        [rel_pos[0] * leg + rel_pos[1] * r, -rel_pos[0] * r + rel_pos[1] * leg]
                    ) / dist_sq
                dot2 = float(np.dot(rel_vel, direction))
                u = dot2 * direction - rel_vel
        else:
            # already overlapping: resolve within one step
            inv_step = 1.0 / ts
            w = rel_vel - inv_step * rel_pos
            w_len = float(np.linalg.norm(w))
            if w_len < 1e-12:
                unit_w = np.array([1.0, 0.0])
                w_len = 0.0
            else:
                unit_w = w / w_len
            direction = np.array([unit_w[1], -unit_w[0]])
            u = (r * inv_step - w_len) * unit_w
        lines.append(_Line(point=vel + 0.5 * u, direction=direction))
    return lines


def _nearest_index(X: np.ndarray, px: float, py: float) -> int:
    d = np.hypot(X[:, 0] - px, X[:, 1] - py)
    return int(np.argmin(d))


def _reference_target(reference: Solution, px: float, py: float, lookahead: float) -> np.ndarray:
    X = reference.X
    k = _nearest_index(X, px, py)
    acc = 0.0
    while k + 1 < X.shape[0] and acc < lookahead:
        acc += math.hypot(X[k + 1, 0] - X[k, 0], X[k + 1, 1] - X[k, 1])
        k += 1
    return X[k, :2].copy()


def preferred_velocity(
    reference: Solution, state: np.ndarray, goal: Point2, v_max: float, params: OrcaParams
) -> np.ndarray:
    """Velocity toward a lookahead point on the reference, cruising below
    v_max and tapering near the goal."""
    px, py = float(state[0]), float(state[1])
    target = _reference_target(reference, px, py, params.lookahead)
    to_t = target - np.array([px, py])
    dist_t = float(np.linalg.norm(to_t))
    dist_goal = math.hypot(goal.x - px, goal.y - py)
    speed = min(params.cruise_frac * v_max, dist_goal)
    if dist_t < 1e-9:
        to_g = np.array([goal.x - px, goal.y - py])
        if dist_goal < 1e-9:
            return np.zeros(2)
        return to_g / dist_goal * speed
    return to_t / dist_t * speed


def velocity_tracking_control(state: np.ndarray, v_des: np.ndarray, limits: Limits, k_v: float, k_theta: float) -> ControlInput:
    """Map a desired planar velocity onto (a, w) with proportional speed and
    heading feedback, clamped to the control box."""
    th, v = float(state[2]), float(state[3])
    speed_des = float(np.linalg.norm(v_des))
    if speed_des < 1e-9:
        a = k_v * (0.0 - v)
        w = 0.0
    else:
        th_des = math.atan2(v_des[1], v_des[0])
        err = wrap_angle(th_des - th)
        a = k_v * (speed_des * math.cos(err) - v)
        w = k_theta * err
    a = max(limits.a_min, min(limits.a_max, a))
    w = max(limits.w_min, min(limits.w_max, w))
    return ControlInput(a, w)


def orca_plan(
    ego_spec: AgentSpec,
    ego_state: np.ndarray,
    visible: Sequence[AgentView],
    reference: Solution,
    params: Optional[OrcaParams] = None,
    ts: float = 0.1,
) -> ControlInput:
    """Reciprocal collision avoidance around the reference tracker: clip the
    preferred velocity against one half-plane per visible agent, fall back to
    least penetration when the program is infeasible."""
    params = params or OrcaParams()
    ego_state = np.asarray(ego_state, dtype=float).reshape(4)
    v_max = ego_spec.limits.v_max
    pref = preferred_velocity(reference, ego_state, ego_spec.goal, v_max, params)
    lines = _orca_lines(ego_state, ego_spec.body_radius, visible, params.tau, ts)
    chosen = np.zeros(2)
    fail = _lp2(lines, v_max, pref, False, chosen)
    if fail < len(lines):
        _lp3(lines, fail, v_max, chosen)
    return velocity_tracking_control(ego_state, chosen, ego_spec.limits, params.k_v, params.k_theta)


def blind_plan(
    ego_spec: AgentSpec,
    ego_state: np.ndarray,
    world: Optional[Scenario],
    reference: Solution,
    params: Optional[OrcaParams] = None,
) -> ControlInput:
    """Track the single-agent reference and ignore everyone."""
    params = params or OrcaParams()
    ego_state = np.asarray(ego_state, dtype=float).reshape(4)
    pref = preferred_velocity(reference, ego_state, ego_spec.goal, ego_spec.limits.v_max, params)
    return velocity_tracking_control(ego_state, pref, ego_spec.limits, params.k_v, params.k_theta)


# ---------------------------------------------------------------------------
# parameter sampling and engine-facing planner shells

PARAM_RANGES = {
    "safety_radius": (1.2, 2.0),
    "D": (30.0, 50.0),
    "B": (8.0, 12.0),
    "v_max": (1.0, 1.5),
}


def sample_parameters(rng: np.random.Generator) -> dict:
    """Draw per-agent parameters (fixed draw order keeps batches seedable)."""
    r = rng.uniform(*PARAM_RANGES["safety_radius"])
    d = rng.uniform(*PARAM_RANGES["D"])
    b = rng.uniform(*PARAM_RANGES["B"])
    v_max = rng.uniform(*PARAM_RANGES["v_max"])
    return {"safety_radius": r, "D": d, "B": b, "v_max": v_max}


def make_agent_spec(
    agent_id: int,
    kind: str,
    goal: Point2,
    rng: Optional[np.random.Generator] = None,
    randomize: bool = True,
    body_radius: float = 0.3,
) -> AgentSpec:
    if randomize and rng is not None:
        p = sample_parameters(rng)
        weights = CostWeights(D=p["D"], B=p["B"])
        limits = Limits(v_max=p["v_max"])
        r = p["safety_radius"]
    else:
        weights = CostWeights()
        limits = Limits()
        r = 1.5
    return AgentSpec(
        id=agent_id,
        kind=kind,
        goal=goal,
        weights=weights,
        safety_radius=r,
        body_radius=body_radius,
        limits=limits,
    )


class IPGPlanner:
    """Stateful shell around ipg_plan for the engine loop."""

    kind = "ipg"

    def __init__(self, spec: AgentSpec, config: Optional[IPGConfig] = None, ts: float = 0.1):
        self.spec = spec
        self.config = config or IPGConfig()
        self.memory = IPGMemory()
        # stagger detection windows by id so symmetric jams never produce
        # simultaneous resolutions; a pair detecting in the same step rolls
        # into double-yield standoffs no observable state can untangle
        self.memory.window = DEADLOCK_WINDOW + 7 * (int(spec.id) % 3)
        self.ts = ts
        self.parked = False
        self._yield_to: set = set()

    def plan(self, ego: AgentView, all_agents: Sequence[AgentView], world, rng) -> PlannerOutput:
        visible = observe(ego, all_agents, world, self.config.observation)
        state = np.asarray(ego.state, dtype=float).reshape(4)
        others = [v for v in all_agents if v.spec.id != self.spec.id]
        if self._hold_station(state, others):
            self.memory.last_event = {"deadlock": False, "resolution": None}
            return PlannerOutput(
                control=_emergency_stop(state, self.spec.limits, self.ts),
                own_plan=np.tile(state, (2, 1)),
                imagined={},
                diagnostic="parked",
            )
        if self._yield_to:
            # the courtesy must survive the contender slipping out of the
            # sight cone mid-shuffle, or the plan reverts to reclaiming the
            # spot the moment the turn hides them
            have = {v.spec.id for v in visible}
            extra = [v for v in others if v.spec.id in self._yield_to and v.spec.id not in have]
            if extra:
                visible = list(visible) + extra
        return ipg_plan(
            self.spec,
            ego.state,
            visible,
            world,
            self.memory,
            rng,
            config=self.config,
            ego_goal_state=ego.goal_state,
            ts=self.ts,
        )

    def _hold_station(self, state: np.ndarray, others: Sequence[AgentView]) -> bool:
        """Park once arrived; give the spot back up if a contender needs it.

        An agent that keeps optimizing after arrival gets dragged into courtesy
        dances by anyone passing nearby, leaves with a corrupted heading, and at
        these goal weights a turn within a couple of meters never pays for
        itself again. Holding station also makes the imagined games of others
        accurate for free: a parked agent really does stay put. The exception
        is an agent whose own goal lies inside the parked footprint -- sitting
        on it would starve them, so when they come in to land (or stall against
        the parked body trying) the game resumes and the normal courtesy
        shuffle plays out. Contention reads the full roster, not the sight
        cone: goals are public, and an arrival from behind must not be
        invisible to politeness.
        """
        tol = self.config.goal_tolerance
        if not self.config.park_at_goal:
            return False
        if self._yield_to:
            keep = set()
            for v in others:
                if v.spec.id not in self._yield_to:
                    continue
                goal_dist = math.hypot(
                    float(v.state[0]) - float(v.spec.goal.x),
                    float(v.state[1]) - float(v.spec.goal.y),
                )
                gap = math.hypot(float(v.state[0]) - state[0], float(v.state[1]) - state[1])
                if goal_dist > tol and gap < 1.5 * DETECT_RANGE:
                    keep.add(v.spec.id)
            self._yield_to = keep
        dist = math.hypot(state[0] - self.spec.goal.x, state[1] - self.spec.goal.y)
        if not self.parked and dist <= tol and abs(float(state[3])) <= 0.3:
            self.parked = True
        if not self.parked:
            return False
        blocked = self.spec.safety_radius + tol
        contenders = set()
        for v in others:
            if math.hypot(float(v.spec.goal.x) - state[0], float(v.spec.goal.y) - state[1]) >= blocked:
                continue
            if math.hypot(float(v.state[0]) - state[0], float(v.state[1]) - state[1]) >= DETECT_RANGE:
                continue
            goal_dist = math.hypot(
                float(v.state[0]) - float(v.spec.goal.x),
                float(v.state[1]) - float(v.spec.goal.y),
            )
            # "arriving" is the final meter, or pinned dead against the parked
            # body from farther out (a big safety radius can hold the hover
            # outside the one-meter mark). The pinned test needs a near-zero
            # speed: a knot drifting past at a crawl is not a lander, and
            # ceding to it restarts the dance this parking exists to end
            if tol < goal_dist and (
                goal_dist < 1.0
                or (goal_dist < 2.0 and abs(float(v.state[3])) < 2 * PARKED_SPEED)
            ):
                contenders.add(v.spec.id)
        if contenders:
            self._yield_to |= contenders
            self.parked = False
            # the game restarts from scratch: stale plans and half-counted
            # detector windows belong to the world before the pause
            self.memory.prev_solution = None
            self.memory.still_steps = 0
            self.memory.headon_steps = 0
            self.memory.retreat_steps = 0
            self.memory.free_steps = 0
            self.memory.prev_goal_dist = math.inf
            return False
        return True

    @property
    def d_safe(self) -> float:
        return self.memory.d_safe

    @property
    def last_event(self) -> dict:
        return dict(self.memory.last_event)


class _ReferencePlanner:
    """Shared scaffolding for the reference-tracking baselines."""

    def __init__(self, spec: AgentSpec, start: np.ndarray, world, horizon: int, ts: float = 0.1,
                 params: Optional[OrcaParams] = None, observation: Optional[ObservationModel] = None):
        self.spec = spec
        self.ts = ts
        self.params = params or OrcaParams()
        self.observation = observation or ObservationModel()
        player = PlayerSpec(
            goal=_bearing_goal_state(float(start[0]), float(start[1]), spec.goal),
            weights=spec.weights,
            safety_radius=spec.safety_radius,
            limits=spec.limits,
            body_radius=spec.body_radius,
        )
        self.reference = single_agent_reference(
            world, np.asarray(start, dtype=float), player.goal, player=player,
            horizon=horizon, ts=ts,
        )
        self.d_safe = 0.0
        self.last_event: dict = {}

    def _plan_window(self, state: np.ndarray, width: int = 31) -> np.ndarray:
        k = _nearest_index(self.reference.X, float(state[0]), float(state[1]))
        X = self.reference.X[k : k + width]
        if X.shape[0] < width:
            pad = np.tile(X[-1:], (width - X.shape[0], 1))
            X = np.vstack([X, pad])
        return X.copy()


class ORCAPlanner(_ReferencePlanner):
    kind = "orca"

    def plan(self, ego: AgentView, all_agents: Sequence[AgentView], world, rng) -> PlannerOutput:
        visible = observe(ego, all_agents, world, self.observation)
        control = orca_plan(self.spec, ego.state, visible, self.reference, self.params, self.ts)
        return PlannerOutput(control=control, own_plan=self._plan_window(ego.state), imagined={})


class BlindPlanner(_ReferencePlanner):
    kind = "blind"

    def plan(self, ego: AgentView, all_agents: Sequence[AgentView], world, rng) -> PlannerOutput:
        control = blind_plan(self.spec, ego.state, world, self.reference, self.params)
        return PlannerOutput(control=control, own_plan=self._plan_window(ego.state), imagined={})


def make_planner(
    spec: AgentSpec,
    start: np.ndarray,
    world,
    ipg_config: Optional[IPGConfig] = None,
    reference_horizon: int = 400,
    ts: float = 0.1,
):
    if spec.kind == "ipg":
        return IPGPlanner(spec, ipg_config, ts=ts)
    if spec.kind == "orca":
        return ORCAPlanner(spec, start, world, reference_horizon, ts=ts)
    if spec.kind == "blind":
        return BlindPlanner(spec, start, world, reference_horizon, ts=ts)
    raise ValueError(f"no embedded planner for kind {spec.kind!r}")
