"""Reset/step environment with one externally driven agent among reactive planners.

The controlled agent receives a flat agent-centric observation and a dense
shaped reward; everyone else runs their embedded planner against the frozen
joint state, exactly as in the closed-loop engine.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .agents import (
    AgentSpec,
    AgentView,
    IPGConfig,
    ObservationModel,
    _bearing_goal_state,
    make_agent_spec,
    make_planner,
    observe,
)
from .dynamics import step as dynamics_step
from .geometry import Point2, Scenario, build_scenario, sample_config

N_AGENT_SLOTS = 3  # fixed observation layout: up to three visible agents
AGENT_SLOT_LEN = 14  # 13 relative terms + presence flag


class EnvError(RuntimeError):
    """Misuse of the reset/step contract (step before reset, step after done)."""


@dataclass(frozen=True)
class RewardConfig:
    terminal_bonus: float = 10.0
    collision_penalty: float = 10.0
    survival_floor: float = 0.01
    regress_floor: float = -1.0


@dataclass(frozen=True)
class EnvConfig:
    scenario: str = "hallway"
    variant: str = "standard"
    # exactly one slot must be "external"; the rest name embedded planners
    kinds: Tuple[str, ...] = ("external", "ipg")
    reactive_pool: Tuple[str, ...] = ("ipg",)
    randomize_kinds: bool = False
    randomize_params: bool = True
    randomize_layout: bool = True
    # used when randomize_layout is off: [(start 4-vector, goal xy), ...]
    fixed_config: Optional[tuple] = None
    scenario_pool: Tuple[str, ...] = ()
    seed: int = 0
    ts: float = 0.1
    max_steps: int = 400
    goal_tolerance: float = 0.3
    reward: RewardConfig = field(default_factory=RewardConfig)
    observation: ObservationModel = field(default_factory=ObservationModel)
    ipg: Optional[IPGConfig] = None

    def __post_init__(self):
        if list(self.kinds).count("external") != 1:
            raise ValueError("exactly one agent slot must be 'external'")
        if not self.randomize_layout and self.fixed_config is None:
            raise ValueError("fixed_config required when layout randomization is off")


@dataclass(frozen=True)
class Observation:
    vector: np.ndarray
    structured: dict

    def __len__(self):
        return self.vector.shape[0]


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    done: bool
    truncated: bool
    info: dict


def _wrap_angle(a: float) -> float:
    # wrapped to (-pi, pi]
    w = (a + math.pi) % (2.0 * math.pi) - math.pi
    return math.pi if w == -math.pi else w


def observation_length(world: Scenario) -> int:
    n_obs = len(world.rects) + len(world.circles)
    return 7 + N_AGENT_SLOTS * AGENT_SLOT_LEN + 4 + 4 * n_obs


def ego_block(state, goal_state) -> list:
    """(x_g-x, y_g-y, th_g-th, cos, sin, v_g, goal distance)."""
    x, y, th = float(state[0]), float(state[1]), float(state[2])
    gx, gy, gth, gv = (float(c) for c in np.asarray(goal_state, dtype=float).reshape(4))
    dth = _wrap_angle(gth - th)
    d = math.hypot(x - gx, y - gy)
    return [gx - x, gy - y, dth, math.cos(dth), math.sin(dth), gv, d]


def agent_block(state, goal_state, ref_state) -> list:
    """Observed-agent slot relative to the reference agent: current pose and
    goal pose offsets, wrapped heading differences, speeds, own goal distance,
    presence flag."""
    x, y, th = float(ref_state[0]), float(ref_state[1]), float(ref_state[2])
    ox, oy, oth, ov = (float(c) for c in np.asarray(state, dtype=float).reshape(4))
    gx, gy, gth, gv = (float(c) for c in np.asarray(goal_state, dtype=float).reshape(4))
    a1 = _wrap_angle(oth - th)
    a2 = _wrap_angle(gth - th)
    od = math.hypot(ox - gx, oy - gy)
    return [
        ox - x, oy - y, a1, math.cos(a1), math.sin(a1), ov,
        gx - x, gy - y, a2, math.cos(a2), math.sin(a2), gv, od, 1.0,
    ]


def boundary_block(x: float, y: float, boundary) -> list:
    return [x - boundary.x_min, x - boundary.x_max, y - boundary.y_min, y - boundary.y_max]


def rect_block(x: float, y: float, rect) -> list:
    cx, cy = rect.center.x, rect.center.y
    return [x - (cx + rect.width / 2.0), x - (cx - rect.width / 2.0),
            y - (cy + rect.height / 2.0), y - (cy - rect.height / 2.0)]


def circle_block(x: float, y: float, circle) -> list:
    # circles have no rectangle encoding; offsets plus surface distance
    dc = math.hypot(x - circle.center.x, y - circle.center.y)
    return [x - circle.center.x, y - circle.center.y, dc - circle.radius, circle.radius]


def encode_observation(
    states: np.ndarray,
    specs: Sequence[AgentSpec],
    world: Scenario,
    controlled: int,
    model: Optional[ObservationModel] = None,
    goal_states: Optional[Sequence[np.ndarray]] = None,
) -> Observation:
    """Flat agent-centric vector: ego block, three observed-agent slots,
    boundary block, one block per scenario obstacle.

    All positions are offsets from the controlled agent, all angles are
    differences from its heading wrapped to (-pi, pi]. Empty agent slots are
    zero with presence flag 0. Goal states default to the bearing-at-goal
    convention; pass goal_states (aligned with specs) to pin them.
    """
    model = model or ObservationModel()
    idx = next(i for i, s in enumerate(specs) if s.id == controlled)
    s = np.asarray(states[idx], dtype=float)
    x, y = float(s[0]), float(s[1])

    def goal_state_of(i):
        if goal_states is not None:
            return np.asarray(goal_states[i], dtype=float).reshape(4)
        return _bearing_goal_state(float(states[i][0]), float(states[i][1]), specs[i].goal)

    ego = ego_block(s, goal_state_of(idx))

    views = [
        AgentView(spec=specs[i], state=np.asarray(states[i], dtype=float),
                  goal_state=goal_state_of(i))
        for i in range(len(specs))
    ]
    visible = observe(views[idx], views, world, model)
    index_of = {spec.id: i for i, spec in enumerate(specs)}

    slots = []
    structured_agents = []
    for v in visible[:N_AGENT_SLOTS]:
        block = agent_block(v.state, goal_state_of(index_of[v.spec.id]), s)
        slots.append(block)
        structured_agents.append({"id": v.spec.id, "block": block})
    while len(slots) < N_AGENT_SLOTS:
        slots.append([0.0] * AGENT_SLOT_LEN)

    boundary = boundary_block(x, y, world.boundary)
    obstacles = [rect_block(x, y, r) for r in world.rects]
    obstacles += [circle_block(x, y, c) for c in world.circles]

    vec = np.array(ego + [t for slot in slots for t in slot] + boundary
                   + [t for blk in obstacles for t in blk], dtype=float)
    structured = {
        "ego": ego,
        "agents": structured_agents,
        "boundary": boundary,
        "obstacles": obstacles,
    }
    return Observation(vector=vec, structured=structured)


def compute_reward(
    prev_state: np.ndarray,
    curr_state: np.ndarray,
    action: np.ndarray,
    goal: Point2,
    events: dict,
    cfg: Optional[RewardConfig] = None,
) -> Tuple[float, dict]:
    """Squared-distance progress plus energy cost, floored while alive.

    Progress r_g is the decrease of squared goal distance; energy r_e is
    -(|a| + |w|). Alive steps making progress are floored at the survival
    reward so approach always beats standing still; regressing steps are
    bounded below so yielding is never catastrophic. Terminal events add
    their bonus/penalty on top. The breakdown sums to the reward exactly.
    """
    cfg = cfg or RewardConfig()
    p, c = np.asarray(prev_state, dtype=float), np.asarray(curr_state, dtype=float)
    # two identically shaped sums, so an unmoved agent gets an exact 0.0
    d2_prev = (float(p[0]) - goal.x) ** 2 + (float(p[1]) - goal.y) ** 2
    d2_curr = (float(c[0]) - goal.x) ** 2 + (float(c[1]) - goal.y) ** 2
    r_g = d2_prev - d2_curr
    a = np.asarray(action, dtype=float).reshape(2)
    r_e = -(abs(float(a[0])) + abs(float(a[1])))

    collided = bool(events.get("collision", False))
    reached = bool(events.get("goal", False)) and not collided
    if collided:
        floor_adj = 0.0  # not alive, no floor
        terminal = -cfg.collision_penalty
    else:
        base = r_g + r_e
        if r_g >= 0.0:
            floored = max(base, cfg.survival_floor)
        else:
            floored = max(base, cfg.regress_floor)
        floor_adj = floored - base
        terminal = cfg.terminal_bonus if reached else 0.0

    breakdown = {
        "goal_progress": r_g,
        "energy": r_e,
        "floor_adjustment": floor_adj,
        "terminal": terminal,
    }
    return r_g + r_e + floor_adj + terminal, breakdown


class NavEnv:
    """Single-controlled-agent environment over the lockstep planner loop.

    Strict reset/step sequencing; one instance per episode stream. Everything
    drawn at reset comes from the reset seed, so traces are reproducible.
    """

    def __init__(self, config: Optional[EnvConfig] = None):
        self.config = config or EnvConfig()
        self.world: Optional[Scenario] = None
        self._specs: List[AgentSpec] = []
        self._planners: dict = {}
        self._rngs: dict = {}
        self._states: Optional[np.ndarray] = None
        self._controlled = -1
        self._k = 0
        self._open = False

    # -- episode lifecycle ---------------------------------------------------

    def reset(self, seed: Optional[int] = None) -> Observation:
        cfg = self.config
        seed = cfg.seed if seed is None else int(seed)
        rng = np.random.default_rng(np.random.SeedSequence((seed, 999)))

        scenario_name = cfg.scenario
        if cfg.scenario_pool:
            scenario_name = cfg.scenario_pool[int(rng.integers(len(cfg.scenario_pool)))]
        self.world = build_scenario(scenario_name, cfg.variant)

        kinds = list(cfg.kinds)
        if cfg.randomize_kinds:
            kinds = [k if k == "external" else cfg.reactive_pool[int(rng.integers(len(cfg.reactive_pool)))]
                     for k in kinds]
        n = len(kinds)

        if cfg.randomize_layout:
            drawn = sample_config(self.world, n, rng)
        else:
            drawn = [(np.asarray(s, dtype=float).reshape(4), Point2(float(g[0]), float(g[1])))
                     for s, g in cfg.fixed_config]
            if len(drawn) != n:
                raise ValueError("fixed_config length must match kinds")
        starts = [d[0] for d in drawn]
        self._specs = [
            make_agent_spec(i, kinds[i], drawn[i][1], rng=rng, randomize=cfg.randomize_params)
            for i in range(n)
        ]
        self._controlled = kinds.index("external")
        self._states = np.stack(starts)
        self._planners = {
            i: make_planner(self._specs[i], starts[i], self.world, ipg_config=cfg.ipg, ts=cfg.ts)
            for i in range(n) if i != self._controlled
        }
        self._rngs = {
            i: np.random.default_rng(np.random.SeedSequence((seed, i)))
            for i in range(n) if i != self._controlled
        }
        self._k = 0
        self._open = True
        return self._observe()

    def step(self, action) -> StepResult:
        if not self._open:
            raise EnvError("step before reset or after episode end; call reset")
        cfg = self.config
        spec = self._specs[self._controlled]
        u_ext = spec.limits.clamp_control(np.asarray(action, dtype=float).reshape(2))

        states = self._states
        n = states.shape[0]
        views = [
            AgentView(spec=self._specs[i], state=states[i].copy(),
                      goal_state=_bearing_goal_state(states[i, 0], states[i, 1], self._specs[i].goal))
            for i in range(n)
        ]
        controls = np.zeros((n, 2))
        controls[self._controlled] = u_ext
        for i, planner in self._planners.items():
            out = planner.plan(views[i], views, self.world, self._rngs[i])
            controls[i] = self._specs[i].limits.clamp_control(out.control.as_array())

        prev = states.copy()
        self._states = np.stack(
            [np.asarray(dynamics_step(states[i], controls[i], cfg.ts), dtype=float) for i in range(n)]
        )
        self._k += 1

        me = self._controlled
        collided = self._controlled_collision()
        dist = math.hypot(self._states[me, 0] - spec.goal.x, self._states[me, 1] - spec.goal.y)
        reached = (not collided) and dist <= cfg.goal_tolerance

        events = {"collision": collided, "goal": reached}
        reward, breakdown = compute_reward(prev[me], self._states[me], u_ext, spec.goal, events, cfg.reward)

        done = collided or reached
        truncated = (not done) and self._k >= cfg.max_steps
        if done or truncated:
            self._open = False
        outcome = ("collision" if collided else "success" if reached
                   else "timeout" if truncated else None)
        info = {
            "outcome": outcome,
            "reward_breakdown": breakdown,
            "step": self._k,
            "goal_distance": dist,
            "reactive_collision": self._reactive_collision(),
        }
        return StepResult(self._observe(), reward, done, truncated, info)

    # -- internals -----------------------------------------------------------

    def _observe(self) -> Observation:
        return encode_observation(self._states, self._specs, self.world,
                                  self._specs[self._controlled].id, self.config.observation)

    def _controlled_collision(self) -> bool:
        me = self._controlled
        s = self._states
        for j in range(s.shape[0]):
            if j == me:
                continue
            d = math.hypot(s[me, 0] - s[j, 0], s[me, 1] - s[j, 1])
            if d < self._specs[me].body_radius + self._specs[j].body_radius:
                return True
        return self.world.min_clearance(Point2(float(s[me, 0]), float(s[me, 1]))) < self._specs[me].body_radius

    def _reactive_collision(self) -> bool:
        # contact among the embedded agents only; the episode keeps running
        s = self._states
        ids = [i for i in range(s.shape[0]) if i != self._controlled]
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                i, j = ids[a], ids[b]
                d = math.hypot(s[i, 0] - s[j, 0], s[i, 1] - s[j, 1])
                if d < self._specs[i].body_radius + self._specs[j].body_radius:
                    return True
        for i in ids:
            if self.world.min_clearance(Point2(float(s[i, 0]), float(s[i, 1]))) < self._specs[i].body_radius:
                return True
        return False

    # -- metadata ------------------------------------------------------------

    @property
    def action_bounds(self) -> Dict[str, float]:
        spec = self._specs[self._controlled] if self._specs else make_agent_spec(
            0, "external", Point2(0.0, 0.0), randomize=False)
        lim = spec.limits
        return {"a_min": lim.a_min, "a_max": lim.a_max, "w_min": lim.w_min, "w_max": lim.w_max}

    def scenario_meta(self) -> dict:
        world = self.world or build_scenario(self.config.scenario, self.config.variant)
        return {
            "scenario": world.name,
            "variant": world.variant,
            "n_agents": len(self.config.kinds),
            "n_obstacles": len(world.rects) + len(world.circles),
            "observation_length": observation_length(world),
            "max_steps": self.config.max_steps,
        }
