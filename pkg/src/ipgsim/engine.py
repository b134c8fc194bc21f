"""Closed-loop episode execution: lockstep stepping, outcome classification, metrics, batches."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .agents import (
    AgentSpec,
    AgentView,
    IPGConfig,
    PlannerOutput,
    _bearing_goal_state,
    make_agent_spec,
    make_planner,
)
from .costs import PlayerSpec
from .dynamics import step as dynamics_step
from .geometry import Point2, Scenario, build_scenario, sample_config
from .solver import Solution, single_agent_reference


@dataclass(frozen=True)
class SimConfig:
    ts: float = 0.1
    max_steps: int = 400
    goal_tolerance: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.ts <= 0:
            raise ValueError("ts must be positive")


@dataclass
class StepRecord:
    """One planning step: the joint state the planners saw and what they did."""

    k: int
    states: np.ndarray  # (n, 4) before the step
    controls: np.ndarray  # (n, 2) executed
    plans: List[np.ndarray]  # per agent, own predicted trajectory
    imagined: List[Dict[int, np.ndarray]]  # per agent, other id -> trajectory
    d_safe: np.ndarray  # (n,)
    deadlock: List[bool]
    resolution: List[Optional[str]]

    def __post_init__(self):
        n = self.states.shape[0]
        if not (
            self.controls.shape[0] == n
            and len(self.plans) == n
            and len(self.imagined) == n
            and self.d_safe.shape[0] == n
            and len(self.deadlock) == n
            and len(self.resolution) == n
        ):
            raise ValueError("inconsistent agent count in step record")


@dataclass
class EpisodeLog:
    scenario: str
    specs: List[AgentSpec]
    records: List[StepRecord] = field(default_factory=list)
    final_states: Optional[np.ndarray] = None  # (n, 4) after the last advance
    outcome: Optional[str] = None  # set exactly once, at termination
    metrics: dict = field(default_factory=dict)
    diagnostic: str = ""

    def all_states(self) -> np.ndarray:
        """(K+1, n, 4) stack of every joint state the episode visited."""
        states = [r.states for r in self.records]
        if self.final_states is not None:
            states.append(self.final_states)
        return np.stack(states, axis=0)


def _collision_step(states: np.ndarray, specs: Sequence[AgentSpec], world: Scenario) -> bool:
    n = states.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            d = math.hypot(
                states[i, 0] - states[j, 0], states[i, 1] - states[j, 1]
            )
            if d < specs[i].body_radius + specs[j].body_radius:
                return True
    for i in range(n):
        if world.min_clearance(Point2(states[i, 0], states[i, 1])) < specs[i].body_radius:
            return True
    return False


def classify_outcome(log: EpisodeLog, config: SimConfig, world: Scenario) -> str:
    """Pure function of the log: collision beats success beats timeout.

    Success requires every agent to have been within tolerance of its goal at
    some visited state; an agent may touch and drift.
    """
    states = log.all_states()
    specs = log.specs
    for k in range(states.shape[0]):
        if _collision_step(states[k], specs, world):
            return "collision"
    for i, spec in enumerate(specs):
        d = np.hypot(states[:, i, 0] - spec.goal.x, states[:, i, 1] - spec.goal.y)
        if not bool((d <= config.goal_tolerance).any()):
            return "timeout"
    return "success"


def run_episode(
    world: Scenario,
    specs: Sequence[AgentSpec],
    starts: Sequence[np.ndarray],
    config: Optional[SimConfig] = None,
    ipg_config: Optional[IPGConfig] = None,
    scenario_name: str = "",
) -> EpisodeLog:
    """Run one closed-loop episode to termination.

    Every planner plans against the frozen previous joint state, then all
    states advance at once; no agent sees a same-step move of another. A
    planner that raises terminates the episode with a diagnostic.
    """
    config = config or SimConfig()
    n = len(specs)
    if len(starts) != n:
        raise ValueError("starts and specs must align")
    states = np.stack([np.asarray(s, dtype=float).reshape(4) for s in starts])
    if _collision_step(states, specs, world):
        raise ValueError("starts are not collision-free")

    planners = [
        make_planner(specs[i], states[i], world, ipg_config=ipg_config, ts=config.ts)
        for i in range(n)
    ]
    rngs = [
        np.random.default_rng(np.random.SeedSequence((config.seed, i))) for i in range(n)
    ]
    log = EpisodeLog(scenario=scenario_name, specs=list(specs))
    touched = [
        math.hypot(states[i, 0] - specs[i].goal.x, states[i, 1] - specs[i].goal.y)
        <= config.goal_tolerance
        for i in range(n)
    ]

    for k in range(config.max_steps):
        views = [
            AgentView(
                spec=specs[i],
                state=states[i].copy(),
                goal_state=_bearing_goal_state(states[i, 0], states[i, 1], specs[i].goal),
            )
            for i in range(n)
        ]
        outputs: List[PlannerOutput] = []
        try:
            for i in range(n):
                outputs.append(planners[i].plan(views[i], views, world, rngs[i]))
        except Exception as exc:  # noqa: BLE001 - planner failure is an episode outcome
            log.final_states = states.copy()
            log.diagnostic = f"planner {len(outputs)} failed at step {k}: {exc!r}"
            log.outcome = "timeout"
            return log

        controls = np.stack(
            [specs[i].limits.clamp_control(outputs[i].control.as_array()) for i in range(n)]
        )
        events = [getattr(planners[i], "last_event", {}) or {} for i in range(n)]
        log.records.append(
            StepRecord(
                k=k,
                states=states.copy(),
                controls=controls.copy(),
                plans=[outputs[i].own_plan for i in range(n)],
                imagined=[outputs[i].imagined for i in range(n)],
                d_safe=np.array([float(getattr(planners[i], "d_safe", 0.0)) for i in range(n)]),
                deadlock=[bool(ev.get("deadlock", False)) for ev in events],
                resolution=[ev.get("resolution") for ev in events],
            )
        )
        states = np.stack(
            [np.asarray(dynamics_step(states[i], controls[i], config.ts), dtype=float) for i in range(n)]
        )
        for i in range(n):
            if (
                math.hypot(states[i, 0] - specs[i].goal.x, states[i, 1] - specs[i].goal.y)
                <= config.goal_tolerance
            ):
                touched[i] = True
        if _collision_step(states, specs, world) or all(touched):
            break

    log.final_states = states.copy()
    log.outcome = classify_outcome(log, config, world)
    return log


# ---------------------------------------------------------------------------
# metrics


_UNREACHED = math.inf


def _first_touch(states: np.ndarray, spec: AgentSpec, tol: float) -> Optional[int]:
    d = np.hypot(states[:, 0] - spec.goal.x, states[:, 1] - spec.goal.y)
    hits = np.nonzero(d <= tol)[0]
    return int(hits[0]) if hits.size else None


def reference_time(reference: Solution, goal: Point2, tol: float, ts: float) -> float:
    d = np.hypot(reference.X[:, 0] - goal.x, reference.X[:, 1] - goal.y)
    hits = np.nonzero(d <= tol)[0]
    return float(hits[0]) * ts if hits.size else _UNREACHED


def compute_metrics(
    log: EpisodeLog,
    config: SimConfig,
    world: Scenario,
    references: Optional[Sequence[Solution]] = None,
) -> dict:
    """Per-agent time to goal, extra time over the solo reference, path length,
    and worst clearances. Unreached goals report an infinite time and omit the
    extra-time entry."""
    states = log.all_states()
    n = len(log.specs)
    per_agent = []
    for i, spec in enumerate(log.specs):
        traj = states[:, i, :]
        touch = _first_touch(traj, spec, config.goal_tolerance)
        t_goal = _UNREACHED if touch is None else touch * config.ts
        seg = np.hypot(np.diff(traj[:, 0]), np.diff(traj[:, 1]))
        min_obs = min(
            world.min_clearance(Point2(float(x), float(y))) - spec.body_radius
            for x, y in traj[:, :2]
        )
        entry = {
            "time_to_goal": t_goal,
            "path_length": float(seg.sum()),
            "min_obstacle_clearance": float(min_obs),
        }
        if references is not None and touch is not None:
            t_ref = reference_time(references[i], spec.goal, config.goal_tolerance, config.ts)
            if math.isfinite(t_ref):
                entry["extra_time"] = t_goal - t_ref
        per_agent.append(entry)

    min_gap = _UNREACHED
    for i in range(n):
        for j in range(i + 1, n):
            d = np.hypot(states[:, i, 0] - states[:, j, 0], states[:, i, 1] - states[:, j, 1])
            gap = float(d.min()) - log.specs[i].body_radius - log.specs[j].body_radius
            min_gap = min(min_gap, gap)
    return {
        "agents": per_agent,
        "min_inter_agent_clearance": None if n < 2 else min_gap,
        "steps": len(log.records),
    }


def solo_references(
    world: Scenario,
    specs: Sequence[AgentSpec],
    starts: Sequence[np.ndarray],
    config: SimConfig,
) -> List[Solution]:
    """Single-agent trajectories used as the no-interaction baseline."""
    refs = []
    for spec, start in zip(specs, starts):
        goal_state = _bearing_goal_state(float(start[0]), float(start[1]), spec.goal)
        player = PlayerSpec(
            goal=goal_state,
            weights=spec.weights,
            safety_radius=spec.safety_radius,
            limits=spec.limits,
            body_radius=spec.body_radius,
        )
        refs.append(
            single_agent_reference(
                world,
                np.asarray(start, dtype=float),
                goal_state,
                player=player,
                horizon=config.max_steps,
                ts=config.ts,
            )
        )
    return refs


# ---------------------------------------------------------------------------
# batches


def evaluate_batch(
    scenario: str,
    n_configs: int,
    kinds: Sequence[str],
    base_seed: int = 0,
    config: Optional[SimConfig] = None,
    ipg_config: Optional[IPGConfig] = None,
    randomize: bool = True,
    with_metrics: bool = False,
) -> dict:
    """Seeded batch over sampled configs: Success/Collision/Timeout counts.

    Episode e uses seed base_seed + e for both its config draw and its
    planners, so tables rerun byte-identically.
    """
    if n_configs < 1:
        raise ValueError("n_configs must be >= 1")
    world = build_scenario(scenario)
    counts = {"success": 0, "collision": 0, "timeout": 0}
    episodes = []
    for e in range(n_configs):
        seed = base_seed + e
        rng = np.random.default_rng(np.random.SeedSequence((seed, 999)))
        drawn = sample_config(world, len(kinds), rng)
        starts = [d[0] for d in drawn]
        specs = [
            make_agent_spec(i, kinds[i], drawn[i][1], rng=rng, randomize=randomize)
            for i in range(len(kinds))
        ]
        cfg = SimConfig(
            ts=(config or SimConfig()).ts,
            max_steps=(config or SimConfig()).max_steps,
            goal_tolerance=(config or SimConfig()).goal_tolerance,
            seed=seed,
        )
        log = run_episode(world, specs, starts, cfg, ipg_config, scenario_name=scenario)
        counts[log.outcome] += 1
        entry = {"seed": seed, "outcome": log.outcome, "steps": len(log.records)}
        if with_metrics:
            entry["metrics"] = compute_metrics(log, cfg, world)
        episodes.append(entry)
    return {"scenario": scenario, "kinds": list(kinds), "counts": counts, "episodes": episodes}


# ---------------------------------------------------------------------------
# serialization: one JSON record per step plus header and footer


def _round_floats(x, nd=6):
    if isinstance(x, float):
        return None if not math.isfinite(x) else round(x, nd)
    if isinstance(x, dict):
        return {str(k): _round_floats(v, nd) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round_floats(v, nd) for v in x]
    if isinstance(x, np.ndarray):
        return _round_floats(x.tolist(), nd)
    if isinstance(x, (np.floating, np.integer)):
        return _round_floats(float(x), nd)
    return x


def _spec_dict(spec: AgentSpec) -> dict:
    return {
        "id": spec.id,
        "kind": spec.kind,
        "goal": [spec.goal.x, spec.goal.y],
        "safety_radius": spec.safety_radius,
        "body_radius": spec.body_radius,
        "v_max": spec.limits.v_max,
        "D": spec.weights.D,
        "B": spec.weights.B,
    }


def write_episode_jsonl(log: EpisodeLog, config: SimConfig, path: str, include_plans: bool = False):
    """Header record, one record per step, footer with outcome and metrics."""
    with open(path, "w") as fh:
        header = {
            "type": "header",
            "scenario": log.scenario,
            "ts": config.ts,
            "max_steps": config.max_steps,
            "goal_tolerance": config.goal_tolerance,
            "seed": config.seed,
            "agents": [_spec_dict(s) for s in log.specs],
        }
        fh.write(json.dumps(_round_floats(header)) + "\n")
        for rec in log.records:
            row = {
                "type": "step",
                "k": rec.k,
                "states": rec.states,
                "controls": rec.controls,
                "d_safe": rec.d_safe,
                "deadlock": rec.deadlock,
                "resolution": rec.resolution,
            }
            if include_plans:
                row["plans"] = [p for p in rec.plans]
                row["imagined"] = rec.imagined
            fh.write(json.dumps(_round_floats(row)) + "\n")
        footer = {
            "type": "footer",
            "outcome": log.outcome,
            "final_states": log.final_states,
            "metrics": log.metrics,
            "diagnostic": log.diagnostic,
        }
        fh.write(json.dumps(_round_floats(footer)) + "\n")


def read_episode_jsonl(path: str) -> dict:
    """Parse an episode file back into header / steps / footer dicts."""
    header = footer = None
    steps = []
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            if row["type"] == "header":
                header = row
            elif row["type"] == "step":
                steps.append(row)
            elif row["type"] == "footer":
                footer = row
    if header is None or footer is None:
        raise ValueError(f"{path} is not a complete episode file")
    return {"header": header, "steps": steps, "footer": footer}
