"""Command line front end: episode runs, batch tables, the env server, and reports."""
from __future__ import annotations

import argparse
import errno
import json
import os
import sys
from typing import Optional

import numpy as np

from .agents import AgentSpec, IPGConfig, make_agent_spec
from .costs import CostWeights
from .dynamics import Limits
from .engine import (
    SimConfig,
    compute_metrics,
    evaluate_batch,
    read_episode_jsonl,
    run_episode,
    solo_references,
    write_episode_jsonl,
)
from .env import EnvConfig, RewardConfig
from .geometry import Point2, Scenario, build_scenario, sample_config
from .plotting import render_figures, series_from_episode, write_series_csv

EXIT_OK = 0
EXIT_BAD_MANIFEST = 2
EXIT_PORT_IN_USE = 3


class ManifestError(ValueError):
    """Carries the manifest location that failed, for actionable messages."""

    def __init__(self, where: str, problem: str):
        super().__init__(f"{where}: {problem}")


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ManifestError(where, f"missing required field {key!r}")
    return d[key]


def load_manifest(path: str) -> dict:
    try:
        with open(path) as fh:
            m = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(path, "file not found") from None
    except json.JSONDecodeError as e:
        raise ManifestError(path, f"not valid JSON ({e})") from None
    if not isinstance(m, dict):
        raise ManifestError(path, "manifest must be a JSON object")
    return m


def _world_from(m: dict, where: str) -> Scenario:
    sc = m.get("scenario", "hallway")
    if isinstance(sc, str) and sc.endswith(".json"):
        try:
            return Scenario.load(sc)
        except Exception as e:
            raise ManifestError(f"{where}.scenario", f"cannot load {sc!r}: {e}") from None
    try:
        return build_scenario(sc, m.get("variant", "standard"))
    except Exception as e:
        raise ManifestError(f"{where}.scenario", str(e)) from None


def _spec_from_entry(i: int, entry: dict, where: str) -> AgentSpec:
    kind = _require(entry, "kind", f"{where}.kind")
    goal = _require(entry, "goal", f"{where}.goal")
    if not (isinstance(goal, (list, tuple)) and len(goal) == 2):
        raise ManifestError(f"{where}.goal", "expected [x, y]")
    weights = CostWeights(D=float(entry.get("D", 40.0)), B=float(entry.get("B", 10.0)))
    limits = Limits(v_max=float(entry.get("v_max", 1.5)))
    return AgentSpec(
        id=i,
        kind=kind,
        goal=Point2(float(goal[0]), float(goal[1])),
        weights=weights,
        safety_radius=float(entry.get("safety_radius", 1.5)),
        body_radius=float(entry.get("body_radius", 0.3)),
        limits=limits,
    )


def _episode_from_manifest(m: dict, path: str):
    world = _world_from(m, path)
    sim = m.get("sim", {})
    config = SimConfig(
        ts=float(sim.get("ts", 0.1)),
        max_steps=int(sim.get("max_steps", 400)),
        goal_tolerance=float(sim.get("goal_tolerance", 0.3)),
        seed=int(m.get("seed", sim.get("seed", 0))),
    )
    agents = _require(m, "agents", path)
    if not isinstance(agents, list) or not agents:
        raise ManifestError(f"{path}.agents", "expected a non-empty list")

    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 999)))
    explicit = all("start" in a for a in agents)
    if explicit:
        starts, specs = [], []
        for i, entry in enumerate(agents):
            where = f"{path}.agents[{i}]"
            start = _require(entry, "start", where)
            if not (isinstance(start, (list, tuple)) and len(start) == 4):
                raise ManifestError(f"{where}.start", "expected [x, y, theta, v]")
            starts.append(np.asarray(start, dtype=float))
            specs.append(_spec_from_entry(i, entry, where))
    else:
        drawn = sample_config(world, len(agents), rng)
        starts = [d[0] for d in drawn]
        specs = []
        for i, entry in enumerate(agents):
            where = f"{path}.agents[{i}]"
            kind = _require(entry, "kind", f"{where}.kind")
            specs.append(
                make_agent_spec(i, kind, drawn[i][1], rng=rng,
                                randomize=bool(entry.get("randomize", True)))
            )
    return world, specs, starts, config


def _env_config_from(m: dict, path: str) -> EnvConfig:
    agents = m.get("agents")
    if agents:
        kinds = tuple(_require(a, "kind", f"{path}.agents[{i}]") for i, a in enumerate(agents))
    else:
        kinds = tuple(m.get("kinds", ("external", "ipg")))
    rnd = m.get("randomize", {})
    reward = m.get("reward", {})
    try:
        return EnvConfig(
            scenario=m.get("scenario", "hallway"),
            variant=m.get("variant", "standard"),
            kinds=kinds,
            randomize_params=bool(rnd.get("params", True)),
            randomize_layout=bool(rnd.get("layout", True)),
            randomize_kinds=bool(rnd.get("kinds", False)),
            fixed_config=m.get("fixed_config"),
            seed=int(m.get("seed", 0)),
            ts=float(m.get("sim", {}).get("ts", 0.1)),
            max_steps=int(m.get("sim", {}).get("max_steps", 400)),
            goal_tolerance=float(m.get("sim", {}).get("goal_tolerance", 0.3)),
            reward=RewardConfig(**reward) if reward else RewardConfig(),
        )
    except (TypeError, ValueError) as e:
        raise ManifestError(path, str(e)) from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    m = load_manifest(args.manifest)
    world, specs, starts, config = _episode_from_manifest(m, args.manifest)
    scenario_tag = m.get("scenario", "hallway")
    if m.get("variant", "standard") != "standard":
        scenario_tag = f"{scenario_tag}:{m['variant']}"
    log = run_episode(world, specs, starts, config, scenario_name=scenario_tag)
    if args.metrics or m.get("metrics"):
        refs = solo_references(world, specs, starts, config)
        log.metrics = compute_metrics(log, config, world, references=refs)
    else:
        log.metrics = compute_metrics(log, config, world)
    out = args.out or m.get("out", "episode.jsonl")
    write_episode_jsonl(log, config, out, include_plans=args.include_plans)
    print(f"outcome={log.outcome} steps={len(log.records)} -> {out}")
    if args.plots:
        os.makedirs(args.plots, exist_ok=True)
        series = series_from_episode(read_episode_jsonl(out))
        csv_path = os.path.join(args.plots, "episode_series.csv")
        write_series_csv(series, csv_path)
        for p in render_figures(series, args.plots):
            print(f"wrote {p}")
        print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    kinds = [k.strip() for k in args.agents.split(",") if k.strip()]
    if not kinds:
        print("error: --agents must name at least one planner", file=sys.stderr)
        return EXIT_BAD_MANIFEST
    result = evaluate_batch(
        args.scenario,
        args.n,
        kinds,
        base_seed=args.seed,
        randomize=not args.no_randomize,
        with_metrics=args.metrics,
    )
    c = result["counts"]
    print(f"{args.scenario} agents={','.join(kinds)} n={args.n} seed={args.seed}")
    print(f"Success {c['success']}/{args.n}  Collision {c['collision']}  Timeout {c['timeout']}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(result, fh, indent=1)
        print(f"wrote {args.out}")
    if args.csv:
        import csv as _csv
        with open(args.csv, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["scenario", "kinds", "seed", "outcome", "steps"])
            for ep in result["episodes"]:
                w.writerow([args.scenario, "+".join(kinds), ep["seed"], ep["outcome"], ep["steps"]])
        print(f"wrote {args.csv}")
    return EXIT_OK


def cmd_serve_env(args) -> int:
    from .protocol import serve_stdio, serve_tcp

    if args.manifest:
        config = _env_config_from(load_manifest(args.manifest), args.manifest)
    else:
        kinds = tuple(k.strip() for k in args.agents.split(",") if k.strip())
        config = EnvConfig(scenario=args.scenario, variant=args.variant,
                           kinds=kinds, seed=args.seed)
    if args.port is None:
        serve_stdio(config)
        return EXIT_OK
    try:
        server = serve_tcp(config, host=args.host, port=args.port)
    except OSError as e:
        if e.errno == errno.EADDRINUSE:
            print(f"error: port {args.port} already in use", file=sys.stderr)
            return EXIT_PORT_IN_USE
        raise
    print(f"serving on {args.host}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_sample_configs(args) -> int:
    world = build_scenario(args.scenario, args.variant)
    rows = []
    for e in range(args.n):
        seed = args.seed + e
        rng = np.random.default_rng(np.random.SeedSequence((seed, 999)))
        drawn = sample_config(world, args.agents, rng)
        rows.append({
            "seed": seed,
            "agents": [
                {"start": [round(float(v), 6) for v in s], "goal": [g.x, g.y]}
                for s, g in drawn
            ],
        })
    text = "\n".join(json.dumps(r) for r in rows) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_plot(args) -> int:
    episode = read_episode_jsonl(args.episode)
    series = series_from_episode(episode)
    os.makedirs(args.outdir, exist_ok=True)
    csv_path = os.path.join(args.outdir, f"{args.stem}_series.csv")
    write_series_csv(series, csv_path)
    written = render_figures(series, args.outdir, stem=args.stem)
    for p in written:
        print(f"wrote {p}")
    print(f"wrote {csv_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ipgsim", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("simulate", help="run one episode from a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", default=None, help="episode file path (overrides manifest)")
    s.add_argument("--plots", default=None, help="directory for figures + series table")
    s.add_argument("--include-plans", action="store_true")
    s.add_argument("--metrics", action="store_true", help="include solo-reference extra time")
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("evaluate", help="seeded batch: Success/Collision/Timeout table")
    s.add_argument("--scenario", default="hallway")
    s.add_argument("--variant", default="standard")
    s.add_argument("--agents", default="ipg,ipg", help="comma separated planner kinds")
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None, help="JSON results file")
    s.add_argument("--csv", default=None, help="per-episode CSV rows")
    s.add_argument("--metrics", action="store_true")
    s.add_argument("--no-randomize", action="store_true")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("serve-env", help="speak the line protocol on stdio or TCP")
    s.add_argument("--manifest", default=None)
    s.add_argument("--scenario", default="hallway")
    s.add_argument("--variant", default="standard")
    s.add_argument("--agents", default="external,ipg")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--port", type=int, default=None)
    s.add_argument("--host", default="127.0.0.1")
    s.set_defaults(fn=cmd_serve_env)

    s = sub.add_parser("sample-configs", help="emit seeded start/goal draws")
    s.add_argument("--scenario", default="hallway")
    s.add_argument("--variant", default="standard")
    s.add_argument("--agents", type=int, default=2)
    s.add_argument("--n", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_sample_configs)

    s = sub.add_parser("plot", help="episode file to figures + delimited series")
    s.add_argument("--episode", required=True)
    s.add_argument("--outdir", default="plots")
    s.add_argument("--stem", default="episode")
    s.set_defaults(fn=cmd_plot)
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ManifestError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_MANIFEST


if __name__ == "__main__":
    sys.exit(main())
