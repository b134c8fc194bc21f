"""Static environment model: obstacles, boundary, scenarios, and sampling zones.

Everything here is immutable after construction, so scenarios can be shared
freely between concurrently running planners.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_BODY_RADIUS = 0.3

BUILTIN_SCENARIOS = ("hallway", "t_intersection", "intersection", "u_turn")
VARIANTS = ("standard", "wide")

# corridor widths: standard admits one body abreast, wide admits two
CORRIDOR_WIDTH = {"standard": 1.0, "wide": 2.0}


class ScenarioError(ValueError):
    """Raised for unknown scenario names or geometry that violates invariants."""


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Circle:
    center: Point2
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("circle radius must be positive")


@dataclass(frozen=True)
class Rect:
    center: Point2
    width: float
    height: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("rect width/height must be positive")


Obstacle = Circle | Rect


@dataclass(frozen=True)
class Boundary:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("degenerate boundary")

    def contains(self, p: Point2, clearance: float = 0.0) -> bool:
        return (
            self.x_min + clearance <= p.x <= self.x_max - clearance
            and self.y_min + clearance <= p.y <= self.y_max - clearance
        )


@dataclass(frozen=True)
class Zone:
    center: Point2
    width: float
    height: float
    label: str

    def contains(self, p: Point2) -> bool:
        return (
            abs(p.x - self.center.x) <= self.width / 2
            and abs(p.y - self.center.y) <= self.height / 2
        )


def signed_distance(p: Point2 | np.ndarray, obs: Obstacle) -> float:
    """Signed distance from a point to an obstacle (negative = inside).

    Circles use the radial distance; rectangles use the axis-aligned box
    signed-distance function, which outside the box is the Euclidean norm of
    the per-axis excesses and inside is the negated minimum side clearance.
    Continuous everywhere.
    """
    px, py = (p.x, p.y) if isinstance(p, Point2) else (float(p[0]), float(p[1]))
    if isinstance(obs, Circle):
        return math.hypot(px - obs.center.x, py - obs.center.y) - obs.radius
    dx = abs(px - obs.center.x) - obs.width / 2
    dy = abs(py - obs.center.y) - obs.height / 2
    if dx > 0 or dy > 0:
        return math.hypot(max(dx, 0.0), max(dy, 0.0))
    return max(dx, dy)


def _segment_hits_circle(a: Point2, b: Point2, c: Circle) -> bool:
    # closest point on segment ab to the circle center
    ax, ay, bx, by = a.x, a.y, b.x, b.y
    dx, dy = bx - ax, by - ay
    seg_len2 = dx * dx + dy * dy
    if seg_len2 < 1e-18:
        return math.hypot(ax - c.center.x, ay - c.center.y) < c.radius
    t = ((c.center.x - ax) * dx + (c.center.y - ay) * dy) / seg_len2
    t = min(1.0, max(0.0, t))
    qx, qy = ax + t * dx, ay + t * dy
    return math.hypot(qx - c.center.x, qy - c.center.y) < c.radius - 1e-12


def _segment_hits_rect(a: Point2, b: Point2, r: Rect) -> bool:
    # slab clipping; blocked only if the clipped interval has positive length
    # (grazing a face or corner does not count as entering the interior)
    lo_x, hi_x = r.center.x - r.width / 2, r.center.x + r.width / 2
    lo_y, hi_y = r.center.y - r.height / 2, r.center.y + r.height / 2
    t0, t1 = 0.0, 1.0
    for p0, d, lo, hi in (
        (a.x, b.x - a.x, lo_x, hi_x),
        (a.y, b.y - a.y, lo_y, hi_y),
    ):
        if abs(d) < 1e-15:
            if p0 <= lo or p0 >= hi:
                return False
            continue
        ta, tb = (lo - p0) / d, (hi - p0) / d
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 >= t1:
            return False
    return t1 - t0 > 1e-12


def line_of_sight(a: Point2, b: Point2, obstacles: list[Obstacle]) -> bool:
    """True iff the segment a-b intersects no obstacle interior."""
    for obs in obstacles:
        if isinstance(obs, Circle):
            if _segment_hits_circle(a, b, obs):
                return False
        else:
            if _segment_hits_rect(a, b, obs):
                return False
    return True


@dataclass(frozen=True)
class Scenario:
    name: str
    variant: str
    boundary: Boundary
    obstacles: tuple[Obstacle, ...]
    zones: tuple[Zone, ...]
    corridor_width: float | None = None

    def __post_init__(self):
        for z in self.zones:
            half_w, half_h = z.width / 2, z.height / 2
            inside = (
                self.boundary.x_min <= z.center.x - half_w
                and z.center.x + half_w <= self.boundary.x_max
                and self.boundary.y_min <= z.center.y - half_h
                and z.center.y + half_h <= self.boundary.y_max
            )
            if not inside:
                raise ScenarioError(f"zone {z.label!r} extends outside the boundary")
            for obs in self.obstacles:
                if _zone_intersects(z, obs):
                    raise ScenarioError(f"zone {z.label!r} intersects an obstacle")

    @property
    def rects(self) -> list[Rect]:
        return [o for o in self.obstacles if isinstance(o, Rect)]

    @property
    def circles(self) -> list[Circle]:
        return [o for o in self.obstacles if isinstance(o, Circle)]

    def min_clearance(self, p: Point2) -> float:
        """Smallest clearance to any obstacle or boundary wall (negative = violating)."""
        c = min(
            p.x - self.boundary.x_min,
            self.boundary.x_max - p.x,
            p.y - self.boundary.y_min,
            self.boundary.y_max - p.y,
        )
        for obs in self.obstacles:
            c = min(c, signed_distance(p, obs))
        return c

    def zone_of(self, p: Point2) -> str | None:
        for z in self.zones:
            if z.contains(p):
                return z.label
        return None

    def to_dict(self) -> dict:
        obstacles = []
        for o in self.obstacles:
            if isinstance(o, Circle):
                obstacles.append(
                    {"type": "circle", "center": [o.center.x, o.center.y], "radius": o.radius}
                )
            else:
                obstacles.append(
                    {
                        "type": "rect",
                        "center": [o.center.x, o.center.y],
                        "w": o.width,
                        "h": o.height,
                    }
                )
        return {
            "name": self.name,
            "variant": self.variant,
            "boundary": {
                "x_min": self.boundary.x_min,
                "x_max": self.boundary.x_max,
                "y_min": self.boundary.y_min,
                "y_max": self.boundary.y_max,
            },
            "obstacles": obstacles,
            "zones": [
                {"center": [z.center.x, z.center.y], "w": z.width, "h": z.height, "label": z.label}
                for z in self.zones
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "Scenario":
        b = d["boundary"]
        obstacles: list[Obstacle] = []
        for o in d.get("obstacles", []):
            cx, cy = o["center"]
            if o["type"] == "circle":
                obstacles.append(Circle(Point2(cx, cy), o["radius"]))
            elif o["type"] == "rect":
                obstacles.append(Rect(Point2(cx, cy), o["w"], o["h"]))
            else:
                raise ScenarioError(f"unknown obstacle type {o['type']!r}")
        zones = [
            Zone(Point2(z["center"][0], z["center"][1]), z["w"], z["h"], z["label"])
            for z in d.get("zones", [])
        ]
        return Scenario(
            name=d.get("name", "custom"),
            variant=d.get("variant", "standard"),
            boundary=Boundary(b["x_min"], b["x_max"], b["y_min"], b["y_max"]),
            obstacles=tuple(obstacles),
            zones=tuple(zones),
            corridor_width=d.get("corridor_width"),
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @staticmethod
    def load(path: str) -> "Scenario":
        with open(path, encoding="utf-8") as f:
            return Scenario.from_dict(json.load(f))


def _zone_intersects(z: Zone, obs: Obstacle) -> bool:
    if isinstance(obs, Rect):
        return (
            abs(z.center.x - obs.center.x) < (z.width + obs.width) / 2
            and abs(z.center.y - obs.center.y) < (z.height + obs.height) / 2
        )
    # circle vs axis-aligned zone rect
    qx = min(max(obs.center.x, z.center.x - z.width / 2), z.center.x + z.width / 2)
    qy = min(max(obs.center.y, z.center.y - z.height / 2), z.center.y + z.height / 2)
    return math.hypot(qx - obs.center.x, qy - obs.center.y) < obs.radius


def _hallway(variant: str) -> Scenario:
    w = CORRIDOR_WIDTH[variant]
    bnd = Boundary(-6.0, 6.0, -3.0, 3.0)
    wall_h = 3.0 - w / 2
    wall_cy = w / 2 + wall_h / 2
    walls = (
        Rect(Point2(0.0, wall_cy), 4.0, wall_h),
        Rect(Point2(0.0, -wall_cy), 4.0, wall_h),
    )
    # zone height keeps straight zone-to-zone lines threading the corridor
    # mouth; taller zones would demand detours the quadratic goal weight
    # cannot pay for. Zones also stay well clear of the end boundaries:
    # a goal backed by a close wall forces a long braking glide, and slow
    # gliding is where lateral tracking accuracy falls apart.
    zones = (
        Zone(Point2(-4.0, 0.0), 1.6, 1.0, "west"),
        Zone(Point2(4.0, 0.0), 1.6, 1.0, "east"),
    )
    return Scenario("hallway", variant, bnd, walls, zones, corridor_width=w)


def _t_intersection(variant: str) -> Scenario:
    # horizontal corridor along the top edge, vertical stem joining from below
    w = CORRIDOR_WIDTH[variant]
    bnd = Boundary(-6.0, 6.0, -3.0, 3.0)
    top_y = 3.0 - w  # corridor occupies y in [top_y, top_y + w]
    stem_half = w / 2
    block_w = 6.0 - stem_half
    obstacles = (
        Rect(Point2(-(stem_half + block_w / 2), (top_y - 3.0) / 2), block_w, top_y + 3.0),
        Rect(Point2(stem_half + block_w / 2, (top_y - 3.0) / 2), block_w, top_y + 3.0),
    )
    arm_y = top_y + w / 2
    zones = (
        Zone(Point2(-4.75, arm_y), 2.0, min(w, 1.8), "west_arm"),
        Zone(Point2(4.75, arm_y), 2.0, min(w, 1.8), "east_arm"),
        Zone(Point2(0.0, -2.0), min(w, 1.8), 1.6, "stem"),
    )
    return Scenario("t_intersection", variant, bnd, obstacles, zones, corridor_width=w)


def _intersection(variant: str) -> Scenario:
    # two corridors crossing at the origin, one corner block per quadrant
    w = CORRIDOR_WIDTH[variant]
    bnd = Boundary(-5.0, 5.0, -5.0, 5.0)
    half = w / 2
    block = 5.0 - half
    c = half + block / 2
    obstacles = tuple(
        Rect(Point2(sx * c, sy * c), block, block) for sx in (-1, 1) for sy in (-1, 1)
    )
    zw = min(w, 1.8)
    zones = (
        Zone(Point2(-4.0, 0.0), 1.8, zw, "west"),
        Zone(Point2(4.0, 0.0), 1.8, zw, "east"),
        Zone(Point2(0.0, -4.0), zw, 1.8, "south"),
        Zone(Point2(0.0, 4.0), zw, 1.8, "north"),
    )
    return Scenario("intersection", variant, bnd, obstacles, zones, corridor_width=w)


def _u_turn(variant: str) -> Scenario:
    # hallway with the east corridor mouth capped: entering agents must reverse out
    w = CORRIDOR_WIDTH[variant]
    base = _hallway(variant)
    cap = Rect(Point2(2.25, 0.0), 0.5, w)
    zones = (
        Zone(Point2(-4.25, 0.0), 2.5, 1.2, "west"),
        Zone(Point2(0.5, 0.0), 2.0, min(w, 0.8), "pocket"),
    )
    return Scenario(
        "u_turn", variant, base.boundary, base.obstacles + (cap,), zones, corridor_width=w
    )


_BUILDERS = {
    "hallway": _hallway,
    "t_intersection": _t_intersection,
    "intersection": _intersection,
    "u_turn": _u_turn,
}


def build_scenario(name: str, variant: str = "standard", overrides: dict | None = None) -> Scenario:
    """Construct a built-in scenario, or a custom one from override geometry.

    Deterministic for fixed inputs. `overrides` may replace any field of the
    built geometry (merged via dict round-trip), or provide the full geometry
    when name == "custom".
    """
    if name == "custom":
        if not overrides:
            raise ScenarioError("custom scenario requires geometry overrides")
        d = dict(overrides)
        d.setdefault("name", "custom")
        d.setdefault("variant", variant)
        return Scenario.from_dict(d)
    if name not in _BUILDERS:
        raise ScenarioError(f"unknown scenario {name!r}; known: {sorted(_BUILDERS)} or 'custom'")
    if variant not in VARIANTS:
        raise ScenarioError(f"unknown variant {variant!r}; known: {VARIANTS}")
    scenario = _BUILDERS[name](variant)
    if overrides:
        d = scenario.to_dict()
        d.update(overrides)
        merged = Scenario.from_dict(d)
        return replace(merged, corridor_width=scenario.corridor_width)
    return scenario


def sample_config(
    scenario: Scenario,
    n_agents: int,
    rng_seed: int | np.random.Generator,
    body_radius: float = DEFAULT_BODY_RADIUS,
    separation_margin: float = 0.1,
    max_retries: int = 100,
) -> list[tuple[np.ndarray, Point2]]:
    """Sample (start state, goal point) pairs with starts and goals in different zones.

    Start states are 4-vectors (px, py, theta, v=0) with heading pointed at the
    goal plus uniform(-0.3, 0.3) rad. Starts are pairwise separated by at least
    2 * body_radius + separation_margin. Deterministic given the seed.
    """
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    if len(scenario.zones) < 2:
        raise ScenarioError("scenario needs at least two zones to sample configs")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)

    def draw_point(zone: Zone) -> Point2 | None:
        for _ in range(max_retries):
            x = zone.center.x + (rng.uniform() - 0.5) * zone.width
            y = zone.center.y + (rng.uniform() - 0.5) * zone.height
            p = Point2(x, y)
            if scenario.min_clearance(p) >= body_radius:
                return p
        return None

    configs: list[tuple[np.ndarray, Point2]] = []
    placed: list[Point2] = []
    min_sep = 2 * body_radius + separation_margin
    for i in range(n_agents):
        ok = False
        for _ in range(max_retries):
            zi, zg = rng.choice(len(scenario.zones), size=2, replace=False)
            start_zone, goal_zone = scenario.zones[zi], scenario.zones[zg]
            start = draw_point(start_zone)
            goal = draw_point(goal_zone)
            if start is None or goal is None:
                continue
            if any(math.hypot(start.x - q.x, start.y - q.y) < min_sep for q in placed):
                continue
            theta = math.atan2(goal.y - start.y, goal.x - start.x) + rng.uniform(-0.3, 0.3)
            theta = math.atan2(math.sin(theta), math.cos(theta))
            configs.append((np.array([start.x, start.y, theta, 0.0]), goal))
            placed.append(start)
            ok = True
            break
        if not ok:
            raise ScenarioError(
                f"could not place agent {i} without overlap after {max_retries} retries"
            )
    return configs
