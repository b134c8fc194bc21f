import math

import numpy as np
import pytest

from ipgsim.geometry import (
    Boundary,
    Circle,
    Point2,
    Rect,
    Scenario,
    ScenarioError,
    Zone,
    build_scenario,
    line_of_sight,
    sample_config,
    signed_distance,
)


def test_signed_distance_circle_outside():
    c = Circle(Point2(0.0, 0.0), 1.0)
    assert signed_distance(Point2(3.0, 0.0), c) == pytest.approx(2.0)


def test_signed_distance_rect_inside():
    r = Rect(Point2(0.0, 0.0), 4.0, 2.0)
    assert signed_distance(Point2(0.0, 0.0), r) == pytest.approx(-1.0)


def test_signed_distance_rect_outside_face():
    r = Rect(Point2(0.0, 0.0), 4.0, 2.0)
    assert signed_distance(Point2(3.0, 1.0), r) == pytest.approx(1.0)


def test_signed_distance_rect_corner_is_euclidean():
    r = Rect(Point2(0.0, 0.0), 2.0, 2.0)
    assert signed_distance(Point2(2.0, 2.0), r) == pytest.approx(math.sqrt(2.0))


def test_signed_distance_is_lipschitz_1():
    # SDF property: |sd(p)-sd(q)| <= |p-q|. Probe densely around a box and a
    # circle, including across the boundary where the two branches meet.
    rng = np.random.default_rng(7)
    obstacles = [Rect(Point2(0.5, -0.25), 1.5, 0.8), Circle(Point2(-1.0, 1.0), 0.7)]
    for obs in obstacles:
        for _ in range(2000):
            p = rng.uniform(-2.5, 2.5, size=2)
            d = rng.normal(size=2)
            d *= 1e-4 / np.linalg.norm(d)
            q = p + d
            gap = abs(signed_distance(p, obs) - signed_distance(q, obs))
            assert gap <= 1e-4 * (1 + 1e-9) + 1e-15


def test_line_of_sight_blocked_by_circle():
    obs = [Circle(Point2(0.0, 0.0), 1.0)]
    assert not line_of_sight(Point2(-2.0, 0.0), Point2(2.0, 0.0), obs)


def test_line_of_sight_clear_above_circle():
    obs = [Circle(Point2(0.0, 0.0), 1.0)]
    assert line_of_sight(Point2(-2.0, 2.0), Point2(2.0, 2.0), obs)


def test_line_of_sight_blocked_by_rect():
    obs = [Rect(Point2(0.0, 0.0), 1.0, 4.0)]
    assert not line_of_sight(Point2(-2.0, 0.5), Point2(2.0, -0.5), obs)


def test_line_of_sight_grazing_face_not_blocked():
    # riding exactly along a box face never enters the interior
    obs = [Rect(Point2(0.0, 0.0), 2.0, 2.0)]
    assert line_of_sight(Point2(-3.0, 1.0), Point2(3.0, 1.0), obs)


def test_line_of_sight_symmetric():
    rng = np.random.default_rng(21)
    obs = [Rect(Point2(0.0, 0.5), 1.2, 0.9), Circle(Point2(-1.0, -1.0), 0.6)]
    for _ in range(200):
        a = Point2(*rng.uniform(-3, 3, size=2))
        b = Point2(*rng.uniform(-3, 3, size=2))
        assert line_of_sight(a, b, obs) == line_of_sight(b, a, obs)


def test_hallway_corridor_widths():
    std = build_scenario("hallway")
    wide = build_scenario("hallway", "wide")
    assert std.corridor_width == pytest.approx(1.0)
    assert wide.corridor_width == pytest.approx(2.0)
    # clearance at the corridor centre equals half the nominal width
    assert std.min_clearance(Point2(0.0, 0.0)) == pytest.approx(0.5)
    assert wide.min_clearance(Point2(0.0, 0.0)) == pytest.approx(1.0)


def test_hallway_geometry_and_zones():
    s = build_scenario("hallway")
    assert s.boundary == Boundary(-6.0, 6.0, -3.0, 3.0)
    assert {z.label for z in s.zones} == {"west", "east"}
    assert s.zone_of(Point2(-4.0, 0.0)) == "west"
    assert s.zone_of(Point2(4.0, 0.2)) == "east"
    assert s.zone_of(Point2(0.0, 0.0)) is None


def test_t_intersection_has_three_zones():
    s = build_scenario("t_intersection")
    assert {z.label for z in s.zones} == {"west_arm", "east_arm", "stem"}
    # every zone centre must be walkable
    for z in s.zones:
        assert s.min_clearance(z.center) > 0.3


def test_unknown_scenario_and_variant_raise():
    with pytest.raises(ScenarioError):
        build_scenario("spiral")
    with pytest.raises(ScenarioError):
        build_scenario("hallway", "narrow")
    with pytest.raises(ScenarioError):
        build_scenario("custom")  # needs explicit geometry


def test_scenario_roundtrip_dict_and_file(tmp_path):
    s = build_scenario("t_intersection", "wide")
    s2 = Scenario.from_dict(s.to_dict())
    assert s2.to_dict() == s.to_dict()
    p = tmp_path / "scn.json"
    s.save(str(p))
    s3 = Scenario.load(str(p))
    assert s3.to_dict() == s.to_dict()


def test_sample_config_deterministic():
    s = build_scenario("hallway")
    a = sample_config(s, 2, rng_seed=5)
    b = sample_config(s, 2, rng_seed=5)
    for (sa, ga), (sb, gb) in zip(a, b):
        assert np.array_equal(sa, sb)
        assert (ga.x, ga.y) == (gb.x, gb.y)
    c = sample_config(s, 2, rng_seed=6)
    assert not all(np.array_equal(x[0], y[0]) for x, y in zip(a, c))


def test_sample_config_zones_clearance_separation():
    s = build_scenario("hallway")
    for seed in range(20):
        cfg = sample_config(s, 2, rng_seed=seed)
        starts = []
        for start, goal in cfg:
            sz = s.zone_of(Point2(start[0], start[1]))
            gz = s.zone_of(goal)
            assert sz is not None and gz is not None and sz != gz
            assert s.min_clearance(Point2(start[0], start[1])) >= 0.3
            assert s.min_clearance(goal) >= 0.3
            assert start[3] == 0.0
            # heading points at the goal up to the sampled jitter
            bearing = math.atan2(goal.y - start[1], goal.x - start[0])
            err = (start[2] - bearing + math.pi) % (2 * math.pi) - math.pi
            assert abs(err) <= 0.3 + 1e-12
            starts.append(start[:2])
        d = math.hypot(*(starts[0] - starts[1]))
        assert d >= 2 * 0.3 + 0.1 - 1e-12


def test_zone_contains_is_closed_box():
    z = Zone(Point2(0.0, 0.0), 2.0, 1.0, "z")
    assert z.contains(Point2(0.9, 0.4))
    assert z.contains(Point2(1.0, 0.5))
    assert not z.contains(Point2(1.5, 0.0))


def test_boundary_contains_clearance():
    b = Boundary(-6.0, 6.0, -3.0, 3.0)
    assert b.contains(Point2(5.8, 0.0))
    assert not b.contains(Point2(5.8, 0.0), clearance=0.3)


def test_invalid_shapes_raise():
    with pytest.raises(ValueError):
        Circle(Point2(0, 0), -1.0)
    with pytest.raises(ValueError):
        Rect(Point2(0, 0), 0.0, 1.0)
    with pytest.raises(ValueError):
        Boundary(2.0, -2.0, -1.0, 1.0)
