import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conesafe.metrics import BASELINE, CYLINDER_MIX, DENSE
from conesafe.world import (
    AgentState,
    CylinderZ,
    ObstacleField,
    ObstacleSpec,
    PlacementInfeasible,
    Scenario,
    ScenarioError,
    SemanticAction,
    Sphere,
    build_catalog,
    clamp_speed,
    generate_scenario,
    load_scenario,
    nearest_catalog_name,
    obstacle_gap,
    save_scenario,
    signed_clearance,
)


def test_signed_clearance_sphere():
    assert signed_clearance((0.0, 0.0), Sphere((5.0, 0.0), 1.0)) == pytest.approx(4.0)


def test_signed_clearance_center_is_minus_radius():
    assert signed_clearance((0.5, 0.0), Sphere((0.5, 0.0), 1.0)) == pytest.approx(-1.0)


def test_signed_clearance_cylinder_ignores_height():
    assert signed_clearance((3.0, 4.0, 10.0), CylinderZ((0.0, 0.0), 2.0)) == pytest.approx(3.0)


def test_field_clearances_match_scalar_function():
    obs = [Sphere((1.0, 2.0, 0.5), 0.7), CylinderZ((-2.0, 1.0), 1.1)]
    field = ObstacleField(obs, 3)
    pts = np.random.default_rng(3).uniform(-4, 4, size=(20, 3))
    got = field.clearances(pts)
    want = np.array([[signed_clearance(p, o) for o in obs] for p in pts])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_obstacle_validation():
    with pytest.raises(ValueError):
        Sphere((0.0, 0.0), 0.0)
    with pytest.raises(ValueError):
        ObstacleField([CylinderZ((0.0, 0.0), 1.0)], 2)


@pytest.mark.parametrize("v, want", [((3.0, 0.0), (2.0, 0.0)), ((1.0, 0.0), (1.0, 0.0)), ((0.0, 0.0), (0.0, 0.0))])
def test_clamp_speed_examples(v, want):
    np.testing.assert_allclose(clamp_speed(v, 2.0), want)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=3), st.floats(0.1, 10))
def test_clamp_speed_bounds(v, vmax):
    out = clamp_speed(v, vmax)
    assert np.linalg.norm(out) <= vmax + 1e-9
    if np.linalg.norm(v) > 0:
        # direction is preserved
        assert np.dot(out, v) >= 0


def test_semantic_action_requires_unit_nominal():
    with pytest.raises(ValueError):
        SemanticAction("X", (2.0, 0.0), 0.2)
    with pytest.raises(ValueError):
        SemanticAction("X", (1.0, 0.0), 0.0)


def test_semantic_action_roundtrip():
    a = build_catalog(2)["EVADE_NW"].action
    b = SemanticAction.from_dict(a.to_dict())
    assert b.to_dict() == a.to_dict()


def test_catalog_contents():
    cat = build_catalog(2)
    assert len(cat) == 17
    assert math.degrees(cat["TRACK_E"].action.cone_angle) == pytest.approx(10.0)
    assert math.degrees(cat["EVADE_E"].action.cone_angle) == pytest.approx(60.0)
    assert cat["HOLD"].action.speed_scale == 0.0
    np.testing.assert_allclose(build_catalog(3)["TRACK_N"].action.nominal, (0.0, 1.0, 0.0), atol=1e-15)


def test_nearest_catalog_name_ties_to_smaller_angle():
    assert nearest_catalog_name((1.0, 0.0), "TRACK", 2) == "TRACK_E"
    d = (math.cos(math.radians(40)), math.sin(math.radians(40)))
    assert nearest_catalog_name(d, "TRACK", 2) == "TRACK_NE"
    # exactly between E and NE
    d = (math.cos(math.radians(22.5)), math.sin(math.radians(22.5)))
    assert nearest_catalog_name(d, "TRACK", 2) == "TRACK_E"


def test_generate_scenario_is_deterministic():
    a = generate_scenario(BASELINE, 11)
    b = generate_scenario(BASELINE, 11)
    np.testing.assert_array_equal(a.pursuer.position, b.pursuer.position)
    np.testing.assert_array_equal(a.target.velocity, b.target.velocity)
    np.testing.assert_array_equal(a.obstacles.centers, b.obstacles.centers)


def _check_invariants(spec, world):
    os_ = spec.obstacles
    obs = list(world.obstacles)
    assert len(obs) == os_.count
    for o in obs:
        for p in (world.pursuer.position, world.target.position):
            assert signed_clearance(p, o) >= os_.start_clearance
    if os_.placement == "random":
        for i in range(len(obs)):
            for j in range(i):
                assert obstacle_gap(obs[i], obs[j]) >= os_.min_gap


def test_count8_places_exactly_eight():
    for seed in range(10):
        w = generate_scenario(DENSE, seed)
        _check_invariants(DENSE, w)


def test_cylinder_mix_invariants_over_100_seeds():
    for seed in range(100):
        w = generate_scenario(CYLINDER_MIX, seed)
        _check_invariants(CYLINDER_MIX, w)
        kinds = {o.kind for o in w.obstacles}
        assert kinds == {"sphere", "cylinder"}
        assert w.pursuer.dim == 3


def test_straight_target_path_is_kept_clear():
    spec = DENSE
    for seed in range(10):
        w = generate_scenario(spec, seed)
        length = spec.target_speed * spec.max_steps * spec.dt
        t = np.linspace(0, length, 500)
        path = w.target.position + t[:, None] * w.target.velocity / np.linalg.norm(w.target.velocity)
        assert w.obstacles.clearances(path).min() >= spec.obstacles.path_clearance - 0.05


def test_infeasible_placement_raises():
    spec = Scenario(
        name="crowded",
        obstacles=ObstacleSpec(count=30, shapes={"sphere": 30}, placement="random",
                               region=((3.0, 4.0), (3.0, 4.0)), radius_range=(1.0, 1.2)),
    )
    with pytest.raises(PlacementInfeasible):
        generate_scenario(spec, 0)


def test_fixed_layout_overlapping_start_raises():
    spec = Scenario(obstacles=ObstacleSpec(count=1, shapes={"sphere": 1}, layout=({"kind": "sphere", "center": (0.5, 0.0), "radius": 1.0},)),
                    start_jitter=0.0)
    with pytest.raises(PlacementInfeasible):
        generate_scenario(spec, 0)


def test_scenario_validation():
    with pytest.raises(ScenarioError):
        Scenario(dimension=4)
    with pytest.raises(ScenarioError):
        Scenario(target_strategy="zigzag")
    with pytest.raises(ScenarioError):
        ObstacleSpec(count=2, shapes={"sphere": 1})


def test_scenario_file_roundtrip(tmp_path):
    for spec in (BASELINE, CYLINDER_MIX):
        p = tmp_path / f"{spec.name}.json"
        save_scenario(spec, p)
        back = load_scenario(p)
        assert back == spec
        assert back.to_dict() == spec.to_dict()


def test_scenario_rejects_unknown_fields():
    d = BASELINE.to_dict()
    d["wind"] = 3
    with pytest.raises(ScenarioError):
        Scenario.from_dict(d)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_agent_state_dimension(seed):
    p = np.random.default_rng(seed).uniform(-5, 5, 3)
    s = AgentState.at(p)
    assert s.dim == 3
    assert not s.velocity.any()
