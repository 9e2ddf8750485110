"""Acceptance criteria A1-A11.

Each test records one PASS/FAIL line (shown in the terminal summary) and
then asserts the criterion at its stated tolerance.
"""

import json
import math
import time

import numpy as np
import pytest

from conesafe.cbf import (
    DirectionCone,
    PredictionParams,
    barrier_value,
    certify_basis,
    correct_action,
    decompose_direction,
    discretize_cone,
    fuzzy_barrier,
    mix_certificates,
)
from conesafe.cli import main
from conesafe.kg import PHI_MIN, NoPath, Query, build_graph, retrieve
from conesafe.metrics import SUITES, audit_report, run_suite, safe_rate, success_rate, zero_danger_rate
from conesafe.planner import Observation, safety_control
from conesafe.sim import run_episode
from conesafe.world import AgentState, ObstacleField, SemanticAction, Sphere, angle_between, build_catalog, heading
from oracles import (
    dense_fuzzy_2d,
    enumerate_retrieval,
    hull_contains,
    in_cone_directions_2d,
    lp_contains,
    random_layered_kb,
    random_phi,
)

# Rates of the fixed 50-seed S1 batch, pinned after the first run.
GOLDEN_S1 = {"fixed5/straight": 1.0, "fixed5/matrix_game": 0.86}


@pytest.fixture(scope="session")
def suites(tmp_path_factory):
    root = tmp_path_factory.mktemp("suites")
    out = {}
    for sid in ("S1", "S2a", "S2b", "S2c", "S4"):
        start = time.perf_counter()
        report = run_suite(SUITES[sid], root / sid)
        out[sid] = (report, root / sid, time.perf_counter() - start)
    return out


def _rows(report):
    return {c.name: c for c in report.configs}


def test_a1_safety(suites, criterion):
    report, _, seconds = suites["S1"]
    rows = _rows(report)
    ok = all(c.zero_danger_rate == 1.0 and c.safe_rate == 1.0 for c in rows.values()) and seconds < 60
    detail = ", ".join(f"{n} zero-danger={c.zero_danger_rate} safe={c.safe_rate}" for n, c in rows.items())
    criterion("A1", ok, f"{detail}; {seconds:.1f}s")
    assert ok


def test_a2_success(suites, criterion):
    report, _, _ = suites["S1"]
    rows = _rows(report)
    s, m = rows["fixed5/straight"].success_rate, rows["fixed5/matrix_game"].success_rate
    ok = s >= 0.90 and m >= 0.70
    criterion("A2", ok, f"success straight={s} (>=0.90), matrix_game={m} (>=0.70)")
    assert ok
    assert {n: c.success_rate for n, c in rows.items()} == GOLDEN_S1


def test_a3_ablation_ordering(suites, criterion):
    report, _, _ = suites["S4"]
    rows = _rows(report)
    order = all(
        rows[f"cbf=on,rag={r}"].safe_rate > rows[f"cbf=off,rag={r}"].safe_rate for r in ("on", "off")
    )
    # at least one danger step in at least half of the episodes
    dangerous = all(rows[f"cbf=off,rag={r}"].zero_danger_rate <= 0.5 for r in ("on", "off"))
    ok = order and dangerous
    detail = ", ".join(f"{n} safe={c.safe_rate:.4f} zero-danger={c.zero_danger_rate}" for n, c in rows.items())
    criterion("A3", ok, detail)
    assert ok


def test_a4_generalization(suites, criterion):
    s1 = _rows(suites["S1"][0])
    base = {"straight": s1["fixed5/straight"].success_rate, "matrix_game": s1["fixed5/matrix_game"].success_rate}
    seconds = sum(suites[s][2] for s in ("S2a", "S2b", "S2c"))
    ok, parts = seconds < 300, []
    for sid in ("S2a", "S2b", "S2c"):
        for c in suites[sid][0].configs:
            drop = base[c.strategy] - c.success_rate
            good = c.zero_danger_rate == 1.0 and drop <= 0.20 + 1e-12
            ok = ok and good
            parts.append(f"{c.name} success={c.success_rate} zero-danger={c.zero_danger_rate}")
    criterion("A4", ok, "; ".join(parts) + f"; {seconds:.1f}s")
    assert ok


def _a5_instances():
    rng = np.random.default_rng(0)
    actions = [e.action for e in build_catalog(2).values()]
    for _ in range(200):
        m = int(rng.integers(1, 7))
        spheres = [(rng.uniform(-5, 5, 2), float(rng.uniform(0.5, 2.0))) for _ in range(m)]
        pos = rng.uniform(-5, 5, 2)
        yield pos, actions[int(rng.integers(len(actions)))], spheres


def test_a5_fuzzy_barrier_oracle(criterion):
    pp = PredictionParams()
    worst, disagree, checked = 0.0, 0, 0
    for pos, action, spheres in _a5_instances():
        field = ObstacleField([Sphere(c, r) for c, r in spheres], 2)
        v = fuzzy_barrier(AgentState.at(pos), action, field, pp, 0.5)
        ref = dense_fuzzy_2d(pos, action.nominal, action.cone_angle, spheres, pp.d_pred, 0.5)
        worst = max(worst, abs(v.h_fuzzy - ref))
        if abs(ref) > 0.1:
            checked += 1
            disagree += v.safe != (ref >= 0)
    ok = worst <= 0.1 and disagree == 0
    criterion("A5", ok, f"max |h - oracle| = {worst:.4f} m (<=0.1), verdict disagreements {disagree}/{checked}")
    assert ok


def test_a6_mixed_certificate(criterion):
    rng = np.random.default_rng(6)
    done, worst = 0, math.inf
    while done < 10**4:
        dim = 2 if done % 4 else 3
        m = int(rng.integers(1, 5))
        field = ObstacleField([Sphere(rng.uniform(-4, 4, dim), rng.uniform(0.3, 1.5)) for _ in range(m)], dim)
        if done % 2:
            # near an inflated boundary, where h is small or negative
            ob = field[int(rng.integers(m))]
            d = rng.normal(size=dim)
            state = AgentState.at(ob.center + (ob.radius + 0.5 + rng.uniform(-0.4, 0.4)) * d / np.linalg.norm(d))
        else:
            state = AgentState.at(rng.uniform(-4, 4, dim))
        nominal = rng.normal(size=dim)
        nominal /= np.linalg.norm(nominal)
        theta = float(rng.uniform(0.05, math.pi))
        n = int(rng.integers(2 if dim == 2 else 4, 10))
        basis = discretize_cone(DirectionCone(nominal, theta), n)
        gammas = rng.uniform(0.1, 5.0, len(basis))
        certs = [c for c in certify_basis(state, basis, field, gammas, 2.0, 0.5) if c.feasible]
        if not certs:
            continue
        lam = rng.dirichlet(np.ones(len(certs)))
        worst = min(worst, mix_certificates(lam, certs).residual)
        done += 1
    ok = worst >= -1e-9
    criterion("A6", ok, f"min mixed residual over 10^4 instances = {worst:.3e} (>= -1e-9)")
    assert ok


def test_a7_coverage_and_decomposition(criterion):
    rng = np.random.default_rng(7)
    worst_angle, outside = 0.0, 0
    for deg in (5, 10, 30, 60, 90, 180):
        for n in (2, 3, 5, 9):
            nominal = heading(rng.uniform(0, 2 * math.pi))
            basis = discretize_cone(DirectionCone(nominal, math.radians(deg)), n)
            dirs = in_cone_directions_2d(nominal, math.radians(deg), 1000, rng)
            inside = hull_contains(basis.directions, dirs)
            outside += int((~inside).sum())
            for v in dirs[:5]:
                assert lp_contains(basis.directions, v)
            for v in dirs:
                lam = decompose_direction(v, basis)
                worst_angle = max(worst_angle, angle_between(lam @ basis.directions, v))
    ok = outside == 0 and worst_angle < 1e-6
    criterion("A7", ok, f"directions outside hull {outside}, max recomposition error {worst_angle:.2e} rad (<1e-6)")
    assert ok


def test_a8_retrieval_exactness(criterion):
    mismatches, no_path = 0, 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        doc, layers, hub_out, seq, rel = random_layered_kb(rng)
        g = build_graph(doc)
        phi = random_phi(rng, layers)
        q = Query("policy", ("q",) * len(layers))
        for elastic in (True, False):
            want = enumerate_retrieval(layers, hub_out, seq, rel, phi, len(layers), elastic, PHI_MIN, q.epsilon)
            try:
                got = retrieve(g, q, elastic=elastic, phi=phi)
            except NoPath:
                got = None
            if want is None or got is None:
                no_path += want is None
                mismatches += (want is None) != (got is None)
                continue
            mismatches += abs(got.objective - want[0]) > 1e-9 or got.nodes != want[1]
    ok = mismatches == 0
    criterion("A8", ok, f"200 graphs x 2 modes, mismatches {mismatches} ({no_path} strict no-path cases agree)")
    assert ok


def test_a9_metrics_and_audit(suites, tmp_path, criterion, capsys):
    ep = lambda c, t, d: {"outcome": "captured" if c else "timeout", "total_steps": t, "danger_steps": d}
    fixtures_ok = (
        success_rate([ep(1, 10, 0)] * 9 + [ep(0, 10, 0)]) == 0.9
        and success_rate([ep(1, 10, 0)] * 3) == 1.0
        and safe_rate([ep(1, 1000, 3)]) == 0.997
        and safe_rate([ep(1, 10, 0)]) == 1.0
        and zero_danger_rate([ep(1, 10, 0)] * 46 + [ep(1, 10, 1)] * 4) == 0.92
        and zero_danger_rate([ep(1, 10, 1)] * 5) == 0.0
    )
    codes = [main(["audit", str(suites[s][1] / "report.json")]) for s in ("S1", "S2a", "S2b", "S2c", "S4")]
    records = sum(c.episodes for s in suites.values() for c in s[0].configs)

    rec_path = suites["S4"][1] / suites["S4"][0].configs[0].records[0]
    rows = [json.loads(l) for l in rec_path.read_text().splitlines()]
    faults = []
    flipped = json.loads(json.dumps(rows))
    flipped[3]["danger"] = not flipped[3]["danger"]
    faults.append(flipped)
    moved = json.loads(json.dumps(rows))
    moved[5]["pursuer"]["position"][0] += 0.2
    faults.append(moved)
    fault_codes = []
    for k, fault in enumerate(faults):
        p = tmp_path / f"fault{k}.jsonl"
        p.write_text("\n".join(json.dumps(r) for r in fault) + "\n")
        fault_codes.append(main(["audit", str(p)]))
    capsys.readouterr()
    ok = fixtures_ok and codes == [0] * 5 and fault_codes == [1, 1]
    criterion("A9", ok, f"rate fixtures {'exact' if fixtures_ok else 'WRONG'}; audit exit codes on {records} suite records "
              f"{codes}; injected faults {fault_codes}")
    assert ok


def _a10_worst(dt, n_states=100, steps=600):
    rng = np.random.default_rng(10)
    track = build_catalog(2)["TRACK_E"].action
    pp = PredictionParams(2.0)
    v_max, d_safe = 2.0, 0.5
    worst = math.inf
    done = 0
    while done < n_states:
        field = ObstacleField([Sphere(rng.uniform(1, 9, 2), rng.uniform(0.5, 1.5)) for _ in range(5)], 2)
        pos = rng.uniform(-1, 1, 2)
        state = AgentState.at(pos)
        if barrier_value(state, field, d_safe)[0] < 0:
            continue
        goal = AgentState.at(rng.uniform(9, 11, 2))
        done += 1
        for _ in range(steps):
            obs = Observation(state, goal, field)
            bearing = goal.position - state.position
            if np.linalg.norm(bearing) < 1e-9:
                break
            action = track.with_nominal(bearing)
            fixed = correct_action(state, action, field, pp, d_safe)
            basis = discretize_cone(DirectionCone.of(fixed), 5)
            u = safety_control(obs, fixed, basis, v_max, 1.0, d_safe)
            state = AgentState.at(state.position + u * dt, u)
            worst = min(worst, barrier_value(state, field, d_safe)[0])
    return worst


def test_a10_forward_invariance(criterion):
    results = {dt: _a10_worst(dt) for dt in (0.05, 0.01)}
    ok = all(results[dt] >= -dt * 2.0 for dt in results)
    detail = ", ".join(f"dt={dt}: min h={h:.4f} (bound {-dt * 2.0})" for dt, h in results.items())
    criterion("A10", ok, detail)
    assert ok


def test_a11_determinism(suites, tmp_path, criterion):
    identical, compared = True, 0
    for sid in ("S1", "S2a", "S2b", "S2c", "S4"):
        report, root, _ = suites[sid]
        n = report.episodes if sid == "S4" else 3
        again = run_suite(SUITES[sid], tmp_path / sid, episodes=n)
        for c_full, c_new in zip(report.configs, again.configs):
            for rel in c_new.records:
                compared += 1
                identical &= (root / rel).read_bytes() == (tmp_path / sid / rel).read_bytes()
        if sid == "S4":
            identical &= (root / "report.json").read_bytes() == (tmp_path / sid / "report.json").read_bytes()
        else:
            twice = run_suite(SUITES[sid], tmp_path / f"{sid}-b", episodes=n)
            identical &= twice.to_json() == again.to_json()
    direct = run_episode(SUITES["S1"].configs[1].scenario, seed=0).to_jsonl()
    identical &= direct.encode() == (suites["S1"][1] / suites["S1"][0].configs[1].records[0]).read_bytes()
    criterion("A11", identical, f"{compared} rerun records byte-identical across all suites; reports identical")
    assert identical
