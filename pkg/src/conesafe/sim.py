"""Discrete-time pursuit-evasion episodes, their JSON-lines records and the replay audit."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Union

import numpy as np

from .cbf import (
    DirectionCone,
    PredictionParams,
    Status,
    correct_action,
    discretize_cone,
    fuzzy_barrier,
)
from .kg import Retriever
from .planner import Observation, PlanResult, ScriptedPlanner, safety_control, task_control
from .world import (
    SCHEMA_VERSION,
    AgentState,
    Dynamics,
    ObstacleField,
    Scenario,
    SemanticAction,
    clamp_speed,
    generate_scenario,
    heading,
    obstacle_from_dict,
    obstacle_to_dict,
    unit,
)

EVASION_PENALTY = 10.0


@dataclass(frozen=True)
class Toggles:
    use_cbf: bool = True
    use_rag: bool = True

    @property
    def label(self) -> str:
        return f"cbf={'on' if self.use_cbf else 'off'},rag={'on' if self.use_rag else 'off'}"


@dataclass(frozen=True, eq=False)
class StraightLine:
    heading: np.ndarray
    speed: float


@dataclass(frozen=True)
class MatrixGameEvader:
    headings: int = 8
    horizon: int = 10
    speed: float = 1.2
    d_safe: float = 0.5


TargetStrategy = Union[StraightLine, MatrixGameEvader]


def step_agent(state: AgentState, u, dynamics: Dynamics) -> AgentState:
    """Explicit Euler step of the single integrator with the speed cap applied first."""
    v = clamp_speed(u, dynamics.v_max)
    return AgentState.at(state.position + v * dynamics.dt, v)


@lru_cache(maxsize=None)
def _headings(k: int, dim: int) -> np.ndarray:
    out = np.array([heading(2 * math.pi * i / k, dim) for i in range(k)])
    out.setflags(write=False)
    return out


def payoff_matrix(
    target: AgentState,
    pursuer: AgentState,
    obstacles: ObstacleField,
    game: MatrixGameEvader,
    pursuer_speed: float,
    dt: float,
) -> np.ndarray:
    """Rows: absolute target headings from east. Columns: pursuer headings offset from pure pursuit.

    Entry (i, j) is the separation after ``horizon`` steps of both choices,
    less a penalty when row i's path comes within d_safe of an obstacle.
    """
    dim = target.dim
    k = game.headings
    rows = _headings(k, dim)
    b = target.position - pursuer.position
    b = unit(b) if np.any(b) else heading(0.0, dim)
    c, s = rows[:, 0], rows[:, 1]
    cols = np.tile(b, (k, 1))
    cols[:, 0], cols[:, 1] = c * b[0] - s * b[1], s * b[0] + c * b[1]
    steps = np.arange(1, game.horizon + 1) * dt * game.speed
    path = target.position + steps[None, :, None] * rows[:, None, :]  # (K, H, D)
    p_end = pursuer.position + game.horizon * dt * pursuer_speed * cols
    sep = np.linalg.norm(path[:, -1][:, None, :] - p_end[None, :, :], axis=-1)
    if len(obstacles):
        worst = obstacles.clearances(path).min(axis=(1, 2))
        penalty = EVASION_PENALTY * np.maximum(0.0, game.d_safe - worst)
    else:
        penalty = np.zeros(k)
    return sep - penalty[:, None]


def maximin_row(payoff: np.ndarray) -> int:
    return int(np.argmax(payoff.min(axis=1)))


def target_step(
    state: AgentState,
    strategy: TargetStrategy,
    pursuer_state: AgentState,
    obstacles: ObstacleField,
    pursuer_speed: float = 2.0,
    dt: float = 0.05,
) -> np.ndarray:
    if isinstance(strategy, StraightLine):
        return strategy.speed * np.asarray(strategy.heading, dtype=float)
    payoff = payoff_matrix(state, pursuer_state, obstacles, strategy, pursuer_speed, dt)
    i = maximin_row(payoff)
    return strategy.speed * _headings(strategy.headings, state.dim)[i]


def strategy_for(scenario: Scenario, target: AgentState) -> TargetStrategy:
    if scenario.target_strategy == "straight":
        return StraightLine(unit(target.velocity), scenario.target_speed)
    return MatrixGameEvader(scenario.evader_headings, scenario.evader_horizon, scenario.target_speed, scenario.d_safe)


def prediction_params(scenario: Scenario) -> PredictionParams:
    return PredictionParams(scenario.pursuer_v_max * scenario.t_pred, scenario.n_dir_samples, scenario.n_seg_samples)


def _vec(v) -> list:
    return [float(x) for x in v]


def _state(s: AgentState) -> dict:
    return {"position": _vec(s.position), "velocity": _vec(s.velocity)}


@dataclass
class EpisodeRecord:
    header: dict
    steps: list = field(default_factory=list)
    outcome: str = "timeout"
    total_steps: int = 0
    danger_steps: int = 0

    @property
    def captured(self) -> bool:
        return self.outcome == "captured"

    def summary(self) -> dict:
        return {"type": "summary", "outcome": self.outcome, "total_steps": self.total_steps, "danger_steps": self.danger_steps}

    def lines(self) -> list[str]:
        out = [json.dumps(self.header)]
        out += [json.dumps(s) for s in self.steps]
        out.append(json.dumps(self.summary()))
        return out

    def to_jsonl(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def from_lines(cls, lines) -> "EpisodeRecord":
        rows = [json.loads(line) for line in lines if line.strip()]
        if not rows or rows[0].get("type") != "header":
            raise ValueError("record does not start with a header line")
        if rows[-1].get("type") != "summary":
            raise ValueError("record does not end with a summary line")
        s = rows[-1]
        return cls(rows[0], rows[1:-1], s["outcome"], s["total_steps"], s["danger_steps"])

    @classmethod
    def read(cls, path) -> "EpisodeRecord":
        with open(path) as fh:
            return cls.from_lines(fh)


def run_episode(
    scenario: Scenario,
    planner=None,
    toggles: Toggles = Toggles(),
    seed: int | None = None,
    retriever: Retriever | None = None,
) -> EpisodeRecord:
    """Simulate one episode until capture or ``max_steps``.

    Every step gets a record. Capture is checked on the decision-time state,
    so the capturing state is recorded with no action and closes the episode.
    Collisions never end an episode; they only raise the danger count.
    """
    planner = planner or ScriptedPlanner()
    seed = scenario.seed if seed is None else seed
    world = generate_scenario(scenario, seed)
    field_ = world.obstacles
    pursuer, target = world.pursuer, world.target
    pdyn, tdyn = scenario.pursuer_dynamics, scenario.target_dynamics
    strategy = strategy_for(scenario, target)
    pp = prediction_params(scenario)
    if toggles.use_rag and retriever is None:
        retriever = Retriever()

    record = EpisodeRecord({
        "type": "header",
        "schema": SCHEMA_VERSION,
        "scenario": scenario.to_dict(),
        "seed": seed,
        "toggles": {"use_cbf": toggles.use_cbf, "use_rag": toggles.use_rag},
        "planner": getattr(planner, "name", type(planner).__name__),
        "obstacles": [obstacle_to_dict(o) for o in field_],
    })
    plan: Optional[PlanResult] = None
    last_verdict = None
    correction = None
    for k in range(scenario.max_steps + 1):
        clear = field_.clearances(pursuer.position) if len(field_) else np.array([math.inf])
        min_clear = float(clear.min())
        danger = bool(min_clear < 0)
        gap = float(np.linalg.norm(pursuer.position - target.position))
        captured = gap <= scenario.capture_radius
        row = {
            "type": "step",
            "step": k,
            "pursuer": _state(pursuer),
            "target": _state(target),
            "distance": gap,
            "danger": danger,
            "capture": captured,
        }
        record.steps.append(row)
        record.total_steps += 1
        record.danger_steps += danger
        if captured or k == scenario.max_steps:
            record.outcome = "captured" if captured else "timeout"
            break

        obs = Observation(pursuer, target, field_, last_verdict, k, correction)
        if k % scenario.k_plan == 0 or plan is None:
            context = ""
            if toggles.use_rag:
                cls = plan.action.semantic_class.value if plan else "tracking"
                context = retriever.context(min_clear, obs.bearing, cls)
            plan = planner.plan(obs, context)
            row["plan"] = {"source": plan.source, "rationale": plan.rationale, "context": context}
        action = plan.action
        row["action"] = action.to_dict()
        v_cmd = pdyn.v_max * action.speed_scale

        if toggles.use_cbf:
            verdict = fuzzy_barrier(pursuer, action, field_, pp, scenario.d_safe)
            row["verdict"] = verdict.to_dict()
            if verdict.safe:
                u = task_control(obs, v_cmd)
                row["controller"] = "task"
                correction = None
            else:
                fixed = correct_action(pursuer, action, field_, pp, scenario.d_safe, verdict=verdict)
                recheck = fuzzy_barrier(pursuer, fixed, field_, pp, scenario.d_safe)
                basis = discretize_cone(DirectionCone.of(fixed), scenario.n_basis)
                u = safety_control(obs, fixed, basis, pdyn.v_max, scenario.gamma, scenario.d_safe)
                row["controller"] = "safety"
                row["corrected"] = fixed.to_dict()
                row["recheck"] = recheck.to_dict()
                correction = fixed.nominal
                # The planner sees the verdict on what was actually executed.
                verdict = recheck
            last_verdict = verdict
        else:
            u = v_cmd * action.nominal
            row["controller"] = "open_loop"
        ut = target_step(target, strategy, pursuer, field_, pdyn.v_max, scenario.dt)
        row["u"] = _vec(clamp_speed(u, pdyn.v_max))
        row["u_target"] = _vec(clamp_speed(ut, tdyn.v_max))
        pursuer = step_agent(pursuer, u, pdyn)
        target = step_agent(target, ut, tdyn)
    return record


class AuditFailure(Exception):
    def __init__(self, where: str, detail: str):
        super().__init__(f"{where}: {detail}")
        self.where = where
        self.detail = detail


H_TOL = 1e-9


def audit_record(record: EpisodeRecord) -> None:
    """Recompute every derived claim in a record from its raw states.

    Raises AuditFailure at the first mismatch: danger and capture flags,
    verdict values (h_fuzzy replayed from the recorded position), Euler
    consistency between consecutive states, totals and outcome.
    """
    h = record.header
    if h.get("schema") != SCHEMA_VERSION:
        raise AuditFailure("header", f"unsupported schema {h.get('schema')!r}")
    scenario = Scenario.from_dict(h["scenario"])
    dim = scenario.dimension
    field_ = ObstacleField([obstacle_from_dict(o, dim) for o in h["obstacles"]], dim)
    pp = prediction_params(scenario)
    pdyn, tdyn = scenario.pursuer_dynamics, scenario.target_dynamics
    danger_total = 0
    prev = None
    for i, row in enumerate(record.steps):
        where = f"step {row.get('step', i)}"
        if row.get("step") != i:
            raise AuditFailure(where, f"step index out of sequence (expected {i})")
        pos = np.array(row["pursuer"]["position"], dtype=float)
        tpos = np.array(row["target"]["position"], dtype=float)
        danger = bool(len(field_) and field_.clearances(pos).min() < 0)
        if danger != row["danger"]:
            raise AuditFailure(where, f"danger flag {row['danger']} but recomputed {danger}")
        danger_total += danger
        capture = bool(np.linalg.norm(pos - tpos) <= scenario.capture_radius)
        if capture != row["capture"]:
            raise AuditFailure(where, f"capture flag {row['capture']} but recomputed {capture}")
        state = AgentState.at(pos)
        for key, act_key in (("verdict", "action"), ("recheck", "corrected")):
            if key not in row:
                continue
            claimed = row[key]
            v = fuzzy_barrier(state, SemanticAction.from_dict(row[act_key]), field_, pp, scenario.d_safe)
            if abs(v.h_fuzzy - claimed["h_fuzzy"]) > H_TOL:
                raise AuditFailure(where, f"{key} h_fuzzy {claimed['h_fuzzy']!r} but replay gives {v.h_fuzzy!r}")
            if v.status.value != claimed["status"]:
                raise AuditFailure(where, f"{key} status {claimed['status']} but replay gives {v.status.value}")
            if claimed["status"] == Status.SAFE.value and claimed["h_fuzzy"] < 0:
                raise AuditFailure(where, "safe verdict with negative h_fuzzy")
        if prev is not None:
            for agent, dyn, ukey in (("pursuer", pdyn, "u"), ("target", tdyn, "u_target")):
                expect = np.array(prev[agent]["position"]) + np.array(prev[ukey]) * dyn.dt
                got = np.array(row[agent]["position"])
                if np.max(np.abs(expect - got)) > H_TOL:
                    raise AuditFailure(where, f"{agent} position does not follow from the previous step")
        last = i == len(record.steps) - 1
        if last and "u" in row:
            raise AuditFailure(where, "terminal step carries an action")
        if not last and ("u" not in row or row["capture"]):
            raise AuditFailure(where, "non-terminal step without an action or with a capture")
        prev = row
    if not record.steps:
        raise AuditFailure("summary", "record has no steps")
    if record.total_steps != len(record.steps):
        raise AuditFailure("summary", f"total_steps {record.total_steps} but {len(record.steps)} step lines")
    if record.danger_steps != danger_total:
        raise AuditFailure("summary", f"danger_steps {record.danger_steps} but recomputed {danger_total}")
    outcome = "captured" if record.steps[-1]["capture"] else "timeout"
    if outcome != record.outcome:
        raise AuditFailure("summary", f"outcome {record.outcome} but recomputed {outcome}")
    if outcome == "timeout" and len(record.steps) != scenario.max_steps + 1:
        raise AuditFailure("summary", "timeout before max_steps")
