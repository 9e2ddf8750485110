"""High-level planners and the two low-level controllers.

The scripted planner is the deterministic stand-in for a language model; the
external planner talks to any chat-completions endpoint and falls back to the
scripted rule whenever the reply cannot be used.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import httpx
import numpy as np

from .cbf import ConeBasis, Verdict, barrier_gradient, certify_basis, decompose_direction, mix_certificates
from .kg import bearing_sector
from .world import (
    AgentState,
    CatalogEntry,
    CylinderZ,
    ObstacleField,
    SemanticAction,
    build_catalog,
    nearest_catalog_name,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Observation:
    pursuer: AgentState
    target: AgentState
    obstacles: ObstacleField
    last_verdict: Optional[Verdict] = None
    step: int = 0
    correction: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.pursuer.dim != self.target.dim or self.obstacles.dim != self.pursuer.dim:
            raise ValueError("observation mixes dimensions")

    @property
    def min_clearance(self) -> float:
        if len(self.obstacles) == 0:
            return math.inf
        return float(self.obstacles.clearances(self.pursuer.position).min())

    @property
    def bearing(self) -> np.ndarray:
        return self.target.position - self.pursuer.position


@dataclass(frozen=True)
class PlanResult:
    action: SemanticAction
    rationale: str = ""
    source: str = "scripted"


def plan_scripted(obs: Observation, context_text: str = "", catalog: dict[str, CatalogEntry] | None = None) -> PlanResult:
    """Evade along the verifier's correction after a hazardous step, else track the target."""
    dim = obs.pursuer.dim
    catalog = catalog or build_catalog(dim)
    if obs.last_verdict is not None and not obs.last_verdict.safe and obs.correction is not None:
        name = nearest_catalog_name(obs.correction, "EVADE", dim)
        return PlanResult(
            catalog[name].action.with_nominal(obs.correction),
            "last step was hazardous; evade along the corrected heading",
        )
    bearing = obs.bearing
    if not np.any(bearing):
        bearing = catalog["TRACK_E"].action.nominal
    name = nearest_catalog_name(bearing, "TRACK", dim)
    return PlanResult(catalog[name].action, "track the target along the nearest catalog heading")


class ScriptedPlanner:
    name = "scripted"

    def plan(self, obs: Observation, context_text: str = "") -> PlanResult:
        return plan_scripted(obs, context_text)


def _fmt(v) -> str:
    return "(" + ", ".join(f"{float(x):.3f}" for x in v) + ")"


SYSTEM_PROMPT = (
    "You are the high-level planner of a pursuit UAV. Choose one semantic action "
    "per turn. A safety verifier checks every action against obstacle clearance."
)


def build_prompt(obs: Observation, context_text: str, catalog: dict[str, CatalogEntry]) -> tuple[str, str]:
    """System and user messages; byte-identical for identical inputs."""
    b = obs.bearing
    lines = [
        f"step: {obs.step}",
        f"pursuer position: {_fmt(obs.pursuer.position)}",
        f"pursuer velocity: {_fmt(obs.pursuer.velocity)}",
        f"target position: {_fmt(obs.target.position)}",
        f"target velocity: {_fmt(obs.target.velocity)}",
        f"target distance: {float(np.linalg.norm(b)):.3f}",
        f"target bearing: {math.degrees(math.atan2(b[1], b[0])):.1f} deg ({bearing_sector(b)})",
    ]
    if len(obs.obstacles) == 0:
        lines.append("obstacles: none")
    clear = obs.obstacles.clearances(obs.pursuer.position) if len(obs.obstacles) else []
    for j, ob in enumerate(obs.obstacles):
        center = ob.center_xy if isinstance(ob, CylinderZ) else ob.center
        off = np.asarray(center[:2]) - obs.pursuer.position[:2]
        lines.append(
            f"obstacle {j}: {ob.kind} center {_fmt(center)} radius {ob.radius:.3f} "
            f"clearance {clear[j]:.3f} bearing {math.degrees(math.atan2(off[1], off[0])):.1f} deg"
        )
    if obs.last_verdict is None:
        lines.append("last verdict: none")
    else:
        lines.append(f"last verdict: {obs.last_verdict.status.value} (h_fuzzy {obs.last_verdict.h_fuzzy:.3f})")
    if obs.correction is not None:
        lines.append(f"verifier corrected heading: {_fmt(obs.correction)}")
    lines.append("")
    lines.append("retrieved knowledge:")
    lines.append(context_text if context_text else "(none)")
    lines.append("")
    lines.append("actions:")
    lines += [f"{name}: {entry.description}" for name, entry in catalog.items()]
    lines.append("")
    lines.append("Reply with exactly one action name from the list above and nothing else.")
    return SYSTEM_PROMPT, "\n".join(lines)


def _toks(text: str) -> set[str]:
    return set(re.findall(r"[a-z0-9]+", text.casefold().replace("_", " ")))


def parse_action(reply: str, catalog: dict[str, CatalogEntry]) -> Optional[str]:
    """Exact catalog name first, then the most specific token-contained name or synonym.

    Returns None when nothing matches or when two different actions tie on
    the most specific match.
    """
    exact = reply.strip().strip(".\"'`*").strip().upper()
    if exact in catalog:
        return exact
    words = _toks(reply)
    best: dict[str, int] = {}
    for name, entry in catalog.items():
        for phrase in (name, *entry.synonyms):
            t = _toks(phrase)
            if t and t <= words:
                best[name] = max(best.get(name, 0), len(t))
    if not best:
        return None
    top = max(best.values())
    winners = [n for n, k in best.items() if k == top]
    return winners[0] if len(winners) == 1 else None


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    api_key: str = ""
    model_name: str = "default"
    timeout: float = 30.0
    max_retries: int = 2

    def __post_init__(self):
        if not self.timeout > 0:
            raise ConfigError("timeout must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be non-negative")

    @classmethod
    def from_env(cls, env=None) -> "EndpointConfig":
        env = os.environ if env is None else env
        url = env.get("LLM_URL")
        if not url:
            raise ConfigError("LLM_URL is not set; the external planner needs an endpoint")
        return cls(url, env.get("LLM_KEY", ""), env.get("LLM_MODEL", "default"))


class Transcript:
    """Append-only JSON-lines log of endpoint calls."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def _chat(client: httpx.Client, cfg: EndpointConfig, system: str, user: str) -> str:
    headers = {"Authorization": f"Bearer {cfg.api_key}"} if cfg.api_key else {}
    resp = client.post(
        cfg.base_url.rstrip("/") + "/chat/completions",
        json={
            "model": cfg.model_name,
            "temperature": 0,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
        },
        headers=headers,
        timeout=cfg.timeout,
    )
    resp.raise_for_status()
    return str(resp.json()["choices"][0]["message"]["content"])


def plan_external(
    obs: Observation,
    context_text: str,
    cfg: EndpointConfig,
    client: httpx.Client | None = None,
    transcript: Transcript | None = None,
    catalog: dict[str, CatalogEntry] | None = None,
    call: int = 0,
) -> PlanResult:
    """Ask the endpoint for one action name; never raises on endpoint trouble."""
    catalog = catalog or build_catalog(obs.pursuer.dim)
    system, user = build_prompt(obs, context_text, catalog)
    own_client = client is None
    client = client or httpx.Client(timeout=cfg.timeout)
    cause = "no attempt made"
    try:
        for attempt in range(cfg.max_retries + 1):
            start = time.monotonic()
            reply, name = None, None
            try:
                reply = _chat(client, cfg, system, user)
                name = parse_action(reply, catalog)
                outcome = "ok" if name else "parse_error"
            except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
                outcome = f"transport_error: {type(exc).__name__}: {exc}"
            if transcript is not None:
                transcript.append({
                    "call": call,
                    "attempt": attempt,
                    "prompt": user,
                    "reply": reply,
                    "latency_s": round(time.monotonic() - start, 6),
                    "outcome": outcome,
                    "action": name,
                })
            if name:
                return PlanResult(catalog[name].action, reply or "", "external")
            cause = outcome
            log.warning("planner endpoint attempt %d failed: %s", attempt + 1, outcome)
    finally:
        if own_client:
            client.close()
    fallback = plan_scripted(obs, context_text, catalog)
    return PlanResult(fallback.action, f"fallback after endpoint failure ({cause})", "fallback")


class ExternalPlanner:
    name = "external"

    def __init__(self, cfg: EndpointConfig, transcript_path=None, client: httpx.Client | None = None):
        self.cfg = cfg
        self.client = client
        self.transcript = Transcript(transcript_path)
        self.calls = 0

    def plan(self, obs: Observation, context_text: str = "") -> PlanResult:
        result = plan_external(obs, context_text, self.cfg, self.client, self.transcript, call=self.calls)
        self.calls += 1
        return result


class ReplayMismatch(RuntimeError):
    pass


class ReplayPlanner:
    """Replays a transcript: the last attempt of each call decides the action."""

    name = "replay"

    def __init__(self, records: list[dict]):
        by_call: dict[int, dict] = {}
        for rec in records:
            by_call[rec["call"]] = rec
        self.calls = [by_call[k] for k in sorted(by_call)]
        self.cursor = 0

    @classmethod
    def from_file(cls, path) -> "ReplayPlanner":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    def plan(self, obs: Observation, context_text: str = "") -> PlanResult:
        if self.cursor >= len(self.calls):
            raise ReplayMismatch("transcript exhausted")
        rec = self.calls[self.cursor]
        self.cursor += 1
        catalog = build_catalog(obs.pursuer.dim)
        _, user = build_prompt(obs, context_text, catalog)
        if user != rec["prompt"]:
            raise ReplayMismatch(f"prompt for call {rec['call']} differs from the transcript")
        if rec.get("action"):
            return PlanResult(catalog[rec["action"]].action, rec.get("reply") or "", "external")
        fallback = plan_scripted(obs, context_text, catalog)
        return PlanResult(fallback.action, "fallback (replayed)", "fallback")


def task_control(obs: Observation, v_max: float) -> np.ndarray:
    """Pure pursuit at full speed; zero when the agents coincide."""
    d = obs.target.position - obs.pursuer.position
    n = float(np.linalg.norm(d))
    if n == 0.0:
        return np.zeros_like(d)
    return v_max * d / n


def safety_control(
    obs: Observation,
    corrected_action: SemanticAction,
    basis: ConeBasis,
    v_max: float,
    gamma: float = 1.0,
    d_safe: float = 0.5,
) -> np.ndarray:
    """Mixed control along the corrected nominal, using feasible certificates only.

    Weights on infeasible rays are dropped and the rest renormalized; if the
    nominal puts no weight on any feasible ray, the feasible ray closest to
    the nominal is used alone. With no feasible ray at all the pursuer
    retreats along the barrier gradient.
    """
    certs = certify_basis(obs.pursuer, basis, obs.obstacles, gamma, v_max, d_safe)
    ok = np.array([c.feasible for c in certs])
    if not ok.any():
        return v_max * barrier_gradient(obs.pursuer, obs.obstacles)
    lam = decompose_direction(corrected_action.nominal, basis) * ok
    if lam.sum() > 0:
        lam = lam / lam.sum()
    else:
        align = basis.unit_directions @ corrected_action.nominal
        align[~ok] = -np.inf
        lam = np.zeros(len(certs))
        lam[int(np.argmax(align))] = 1.0
    return mix_certificates(lam, certs).u
