"""Batch rates, the shipped experiment suites, reports and the report audit."""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

from .sim import AuditFailure, EpisodeRecord, Toggles, audit_record, run_episode
from .world import ObstacleSpec, Scenario


class EmptyBatch(ValueError):
    pass


def _summaries(records) -> list[tuple[bool, int, int]]:
    out = []
    for r in records:
        if isinstance(r, dict):
            out.append((r["outcome"] == "captured", int(r["total_steps"]), int(r["danger_steps"])))
        else:
            out.append((r.outcome == "captured", int(r.total_steps), int(r.danger_steps)))
    if not out:
        raise EmptyBatch("no episodes in batch")
    return out


def success_rate(records) -> float:
    s = _summaries(records)
    return sum(c for c, _, _ in s) / len(s)


def safe_rate(records) -> float:
    """One minus danger steps over total steps, pooled across the batch."""
    s = _summaries(records)
    total = sum(t for _, t, _ in s)
    if total == 0:
        raise EmptyBatch("batch has no steps")
    return 1.0 - sum(d for _, _, d in s) / total


def safe_rate_episode_mean(records) -> float:
    s = _summaries(records)
    if any(t == 0 for _, t, _ in s):
        raise EmptyBatch("an episode has no steps")
    return sum(1.0 - d / t for _, t, d in s) / len(s)


def zero_danger_rate(records) -> float:
    s = _summaries(records)
    return sum(d == 0 for _, _, d in s) / len(s)


# Fixed five-sphere field used by S1 and the baseline scenario.
BASE_LAYOUT = (
    {"kind": "sphere", "center": (4.0, 1.5), "radius": 1.2},
    {"kind": "sphere", "center": (7.5, -1.5), "radius": 1.0},
    {"kind": "sphere", "center": (8.0, 4.5), "radius": 1.4},
    {"kind": "sphere", "center": (11.0, 8.5), "radius": 1.0},
    {"kind": "sphere", "center": (13.5, 0.5), "radius": 0.9},
)

BASELINE = Scenario(name="baseline", obstacles=ObstacleSpec(layout=BASE_LAYOUT))


# Random fields share one region, wider than the fixed layout's bounding box.
RANDOM_REGION = ((2.0, 20.0), (-7.0, 11.0))


def _random_field(base: Scenario, name: str, spheres: int, cylinders: int = 0, **kw) -> Scenario:
    shapes = {"sphere": spheres} if not cylinders else {"sphere": spheres, "cylinder": cylinders}
    spec = ObstacleSpec(count=spheres + cylinders, shapes=shapes, placement="random", region=RANDOM_REGION)
    return replace(base, name=name, obstacles=spec, **kw)


RANDOM_POSITIONS = _random_field(BASELINE, "random_positions", 5)
SPARSE = _random_field(BASELINE, "count_3", 3)
DENSE = _random_field(BASELINE, "count_8", 8)
CYLINDER_MIX = _random_field(
    BASELINE, "cylinder_mix_3d", 3, 2,
    dimension=3, pursuer_start=(0.0, 0.0, 0.0), target_start=(12.0, 4.0, 0.0),
)
ADVERSARIAL = Scenario(
    name="adversarial",
    obstacles=ObstacleSpec(
        count=1, shapes={"sphere": 1}, placement="random",
        region=((5.0, 7.0), (-0.3, 0.3)), radius_range=(1.2, 1.6),
    ),
    pursuer_start=(0.0, 0.0),
    target_start=(12.0, 0.0),
    start_jitter=0.3,
    target_heading=(1.0, 0.0),
    target_heading_jitter_deg=5.0,
)

BUILTIN_SCENARIOS = {
    s.name: s for s in (BASELINE, RANDOM_POSITIONS, SPARSE, DENSE, CYLINDER_MIX, ADVERSARIAL)
}


@dataclass(frozen=True)
class ConfigSpec:
    name: str
    scenario: Scenario
    toggles: Toggles = Toggles()


@dataclass(frozen=True)
class SuiteSpec:
    id: str
    configs: tuple
    episodes: int = 50
    seed_base: int = 0
    planner: str = "scripted"

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("a suite needs at least one episode per config")
        names = [c.name for c in self.configs]
        if len(set(names)) != len(names):
            raise ValueError("config names must be unique within a suite")


def _both(name: str, sc: Scenario) -> tuple:
    return (
        ConfigSpec(f"{name}/straight", replace(sc, target_strategy="straight")),
        ConfigSpec(f"{name}/matrix_game", replace(sc, target_strategy="matrix_game")),
    )


SUITES = {
    "S1": SuiteSpec("S1", _both("fixed5", BASELINE)),
    "S2a": SuiteSpec("S2a", _both("random5", RANDOM_POSITIONS)),
    "S2b": SuiteSpec("S2b", _both("count3", SPARSE) + _both("count8", DENSE)),
    "S2c": SuiteSpec("S2c", _both("cylinders3d", CYLINDER_MIX)),
    "S4": SuiteSpec(
        "S4",
        tuple(
            ConfigSpec(t.label, ADVERSARIAL, t)
            for t in (Toggles(True, True), Toggles(True, False), Toggles(False, True), Toggles(False, False))
        ),
        episodes=20,
    ),
}

# Published comparison targets (success, pooled safe rate, zero-danger rate).
# Stored for the report table only; never asserted against our output.
REFERENCE_POINTS = {
    ("S1", "fixed5/straight"): {"success_rate": 0.90, "safe_rate": 0.9973, "zero_danger_rate": 0.92,
                                "note": "fixed five-obstacle protocol, straight-line target"},
    ("S2a", "random5/straight"): {"success_rate": 0.80, "safe_rate": 0.9968, "zero_danger_rate": 0.85,
                                  "note": "randomized obstacle positions, default backbone"},
    ("S4", "cbf=on,rag=on"): {"success_rate": 0.80, "safe_rate": 0.9968, "zero_danger_rate": 0.85,
                              "note": "ablation, full framework"},
    ("S4", "cbf=on,rag=off"): {"success_rate": 0.55, "safe_rate": 0.9905, "zero_danger_rate": 0.90,
                               "note": "ablation, verifier without retrieval"},
    ("S4", "cbf=off,rag=on"): {"success_rate": 0.70, "safe_rate": 0.9712, "zero_danger_rate": 0.45,
                               "note": "ablation, retrieval without verifier"},
    ("S4", "cbf=off,rag=off"): {"success_rate": 0.50, "safe_rate": 0.9881, "zero_danger_rate": 0.60,
                                "note": "ablation, neither"},
}


def make_planner(kind: str, transcript_path=None):
    from .planner import EndpointConfig, ExternalPlanner, ScriptedPlanner

    if kind == "scripted":
        return ScriptedPlanner()
    if kind == "external":
        return ExternalPlanner(EndpointConfig.from_env(), transcript_path)
    raise ValueError(f"unknown planner kind {kind!r}")


def _episode_job(args) -> EpisodeRecord:
    scenario, toggles, seed, planner_kind, transcript = args
    return run_episode(scenario, make_planner(planner_kind, transcript), toggles, seed)


@dataclass
class ConfigResult:
    name: str
    scenario: str
    strategy: str
    use_cbf: bool
    use_rag: bool
    episodes: int
    seeds: list
    captured: int
    total_steps: int
    danger_steps: int
    success_rate: float
    safe_rate: float
    safe_rate_episode_mean: float
    zero_danger_rate: float
    records: list = field(default_factory=list)
    reference: Optional[dict] = None


@dataclass
class SuiteReport:
    suite: str
    planner: str
    episodes: int
    seed_base: int
    configs: list
    wall_clock: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock")
        return {"schema": 1, **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["suite", "config", "scenario", "strategy", "use_cbf", "use_rag", "episodes",
                    "success_rate", "safe_rate", "safe_rate_episode_mean", "zero_danger_rate"])
        for c in self.configs:
            w.writerow([self.suite, c.name, c.scenario, c.strategy, c.use_cbf, c.use_rag, c.episodes,
                        repr(c.success_rate), repr(c.safe_rate), repr(c.safe_rate_episode_mean),
                        repr(c.zero_danger_rate)])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteReport":
        if d.get("schema") != 1:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(d["suite"], d["planner"], d["episodes"], d["seed_base"],
                   [ConfigResult(**c) for c in d["configs"]])


def _record_path(config_name: str, seed: int) -> str:
    return f"records/{config_name.replace('/', '__').replace('=', '-').replace(',', '_')}/seed_{seed:05d}.jsonl"


def run_suite(
    spec: SuiteSpec,
    out_dir=None,
    workers: int = 1,
    episodes: int | None = None,
    seed_base: int | None = None,
    keep_records: bool = False,
) -> SuiteReport | tuple[SuiteReport, dict]:
    """Run every config of a suite over consecutive seeds and aggregate the rates.

    Episodes run as an independent map (a process pool when ``workers`` > 1);
    aggregation folds the finished records in seed order. With ``out_dir``
    the raw records, report.json, report.csv and timing.json are written.
    ``keep_records`` additionally returns {config name: [EpisodeRecord]}.
    """
    n = spec.episodes if episodes is None else episodes
    base = spec.seed_base if seed_base is None else seed_base
    if n < 1:
        raise ValueError("episodes must be at least 1")
    out = Path(out_dir) if out_dir is not None else None
    results, kept, timing = [], {}, {}
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for cfg in spec.configs:
            seeds = list(range(base, base + n))
            transcripts = [None] * n
            if out is not None and spec.planner == "external":
                tdir = out / "transcripts"
                tdir.mkdir(parents=True, exist_ok=True)
                transcripts = [tdir / Path(_record_path(cfg.name, s)).name for s in seeds]
            jobs = [(cfg.scenario, cfg.toggles, s, spec.planner, t) for s, t in zip(seeds, transcripts)]
            start = time.perf_counter()
            try:
                recs = list(pool.map(_episode_job, jobs)) if pool else [_episode_job(j) for j in jobs]
            except Exception as exc:
                raise RuntimeError(f"suite {spec.id}, config {cfg.name}: {exc}") from exc
            timing[cfg.name] = time.perf_counter() - start
            paths = [_record_path(cfg.name, s) for s in seeds]
            if out is not None:
                for rec, rel in zip(recs, paths):
                    p = out / rel
                    p.parent.mkdir(parents=True, exist_ok=True)
                    rec.write(p)
            if keep_records:
                kept[cfg.name] = recs
            results.append(ConfigResult(
                name=cfg.name,
                scenario=cfg.scenario.name,
                strategy=cfg.scenario.target_strategy,
                use_cbf=cfg.toggles.use_cbf,
                use_rag=cfg.toggles.use_rag,
                episodes=n,
                seeds=seeds,
                captured=sum(r.captured for r in recs),
                total_steps=sum(r.total_steps for r in recs),
                danger_steps=sum(r.danger_steps for r in recs),
                success_rate=success_rate(recs),
                safe_rate=safe_rate(recs),
                safe_rate_episode_mean=safe_rate_episode_mean(recs),
                zero_danger_rate=zero_danger_rate(recs),
                records=paths if out is not None else [],
                reference=REFERENCE_POINTS.get((spec.id, cfg.name)),
            ))
    finally:
        if pool:
            pool.shutdown()
    report = SuiteReport(spec.id, spec.planner, n, base, results, timing)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "report.csv").write_text(report.to_csv())
        (out / "timing.json").write_text(json.dumps({"seconds_per_config": timing}, indent=2) + "\n")
    return (report, kept) if keep_records else report


def audit_report(report_path) -> None:
    """Audit every referenced record, then recompute each config's rates bit-for-bit."""
    report_path = Path(report_path)
    report = SuiteReport.from_dict(json.loads(report_path.read_text()))
    root = report_path.parent
    for c in report.configs:
        if len(c.records) != c.episodes:
            raise AuditFailure(f"config {c.name}", "report does not reference one record per episode")
        recs = []
        for rel in c.records:
            rec = EpisodeRecord.read(root / rel)
            try:
                audit_record(rec)
            except AuditFailure as exc:
                raise AuditFailure(f"{rel} {exc.where}", exc.detail) from exc
            recs.append(rec)
        seeds = [r.header["seed"] for r in recs]
        if seeds != c.seeds:
            raise AuditFailure(f"config {c.name}", "record seeds differ from the report")
        for key, fn in (
            ("success_rate", success_rate),
            ("safe_rate", safe_rate),
            ("safe_rate_episode_mean", safe_rate_episode_mean),
            ("zero_danger_rate", zero_danger_rate),
        ):
            if fn(recs) != getattr(c, key):
                raise AuditFailure(f"config {c.name}", f"{key} {getattr(c, key)!r} but records give {fn(recs)!r}")


def render_table(report: SuiteReport) -> str:
    """Fixed-width comparison of our rates against the stored reference points."""
    head = f"{'config':<24} {'success':>8} {'safe':>8} {'zero-dng':>8}   {'ref succ':>8} {'ref safe':>8} {'ref zero':>8}"
    lines = [f"suite {report.suite} ({report.episodes} episodes per config, seeds from {report.seed_base})", head]
    for c in report.configs:
        ref = c.reference or {}

        def r(key):
            return f"{ref[key]:>8.4f}" if key in ref else f"{'-':>8}"

        lines.append(
            f"{c.name:<24} {c.success_rate:>8.4f} {c.safe_rate:>8.4f} {c.zero_danger_rate:>8.4f}   "
            f"{r('success_rate')} {r('safe_rate')} {r('zero_danger_rate')}"
        )
    return "\n".join(lines)


def iter_suite_ids() -> Iterable[str]:
    return SUITES.keys()
