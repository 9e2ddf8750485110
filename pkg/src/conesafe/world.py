"""Geometry and kinematics shared by the verifier, planner and simulator.

Vectors are plain float numpy arrays of length 2 or 3. Value types are frozen
dataclasses; arrays stored on them are marked read-only so instances can be
shared freely between threads and processes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Sequence, Union

import numpy as np

SCHEMA_VERSION = 1

TRACKING_ANGLE = math.radians(10.0)
EVASION_ANGLE = math.radians(60.0)


class PlacementInfeasible(RuntimeError):
    """Rejection sampling could not place every obstacle."""


class ScenarioError(ValueError):
    """A scenario file or dict is malformed."""


def as_vector(values, dim: int | None = None) -> np.ndarray:
    v = np.array(values, dtype=float).reshape(-1)
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"expected a {dim}-vector, got {v.shape[0]} components")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector components must be finite")
    v.setflags(write=False)
    return v


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    out = v / n
    out.setflags(write=False)
    return out


def heading(angle: float, dim: int = 2) -> np.ndarray:
    """Unit vector in the horizontal plane at ``angle`` radians from +x."""
    v = np.zeros(dim)
    v[0] = math.cos(angle)
    v[1] = math.sin(angle)
    v.setflags(write=False)
    return v


def angle_between(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return math.acos(max(-1.0, min(1.0, c)))


@dataclass(frozen=True, eq=False)
class AgentState:
    position: np.ndarray
    velocity: np.ndarray

    @classmethod
    def at(cls, position, velocity=None) -> "AgentState":
        p = as_vector(position)
        v = as_vector(np.zeros_like(p) if velocity is None else velocity, p.shape[0])
        return cls(p, v)

    @property
    def dim(self) -> int:
        return int(self.position.shape[0])


@dataclass(frozen=True)
class Dynamics:
    """Single integrator x' = u with a speed cap (drift 0, input map identity)."""

    v_max: float = 2.0
    dt: float = 0.05

    def __post_init__(self):
        if not self.v_max > 0:
            raise ValueError("v_max must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_vector(self.center))
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")

    kind = "sphere"


@dataclass(frozen=True, eq=False)
class CylinderZ:
    """Vertical cylinder of infinite height; only valid in 3-D worlds."""

    center_xy: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center_xy", as_vector(self.center_xy, 2))
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")

    kind = "cylinder"


Obstacle = Union[Sphere, CylinderZ]


def signed_clearance(p, obs: Obstacle) -> float:
    """Distance from ``p`` to the obstacle surface; negative inside."""
    p = np.asarray(p, dtype=float)
    if isinstance(obs, CylinderZ):
        return float(math.hypot(p[0] - obs.center_xy[0], p[1] - obs.center_xy[1]) - obs.radius)
    return float(np.linalg.norm(p - obs.center) - obs.radius)


class ObstacleField:
    """Obstacles packed into arrays for vectorized clearance queries.

    Cylinders are handled with a per-obstacle axis mask that zeroes the z
    difference, so a single broadcast covers both shapes.
    """

    def __init__(self, obstacles: Sequence[Obstacle], dim: int):
        self.obstacles: tuple[Obstacle, ...] = tuple(obstacles)
        self.dim = dim
        m = len(self.obstacles)
        centers = np.zeros((m, dim))
        mask = np.ones((m, dim))
        radii = np.zeros(m)
        for j, ob in enumerate(self.obstacles):
            if isinstance(ob, CylinderZ):
                if dim != 3:
                    raise ValueError("cylinders are only permitted in 3-D worlds")
                centers[j, :2] = ob.center_xy
                mask[j, 2] = 0.0
            else:
                if ob.center.shape[0] != dim:
                    raise ValueError("sphere dimension does not match the world")
                centers[j] = ob.center
            radii[j] = ob.radius
        for arr in (centers, mask, radii):
            arr.setflags(write=False)
        self.centers = centers
        self.mask = mask
        self.radii = radii

    def __len__(self) -> int:
        return len(self.obstacles)

    def __iter__(self):
        return iter(self.obstacles)

    def __getitem__(self, j):
        return self.obstacles[j]

    def clearances(self, points) -> np.ndarray:
        """Signed clearance of every point to every obstacle, shape (..., M)."""
        pts = np.asarray(points, dtype=float)
        diff = (pts[..., None, :] - self.centers) * self.mask
        return np.sqrt(np.einsum("...i,...i->...", diff, diff)) - self.radii

    def offsets(self, p) -> np.ndarray:
        """Vectors from each obstacle center (or axis) to ``p``, shape (M, D)."""
        return (np.asarray(p, dtype=float) - self.centers) * self.mask

    def with_obstacles(self, obstacles: Sequence[Obstacle]) -> "ObstacleField":
        return ObstacleField(obstacles, self.dim)


def clamp_speed(v, v_max: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(v))
    if n <= v_max:
        return v.copy()
    return v * (v_max / n)


class SemanticClass(str, Enum):
    TRACKING = "tracking"
    EVASION = "evasion"
    CUSTOM = "custom"


@dataclass(frozen=True, eq=False)
class SemanticAction:
    """A discrete instruction: nominal unit direction plus an uncertainty cone.

    ``speed_scale`` lets the catalog encode HOLD as a tracking action whose
    commanded speed is scaled to zero by the controller.
    """

    name: str
    nominal: np.ndarray
    cone_angle: float
    semantic_class: SemanticClass = SemanticClass.CUSTOM
    speed_scale: float = 1.0

    def __post_init__(self):
        nominal = as_vector(self.nominal)
        if abs(float(np.linalg.norm(nominal)) - 1.0) > 1e-9:
            raise ValueError("nominal direction must be a unit vector")
        object.__setattr__(self, "nominal", nominal)
        if not (0.0 < self.cone_angle <= math.pi):
            raise ValueError("cone angle must lie in (0, pi]")
        object.__setattr__(self, "semantic_class", SemanticClass(self.semantic_class))

    @property
    def dim(self) -> int:
        return int(self.nominal.shape[0])

    def with_nominal(self, nominal) -> "SemanticAction":
        return replace(self, nominal=unit(nominal))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "nominal": [float(x) for x in self.nominal],
            "cone_angle": float(self.cone_angle),
            "semantic_class": self.semantic_class.value,
            "speed_scale": float(self.speed_scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SemanticAction":
        return cls(d["name"], d["nominal"], d["cone_angle"], d["semantic_class"], d.get("speed_scale", 1.0))


COMPASS = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")
COMPASS_WORDS = {
    "E": "east", "NE": "north-east", "N": "north", "NW": "north-west",
    "W": "west", "SW": "south-west", "S": "south", "SE": "south-east",
}


@dataclass(frozen=True)
class CatalogEntry:
    action: SemanticAction
    description: str
    synonyms: tuple[str, ...]


def build_catalog(dim: int = 2) -> dict[str, CatalogEntry]:
    """The 17-action catalog: 8 tracking headings, 8 evasion headings, HOLD."""
    return dict(_catalog(dim))


@lru_cache(maxsize=None)
def _catalog(dim: int) -> dict[str, CatalogEntry]:
    cat: dict[str, CatalogEntry] = {}
    for k, code in enumerate(COMPASS):
        word = COMPASS_WORDS[code]
        spaced = word.replace("-", " ")
        d = heading(k * math.pi / 4, dim)
        cat[f"TRACK_{code}"] = CatalogEntry(
            SemanticAction(f"TRACK_{code}", d, TRACKING_ANGLE, SemanticClass.TRACKING),
            f"precise tracking toward the {word}, 10 degree cone",
            (f"track {spaced}", f"pursue {spaced}", f"chase {spaced}"),
        )
    for k, code in enumerate(COMPASS):
        word = COMPASS_WORDS[code]
        spaced = word.replace("-", " ")
        d = heading(k * math.pi / 4, dim)
        cat[f"EVADE_{code}"] = CatalogEntry(
            SemanticAction(f"EVADE_{code}", d, EVASION_ANGLE, SemanticClass.EVASION),
            f"emergency evasion toward the {word}, 60 degree cone",
            (f"evade {spaced}", f"escape {spaced}", f"avoid {spaced}"),
        )
    cat["HOLD"] = CatalogEntry(
        SemanticAction("HOLD", heading(0.0, dim), TRACKING_ANGLE, SemanticClass.TRACKING, speed_scale=0.0),
        "hold position (zero commanded speed)",
        ("hold", "hover", "stop"),
    )
    return cat


def nearest_catalog_name(direction, prefix: str, dim: int) -> str:
    """Catalog heading closest to ``direction``; ties go to the smaller angle."""
    d = np.asarray(direction, dtype=float)
    best, best_cos = None, -np.inf
    for k, code in enumerate(COMPASS):
        c = float(np.dot(heading(k * math.pi / 4, dim), d))
        if c > best_cos + 1e-12:
            best, best_cos = code, c
    return f"{prefix}_{best}"


@dataclass(frozen=True)
class ObstacleSpec:
    count: int = 5
    shapes: dict = field(default_factory=lambda: {"sphere": 5})
    placement: str = "fixed"
    layout: tuple = ()
    region: tuple = ((2.0, 14.0), (-5.0, 9.0))
    z_range: tuple = (-1.0, 1.0)
    radius_range: tuple = (0.8, 1.5)
    start_clearance: float = 1.0
    min_gap: float = 1.5
    path_clearance: float = 1.0

    def __post_init__(self):
        if self.placement not in ("fixed", "random"):
            raise ScenarioError(f"unknown placement {self.placement!r}")
        if sum(self.shapes.values()) != self.count:
            raise ScenarioError("shape mix does not add up to the obstacle count")
        if self.placement == "fixed" and len(self.layout) != self.count:
            raise ScenarioError("fixed layout must list exactly `count` obstacles")


@dataclass(frozen=True)
class Scenario:
    """Everything needed to reproduce an episode, minus the seed override."""

    name: str = "baseline"
    dimension: int = 2
    obstacles: ObstacleSpec = field(default_factory=ObstacleSpec)
    pursuer_start: tuple = (0.0, 0.0)
    target_start: tuple = (12.0, 4.0)
    start_jitter: float = 1.0
    target_strategy: str = "straight"
    target_heading: tuple = (0.0, 1.0)
    target_heading_jitter_deg: float = 20.0
    evader_headings: int = 8
    evader_horizon: int = 10
    capture_radius: float = 1.0
    max_steps: int = 600
    d_safe: float = 0.5
    pursuer_v_max: float = 2.0
    target_v_max: float = 1.2
    target_speed: float = 1.2
    dt: float = 0.05
    gamma: float = 1.0
    t_pred: float = 1.0
    n_dir_samples: int = 17
    n_seg_samples: int = 16
    n_basis: int = 5
    k_plan: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.dimension not in (2, 3):
            raise ScenarioError("dimension must be 2 or 3")
        if len(self.pursuer_start) != self.dimension or len(self.target_start) != self.dimension:
            raise ScenarioError("start positions must match the dimension")
        if self.obstacles.shapes.get("cylinder", 0) and self.dimension != 3:
            raise ScenarioError("cylinders require dimension 3")
        if self.target_strategy not in ("straight", "matrix_game"):
            raise ScenarioError(f"unknown target strategy {self.target_strategy!r}")
        if not self.capture_radius > 0:
            raise ScenarioError("capture_radius must be positive")
        if self.target_speed > self.target_v_max + 1e-12:
            raise ScenarioError("target speed exceeds the target speed cap")
        if self.max_steps < 1 or self.k_plan < 1:
            raise ScenarioError("max_steps and k_plan must be at least 1")

    @property
    def pursuer_dynamics(self) -> Dynamics:
        return Dynamics(self.pursuer_v_max, self.dt)

    @property
    def target_dynamics(self) -> Dynamics:
        return Dynamics(self.target_v_max, self.dt)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obstacles"]["layout"] = [dict(o) for o in self.obstacles.layout]
        return {"schema": SCHEMA_VERSION, **_lists(d)}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        schema = d.pop("schema", None)
        if schema != SCHEMA_VERSION:
            raise ScenarioError(f"unsupported scenario schema {schema!r}")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
        obs = dict(d.pop("obstacles", {}))
        bad = set(obs) - set(ObstacleSpec.__dataclass_fields__)
        if bad:
            raise ScenarioError(f"unknown obstacle fields: {sorted(bad)}")
        for key in ("region", "z_range", "radius_range"):
            if key in obs:
                obs[key] = _tuples(obs[key])
        if "layout" in obs:
            obs["layout"] = tuple(_frozen_layout(o) for o in obs["layout"])
        for key in ("pursuer_start", "target_start", "target_heading"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        try:
            return cls(obstacles=ObstacleSpec(**obs), **d)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from exc


def _tuples(x):
    if isinstance(x, (list, tuple)):
        return tuple(_tuples(i) for i in x)
    return x


def _lists(x):
    if isinstance(x, dict):
        return {k: _lists(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_lists(i) for i in x]
    return x


def _frozen_layout(o: dict) -> dict:
    o = dict(o)
    if o.get("kind") not in ("sphere", "cylinder"):
        raise ScenarioError(f"layout entry has unknown kind: {o!r}")
    o["center"] = tuple(float(c) for c in o["center"])
    o["radius"] = float(o["radius"])
    return o


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    return Scenario.from_dict(data)


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2) + "\n")


def obstacle_from_dict(o: dict, dim: int) -> Obstacle:
    if o["kind"] == "cylinder":
        return CylinderZ(o["center"][:2], o["radius"])
    return Sphere(as_vector(o["center"], dim), o["radius"])


def obstacle_to_dict(ob: Obstacle) -> dict:
    if isinstance(ob, CylinderZ):
        return {"kind": "cylinder", "center": [float(x) for x in ob.center_xy], "radius": float(ob.radius)}
    return {"kind": "sphere", "center": [float(x) for x in ob.center], "radius": float(ob.radius)}


def obstacle_gap(a: Obstacle, b: Obstacle) -> float:
    """Surface-to-surface gap; any cylinder makes the comparison planar."""
    ca = a.center_xy if isinstance(a, CylinderZ) else a.center
    cb = b.center_xy if isinstance(b, CylinderZ) else b.center
    if isinstance(a, CylinderZ) or isinstance(b, CylinderZ):
        ca, cb = ca[:2], cb[:2]
    return float(np.linalg.norm(np.asarray(ca) - np.asarray(cb)) - a.radius - b.radius)


@dataclass(frozen=True, eq=False)
class World:
    pursuer: AgentState
    target: AgentState
    obstacles: ObstacleField


MAX_PLACEMENT_ATTEMPTS = 5000


def generate_scenario(spec: Scenario, seed: int | None = None) -> World:
    """Draw agent starts and obstacles; a pure function of (spec, seed).

    Draw order is fixed (pursuer jitter, target jitter, heading jitter,
    obstacles) so that changing the obstacle count does not perturb the
    agent starts for the same seed.
    """
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    dim = spec.dimension

    def jitter(base):
        p = np.array(base, dtype=float)
        p[:2] += rng.uniform(-spec.start_jitter, spec.start_jitter, size=2)
        return p

    p0 = jitter(spec.pursuer_start)
    t0 = jitter(spec.target_start)
    base_heading = np.zeros(dim)
    base_heading[: len(spec.target_heading)] = spec.target_heading
    base_heading = unit(base_heading)
    turn = math.radians(rng.uniform(-spec.target_heading_jitter_deg, spec.target_heading_jitter_deg))
    c, s = math.cos(turn), math.sin(turn)
    th = base_heading.copy()
    th[0], th[1] = c * base_heading[0] - s * base_heading[1], s * base_heading[0] + c * base_heading[1]
    pursuer = AgentState.at(p0)
    target = AgentState.at(t0, spec.target_speed * th)

    os_ = spec.obstacles
    starts = (p0, t0)
    if os_.placement == "fixed":
        obstacles = [obstacle_from_dict(o, dim) for o in os_.layout]
        for j, ob in enumerate(obstacles):
            if not _start_ok(ob, starts, os_.start_clearance):
                raise PlacementInfeasible(f"fixed obstacle {j} overlaps an agent start")
    else:
        obstacles = []
        path = None
        if spec.target_strategy == "straight":
            # A straight-line target cannot steer, so keep its whole path clear.
            length = spec.target_speed * spec.max_steps * spec.dt
            path = t0 + np.linspace(0.0, length, int(length / 0.25) + 2)[:, None] * th
        kinds = [k for k in ("sphere", "cylinder") for _ in range(os_.shapes.get(k, 0))]
        attempts = 0
        for kind in kinds:
            while True:
                attempts += 1
                if attempts > MAX_PLACEMENT_ATTEMPTS:
                    raise PlacementInfeasible(
                        f"could not place {len(kinds)} obstacles after {MAX_PLACEMENT_ATTEMPTS} attempts"
                    )
                ob = _draw_obstacle(rng, kind, os_, dim)
                if not _start_ok(ob, starts, os_.start_clearance):
                    continue
                if any(obstacle_gap(ob, other) < os_.min_gap for other in obstacles):
                    continue
                if path is not None and ObstacleField([ob], dim).clearances(path).min() < os_.path_clearance:
                    continue
                obstacles.append(ob)
                break
    return World(pursuer, target, ObstacleField(obstacles, dim))


def _draw_obstacle(rng, kind: str, os_: ObstacleSpec, dim: int) -> Obstacle:
    (x0, x1), (y0, y1) = os_.region
    x = rng.uniform(x0, x1)
    y = rng.uniform(y0, y1)
    z = rng.uniform(*os_.z_range) if dim == 3 else None
    r = rng.uniform(*os_.radius_range)
    if kind == "cylinder":
        return CylinderZ((x, y), r)
    return Sphere((x, y) if dim == 2 else (x, y, z), r)


def _start_ok(ob: Obstacle, starts, margin: float) -> bool:
    return all(signed_clearance(p, ob) >= margin for p in starts)
