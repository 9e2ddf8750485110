"""Fuzzy control-barrier verification of semantic actions.

A semantic action is a direction cone. The verifier

* discretizes the cone into scaled basis rays whose hull (together with the
  origin) covers every unit direction of the cone,
* decomposes any in-cone direction into simplex weights over those rays,
* certifies each ray with a CBF inequality for single-integrator dynamics and
  mixes the certificates with the same weights,
* scores the whole cone by its worst predicted clearance (``h_fuzzy``), and
* rotates hazardous cones to the best of 72 candidate headings.

All barrier values share one ``h`` per state (the inflated nearest-obstacle
clearance), which makes the mixed inequality exact by linearity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull

from .world import AgentState, ObstacleField, SemanticAction, angle_between, heading, unit

LARGE = 1e9
SCALE_PAD = 1e-6
MAX_SPACING_2D = math.pi / 2
TIE_TOL = 1e-9
FULL_TOL = 1e-12
RAY_QUANTUM = 1e9  # rays closer than 1e-9 rad are scored once


class InvalidN(ValueError):
    pass


class OutsideCone(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DirectionCone:
    nominal: np.ndarray
    half_angle: float

    def __post_init__(self):
        object.__setattr__(self, "nominal", unit(self.nominal))
        if not (0.0 < self.half_angle <= math.pi):
            raise ValueError("half angle must lie in (0, pi]")

    @classmethod
    def of(cls, action: SemanticAction) -> "DirectionCone":
        return cls(action.nominal, action.cone_angle)

    @property
    def dim(self) -> int:
        return int(self.nominal.shape[0])

    @property
    def full(self) -> bool:
        return self.half_angle >= math.pi - FULL_TOL

    def contains(self, v, tol: float = 1e-9) -> bool:
        return angle_between(v, self.nominal) <= self.half_angle + tol


@dataclass(frozen=True, eq=False)
class ConeBasis:
    """Scaled basis rays; ``offsets`` are 2-D angles relative to the nominal."""

    cone: DirectionCone
    directions: np.ndarray
    scale: float
    angular_spacing: float
    offsets: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.directions.shape[0])

    @property
    def unit_directions(self) -> np.ndarray:
        return self.directions / self.scale


def _frame(nominal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal pair perpendicular to a 3-D unit vector."""
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(nominal)))] = 1.0
    u1 = helper - np.dot(helper, nominal) * nominal
    u1 /= np.linalg.norm(u1)
    u2 = np.cross(nominal, u1)
    return u1, u2


def _ring(nominal, u1, u2, polar: float, count: int, phase: float = 0.0) -> np.ndarray:
    az = phase + 2 * math.pi * np.arange(count) / count
    return (math.cos(polar) * nominal
            + math.sin(polar) * (np.cos(az)[:, None] * u1 + np.sin(az)[:, None] * u2))


def discretize_cone(cone: DirectionCone, n: int) -> ConeBasis:
    """Basis rays covering ``cone``; ``n`` is a lower bound on the ray count.

    2-D: rays evenly spaced over [-theta, theta] (or around the full circle),
    with extra rays added whenever the spacing would exceed 90 degrees, each
    scaled by 1/cos(spacing/2) padded by 1e-6 so that the chord between
    neighbours stays outside the unit arc.

    3-D: the nominal plus a ring opened wide enough that the ring polygon
    circumscribes the cap (and an inner ring at half the angle for n >= 13);
    the scale is the reciprocal of the smallest hull-facet distance.
    """
    if cone.dim == 2:
        if n < 2:
            raise InvalidN("a 2-D cone needs at least 2 basis rays")
        return _discretize_2d(cone, n)
    if n < 4:
        raise InvalidN("a 3-D cone needs at least 4 basis rays")
    return _discretize_3d(cone, n)


def _discretize_2d(cone: DirectionCone, n: int) -> ConeBasis:
    theta = cone.half_angle
    if cone.full:
        count = max(n, 4)
        spacing = 2 * math.pi / count
        offsets = -math.pi + spacing * np.arange(count)
    else:
        count = max(n, math.ceil(2 * theta / MAX_SPACING_2D - 1e-12) + 1)
        offsets = np.linspace(-theta, theta, count)
        spacing = 2 * theta / (count - 1)
    scale = (1.0 / math.cos(spacing / 2)) * (1 + SCALE_PAD)
    a0 = math.atan2(cone.nominal[1], cone.nominal[0])
    dirs = scale * np.stack([np.cos(a0 + offsets), np.sin(a0 + offsets)], axis=1)
    dirs.setflags(write=False)
    offsets.setflags(write=False)
    return ConeBasis(cone, dirs, scale, spacing, offsets)


def _discretize_3d(cone: DirectionCone, n: int) -> ConeBasis:
    nominal = cone.nominal
    u1, u2 = _frame(nominal)
    theta = cone.half_angle
    if cone.full:
        m = max(n - 2, 4)
        rays = np.vstack([nominal, -nominal, _ring(nominal, u1, u2, math.pi / 2, m)])
    else:
        inner = 6 if n >= 13 else 0
        m = n - 1 - inner
        if theta < math.pi / 2:
            polar = math.atan(math.tan(theta) / math.cos(math.pi / m))
        else:
            polar = theta
        parts = [nominal[None, :], _ring(nominal, u1, u2, polar, m)]
        if inner:
            parts.append(_ring(nominal, u1, u2, theta / 2, inner, phase=math.pi / inner))
        rays = np.vstack(parts)
    hull = ConvexHull(np.vstack([np.zeros(3), rays]))
    dist = -hull.equations[:, -1]
    nearest = float(dist[dist > 1e-12].min())
    scale = (1.0 / nearest) * (1 + SCALE_PAD)
    dirs = scale * rays
    dirs.setflags(write=False)
    return ConeBasis(cone, dirs, scale, 2 * math.pi / m)


def decompose_direction(v, basis: ConeBasis) -> np.ndarray:
    """Simplex weights whose combination of basis rays points along ``v``."""
    v = np.asarray(v, dtype=float)
    cone = basis.cone
    if not cone.contains(v):
        raise OutsideCone(
            f"direction is {math.degrees(angle_between(v, cone.nominal)):.6f} deg from the nominal, "
            f"cone half-angle is {math.degrees(cone.half_angle):.6f} deg"
        )
    v = v / np.linalg.norm(v)
    n = len(basis)
    if cone.dim == 2:
        mu = np.zeros(n)
        i, j = _bracket(v, basis)
        pair = np.column_stack([basis.directions[i], basis.directions[j]])
        sol = np.linalg.solve(pair, v)
        mu[i] += sol[0]
        mu[j] += sol[1]
    else:
        mu = _facet_weights(v, basis.directions)
    mu = np.clip(mu, 0.0, None)
    mu[mu < 1e-12 * mu.max()] = 0.0
    return mu / mu.sum()


def _facet_weights(v: np.ndarray, rays: np.ndarray) -> np.ndarray:
    """Weights on the outer hull facet that the ray along ``v`` crosses.

    Each outer facet of conv({0} U rays) is a triangle of basis rays; ``v``
    lies in the cone of exactly one of them (up to shared edges), where the
    3x3 solve gives non-negative weights. The facet with the largest minimum
    weight is taken so boundary directions stay well defined.
    """
    hull = ConvexHull(np.vstack([np.zeros(3), rays]))
    best, best_min = None, -np.inf
    for simplex in hull.simplices:
        if 0 in simplex:
            continue
        tri = simplex - 1
        try:
            sol = np.linalg.solve(rays[tri].T, v)
        except np.linalg.LinAlgError:
            continue
        if sol.min() > best_min:
            best, best_min = (tri, sol), sol.min()
    mu = np.zeros(len(rays))
    tri, sol = best
    mu[tri] += sol
    return mu


def _bracket(v, basis: ConeBasis) -> tuple[int, int]:
    """Indices of the two adjacent 2-D rays whose sector contains ``v``."""
    nom = basis.cone.nominal
    phi = math.atan2(nom[0] * v[1] - nom[1] * v[0], nom[0] * v[0] + nom[1] * v[1])
    offs = basis.offsets
    n = len(offs)
    if basis.cone.full:
        k = int(math.floor((phi - offs[0]) / basis.angular_spacing)) % n
        return k, (k + 1) % n
    phi = min(max(phi, offs[0]), offs[-1])
    k = int(np.searchsorted(offs, phi, side="right")) - 1
    k = min(max(k, 0), n - 2)
    return k, k + 1


def barrier_value(state: AgentState, obstacles: ObstacleField, d_safe: float) -> tuple[float, Optional[int]]:
    """Inflated clearance to the nearest obstacle, and that obstacle's index."""
    if len(obstacles) == 0:
        return LARGE, None
    c = obstacles.clearances(state.position)
    j = int(np.argmin(c))
    return float(c[j]) - d_safe, j


def barrier_gradient(state: AgentState, obstacles: ObstacleField) -> np.ndarray:
    """Unit gradient of the barrier: away from the nearest obstacle.

    Obstacles tied within 1e-9 contribute the renormalized mean of their
    outward directions.
    """
    dim = state.dim
    if len(obstacles) == 0:
        return np.zeros(dim)
    c = obstacles.clearances(state.position)
    ties = np.flatnonzero(c <= c.min() + TIE_TOL)
    offs = obstacles.offsets(state.position)[ties]
    norms = np.linalg.norm(offs, axis=1)
    fallback = np.zeros(dim)
    fallback[0] = 1.0
    dirs = [o / nrm if nrm > 0 else fallback for o, nrm in zip(offs, norms)]
    g = np.mean(dirs, axis=0)
    gn = float(np.linalg.norm(g))
    return g / gn if gn > 0 else fallback


@dataclass(frozen=True, eq=False)
class BasisCertificate:
    direction: np.ndarray
    h: float
    u: np.ndarray
    gamma: float
    gradient: np.ndarray
    residual: float

    @property
    def feasible(self) -> bool:
        return self.residual >= -1e-9


@dataclass(frozen=True, eq=False)
class MixedCertificate:
    weights: np.ndarray
    u: np.ndarray
    h: float
    residual: float


def basis_certificate(
    state: AgentState,
    direction,
    obstacles: ObstacleField,
    gamma: float = 1.0,
    v_max: float = 2.0,
    d_safe: float = 0.5,
) -> BasisCertificate:
    """Certify full-speed motion along one basis ray.

    With x' = u the drift term vanishes and L_g h . u is grad(h) . u, so the
    residual is grad(h) . u + gamma * h.
    """
    e = np.asarray(direction, dtype=float)
    h, _ = barrier_value(state, obstacles, d_safe)
    g = barrier_gradient(state, obstacles)
    u = v_max * e / np.linalg.norm(e)
    return BasisCertificate(e, h, u, gamma, g, float(np.dot(g, u) + gamma * h))


def certify_basis(
    state: AgentState,
    basis: ConeBasis,
    obstacles: ObstacleField,
    gammas: float | Sequence[float] = 1.0,
    v_max: float = 2.0,
    d_safe: float = 0.5,
) -> list[BasisCertificate]:
    """Certificates for every ray of ``basis`` at one state (shared h and gradient)."""
    n = len(basis)
    gam = np.broadcast_to(np.asarray(gammas, dtype=float), (n,))
    h, _ = barrier_value(state, obstacles, d_safe)
    g = barrier_gradient(state, obstacles)
    units = basis.unit_directions
    res = v_max * (units @ g) + gam * h
    return [
        BasisCertificate(basis.directions[i], h, v_max * units[i], float(gam[i]), g, float(res[i]))
        for i in range(n)
    ]


def mix_certificates(weights, certs: Sequence[BasisCertificate]) -> MixedCertificate:
    """Convex combination of certificates.

    The mixed class-K function is the pointwise maximum of the per-ray linear
    ones, i.e. max_i(gamma_i * h): for h < 0 that is gamma_min * h, which is
    what keeps the mixed inequality true on the unsafe side.
    """
    lam = np.asarray(weights, dtype=float)
    if lam.shape[0] != len(certs):
        raise DimensionMismatch(f"{lam.shape[0]} weights for {len(certs)} certificates")
    if np.any(lam < -1e-12) or abs(lam.sum() - 1.0) > 1e-9:
        raise ValueError("weights must lie on the probability simplex")
    u = np.sum(lam[:, None] * np.array([c.u for c in certs]), axis=0)
    h = float(np.dot(lam, [c.h for c in certs]))
    g = certs[0].gradient
    alpha = max(c.gamma * h for c in certs)
    return MixedCertificate(lam, u, h, float(np.dot(g, u) + alpha))


@dataclass(frozen=True)
class PredictionParams:
    d_pred: float = 2.0
    n_dir_samples: int = 17
    n_seg_samples: int = 16

    def __post_init__(self):
        if not self.d_pred > 0:
            raise ValueError("d_pred must be positive")
        if self.n_dir_samples < 3 or self.n_seg_samples < 2:
            raise ValueError("need at least 3 direction samples and 2 segment samples")


class Status(str, Enum):
    SAFE = "safe"
    HAZARDOUS = "hazardous"


@dataclass(frozen=True, eq=False)
class Verdict:
    status: Status
    h_fuzzy: float
    worst_direction: np.ndarray
    nearest_obstacle: Optional[int]

    @property
    def safe(self) -> bool:
        return self.status is Status.SAFE

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "h_fuzzy": self.h_fuzzy,
            "worst_direction": [float(x) for x in self.worst_direction],
            "nearest_obstacle": self.nearest_obstacle,
        }


def cone_samples(nominal, half_angle: float, count: int) -> np.ndarray:
    """Unit directions spanning a cone, always containing the nominal and boundary.

    2-D: ``count`` evenly spaced angles over [-theta, theta] (nominal appended
    if ``count`` is even). 3-D: nominal, a boundary ring at theta and, when
    there is room, a ring at theta/2.
    """
    nominal = np.asarray(nominal, dtype=float)
    if nominal.shape[0] == 2:
        offsets = np.linspace(-half_angle, half_angle, count)
        if count % 2 == 0:
            offsets = np.append(offsets, 0.0)
        a0 = math.atan2(nominal[1], nominal[0])
        return np.stack([np.cos(a0 + offsets), np.sin(a0 + offsets)], axis=1)
    rest = count - 1
    outer = rest if rest < 6 else (rest + 1) // 2
    inner = rest - outer
    u1, u2 = _frame(nominal)
    parts = [nominal[None, :], _ring(nominal, u1, u2, half_angle, outer)]
    if inner:
        parts.append(_ring(nominal, u1, u2, half_angle / 2, inner, phase=math.pi / inner))
    return np.vstack(parts)


def _fuzzy_from_dirs(position, dirs: np.ndarray, obstacles: ObstacleField, pp: PredictionParams):
    """Clearance minimum over a stack of direction sets, shape (K, n_dir, D) -> (K,)."""
    t = np.linspace(0.0, pp.d_pred, pp.n_seg_samples)
    pts = position + t[None, None, :, None] * dirs[:, :, None, :]
    c = obstacles.clearances(pts)  # (K, n_dir, n_seg, M)
    k = c.shape[0]
    flat = c.reshape(k, -1)
    idx = np.argmin(flat, axis=1)
    return flat[np.arange(k), idx], idx, c.shape


def fuzzy_barrier(
    state: AgentState,
    action: SemanticAction,
    obstacles: ObstacleField,
    pp: PredictionParams,
    d_safe: float,
) -> Verdict:
    """Worst inflated clearance over the action's cone and lookahead segment."""
    if len(obstacles) == 0:
        return Verdict(Status.SAFE, LARGE - d_safe, np.array(action.nominal), None)
    dirs = cone_samples(action.nominal, action.cone_angle, pp.n_dir_samples)
    vals, idx, shape = _fuzzy_from_dirs(state.position, dirs[None], obstacles, pp)
    _, n_dir, n_seg, m = shape
    di, _, j = np.unravel_index(int(idx[0]), (n_dir, n_seg, m))
    h = float(vals[0]) - d_safe
    status = Status.SAFE if h >= 0 else Status.HAZARDOUS
    return Verdict(status, h, dirs[di], int(j))


@lru_cache(maxsize=None)
def correction_candidates(dim: int, count: int = 72) -> np.ndarray:
    out = np.array([heading(2 * math.pi * k / count, dim) for k in range(count)])
    out.setflags(write=False)
    return out


def candidate_scores(
    state: AgentState,
    action: SemanticAction,
    obstacles: ObstacleField,
    pp: PredictionParams,
    d_safe: float,
    candidates: np.ndarray,
) -> np.ndarray:
    """``h_fuzzy`` of the action rotated onto each candidate nominal."""
    if len(obstacles) == 0:
        return np.full(len(candidates), LARGE - d_safe)
    if candidates.shape[1] == 2:
        # Rotated cones share most of their rays; evaluate each distinct ray once.
        offsets = np.linspace(-action.cone_angle, action.cone_angle, pp.n_dir_samples)
        if pp.n_dir_samples % 2 == 0:
            offsets = np.append(offsets, 0.0)
        base = np.arctan2(candidates[:, 1], candidates[:, 0])
        keys = np.round(np.mod(base[:, None] + offsets[None, :], 2 * math.pi) * RAY_QUANTUM).astype(np.int64)
        uniq, inverse = np.unique(keys, return_inverse=True)
        ang = uniq / RAY_QUANTUM
        rays = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        ray_min, _, _ = _fuzzy_from_dirs(state.position, rays[:, None, :], obstacles, pp)
        return ray_min[inverse.reshape(keys.shape)].min(axis=1) - d_safe
    dirs = np.stack([cone_samples(c, action.cone_angle, pp.n_dir_samples) for c in candidates])
    vals, _, _ = _fuzzy_from_dirs(state.position, dirs, obstacles, pp)
    return vals - d_safe


def correct_action(
    state: AgentState,
    action: SemanticAction,
    obstacles: ObstacleField,
    pp: PredictionParams,
    d_safe: float,
    n_candidates: int = 72,
    verdict: Verdict | None = None,
) -> SemanticAction:
    """Rotate a hazardous action's nominal to the safest of ``n_candidates`` headings.

    The cone angle is kept. Ties on ``h_fuzzy`` go to the smallest rotation
    from the original nominal, then to the lowest candidate index. A safe
    action is returned unchanged. If no candidate is safe the best one is
    still returned; re-verification reports it hazardous. A verdict already
    computed for ``action`` at ``state`` may be passed to skip re-evaluation.
    """
    verdict = verdict or fuzzy_barrier(state, action, obstacles, pp, d_safe)
    if verdict.safe:
        return action
    cands = correction_candidates(action.dim, n_candidates)
    scores = candidate_scores(state, action, obstacles, pp, d_safe, cands)
    best = scores.max()
    tied = np.flatnonzero(scores >= best - 1e-12)
    rot = np.arccos(np.clip(cands[tied] @ action.nominal, -1.0, 1.0))
    pick = tied[np.flatnonzero(rot <= rot.min() + 1e-12)[0]]
    return action.with_nominal(cands[pick])
