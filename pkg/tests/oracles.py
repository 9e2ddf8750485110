"""Independent reference computations used by the tests.

Nothing here calls into the code under test for the quantity being checked;
each oracle recomputes it by a different (slower, more literal) route.
"""

import itertools
import math

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull


def dense_fuzzy_2d(pos, nominal, half_angle, spheres, d_pred, d_safe, n_dir=10**4, n_seg=10**3):
    """Minimum inflated clearance over an n_dir x n_seg grid of cone rays and segment points.

    Along a fixed ray the clearance to a sphere is convex in t, so the grid
    minimum for that (ray, sphere) pair sits at one of the two grid points
    bracketing the continuous minimizer. Evaluating just those two is exact
    for the full grid and keeps 200 instances fast.
    """
    if not spheres:
        return 1e9 - d_safe
    pos = np.asarray(pos, dtype=float)
    a0 = math.atan2(nominal[1], nominal[0])
    off = np.linspace(-half_angle, half_angle, n_dir)
    rays = np.stack([np.cos(a0 + off), np.sin(a0 + off)], axis=1)
    step = d_pred / (n_seg - 1)
    best = math.inf
    for center, radius in spheres:
        w = pos - np.asarray(center, dtype=float)
        b = rays @ w
        t_star = np.clip(-b, 0.0, d_pred)
        k0 = np.floor(t_star / step)
        for k in (k0, np.minimum(k0 + 1, n_seg - 1)):
            t = k * step
            pts = pos + t[:, None] * rays
            d = np.linalg.norm(pts - center, axis=1) - radius
            best = min(best, float(d.min()))
    return best - d_safe


def in_cone_directions_2d(nominal, half_angle, count, rng):
    a0 = math.atan2(nominal[1], nominal[0])
    off = rng.uniform(-half_angle, half_angle, count)
    return np.stack([np.cos(a0 + off), np.sin(a0 + off)], axis=1)


def hull_contains(rays, points, tol=1e-12):
    """Membership of points in conv({0} U rays), via the hull's facet inequalities."""
    rays = np.asarray(rays, dtype=float)
    hull = ConvexHull(np.vstack([np.zeros(rays.shape[1]), rays]))
    a, b = hull.equations[:, :-1], hull.equations[:, -1]
    return np.all(np.asarray(points) @ a.T + b <= tol, axis=1)


def lp_contains(rays, point):
    """Feasibility of lambda >= 0, sum(lambda) <= 1, rays^T lambda = point."""
    rays = np.asarray(rays, dtype=float)
    n = rays.shape[0]
    res = linprog(
        np.zeros(n),
        A_ub=np.ones((1, n)),
        b_ub=[1.0],
        A_eq=rays.T,
        b_eq=np.asarray(point, dtype=float),
        bounds=[(0, None)] * n,
        method="highs",
    )
    return res.status == 0


def enumerate_retrieval(layers, hub_out, seq, rel, phi, n_layers, elastic, phi_min, eps):
    """Exhaustive layered-path search.

    ``layers`` lists node ids per layer (1-based layer l at index l-1);
    ``seq`` and ``rel`` are sets of directed / undirected (a, b) pairs.
    Returns (objective, path) or None when no admissible path exists.
    """
    rel_nb = {}
    for a, b in rel:
        rel_nb.setdefault(a, set()).add(b)
        rel_nb.setdefault(b, set()).add(a)

    def step_ok(a, b):
        if (a, b) in seq:
            return True
        return any((c, b) in seq for c in rel_nb.get(a, ()))

    # Reachable set per layer, with the same widening rule as the search.
    reach, relaxed = [], []
    for l in range(n_layers):
        ids = layers[l]
        if l == 0:
            admitted = [b for b in ids if b in hub_out]
        else:
            admitted = [b for b in ids if any(step_ok(a, b) for a in reach[-1])]
        widen = elastic and (not admitted or max(phi[b] for b in admitted) < phi_min)
        if widen:
            admitted = list(ids)
        if not admitted:
            return None
        reach.append(set(admitted))
        relaxed.append(widen)

    def gain(b, l):
        s = max(phi[b], eps) if relaxed[l] else phi[b]
        return math.log(s + eps)

    best = None
    for path in itertools.product(*[sorted(layers[l]) for l in range(n_layers)]):
        ok = path[0] in reach[0]
        for l in range(1, n_layers):
            if not ok:
                break
            ok = path[l] in reach[l] and (relaxed[l] or step_ok(path[l - 1], path[l]))
        if not ok:
            continue
        val = 0.0
        for l, b in enumerate(path):
            val += gain(b, l)
        if best is None or val > best[0] or (val == best[0] and path < best[1]):
            best = (val, path)
    return best


def payoff_by_simulation(target_pos, pursuer_pos, spheres, k, horizon, speed, pursuer_speed, dt, d_safe):
    """Payoff matrix by stepping both agents explicitly for every (row, column) pair."""
    target_pos = np.asarray(target_pos, dtype=float)
    pursuer_pos = np.asarray(pursuer_pos, dtype=float)
    bearing = target_pos - pursuer_pos
    base = math.atan2(bearing[1], bearing[0])
    out = np.zeros((k, k))
    for i in range(k):
        row_dir = np.array([math.cos(2 * math.pi * i / k), math.sin(2 * math.pi * i / k)])
        t = target_pos.copy()
        worst = math.inf
        for _ in range(horizon):
            t = t + speed * dt * row_dir
            for c, r in spheres:
                worst = min(worst, float(np.linalg.norm(t - np.asarray(c))) - r)
        penalty = 10.0 * max(0.0, d_safe - worst) if spheres else 0.0
        for j in range(k):
            ang = base + 2 * math.pi * j / k
            col_dir = np.array([math.cos(ang), math.sin(ang)])
            p = pursuer_pos.copy()
            for _ in range(horizon):
                p = p + pursuer_speed * dt * col_dir
            out[i, j] = float(np.linalg.norm(t - p)) - penalty
    return out


def random_layered_kb(rng, max_layers=4, max_width=5):
    """A random valid KB document (policy subgraph only) plus its plain edge sets."""
    n_layers = int(rng.integers(1, max_layers + 1))
    layers = []
    for l in range(n_layers):
        width = int(rng.integers(1, max_width + 1))
        layers.append([f"n{l + 1}_{k}" for k in range(width)])
    hub_out = {b for b in layers[0] if rng.random() < 0.7}
    seq, rel = set(), set()
    for l in range(1, n_layers):
        for b in layers[l]:
            # at least one parent keeps every node seq-reachable
            parents = [a for a in layers[l - 1] if rng.random() < 0.35]
            if not parents:
                parents = [layers[l - 1][int(rng.integers(len(layers[l - 1])))]]
            seq |= {(a, b) for a in parents}
    for ids in layers:
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                if rng.random() < 0.25:
                    rel.add((ids[i], ids[j]))
    nodes = [{"id": "hub", "subgraph": "scene", "layer": 0, "value": "hub"}]
    nodes += [{"id": b, "subgraph": "policy", "layer": l + 1, "value": b} for l, ids in enumerate(layers) for b in ids]
    edges = [{"from": "hub", "to": b, "kind": "hub"} for b in sorted(hub_out)]
    edges += [{"from": a, "to": b, "kind": "seq"} for a, b in sorted(seq)]
    edges += [{"from": a, "to": b, "kind": "rel"} for a, b in sorted(rel)]
    doc = {"schema": 1, "nodes": nodes, "edges": edges}
    return doc, layers, hub_out, seq, rel


def random_phi(rng, layers):
    """Scores on a coarse grid so that ties occur; a few land below the widening threshold."""
    grid = np.array([0.0, 0.01, 0.04, 0.2, 0.5, 0.5, 0.9, 1.0])
    return {b: float(grid[rng.integers(len(grid))]) for ids in layers for b in ids}
