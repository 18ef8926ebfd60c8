"""Pairwise and propagated influence between vehicles.

Direct influence of vehicle i on vehicle j combines the closing rate along
the displacement with an anisotropy factor from j's heading, gated so that
receding pairs contribute nothing.  Cumulative influence then sums the
products of direct weights along every simple path of the normalized
influence digraph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import EPS_POS, VehicleState


class CoincidentPositions(ValueError):
    """Two vehicles closer than the positional epsilon."""


class SameEndpoints(ValueError):
    """Path query with identical source and target."""


@dataclass(frozen=True)
class FollowingRelation:
    """Leader/follower pair on one lane, with bumper gap in meters."""

    leader: int
    follower: int
    gap: float


def _clamp(x: float, lo: float = -1.0, hi: float = 1.0) -> float:
    return min(max(x, lo), hi)


def direct_influence(state_i: VehicleState, state_j: VehicleState) -> float:
    """Influence of vehicle i on vehicle j, a nonnegative scalar.

    Let dx = x_j - x_i and dv = v_i - v_j.  The closing-rate term is
    ``|dv| cos(theta) / |dx|`` with theta the angle between dv and dx; it is
    scaled by ``sin(pi - phi) / 2`` where phi = pi - angle(v_j, dx), and
    finally gated to zero when negative (receding pair).

    Degenerate inputs (zero relative speed, or j standing still) yield 0.0.
    """
    dx0 = state_j.position[0] - state_i.position[0]
    dx1 = state_j.position[1] - state_i.position[1]
    dist = math.hypot(dx0, dx1)
    if dist <= EPS_POS:
        raise CoincidentPositions(
            f"vehicles {state_i.vehicle_id} and {state_j.vehicle_id} coincide"
        )
    dv0 = state_i.velocity[0] - state_j.velocity[0]
    dv1 = state_i.velocity[1] - state_j.velocity[1]
    dv_norm = math.hypot(dv0, dv1)
    if dv_norm == 0.0:
        return 0.0
    vj_norm = state_j.speed
    if vj_norm == 0.0:
        return 0.0
    cos_theta = _clamp((dv0 * dx0 + dv1 * dx1) / (dv_norm * dist))
    theta = math.acos(cos_theta)
    f0 = dv_norm * math.cos(theta) / dist
    cos_pi_minus_phi = _clamp(
        (state_j.velocity[0] * dx0 + state_j.velocity[1] * dx1) / (vj_norm * dist)
    )
    phi = math.pi - math.acos(cos_pi_minus_phi)
    f = f0 * math.sin(math.pi - phi) / 2.0
    # Heaviside gate: receding pairs exert no influence.
    return f if f > 0.0 else 0.0


def direct_influence_matrix(states: list[VehicleState]) -> np.ndarray:
    """Direct influence between every ordered pair, vectorized.

    Entry [i][j] is the influence of states[i] on states[j]; the diagonal is
    zero.  Raises CoincidentPositions if any two vehicles sit on top of each
    other.
    """
    n = len(states)
    if n == 0:
        return np.zeros((0, 0))
    pos = np.array([s.position for s in states], dtype=float)
    vel = np.array([s.velocity for s in states], dtype=float)

    dx = pos[None, :, :] - pos[:, None, :]                 # dx[i,j] = x_j - x_i
    dist = np.linalg.norm(dx, axis=2)
    off = ~np.eye(n, dtype=bool)
    bad = (dist <= EPS_POS) & off
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise CoincidentPositions(
            f"vehicles {states[i].vehicle_id} and {states[j].vehicle_id} coincide"
        )

    dv = vel[:, None, :] - vel[None, :, :]                 # dv[i,j] = v_i - v_j
    dist_safe = np.where(dist > 0, dist, 1.0)
    # |dv| cos(theta) / |dx| collapses to (dv . dx) / |dx|^2
    f0 = np.einsum("ijk,ijk->ij", dv, dx) / dist_safe**2
    vj = np.broadcast_to(vel[None, :, :], (n, n, 2))
    vj_norm = np.linalg.norm(vel, axis=1)[None, :]
    vj_safe = np.where(vj_norm > 0, vj_norm, 1.0)
    c = np.einsum("ijk,ijk->ij", vj, dx) / (vj_safe * dist_safe)
    c = np.clip(c, -1.0, 1.0)
    # sin(pi - phi) with phi = pi - arccos(c) equals sqrt(1 - c^2)
    aniso = np.sqrt(np.maximum(0.0, 1.0 - c**2)) / 2.0

    f = f0 * aniso
    dv_norm = np.linalg.norm(dv, axis=2)
    f = np.where((dv_norm > 0) & (vj_norm > 0), f, 0.0)
    f = np.maximum(f, 0.0)
    np.fill_diagonal(f, 0.0)
    return f


def normalize_influence(a: np.ndarray) -> np.ndarray:
    """Scale the matrix so its largest entry is 1; a zero matrix is returned
    unchanged."""
    peak = float(a.max()) if a.size else 0.0
    if peak <= 0.0:
        return a.copy()
    return a / peak


def following_relations(
    states: list[VehicleState], max_gap: float = float("inf")
) -> list[FollowingRelation]:
    """Leader/follower pairs: nearest vehicle ahead on the same route.

    The gap is the arc-position difference (always positive for distinct
    arcs).  Pairs with gap above ``max_gap`` are dropped.
    """
    by_route: dict[str, list[VehicleState]] = {}
    for s in states:
        by_route.setdefault(s.route_id, []).append(s)
    out: list[FollowingRelation] = []
    for route_id in sorted(by_route):
        lane = sorted(by_route[route_id], key=lambda s: s.arc_position)
        for rear, front in zip(lane, lane[1:]):
            gap = front.arc_position - rear.arc_position
            if gap <= max_gap:
                out.append(
                    FollowingRelation(
                        leader=front.vehicle_id, follower=rear.vehicle_id, gap=gap
                    )
                )
    out.sort(key=lambda r: (r.follower, r.leader))
    return out


def augment_following(
    a: np.ndarray,
    relations: list[FollowingRelation],
    index_of: dict[int, int],
    gap_threshold: float = 25.0,
) -> np.ndarray:
    """Inject symmetric strong edges for close car-following pairs.

    The anisotropy term nulls exactly collinear leader/follower geometry, so
    platooned vehicles would otherwise be mutually invisible to the grouping
    stage.  Each relation with gap below the threshold gets a symmetric edge
    pair at the current matrix maximum (1.0 on an all-zero matrix).
    """
    out = a.copy()
    weight = float(out.max()) if out.size else 0.0
    if weight <= 0.0:
        weight = 1.0
    for rel in relations:
        if rel.gap < gap_threshold:
            i = index_of.get(rel.leader)
            j = index_of.get(rel.follower)
            if i is None or j is None or i == j:
                continue
            out[i, j] = weight
            out[j, i] = weight
    return out


def enumerate_paths(a: np.ndarray, source: int, target: int) -> list[tuple[int, ...]]:
    """All simple paths from source to target along positive-weight edges."""
    n = a.shape[0]
    if source == target:
        raise SameEndpoints(f"source and target both {source}")
    if not (0 <= source < n and 0 <= target < n):
        raise IndexError("path endpoints out of range")
    adjacency = [np.flatnonzero(a[v] > 0).tolist() for v in range(n)]
    paths: list[tuple[int, ...]] = []
    stack: list[int] = [source]
    on_path = [False] * n
    on_path[source] = True

    def walk(v: int) -> None:
        for u in adjacency[v]:
            if on_path[u]:
                continue
            if u == target:
                paths.append(tuple(stack) + (target,))
                continue
            on_path[u] = True
            stack.append(u)
            walk(u)
            stack.pop()
            on_path[u] = False

    walk(source)
    paths.sort()
    return paths


def cumulative_influence_matrix(a_norm: np.ndarray) -> np.ndarray:
    """Sum of edge-weight products over every simple path, for all pairs.

    Uses a per-source dynamic program over visited-node bitmasks, so the cost
    is bounded by the number of reachable (mask, endpoint) states rather than
    the number of paths.  The diagonal is zero by construction.
    """
    n = a_norm.shape[0]
    f = np.zeros((n, n))
    if n == 0:
        return f
    a = np.asarray(a_norm, dtype=float)
    for source in range(n):
        totals = np.zeros(n)
        vec0 = np.zeros(n)
        vec0[source] = 1.0
        frontier: dict[int, np.ndarray] = {1 << source: vec0}
        while frontier:
            next_frontier: dict[int, np.ndarray] = {}
            for mask, vec in frontier.items():
                contrib = vec @ a                      # products extended one hop
                for u in np.flatnonzero(contrib):
                    bit = 1 << int(u)
                    if mask & bit:
                        continue
                    new_mask = mask | bit
                    slot = next_frontier.get(new_mask)
                    if slot is None:
                        slot = np.zeros(n)
                        next_frontier[new_mask] = slot
                    slot[u] += contrib[u]
            for vec in next_frontier.values():
                totals += vec
            frontier = next_frontier
        f[source] = totals
        f[source, source] = 0.0
    return f
