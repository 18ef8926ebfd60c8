"""Closed-loop intersection simulator.

Builds a four-leg unsignalized intersection with right-hand traffic, spawns
seeded scenarios on it, and rolls the decision pipeline forward at a fixed
step: every replan period the chosen method (independent decisions, grouped
negotiation, or grouped negotiation plus a global merge) commits crossing
targets, and a longitudinal controller tracks them between replans.  Every
run yields a trace of snapshots and typed events that serializes to JSONL
byte-identically across reruns.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    EPS_GEO,
    ConflictPoint,
    MethodKind,
    Route,
    ScenarioConfig,
    VehicleId,
    VehicleState,
    seeded_rng,
)
from .influence import (
    CoincidentPositions,
    FollowingRelation,
    augment_following,
    cumulative_influence_matrix,
    direct_influence_matrix,
    following_relations,
    normalize_influence,
)
from .grouping import divide_groups
from .negotiation import (
    NegotiationContext,
    NegotiatorBackend,
    PassOrder,
    conflict_pairs,
    inter_group_order,
    intra_group_order,
)
from .planning import (
    InfeasibleTarget,
    acceleration_command,
    earliest_arrival,
    latest_arrival,
)

APPROACHES = ("N", "E", "S", "W")
MOVEMENTS = ("straight", "left", "right")

# unit heading of travel for each approach leg
_HEADINGS = {
    "N": (0.0, -1.0),
    "E": (-1.0, 0.0),
    "S": (0.0, 1.0),
    "W": (1.0, 0.0),
}

TRACE_SCHEMA = "coopcross-trace-v1"

# controller shape parameters (not negotiated, identical for every method)
HOLD_SLACK = 0.5          # s of spare time before a vehicle stops holding back
HOLD_SETBACK = 1.0        # m short of the entry line a holding vehicle stops
ESCAPE_SLACK = 0.25       # s of slack above which the brake curve is obeyed
ESCAPE_MARGIN = 1.0       # m short of the conflict point the escape stop lands
PIN_MARGIN = 0.25         # m; committed once full braking cannot stop this
                          # far short of the next crossing.  Sits well inside
                          # ESCAPE_MARGIN so brake-curve jitter cannot flip a
                          # still-holdable vehicle into the committed state.
GUARD_LATERAL = 0.6       # lane-width fraction counted as the same corridor
GUARD_ALIGN = 0.5         # min heading cosine for a corridor leader
GUARD_GAP_GAIN = 0.8
GUARD_SPEED_GAIN = 1.8
GUARD_HEADWAY = 1.0       # s of desired time headway
GUARD_STANDOFF = 2.0      # m of desired standstill gap
COLLISION_FRACTION = 0.8  # of mean vehicle length; closer centers collide


class PlacementFailure(RuntimeError):
    """Could not place a vehicle with the required same-lane spacing."""


def _rot_left(h: tuple[float, float]) -> tuple[float, float]:
    return (-h[1], h[0])


def _rot_right(h: tuple[float, float]) -> tuple[float, float]:
    return (h[1], -h[0])


def _lane_offset(
    h: tuple[float, float], lane_index: int, lane_width: float
) -> tuple[float, float]:
    # lane centers sit right of the road axis; index 0 is the inner lane
    rx, ry = _rot_right(h)
    off = (lane_index + 0.5) * lane_width
    return (rx * off, ry * off)


def _arc_samples(radius: float) -> int:
    # enough chords that the sagitta stays below the geometric tolerance
    span = min(EPS_GEO / radius, 1.0)
    max_step = 2.0 * math.acos(1.0 - span)
    return max(8, int(math.ceil((math.pi / 2.0) / max_step)))


def _build_route(
    approach: str, movement: str, lane_index: int, config: ScenarioConfig
) -> Route:
    h0 = _HEADINGS[approach]
    if movement == "straight":
        h1 = h0
    elif movement == "left":
        h1 = _rot_left(h0)
    else:
        h1 = _rot_right(h0)
    box_half = config.lanes_per_direction * config.lane_width + config.corner_margin
    if movement == "straight":
        exit_lane = lane_index
    elif movement == "left":
        exit_lane = 0
    else:
        exit_lane = config.lanes_per_direction - 1
    o0 = _lane_offset(h0, lane_index, config.lane_width)
    o1 = _lane_offset(h1, exit_lane, config.lane_width)
    p_in = (o0[0] - box_half * h0[0], o0[1] - box_half * h0[1])
    p_out = (o1[0] + box_half * h1[0], o1[1] + box_half * h1[1])
    start = (
        p_in[0] - config.approach_length * h0[0],
        p_in[1] - config.approach_length * h0[1],
    )
    end = (
        p_out[0] + config.exit_length * h1[0],
        p_out[1] + config.exit_length * h1[1],
    )

    pts: list[tuple[float, float]] = [start, p_in]
    if movement == "straight":
        pts.append(p_out)
    else:
        n0 = _rot_left(h0) if movement == "left" else _rot_right(h0)
        # quarter turn between perpendicular headings
        radius = math.dist(p_in, p_out) / math.sqrt(2.0)
        cx = p_in[0] + radius * n0[0]
        cy = p_in[1] + radius * n0[1]
        ang0 = math.atan2(p_in[1] - cy, p_in[0] - cx)
        sweep = math.pi / 2.0 if movement == "left" else -math.pi / 2.0
        n_seg = _arc_samples(radius)
        for k in range(1, n_seg):
            ang = ang0 + sweep * (k / n_seg)
            pts.append((cx + radius * math.cos(ang), cy + radius * math.sin(ang)))
        pts.append(p_out)
    pts.append(end)

    xs: list[float] = []
    ys: list[float] = []
    arcs: list[float] = []
    for x, y in pts:
        if xs and math.hypot(x - xs[-1], y - ys[-1]) < 1e-12:
            continue
        if xs:
            arcs.append(arcs[-1] + math.hypot(x - xs[-1], y - ys[-1]))
        else:
            arcs.append(0.0)
        xs.append(x)
        ys.append(y)
    return Route(
        route_id=f"{approach}-{movement}-{lane_index}",
        approach=approach,
        movement=movement,
        lane_index=lane_index,
        xs=tuple(xs),
        ys=tuple(ys),
        arcs=tuple(arcs),
        stop_line_arc=config.approach_length - config.stop_line_setback,
    )


# pairs that neither cross nor merge may still sweep closer than vehicle
# contact range (opposing turn arcs do); below this centreline clearance the
# pair gets a scheduled conflict point.  Sits strictly above the collision
# disc and strictly below the lane separation, so parallel lanes are exempt.
PROXIMITY_CLEARANCE = 4.4


def _close_approach(
    ra: Route, rb: Route, clearance: float, window: tuple[float, float]
) -> tuple[float, float, tuple[float, float]] | None:
    """Entry arcs of the window where two routes run within clearance.

    Returns (arc_a, arc_b, midpoint of the closest pair), or None when the
    routes never come that close.  Only arcs inside `window` are examined;
    close approaches can only happen near the conflict area.
    """

    def sample(r: Route) -> tuple[np.ndarray, np.ndarray]:
        lo = max(0.0, window[0])
        hi = min(float(r.arcs[-1]), window[1])
        arcs = np.arange(lo, hi, 0.25)
        xs = np.interp(arcs, r.arcs, r.xs)
        ys = np.interp(arcs, r.arcs, r.ys)
        return arcs, np.column_stack([xs, ys])

    arcs_a, pa = sample(ra)
    arcs_b, pb = sample(rb)
    if len(arcs_a) == 0 or len(arcs_b) == 0:
        return None
    dist = np.hypot(
        pa[:, None, 0] - pb[None, :, 0], pa[:, None, 1] - pb[None, :, 1]
    )
    mask = dist < clearance
    if not mask.any():
        return None
    rows, cols = np.nonzero(mask)
    i, j = np.unravel_index(np.argmin(dist), dist.shape)
    loc = (
        float((pa[i, 0] + pb[j, 0]) / 2.0),
        float((pa[i, 1] + pb[j, 1]) / 2.0),
    )
    return float(arcs_a[rows.min()]), float(arcs_b[cols.min()]), loc


def _clearance_window(
    cp: ConflictPoint, ra: Route, rb: Route, clearance: float
) -> tuple[tuple[float, float], tuple[float, float]]:
    """Arc interval on each route where the pair runs within clearance.

    The interval is the contiguous sub-clearance run containing the point.
    A run reaching the sampling horizon means the routes stay close from
    there on (a merge into a shared lane); the window then ends at the
    point itself and downstream spacing is the car-following guard's job.
    """

    def sample(r: Route, arc: float) -> tuple[np.ndarray, np.ndarray]:
        lo = max(0.0, arc - 25.0)
        hi = min(float(r.arcs[-1]), arc + 25.0)
        arcs = np.arange(lo, hi, 0.25)
        xs = np.interp(arcs, r.arcs, r.xs)
        ys = np.interp(arcs, r.arcs, r.ys)
        return arcs, np.column_stack([xs, ys])

    arcs_a, pa = sample(ra, cp.arc_a)
    arcs_b, pb = sample(rb, cp.arc_b)
    dist = np.hypot(
        pa[:, None, 0] - pb[None, :, 0], pa[:, None, 1] - pb[None, :, 1]
    )
    mask = dist < clearance

    def run(arcs: np.ndarray, any_: np.ndarray, center: float) -> tuple[float, float]:
        idx = int(np.argmin(np.abs(arcs - center)))
        if not any_[idx]:
            return (center, center)
        i0 = idx
        while i0 > 0 and any_[i0 - 1]:
            i0 -= 1
        i1 = idx
        while i1 + 1 < len(any_) and any_[i1 + 1]:
            i1 += 1
        enter = float(arcs[i0])
        exit_ = float(arcs[i1])
        if i1 == len(any_) - 1:
            exit_ = max(center, enter)
        return (enter, exit_)

    win_a = run(arcs_a, mask.any(axis=1), cp.arc_a)
    win_b = run(arcs_b, mask.any(axis=0), cp.arc_b)
    return win_a, win_b


def _polyline_crossings(
    ra: Route, rb: Route
) -> list[tuple[float, float, tuple[float, float]]]:
    """Transversal crossings between two polylines as (arc_a, arc_b, point).

    Parallel overlaps (shared legs, merges) do not count; only proper
    crossings do.  Hits closer than 0.25 m collapse to the first one, which
    absorbs duplicate detections at shared segment endpoints.
    """
    pa = np.column_stack([ra.xs, ra.ys])
    pb = np.column_stack([rb.xs, rb.ys])
    d1 = np.diff(pa, axis=0)
    d2 = np.diff(pb, axis=0)
    p = pa[:-1]
    q = pb[:-1]
    seg_a = np.hypot(d1[:, 0], d1[:, 1])
    seg_b = np.hypot(d2[:, 0], d2[:, 1])
    denom = d1[:, None, 0] * d2[None, :, 1] - d1[:, None, 1] * d2[None, :, 0]
    rel = q[None, :, :] - p[:, None, :]
    t_num = rel[..., 0] * d2[None, :, 1] - rel[..., 1] * d2[None, :, 0]
    u_num = rel[..., 0] * d1[:, None, 1] - rel[..., 1] * d1[:, None, 0]
    # transversal means a real crossing angle, not a tangential touch at a
    # diverge/merge point: |sin(angle)| above a small floor
    ok = np.abs(denom) > 0.05 * seg_a[:, None] * seg_b[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(ok, t_num / np.where(ok, denom, 1.0), -1.0)
        u = np.where(ok, u_num / np.where(ok, denom, 1.0), -1.0)
    eps = 1e-9
    hit = ok & (t >= -eps) & (t <= 1.0 + eps) & (u >= -eps) & (u <= 1.0 + eps)
    arcs_a = np.asarray(ra.arcs)
    arcs_b = np.asarray(rb.arcs)

    raw: list[tuple[float, float, tuple[float, float]]] = []
    for i, j in zip(*np.nonzero(hit)):
        ti = float(np.clip(t[i, j], 0.0, 1.0))
        uj = float(np.clip(u[i, j], 0.0, 1.0))
        arc_a = float(arcs_a[i] + ti * seg_a[i])
        arc_b = float(arcs_b[j] + uj * seg_b[j])
        loc = (float(p[i, 0] + ti * d1[i, 0]), float(p[i, 1] + ti * d1[i, 1]))
        raw.append((arc_a, arc_b, loc))
    raw.sort(key=lambda h: (h[0], h[1]))
    kept: list[tuple[float, float, tuple[float, float]]] = []
    for cand in raw:
        if all(math.dist(cand[2], k[2]) > 0.25 for k in kept):
            kept.append(cand)
    return kept


@dataclass(frozen=True)
class Geometry:
    """Immutable route network with its conflict points."""

    routes: dict[str, Route]
    conflict_points: tuple[ConflictPoint, ...]
    points_by_route_pair: dict[tuple[str, str], list[ConflictPoint]]
    points_on_route: dict[str, tuple[tuple[float, ConflictPoint], ...]]
    box_half: float

    def first_point_after(
        self, route_id: str, arc: float
    ) -> tuple[float, ConflictPoint] | None:
        for cp_arc, cp in self.points_on_route.get(route_id, ()):
            if cp_arc > arc:
                return (cp_arc, cp)
        return None


def _entry_lanes(movement: str, config: ScenarioConfig) -> list[int]:
    if movement == "left":
        return [0]
    if movement == "right":
        return [config.lanes_per_direction - 1]
    return list(range(config.lanes_per_direction))


def build_intersection(config: ScenarioConfig) -> Geometry:
    """Construct all routes of the four-leg layout and their crossings."""
    routes: dict[str, Route] = {}
    for approach in APPROACHES:
        for movement in MOVEMENTS:
            for lane in _entry_lanes(movement, config):
                route = _build_route(approach, movement, lane, config)
                routes[route.route_id] = route

    points: list[ConflictPoint] = []
    by_pair: dict[tuple[str, str], list[ConflictPoint]] = {}
    ids = sorted(routes)
    for i, rid_a in enumerate(ids):
        for rid_b in ids[i + 1:]:
            ra, rb = routes[rid_a], routes[rid_b]
            if ra.approach == rb.approach and ra.lane_index == rb.lane_index:
                continue  # shared approach leg; divergence is not a crossing
            for arc_a, arc_b, loc in _polyline_crossings(ra, rb):
                cp = ConflictPoint(
                    cp_id=len(points),
                    route_a=rid_a,
                    route_b=rid_b,
                    arc_a=arc_a,
                    arc_b=arc_b,
                    location=loc,
                )
                points.append(cp)
                by_pair.setdefault((rid_a, rid_b), []).append(cp)
                by_pair.setdefault((rid_b, rid_a), []).append(cp)

    # routes joining the same exit ray meet tangentially at its start; the
    # transversality filter drops that touch, yet merging traffic still needs
    # schedule separation there, so record the merge point explicitly
    exit_groups: dict[tuple[float, float], list[str]] = {}
    for rid in ids:
        r = routes[rid]
        key = (round(r.xs[-2], 6), round(r.ys[-2], 6))
        exit_groups.setdefault(key, []).append(rid)
    for key in sorted(exit_groups):
        group = exit_groups[key]
        for i, rid_a in enumerate(group):
            for rid_b in group[i + 1:]:
                ra, rb = routes[rid_a], routes[rid_b]
                if ra.approach == rb.approach:
                    continue
                cp = ConflictPoint(
                    cp_id=len(points),
                    route_a=rid_a,
                    route_b=rid_b,
                    arc_a=ra.arcs[-2],
                    arc_b=rb.arcs[-2],
                    location=key,
                )
                points.append(cp)
                by_pair.setdefault((rid_a, rid_b), []).append(cp)
                by_pair.setdefault((rid_b, rid_a), []).append(cp)

    # remaining pairs with no conflict point at all can still graze inside
    # contact clearance; give the close-approach window a conflict point at
    # its entry so the schedule keeps such pairs time-separated
    box = config.lanes_per_direction * config.lane_width + config.corner_margin
    window = (config.approach_length - 3.0 * box, config.approach_length + 5.0 * box)
    for i, rid_a in enumerate(ids):
        for rid_b in ids[i + 1:]:
            ra, rb = routes[rid_a], routes[rid_b]
            if ra.approach == rb.approach or (rid_a, rid_b) in by_pair:
                continue
            hit = _close_approach(ra, rb, PROXIMITY_CLEARANCE, window)
            if hit is None:
                continue
            arc_a, arc_b, loc = hit
            cp = ConflictPoint(
                cp_id=len(points),
                route_a=rid_a,
                route_b=rid_b,
                arc_a=arc_a,
                arc_b=arc_b,
                location=loc,
            )
            points.append(cp)
            by_pair.setdefault((rid_a, rid_b), []).append(cp)
            by_pair.setdefault((rid_b, rid_a), []).append(cp)

    # widen every point to its clearance window so schedule separation can
    # be applied interval to interval rather than instant to instant
    widened: list[ConflictPoint] = []
    for cp in points:
        win_a, win_b = _clearance_window(
            cp, routes[cp.route_a], routes[cp.route_b], PROXIMITY_CLEARANCE
        )
        widened.append(replace(cp, window_a=win_a, window_b=win_b))
    points = widened
    by_pair = {}
    for cp in points:
        by_pair.setdefault((cp.route_a, cp.route_b), []).append(cp)
        by_pair.setdefault((cp.route_b, cp.route_a), []).append(cp)

    on_route: dict[str, list[tuple[float, ConflictPoint]]] = {r: [] for r in ids}
    for cp in points:
        on_route[cp.route_a].append((cp.arc_a, cp))
        on_route[cp.route_b].append((cp.arc_b, cp))
    for rid in on_route:
        on_route[rid].sort(key=lambda item: (item[0], item[1].cp_id))

    return Geometry(
        routes=routes,
        conflict_points=tuple(points),
        points_by_route_pair=by_pair,
        points_on_route={r: tuple(v) for r, v in on_route.items()},
        box_half=config.lanes_per_direction * config.lane_width
        + config.corner_margin,
    )


def generate_scenario(
    config: ScenarioConfig, geometry: Geometry | None = None
) -> list[VehicleState]:
    """Seeded initial states: route draw, entry speed, spaced spawn arcs."""
    geometry = geometry if geometry is not None else build_intersection(config)
    rng = seeded_rng(config.seed, "scenario")
    lo_v, hi_v = config.v0_range_ms
    placed: list[tuple[str, int, float]] = []
    states: list[VehicleState] = []
    for vid in range(config.n_vehicles):
        for _ in range(1000):
            approach = APPROACHES[int(rng.integers(len(APPROACHES)))]
            movement = MOVEMENTS[int(rng.integers(len(MOVEMENTS)))]
            lanes = _entry_lanes(movement, config)
            lane = lanes[int(rng.integers(len(lanes)))]
            route = geometry.routes[f"{approach}-{movement}-{lane}"]
            d0 = float(rng.uniform(config.d0_range[0], config.d0_range[1]))
            arc0 = route.stop_line_arc - d0
            clear = all(
                abs(arc0 - arc) >= config.min_spawn_gap
                for ap, ln, arc in placed
                if ap == approach and ln == lane
            )
            if clear:
                break
        else:
            raise PlacementFailure(
                f"no spawn slot with {config.min_spawn_gap} m same-lane "
                f"separation after 1000 draws (vehicle {vid})"
            )
        v0 = float(rng.uniform(lo_v, hi_v))
        placed.append((approach, lane, arc0))
        x, y = route.point_at(arc0)
        tx, ty = route.tangent_at(arc0)
        states.append(
            VehicleState(
                vehicle_id=vid,
                position=(x, y),
                velocity=(v0 * tx, v0 * ty),
                route_id=route.route_id,
                arc_position=arc0,
                length=config.vehicle_length,
            )
        )
    return states


@dataclass
class _RunVehicle:
    vid: VehicleId
    route: Route
    arc: float
    speed: float
    length: float
    v0: float
    start_arc: float
    completed: bool = False
    completion_time: float | None = None
    target_time: float | None = None
    target_arc: float | None = None
    # earliest legal passage of a clearance-window entry; the target pair
    # above paces the crossing itself, this gate keeps a slow vehicle from
    # seeping into the window far ahead of its slot
    gate_time: float | None = None
    gate_arc: float | None = None

    def position(self) -> tuple[float, float]:
        return self.route.point_at(self.arc)

    def heading(self) -> tuple[float, float]:
        return self.route.tangent_at(self.arc)

    def state(self) -> VehicleState:
        x, y = self.position()
        tx, ty = self.heading()
        return VehicleState(
            vehicle_id=self.vid,
            position=(x, y),
            velocity=(self.speed * tx, self.speed * ty),
            route_id=self.route.route_id,
            arc_position=self.arc,
            length=self.length,
        )


@dataclass
class World:
    """Mutable closed-loop state: the clock plus every vehicle record."""

    config: ScenarioConfig
    geometry: Geometry
    vehicles: list[_RunVehicle]
    time: float = 0.0

    def active(self) -> list[_RunVehicle]:
        return [v for v in self.vehicles if not v.completed]


def make_world(
    scenario: list[VehicleState],
    config: ScenarioConfig,
    geometry: Geometry | None = None,
) -> World:
    geometry = geometry if geometry is not None else build_intersection(config)
    vehicles = [
        _RunVehicle(
            vid=s.vehicle_id,
            route=geometry.routes[s.route_id],
            arc=s.arc_position,
            speed=s.speed,
            length=s.length,
            v0=s.speed,
            start_arc=s.arc_position,
        )
        for s in scenario
    ]
    return World(config=config, geometry=geometry, vehicles=vehicles)


def step(world: World, commands: dict[VehicleId, float], dt: float) -> list[dict]:
    """Advance one step (semi-implicit Euler); returns crossing/completion
    events with linearly interpolated timestamps."""
    conf = world.config
    events: list[dict] = []
    t0 = world.time
    for v in world.vehicles:
        if v.completed:
            continue
        a = commands.get(v.vid, 0.0)
        new_speed = min(max(v.speed + a * dt, 0.0), conf.v_max)
        new_arc = v.arc + new_speed * dt
        moved = new_arc - v.arc
        if moved > 0.0:
            for cp_arc, cp in world.geometry.points_on_route.get(
                v.route.route_id, ()
            ):
                if v.arc < cp_arc <= new_arc:
                    t_cross = t0 + dt * (cp_arc - v.arc) / moved
                    events.append(
                        {
                            "kind": "conflict_crossing",
                            "t": t_cross,
                            "vehicle": v.vid,
                            "cp": cp.cp_id,
                            "arc": cp_arc,
                            "speed": new_speed,
                        }
                    )
        if new_arc >= v.route.length:
            frac = (v.route.length - v.arc) / moved if moved > 0.0 else 1.0
            v.completion_time = t0 + dt * frac
            v.completed = True
            v.arc = v.route.length
            v.speed = new_speed
            events.append(
                {"kind": "completion", "t": v.completion_time, "vehicle": v.vid}
            )
        else:
            v.arc = new_arc
            v.speed = new_speed
    world.time = t0 + dt
    return events


def detect_collisions(world: World) -> list[tuple[VehicleId, VehicleId, float]]:
    """Active pairs whose centers sit closer than the contact threshold."""
    out: list[tuple[VehicleId, VehicleId, float]] = []
    act = world.active()
    for i, va in enumerate(act):
        xa, ya = va.position()
        for vb in act[i + 1:]:
            xb, yb = vb.position()
            d = math.hypot(xa - xb, ya - yb)
            threshold = COLLISION_FRACTION * 0.5 * (va.length + vb.length)
            if d < threshold:
                out.append((va.vid, vb.vid, d))
    return out


class ContactEpisodes:
    """Deduplicates contact into episodes: a pair re-reports only after
    separating first."""

    def __init__(self) -> None:
        self._open: set[tuple[VehicleId, VehicleId]] = set()

    def update(
        self, contacts: list[tuple[VehicleId, VehicleId, float]]
    ) -> list[tuple[VehicleId, VehicleId, float]]:
        now = {(min(a, b), max(a, b)): d for a, b, d in contacts}
        fresh = [
            (a, b, now[(a, b)])
            for (a, b) in sorted(now)
            if (a, b) not in self._open
        ]
        self._open = set(now)
        return fresh


@dataclass
class SimTrace:
    """Header plus chronological snapshot/event records."""

    header: dict
    lines: list[dict] = field(default_factory=list)

    def events(self, kind: str | None = None) -> list[dict]:
        return [
            rec
            for rec in self.lines
            if rec["kind"] != "snapshot" and (kind is None or rec["kind"] == kind)
        ]

    def snapshots(self) -> list[dict]:
        return [rec for rec in self.lines if rec["kind"] == "snapshot"]

    def to_jsonl(self) -> str:
        out = [json.dumps(self.header, sort_keys=True)]
        out.extend(json.dumps(rec, sort_keys=True) for rec in self.lines)
        return "\n".join(out) + "\n"

    def write_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read_jsonl(cls, path: str) -> "SimTrace":
        with open(path, "r", encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        if not records or records[0].get("kind") != "header":
            raise ValueError(f"{path} is not a simulation trace")
        return cls(header=records[0], lines=records[1:])


def _next_point(world: World, v: _RunVehicle) -> tuple[float, ConflictPoint] | None:
    return world.geometry.first_point_after(v.route.route_id, v.arc)


def _chain_targets(
    world: World,
    order: list[VehicleId],
    schedulable: dict[VehicleId, tuple[float, float, ConflictPoint]],
    pinned: set[VehicleId],
    pairs_by_key: dict[tuple[VehicleId, VehicleId], ConflictPoint],
    offset_floors: bool,
) -> dict[VehicleId, tuple[float, float, tuple[float, float] | None]]:
    """Absolute target times along one committed order.

    ``schedulable`` maps vid to (earliest arrival, latest arrival, first
    point), all in absolute time.  Consecutive vehicles get the safety gap
    (per the constraint mode); with ``offset_floors`` every earlier vehicle
    sharing a crossing also pushes the later one, corrected by transit-time
    offsets from each first point to the shared point.  Floors may exceed the
    latest reachable arrival: the controller then waits short of the point,
    and a vehicle already committed past its braking envelope arrives when
    physics says regardless of the commanded time.

    Each value is (target time, target arc, gate).  The gate, when present,
    is the (time, arc) of the nearest window-entry floor: pacing the target
    alone would let a slow vehicle seep into the clearance window well
    before its slot, so the entry itself carries the earliest legal passage.
    """
    conf = world.config
    by_vid = {v.vid: v for v in world.vehicles}
    chain = [vid for vid in order if vid in schedulable]
    # a pinned vehicle is past its braking envelope and cannot yield, so the
    # executable version of any committed order has the pinned ones first;
    # floors then flow from them onto the vehicles that can still comply
    committed = [vid for vid in chain if vid not in pinned]
    chain = sorted(
        (vid for vid in chain if vid in pinned),
        key=lambda vid: (schedulable[vid][0], vid),
    ) + committed
    targets: dict[VehicleId, tuple[float, float, tuple[float, float] | None]] = {}
    prev: VehicleId | None = None
    for vid in chain:
        arrival, latest, cp = schedulable[vid]
        veh = by_vid[vid]
        first_arc = cp.arc_on(veh.route.route_id)
        t = arrival
        gate: tuple[float, float] | None = None
        gate_margin = 0.0
        if vid not in pinned:
            if prev is not None and conf.constraint_mode == "all_consecutive":
                t = max(t, targets[prev][0] + conf.dt_safe)
            if offset_floors:
                for other in chain:
                    if other == vid:
                        break
                    shared = pairs_by_key.get((min(other, vid), max(other, vid)))
                    if shared is None:
                        continue
                    o_veh = by_vid[other]
                    o_first = schedulable[other][2].arc_on(o_veh.route.route_id)
                    # the one scheduled later may enter the clearance window
                    # only a safety gap after the earlier one has left it
                    o_exit = shared.window_on(o_veh.route.route_id)[1]
                    v_enter = shared.window_on(veh.route.route_id)[0]
                    d_o = (o_exit - o_first) / conf.v_max
                    d_v = (v_enter - first_arc) / conf.v_max
                    t_enter = targets[other][0] + d_o + conf.dt_safe
                    t = max(t, t_enter - d_v)
                    # keep the window entry this vehicle would violate worst
                    # if it only paced the crossing itself
                    if v_enter > veh.arc:
                        reach = world.time + earliest_arrival(
                            veh.speed, v_enter - veh.arc, conf.a_max, conf.v_max
                        )
                        if t_enter - reach > gate_margin:
                            gate_margin = t_enter - reach
                            gate = (t_enter, v_enter)
            elif prev is not None and conf.constraint_mode == "conflicting_only":
                key = (min(prev, vid), max(prev, vid))
                if key in pairs_by_key:
                    t = max(t, targets[prev][0] + conf.dt_safe)
        targets[vid] = (t, first_arc, gate)
        prev = vid
    return targets


def _schedulable_map(
    world: World, members: list[VehicleId]
) -> dict[VehicleId, tuple[float, float, ConflictPoint]]:
    conf = world.config
    by_vid = {v.vid: v for v in world.vehicles}
    out: dict[VehicleId, tuple[float, float, ConflictPoint]] = {}
    for vid in members:
        v = by_vid[vid]
        nxt = _next_point(world, v)
        if nxt is None:
            continue
        cp_arc, cp = nxt
        dist = cp_arc - v.arc
        arrive = world.time + earliest_arrival(v.speed, dist, conf.a_max, conf.v_max)
        latest = world.time + latest_arrival(v.speed, dist, conf.a_min)
        out[vid] = (arrive, latest, cp)
    return out


def _build_context(
    world: World,
    members: list[VehicleId],
    following: list[FollowingRelation],
) -> NegotiationContext:
    conf = world.config
    by_vid = {v.vid: v for v in world.vehicles}
    arcs = {vid: by_vid[vid].arc for vid in members}
    speeds = {vid: by_vid[vid].speed for vid in members}
    route_of = {vid: by_vid[vid].route.route_id for vid in members}
    pairs = conflict_pairs(
        members, arcs, speeds, route_of, world.geometry.points_by_route_pair
    )
    member_set = set(members)
    rel = tuple(
        r for r in following if r.leader in member_set and r.follower in member_set
    )
    arrivals: dict[VehicleId, float] = {}
    pinned_ids: list[VehicleId] = []
    for vid in sorted(members):
        v = by_vid[vid]
        nxt = _next_point(world, v)
        if nxt is None:
            arrivals[vid] = 0.0  # past every crossing: effectively first
            continue
        arrivals[vid] = earliest_arrival(
            v.speed, nxt[0] - v.arc, conf.a_max, conf.v_max
        )
        d = nxt[0] - PIN_MARGIN - v.arc
        if d < 0.0 or v.speed * v.speed > 2.0 * -conf.a_min * d:
            pinned_ids.append(vid)
    pinned = tuple(pinned_ids)
    return NegotiationContext(
        members=tuple(sorted(members)),
        conflict_pairs=tuple(pairs),
        following=rel,
        arrivals=arrivals,
        pinned=pinned,
    )


def _pinned_ids(
    world: World, sched: dict[VehicleId, tuple[float, float, ConflictPoint]]
) -> set[VehicleId]:
    """Vehicles past the braking envelope of their next crossing.

    Such a vehicle cannot yield any more, whatever the committed order says;
    scheduling treats it as fixed and pushes everyone else around it.  The
    test is kinematic on purpose: a vehicle creeping across the entry line
    can still stop and must keep honouring its separation floors.
    """
    conf = world.config
    by_vid = {v.vid: v for v in world.vehicles}
    out: set[VehicleId] = set()
    for vid, (_, _, cp) in sched.items():
        v = by_vid[vid]
        d = cp.arc_on(v.route.route_id) - PIN_MARGIN - v.arc
        if d < 0.0 or v.speed * v.speed > 2.0 * -conf.a_min * d:
            out.add(vid)
    return out


def _apply_targets(
    world: World,
    targets: dict[VehicleId, tuple[float, float, tuple[float, float] | None]],
) -> None:
    for v in world.active():
        if v.vid in targets:
            t, arc, gate = targets[v.vid]
            v.target_time = t
            v.target_arc = arc
            v.gate_time, v.gate_arc = gate if gate else (None, None)
        else:
            v.target_time = None
            v.target_arc = None
            v.gate_time = None
            v.gate_arc = None


def _replan_independent(world: World, events: list[dict]) -> None:
    """Per-vehicle first-come-first-served over sensed neighbors only."""
    conf = world.config
    actives = world.active()
    sched = _schedulable_map(world, [v.vid for v in actives])
    pinned = _pinned_ids(world, sched)
    pos = {v.vid: v.position() for v in actives}
    by_vid = {v.vid: v for v in actives}
    targets: dict[VehicleId, tuple[float, float]] = {}
    orders: list[dict] = []
    for ego in actives:
        if ego.vid not in sched:
            continue
        near = [
            w.vid
            for w in actives
            if w.vid in sched
            and math.dist(pos[ego.vid], pos[w.vid]) <= conf.detect_range_ivd
        ]
        # the ego plans with its own capabilities but can only extrapolate
        # a neighbor at its observed speed, so local views disagree
        # wherever speeds are changing
        view: dict[VehicleId, tuple[float, float, ConflictPoint]] = {}
        for vid in near:
            arrive, latest, cp = sched[vid]
            if vid != ego.vid:
                w = by_vid[vid]
                gap = cp.arc_on(w.route.route_id) - w.arc
                arrive = world.time + gap / max(w.speed, 1.0)
            view[vid] = (arrive, latest, cp)
        near.sort(
            key=lambda vid: (0 if vid in pinned else 1, view[vid][0], vid)
        )
        local = _chain_targets(
            world, near, view, pinned, pairs_by_key={}, offset_floors=False
        )
        targets[ego.vid] = local[ego.vid]
        orders.append({"ego": ego.vid, "order": list(near)})
    _apply_targets(world, targets)
    events.append(
        {
            "kind": "replan",
            "t": world.time,
            "method": MethodKind.IVD.value,
            "orders": orders,
            "schedule": {str(k): targets[k][0] for k in sorted(targets)},
            "pinned": sorted(pinned),
        }
    )


def _replan_grouped(
    world: World,
    method: MethodKind,
    backend: NegotiatorBackend,
    events: list[dict],
) -> None:
    conf = world.config
    actives = world.active()
    ids = [v.vid for v in actives]
    if not ids:
        return
    states = [v.state() for v in actives]
    t_now = world.time

    try:
        a = direct_influence_matrix(states)
    except CoincidentPositions:
        # overlapping post-contact bodies; keep the previous commitments
        events.append(
            {
                "kind": "replan",
                "t": t_now,
                "method": method.value,
                "skipped": "coincident-positions",
            }
        )
        return

    relations = following_relations(states)
    index_of = {vid: i for i, vid in enumerate(ids)}
    if conf.car_following_augmentation:
        a = augment_following(a, relations, index_of, conf.follow_gap_threshold)
    a_norm = normalize_influence(a)
    f = cumulative_influence_matrix(a_norm)
    partition = divide_groups(f, conf, ids=ids)

    events.append(
        {
            "kind": "group_partition",
            "t": t_now,
            "groups": [list(g) for g in partition.groups],
        }
    )

    def observer(record: dict) -> None:
        events.append(
            {
                "kind": "negotiation_round",
                "t": t_now,
                "scope": record["scope"],
                "round": record["round"],
                "accepted": record["accepted"],
                "notes": record["notes"],
                "backend": backend.name,
            }
        )

    sched = _schedulable_map(world, ids)
    pinned = _pinned_ids(world, sched)
    global_ctx = _build_context(world, ids, relations)
    pairs_by_key = {p.key(): _cp_of(world, p) for p in global_ctx.conflict_pairs}

    group_orders: list[PassOrder] = []
    for gi, group in enumerate(partition.groups):
        ctx = _build_context(world, list(group), relations)
        po = intra_group_order(
            backend, ctx, conf.max_renegotiations, scope=gi, observer=observer
        )
        group_orders.append(po)
        events.append(
            {
                "kind": "order_committed",
                "t": t_now,
                "scope": gi,
                "ids": list(po.ordered_ids),
                "rounds": po.rounds_used,
                "fallback": po.fallback,
                "backend": po.backend_name,
            }
        )
        if po.fallback:
            events.append({"kind": "fallback_used", "t": t_now, "scope": gi})

    targets: dict[VehicleId, tuple[float, float]] = {}
    if method is MethodKind.IIGN:
        merged = inter_group_order(
            backend,
            group_orders,
            global_ctx,
            conf.max_renegotiations,
            observer=observer,
        )
        events.append(
            {
                "kind": "order_committed",
                "t": t_now,
                "scope": None,
                "ids": list(merged.ordered_ids),
                "rounds": merged.rounds_used,
                "fallback": merged.fallback,
                "backend": merged.backend_name,
            }
        )
        if merged.fallback:
            events.append({"kind": "fallback_used", "t": t_now, "scope": None})
        targets = _chain_targets(
            world,
            list(merged.ordered_ids),
            sched,
            pinned,
            pairs_by_key,
            offset_floors=True,
        )
    else:
        for po in group_orders:
            targets.update(
                _chain_targets(
                    world,
                    list(po.ordered_ids),
                    sched,
                    pinned,
                    pairs_by_key,
                    offset_floors=True,
                )
            )

    _apply_targets(world, targets)
    events.append(
        {
            "kind": "replan",
            "t": t_now,
            "method": method.value,
            "influence": _round_matrix(a),
            "influence_norm": _round_matrix(a_norm),
            "cumulative": _round_matrix(f),
            "ids": ids,
            "groups": [list(g) for g in partition.groups],
            "schedule": {str(k): targets[k][0] for k in sorted(targets)},
            "pinned": sorted(pinned),
        }
    )


def _cp_of(world: World, pair) -> ConflictPoint:
    return world.geometry.conflict_points[pair.cp_id]


def _round_matrix(m: np.ndarray) -> list[list[float]]:
    return [[round(float(x), 9) for x in row] for row in m]


def _corridor_cap(
    v: _RunVehicle, actives: list[_RunVehicle], conf: ScenarioConfig
) -> float:
    """Car-following guard: cap acceleration against the nearest body ahead
    in the same corridor (covers platoons and post-merge lanes alike)."""
    hx, hy = v.heading()
    px, py = v.position()
    best_gap = math.inf
    lead_speed = 0.0
    for w in actives:
        if w.vid == v.vid:
            continue
        wx, wy = w.position()
        rx, ry = wx - px, wy - py
        forward = rx * hx + ry * hy
        if forward <= 0.0:
            continue
        lateral = abs(rx * hy - ry * hx)
        if lateral > GUARD_LATERAL * conf.lane_width:
            continue
        ox, oy = w.heading()
        align = hx * ox + hy * oy
        if align < GUARD_ALIGN:
            continue
        gap = forward - w.length
        if gap < best_gap:
            best_gap = gap
            lead_speed = w.speed * align
    if not math.isfinite(best_gap):
        return math.inf
    desired = GUARD_STANDOFF + GUARD_HEADWAY * v.speed
    return GUARD_GAP_GAIN * (best_gap - desired) + GUARD_SPEED_GAIN * (
        lead_speed - v.speed
    )


def _commands(world: World) -> dict[VehicleId, float]:
    conf = world.config
    actives = world.active()
    cmds: dict[VehicleId, float] = {}
    for v in actives:
        cruise = (conf.v_max - v.speed) / conf.dt
        if v.target_time is None or v.target_arc is None or v.arc >= v.target_arc:
            a = cruise
        else:
            dist = v.target_arc - v.arc
            tau = v.target_time - world.time
            try:
                a = acceleration_command(
                    v.speed, dist, tau, conf.a_min, conf.a_max, conf.v_max, conf.dt
                )
            except InfeasibleTarget:
                a = conf.a_min
            slack = tau - earliest_arrival(v.speed, dist, conf.a_max, conf.v_max)
            # while the plan still has slack, never outrun the speed from
            # which a_min stops the vehicle short of the point; a separation
            # floor raised by a later replan then stays enforceable
            if slack > ESCAPE_SLACK:
                d_esc = max(dist - ESCAPE_MARGIN, 0.0)
                v_esc = math.sqrt(2.0 * -conf.a_min * d_esc)
                a = min(a, (v_esc - v.speed) / conf.dt)
            # the window-entry gate gets the same brake-curve treatment:
            # waiting happens outside the clearance window, not inside it
            if v.gate_arc is not None and v.arc < v.gate_arc:
                g_dist = v.gate_arc - v.arc
                g_slack = (v.gate_time - world.time) - earliest_arrival(
                    v.speed, g_dist, conf.a_max, conf.v_max
                )
                if g_slack > ESCAPE_SLACK:
                    d_esc = max(g_dist - ESCAPE_MARGIN, 0.0)
                    v_esc = math.sqrt(2.0 * -conf.a_min * d_esc)
                    a = min(a, (v_esc - v.speed) / conf.dt)
            hold_at = v.route.stop_line_arc - HOLD_SETBACK
            if slack > HOLD_SLACK and v.arc < hold_at:
                d_stop = hold_at - v.arc
                if v.speed < 0.05:
                    a_hold = 0.0
                elif d_stop > 1e-6:
                    a_hold = -(v.speed * v.speed) / (2.0 * d_stop)
                else:
                    a_hold = conf.a_min
                a = min(a, a_hold)
        a = min(a, _corridor_cap(v, actives, conf))
        a = min(max(a, conf.a_min), conf.a_max)
        cmds[v.vid] = a
    return cmds


def _snapshot(world: World) -> dict:
    return {
        "kind": "snapshot",
        "t": world.time,
        "vehicles": [
            {
                "id": v.vid,
                "arc": round(v.arc, 6),
                "speed": round(v.speed, 6),
                "x": round(v.position()[0], 6),
                "y": round(v.position()[1], 6),
                "done": v.completed,
            }
            for v in world.vehicles
        ],
    }


def run(
    method: MethodKind | str,
    scenario: list[VehicleState],
    backend: NegotiatorBackend | None,
    config: ScenarioConfig,
    geometry: Geometry | None = None,
) -> SimTrace:
    """Roll one episode to completion (or the time limit) and return its
    trace.  ``backend`` may be None for the independent-decision method."""
    if isinstance(method, str):
        method = MethodKind(method)
    if method is not MethodKind.IVD and backend is None:
        raise ValueError(f"method {method.value} needs a negotiation backend")
    geometry = geometry if geometry is not None else build_intersection(config)
    world = make_world(scenario, config, geometry)

    header = {
        "kind": "header",
        "schema": TRACE_SCHEMA,
        "method": method.value,
        "backend": backend.name if backend is not None else "none",
        "config": config.to_dict(),
        "routes": {str(s.vehicle_id): s.route_id for s in scenario},
        "v0": {str(s.vehicle_id): round(s.speed, 9) for s in scenario},
        "start_arc": {
            str(s.vehicle_id): round(s.arc_position, 9) for s in scenario
        },
        "route_length": {
            str(s.vehicle_id): round(
                geometry.routes[s.route_id].length, 9
            )
            for s in scenario
        },
        "n_conflict_points": len(geometry.conflict_points),
    }
    trace = SimTrace(header=header)
    episodes = ContactEpisodes()
    steps_per_replan = max(1, int(round(config.replan_period / config.dt)))
    n_steps = int(round(config.t_limit / config.dt))

    trace.lines.append(_snapshot(world))
    for k in range(n_steps):
        if not world.active():
            break
        if k % steps_per_replan == 0:
            if method is MethodKind.IVD:
                _replan_independent(world, trace.lines)
            else:
                _replan_grouped(world, method, backend, trace.lines)
        cmds = _commands(world)
        trace.lines.extend(step(world, cmds, config.dt))
        world.time = (k + 1) * config.dt  # keep the clock drift-free
        for a_id, b_id, d in episodes.update(detect_collisions(world)):
            trace.lines.append(
                {
                    "kind": "collision",
                    "t": world.time,
                    "a": a_id,
                    "b": b_id,
                    "distance": round(d, 6),
                }
            )
        trace.lines.append(_snapshot(world))
    return trace
