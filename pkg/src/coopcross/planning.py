"""Crossing-time scheduling and longitudinal control toward a target time.

Targets are absolute times at which each vehicle should reach its first
remaining conflict point.  Consecutive vehicles in the committed order are
separated by a safety gap; commands solve for a constant acceleration over
the remaining horizon, refined where the speed box binds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .core import VehicleId


class InfeasibleTarget(RuntimeError):
    """Even full braking cannot avoid arriving before the target time."""

    def __init__(self, message: str, latest_arrival: float):
        super().__init__(message)
        self.latest_arrival = latest_arrival


def earliest_arrival(speed: float, distance: float, a_max: float, v_max: float) -> float:
    """Minimum time to cover ``distance``: full acceleration, then cruise."""
    if distance <= 0.0:
        return 0.0
    v = min(max(speed, 0.0), v_max)
    if a_max <= 0.0:
        if v <= 0.0:
            return math.inf
        return distance / v
    d_accel = (v_max * v_max - v * v) / (2.0 * a_max)
    if distance <= d_accel:
        return (-v + math.sqrt(v * v + 2.0 * a_max * distance)) / a_max
    return (v_max - v) / a_max + (distance - d_accel) / v_max


def latest_arrival(speed: float, distance: float, a_min: float) -> float:
    """Latest reachable arrival time under full braking.

    Infinite when the vehicle can stop before the point (it may then wait
    arbitrarily long).
    """
    if distance <= 0.0:
        return 0.0
    v = max(speed, 0.0)
    if v == 0.0:
        return math.inf
    stop_dist = v * v / (2.0 * abs(a_min))
    if stop_dist <= distance:
        return math.inf
    # still moving when the point is reached: d = v t + a_min t^2 / 2
    disc = v * v + 2.0 * a_min * distance
    disc = max(disc, 0.0)
    return (v - math.sqrt(disc)) / abs(a_min)


@dataclass(frozen=True)
class CrossingSchedule:
    """Committed order with per-vehicle absolute target times."""

    order: tuple[VehicleId, ...]
    targets: dict[VehicleId, float]
    pinned: frozenset[VehicleId] = field(default_factory=frozenset)


def schedule_times(
    order: list[VehicleId],
    arrivals: dict[VehicleId, float],
    dt_safe: float,
    constrained_pairs: set[tuple[VehicleId, VehicleId]] | None = None,
    pinned: frozenset[VehicleId] = frozenset(),
    latest: dict[VehicleId, float] | None = None,
) -> CrossingSchedule:
    """Assign target times along the order.

    The first vehicle keeps its earliest arrival; each next one takes
    ``max(own arrival, previous target + dt_safe)`` when the consecutive
    pair is constrained (all pairs by default).  Pinned vehicles keep their
    own arrival but still anchor the chain for whoever comes next.

    ``latest`` caps each target at the physically latest reachable arrival;
    whoever chains off a capped vehicle floors on the capped value, so the
    schedule never asks for a time braking cannot deliver.
    """
    targets: dict[VehicleId, float] = {}
    prev: VehicleId | None = None
    for vid in order:
        arrival = arrivals[vid]
        if prev is None:
            target = arrival
        else:
            gap_applies = (
                constrained_pairs is None or (prev, vid) in constrained_pairs
            )
            if vid in pinned:
                target = arrival
            elif gap_applies:
                target = max(arrival, targets[prev] + dt_safe)
            else:
                target = arrival
        if latest is not None and vid in latest:
            target = min(target, latest[vid])
        targets[vid] = target
        prev = vid
    return CrossingSchedule(order=tuple(order), targets=targets, pinned=pinned)


def acceleration_command(
    speed: float,
    distance: float,
    tau: float,
    a_min: float,
    a_max: float,
    v_max: float,
    dt: float,
) -> float:
    """Constant-acceleration command to cover ``distance`` in ``tau`` seconds.

    Solves d = v tau + a tau^2 / 2, then clamps to the acceleration box and
    so that the next-step speed stays within [0, v_max].  Where the naive
    solution would exceed v_max before arrival, the command follows the
    accelerate-then-cruise profile that still arrives on time; where it
    would need reversing, the vehicle brakes to stop exactly at the point.

    Raises InfeasibleTarget when even full braking arrives before the
    target, carrying the physically latest arrival time.
    """
    if distance <= 0.0 or tau <= 0.0:
        # past the point or past the slot: track the speed limit
        return _clamp((v_max - speed) / dt, a_min, a_max)

    t_latest = latest_arrival(speed, distance, a_min)
    if t_latest < tau - 1e-9:
        raise InfeasibleTarget(
            f"cannot delay arrival to {tau:.3f} s; latest reachable is "
            f"{t_latest:.3f} s",
            latest_arrival=t_latest,
        )

    a = 2.0 * (distance - speed * tau) / (tau * tau)
    v_terminal = speed + a * tau
    if v_terminal > v_max + 1e-12:
        # accelerate to v_max then cruise, arriving exactly on time
        head = v_max * tau - distance
        dv = v_max - speed
        if head <= 1e-12 or dv <= 1e-12:
            a = a_max
        else:
            a = dv * dv / (2.0 * head)
    elif v_terminal < -1e-12:
        # would require reversing: brake to stop exactly at the point
        a = -(speed * speed) / (2.0 * distance) if speed > 0.0 else 0.0

    a = _clamp(a, a_min, a_max)
    # keep next-step speed inside [0, v_max]
    a = min(a, (v_max - speed) / dt)
    a = max(a, (0.0 - speed) / dt)
    return a


def _clamp(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)
