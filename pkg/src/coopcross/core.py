"""Shared domain types, scenario configuration, and seeded randomness.

Every piece of randomness in the package flows through ``seeded_rng`` so that
a run is fully determined by its integer seed and a handful of stream labels.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Optional

import numpy as np

# Vehicle identifiers are plain integers; opaque to every algorithm.
VehicleId = int

KMH_TO_MS = 1.0 / 3.6

# Positions closer than this are treated as coincident (degenerate geometry).
EPS_POS = 1e-6
# Geometric tolerance for conflict point construction and de-duplication.
EPS_GEO = 1e-3


class MethodKind(Enum):
    """Decision pipeline variants compared in the ablation experiment.

    IVD: independent per-vehicle decisions over locally detected neighbours.
    IGN: influence-based grouping with intra-group negotiation only.
    IIGN: intra-group negotiation followed by inter-group order merging.
    """

    IVD = "IVD"
    IGN = "IGN"
    IIGN = "IIGN"


@dataclass(frozen=True)
class VehicleState:
    """Kinematic snapshot of a single vehicle in the world frame."""

    vehicle_id: VehicleId
    position: tuple[float, float]
    velocity: tuple[float, float]
    route_id: str
    arc_position: float
    length: float = 5.0

    @property
    def speed(self) -> float:
        return math.hypot(self.velocity[0], self.velocity[1])


@dataclass(frozen=True)
class Route:
    """A fixed path through the intersection, sampled as a polyline.

    ``xs``/``ys``/``arcs`` are parallel arrays; ``arcs`` is the cumulative
    arc length and is strictly increasing.  ``stop_line_arc`` marks where the
    approach leg meets the conflict area.
    """

    route_id: str
    approach: str
    movement: str
    lane_index: int
    xs: tuple[float, ...]
    ys: tuple[float, ...]
    arcs: tuple[float, ...]
    stop_line_arc: float

    @property
    def length(self) -> float:
        return self.arcs[-1]

    def point_at(self, arc: float) -> tuple[float, float]:
        a = min(max(arc, 0.0), self.length)
        x = float(np.interp(a, self.arcs, self.xs))
        y = float(np.interp(a, self.arcs, self.ys))
        return (x, y)

    def tangent_at(self, arc: float) -> tuple[float, float]:
        a = min(max(arc, 0.0), self.length)
        arcs = self.arcs
        i = int(np.searchsorted(arcs, a, side="right")) - 1
        i = min(max(i, 0), len(arcs) - 2)
        dx = self.xs[i + 1] - self.xs[i]
        dy = self.ys[i + 1] - self.ys[i]
        norm = math.hypot(dx, dy)
        if norm <= 0.0:
            return (1.0, 0.0)
        return (dx / norm, dy / norm)


@dataclass(frozen=True)
class ConflictPoint:
    """A crossing of two route centerlines inside the conflict area.

    The optional windows give the arc interval on each route where the two
    centerlines run within proximity clearance of each other; the point
    itself always lies inside its window.  Time separation applied window
    edge to window edge keeps vehicle bodies apart even while one of them
    is still sweeping past the crossing.
    """

    cp_id: int
    route_a: str
    route_b: str
    arc_a: float
    arc_b: float
    location: tuple[float, float]
    window_a: tuple[float, float] | None = None
    window_b: tuple[float, float] | None = None

    def arc_on(self, route_id: str) -> float:
        if route_id == self.route_a:
            return self.arc_a
        if route_id == self.route_b:
            return self.arc_b
        raise KeyError(f"route {route_id!r} not part of conflict point {self.cp_id}")

    def window_on(self, route_id: str) -> tuple[float, float]:
        if route_id == self.route_a:
            return self.window_a or (self.arc_a, self.arc_a)
        if route_id == self.route_b:
            return self.window_b or (self.arc_b, self.arc_b)
        raise KeyError(f"route {route_id!r} not part of conflict point {self.cp_id}")


@dataclass(frozen=True)
class ScenarioConfig:
    """All tunable parameters for scenario generation, decision making and
    closed-loop simulation.  Defaults reproduce the reference experiment
    setup."""

    # scenario
    n_vehicles: int = 4
    seed: int = 0
    d0_range: tuple[float, float] = (40.0, 80.0)          # m before stop line
    v0_range_kmh: tuple[float, float] = (30.0, 31.0)      # km/h
    vehicle_length: float = 5.0                           # m
    min_spawn_gap: float = 10.0                           # m, same-lane separation
    lanes_per_direction: int = 1
    # wider than the 0.8*length disc collision diameter, so parallel and
    # opposing flows in adjacent lanes never register contact
    lane_width: float = 4.5                               # m
    approach_length: float = 100.0                        # m before the box
    exit_length: float = 50.0                             # m after the box
    # stop line sits back from the conflict area, so a vehicle waiting at
    # the line stays clear of the disc radius of passing cross traffic
    stop_line_setback: float = 2.5                        # m
    # box corners extend past the lane edges; keeps turning arcs clear of
    # the entry mouths of adjacent approaches by more than the contact disc
    corner_margin: float = 2.0                            # m

    # influence
    car_following_augmentation: bool = True
    follow_gap_threshold: float = 25.0                    # m

    # grouping
    motif: str = "Ms"
    k_max: int = 6
    s_min: float = 0.25
    row_normalize_embedding: bool = False

    # negotiation
    max_renegotiations: int = 20
    detect_range_ivd: float = 80.0                        # m

    # planning
    dt_safe: float = 1.5                                  # s
    a_min: float = -4.5                                   # m/s^2
    a_max: float = 2.5                                    # m/s^2
    v_max: float = 10.0                                   # m/s
    constraint_mode: str = "all_consecutive"              # or "conflicting_only"

    # simulation
    dt: float = 0.1                                       # s
    replan_period: float = 1.0                            # s
    t_limit: float = 60.0                                 # s

    # metrics
    pet_clearing: str = "rear"                            # or "front"

    def validate(self) -> None:
        if self.n_vehicles < 1:
            raise ValueError("n_vehicles must be >= 1")
        if self.d0_range[0] > self.d0_range[1] or self.d0_range[0] < 0:
            raise ValueError("d0_range must be ordered and nonnegative")
        if self.v0_range_kmh[0] > self.v0_range_kmh[1] or self.v0_range_kmh[0] < 0:
            raise ValueError("v0_range_kmh must be ordered and nonnegative")
        if self.lanes_per_direction not in (1, 2):
            raise ValueError("lanes_per_direction must be 1 or 2")
        if self.constraint_mode not in ("all_consecutive", "conflicting_only"):
            raise ValueError(f"unknown constraint_mode {self.constraint_mode!r}")
        if self.pet_clearing not in ("rear", "front"):
            raise ValueError(f"unknown pet_clearing {self.pet_clearing!r}")
        if self.dt <= 0 or self.replan_period < self.dt:
            raise ValueError("dt must be > 0 and replan_period >= dt")
        if self.a_max <= 0 or self.a_min >= 0 or self.v_max <= 0:
            raise ValueError("need a_max > 0, a_min < 0, v_max > 0")
        if self.max_renegotiations < 0:
            raise ValueError("max_renegotiations must be >= 0")
        if not 0 <= self.stop_line_setback < self.approach_length:
            raise ValueError("stop_line_setback must be in [0, approach_length)")
        if self.corner_margin < 0:
            raise ValueError("corner_margin must be >= 0")

    @property
    def v0_range_ms(self) -> tuple[float, float]:
        return (self.v0_range_kmh[0] * KMH_TO_MS, self.v0_range_kmh[1] * KMH_TO_MS)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            if isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "ScenarioConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("config file must hold a JSON object")
        # Foreign sections (e.g. llm settings) live under their own keys.
        data = {k: v for k, v in data.items() if k != "llm"}
        return cls.from_dict(data)

    def override(self, **kwargs) -> "ScenarioConfig":
        cfg = replace(self, **kwargs)
        cfg.validate()
        return cfg


def seeded_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Return the generator for one named random stream.

    The (seed, stream_label) pair fully determines the sequence: the pair is
    hashed into a 128-bit key for a Philox counter-based bit generator, whose
    output is guaranteed stable across library versions.  Distinct labels give
    statistically independent streams of the same seed.
    """
    digest = hashlib.sha256(f"{seed}:{stream_label}".encode("utf-8")).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
