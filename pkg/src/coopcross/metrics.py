"""Safety, efficiency and negotiation metrics computed from run traces.

Post-encroachment time is measured per vehicle pair at each shared crossing
they both passed; delay compares actual completion against a free-flow run
of the same route at the entry speed.  Aggregation reduces many runs to one
row per (method, vehicle count) cell with fixed CSV schemas.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

from .sim import SimTrace

SPEED_FLOOR = 0.1

RUN_CSV_COLUMNS = (
    "method",
    "n_vehicles",
    "seed",
    "collided",
    "min_pet",
    "mean_speed",
    "mean_delay",
    "rounds_total",
    "fallbacks",
)

AGGREGATE_CSV_COLUMNS = (
    "method",
    "n_vehicles",
    "runs",
    "collision_rate",
    "pet_mean",
    "pet_min",
    "mean_speed",
    "mean_delay",
    "rounds_aver",
    "rounds_min",
    "rounds_max",
    "fallback_rate",
)


def _crossings_by_cp(trace: SimTrace) -> dict[int, list[dict]]:
    by_cp: dict[int, list[dict]] = {}
    for ev in trace.events("conflict_crossing"):
        by_cp.setdefault(ev["cp"], []).append(ev)
    for evs in by_cp.values():
        evs.sort(key=lambda e: (e["t"], e["vehicle"]))
    return by_cp


def _pet_between(first: dict, second: dict, clearing: str, length: float) -> float:
    t_clear = first["t"]
    if clearing == "rear":
        t_clear += length / max(first["speed"], SPEED_FLOOR)
    return max(0.0, second["t"] - t_clear)


def post_encroachment_time(
    trace: SimTrace, pair: tuple[int, int], conflict_point: int
) -> float | None:
    """Gap between one vehicle clearing the point and the other reaching it.

    None when either vehicle never crossed that point.  Overlap floors at
    zero (a collision event will exist alongside it).
    """
    conf = trace.header["config"]
    clearing = conf.get("pet_clearing", "rear")
    length = conf.get("vehicle_length", 5.0)
    evs = _crossings_by_cp(trace).get(conflict_point, [])
    hits = {ev["vehicle"]: ev for ev in evs if ev["vehicle"] in pair}
    if len(hits) < 2:
        return None
    a, b = sorted(hits.values(), key=lambda e: (e["t"], e["vehicle"]))
    return _pet_between(a, b, clearing, length)


def pet_values(trace: SimTrace) -> list[float]:
    """One PET per vehicle pair per shared crossing both actually passed."""
    conf = trace.header["config"]
    clearing = conf.get("pet_clearing", "rear")
    length = conf.get("vehicle_length", 5.0)
    out: list[float] = []
    by_cp = _crossings_by_cp(trace)
    for cp in sorted(by_cp):
        evs = by_cp[cp]
        for i, first in enumerate(evs):
            for second in evs[i + 1:]:
                if first["vehicle"] == second["vehicle"]:
                    continue
                out.append(_pet_between(first, second, clearing, length))
    return out


def delay(trace: SimTrace, vehicle_id: int) -> tuple[float, bool]:
    """(seconds of delay, censored flag) against the free-flow reference.

    Free flow is the same route covered at the entry speed held constant.
    A vehicle still on the road at the time limit is censored and charged
    the delay accrued up to the limit.
    """
    h = trace.header
    key = str(vehicle_id)
    v0 = max(h["v0"][key], SPEED_FLOOR)
    free = (h["route_length"][key] - h["start_arc"][key]) / v0
    completion = None
    for ev in trace.events("completion"):
        if ev["vehicle"] == vehicle_id:
            completion = ev["t"]
            break
    if completion is None:
        t_limit = h["config"].get("t_limit", 60.0)
        return (max(0.0, t_limit - free), True)
    return (max(0.0, completion - free), False)


def mean_speed(trace: SimTrace) -> float:
    """Mean over vehicles of each vehicle's average speed while on the road."""
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for snap in trace.snapshots():
        for rec in snap["vehicles"]:
            if rec["done"]:
                continue
            sums[rec["id"]] = sums.get(rec["id"], 0.0) + rec["speed"]
            counts[rec["id"]] = counts.get(rec["id"], 0) + 1
    per_vehicle = [sums[vid] / counts[vid] for vid in sorted(sums)]
    if not per_vehicle:
        return 0.0
    return sum(per_vehicle) / len(per_vehicle)


@dataclass(frozen=True)
class RunSummary:
    """Per-run reduction of one trace."""

    method: str
    n_vehicles: int
    seed: int
    collided: bool
    collision_count: int
    pet_values: tuple[float, ...]
    avg_speed: float
    delays: tuple[float, ...]
    censored: tuple[bool, ...]
    negotiation_rounds: tuple[int, ...]
    fallback_count: int

    @property
    def min_pet(self) -> float | None:
        return min(self.pet_values) if self.pet_values else None

    @property
    def mean_delay(self) -> float:
        return sum(self.delays) / len(self.delays) if self.delays else 0.0

    @property
    def rounds_total(self) -> int:
        return sum(self.negotiation_rounds)


def summarize(trace: SimTrace) -> RunSummary:
    h = trace.header
    conf = h["config"]
    vids = sorted(int(k) for k in h["routes"])
    collisions = trace.events("collision")
    per_delay = [delay(trace, vid) for vid in vids]
    rounds = tuple(
        ev["rounds"] for ev in trace.events("order_committed")
    )
    fallbacks = len(trace.events("fallback_used"))
    return RunSummary(
        method=h["method"],
        n_vehicles=len(vids),
        seed=conf.get("seed", 0),
        collided=bool(collisions),
        collision_count=len(collisions),
        pet_values=tuple(pet_values(trace)),
        avg_speed=mean_speed(trace),
        delays=tuple(d for d, _ in per_delay),
        censored=tuple(c for _, c in per_delay),
        negotiation_rounds=rounds,
        fallback_count=fallbacks,
    )


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def run_csv_row(s: RunSummary) -> list[str]:
    return [
        s.method,
        str(s.n_vehicles),
        str(s.seed),
        "true" if s.collided else "false",
        _fmt(s.min_pet),
        _fmt(s.avg_speed),
        _fmt(s.mean_delay),
        str(s.rounds_total),
        str(s.fallback_count),
    ]


def write_runs_csv(summaries: list[RunSummary], path: str) -> None:
    ordered = sorted(summaries, key=lambda s: (s.method, s.n_vehicles, s.seed))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RUN_CSV_COLUMNS)
        for s in ordered:
            writer.writerow(run_csv_row(s))


def aggregate(
    summaries: list[RunSummary],
    group_keys: tuple[str, ...] = ("method", "n_vehicles"),
) -> list[dict]:
    """One row per group: collision rate, PET stats, efficiency means, and
    negotiation-round average/min/max pooled over every episode."""
    if not summaries:
        raise ValueError("no run summaries to aggregate")
    cells: dict[tuple, list[RunSummary]] = {}
    for s in summaries:
        key = tuple(getattr(s, k) for k in group_keys)
        cells.setdefault(key, []).append(s)
    rows: list[dict] = []
    for key in sorted(cells, key=lambda k: tuple(str(v) for v in k)):
        runs = cells[key]
        pooled_pets = [p for s in runs for p in s.pet_values]
        pooled_rounds = [r for s in runs for r in s.negotiation_rounds]
        episodes = len(pooled_rounds)
        row: dict = dict(zip(group_keys, key))
        row.update(
            {
                "runs": len(runs),
                "collision_rate": sum(s.collided for s in runs) / len(runs),
                "pet_mean": (
                    sum(pooled_pets) / len(pooled_pets) if pooled_pets else None
                ),
                "pet_min": min(pooled_pets) if pooled_pets else None,
                "mean_speed": sum(s.avg_speed for s in runs) / len(runs),
                "mean_delay": sum(s.mean_delay for s in runs) / len(runs),
                "rounds_aver": (
                    sum(pooled_rounds) / episodes if episodes else None
                ),
                "rounds_min": min(pooled_rounds) if episodes else None,
                "rounds_max": max(pooled_rounds) if episodes else None,
                "fallback_rate": sum(s.fallback_count for s in runs)
                / max(episodes, 1),
            }
        )
        rows.append(row)
    return rows


def write_aggregate_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AGGREGATE_CSV_COLUMNS)
        for row in rows:
            out: list[str] = []
            for col in AGGREGATE_CSV_COLUMNS:
                val = row.get(col)
                if val is None:
                    out.append("")
                elif isinstance(val, float):
                    out.append(f"{val:.6f}")
                else:
                    out.append(str(val))
            writer.writerow(out)
