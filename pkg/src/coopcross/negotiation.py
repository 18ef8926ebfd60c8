"""Pass-order negotiation inside and across vehicle groups.

Each group member states a precedence opinion for every conflicting pair.
Unanimous pairs are settled; the rest go through divergence resolution.  The
combined precedence set must pass three rules (exact membership, leaders
before followers, no precedence cycle) before it is linearized into a pass
order; violations trigger a renegotiation round, and a hard round cap
guarantees a deterministic first-come-first-served fallback.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Protocol, runtime_checkable

from .core import ConflictPoint, VehicleId
from .influence import FollowingRelation

SPEED_FLOOR = 0.1  # m/s, guards arrival-time estimates for stopped vehicles


class BackendError(RuntimeError):
    """A negotiation backend failed to produce a usable reply."""


class IncompleteOpinion(ValueError):
    """An opinion does not cover every conflict pair exactly once."""


class UnresolvableDispute(RuntimeError):
    """Divergence resolution kept producing inconsistent precedences."""


class ConsensusLevel(Enum):
    EXACT = "exact"
    BASIC = "basic"
    NONE = "none"


@dataclass(frozen=True)
class PrecedencePreference:
    """One vehicle's claim that ``first`` should pass before ``second``."""

    first: VehicleId
    second: VehicleId
    stated_by: VehicleId
    rationale: str = ""

    def pair(self) -> tuple[VehicleId, VehicleId]:
        return (min(self.first, self.second), max(self.first, self.second))


@dataclass(frozen=True)
class ConflictPairInfo:
    """A vehicle pair sharing an unpassed conflict point."""

    a: VehicleId
    b: VehicleId
    cp_id: int
    location: tuple[float, float]
    dist_a: float
    dist_b: float
    speed_a: float
    speed_b: float

    def key(self) -> tuple[VehicleId, VehicleId]:
        return (min(self.a, self.b), max(self.a, self.b))

    def arrival(self, vid: VehicleId) -> float:
        if vid == self.a:
            return self.dist_a / max(self.speed_a, SPEED_FLOOR)
        if vid == self.b:
            return self.dist_b / max(self.speed_b, SPEED_FLOOR)
        raise KeyError(f"vehicle {vid} not in pair ({self.a}, {self.b})")


@dataclass(frozen=True)
class PassOrder:
    """An ordered crossing sequence with negotiation provenance."""

    ordered_ids: tuple[VehicleId, ...]
    scope: int | None              # group index, or None for the global order
    rounds_used: int
    backend_name: str
    fallback: bool = False


@dataclass(frozen=True)
class NegotiationContext:
    """Immutable inputs one negotiation episode works from."""

    members: tuple[VehicleId, ...]
    conflict_pairs: tuple[ConflictPairInfo, ...]
    following: tuple[FollowingRelation, ...]
    arrivals: dict[VehicleId, float] = field(default_factory=dict)
    pinned: tuple[VehicleId, ...] = ()
    agreed: tuple[PrecedencePreference, ...] = ()
    violations_log: tuple[str, ...] = ()
    group_orders: tuple[PassOrder, ...] = ()

    def arrival_estimate(self, vid: VehicleId) -> float:
        if vid in self.arrivals:
            return self.arrivals[vid]
        best = math.inf
        for pair in self.conflict_pairs:
            if vid in (pair.a, pair.b):
                best = min(best, pair.arrival(vid))
        return best


@dataclass(frozen=True)
class Violation:
    kind: str                      # "omission" | "addition" | "following" | "cycle"
    detail: str


@runtime_checkable
class NegotiatorBackend(Protocol):
    """Behavioral contract every negotiation backend satisfies.

    Implementations must treat the context as read-only and must be
    deterministic for identical inputs unless explicitly documented.
    """

    name: str

    def opinion(
        self, context: NegotiationContext, vehicle_id: VehicleId
    ) -> list[PrecedencePreference]:
        ...

    def resolve(
        self,
        context: NegotiationContext,
        disputed: list[ConflictPairInfo],
    ) -> list[PrecedencePreference]:
        ...

    def merge(
        self,
        intra_orders: list[PassOrder],
        context: NegotiationContext,
    ) -> list[VehicleId]:
        ...


def conflict_pairs(
    members: list[VehicleId],
    arcs: dict[VehicleId, float],
    speeds: dict[VehicleId, float],
    route_of: dict[VehicleId, str],
    points_by_route_pair: dict[tuple[str, str], list[ConflictPoint]],
) -> list[ConflictPairInfo]:
    """Member pairs whose routes share a conflict point neither has passed.

    When a route pair crosses more than once, the entry uses the shared
    point the pair reaches first (smallest combined remaining distance).
    """
    out: list[ConflictPairInfo] = []
    ordered = sorted(members)
    for idx, a in enumerate(ordered):
        for b in ordered[idx + 1:]:
            ra, rb = route_of[a], route_of[b]
            pts = points_by_route_pair.get((ra, rb), [])
            best: ConflictPoint | None = None
            best_rem = math.inf
            for cp in pts:
                da = cp.arc_on(ra) - arcs[a]
                db = cp.arc_on(rb) - arcs[b]
                if da <= 0.0 or db <= 0.0:
                    continue
                if da + db < best_rem:
                    best_rem = da + db
                    best = cp
            if best is None:
                continue
            out.append(
                ConflictPairInfo(
                    a=a,
                    b=b,
                    cp_id=best.cp_id,
                    location=best.location,
                    dist_a=best.arc_on(ra) - arcs[a],
                    dist_b=best.arc_on(rb) - arcs[b],
                    speed_a=speeds[a],
                    speed_b=speeds[b],
                )
            )
    return out


def generate_opinions(
    backend: NegotiatorBackend, context: NegotiationContext
) -> dict[VehicleId, list[PrecedencePreference]]:
    """Collect one opinion per member; each must cover every conflict pair
    exactly once."""
    expected = {pair.key() for pair in context.conflict_pairs}
    opinions: dict[VehicleId, list[PrecedencePreference]] = {}
    for vid in context.members:
        prefs = backend.opinion(context, vid)
        covered: list[tuple[VehicleId, VehicleId]] = [p.pair() for p in prefs]
        if sorted(covered) != sorted(expected):
            missing = expected - set(covered)
            dup = {p for p in covered if covered.count(p) > 1}
            raise IncompleteOpinion(
                f"opinion of vehicle {vid} does not cover conflict pairs "
                f"exactly once (missing={sorted(missing)}, duplicated={sorted(dup)})"
            )
        opinions[vid] = list(prefs)
    return opinions


def classify_consensus(
    opinions: dict[VehicleId, list[PrecedencePreference]],
    pair_key: tuple[VehicleId, VehicleId],
) -> tuple[ConsensusLevel, tuple[VehicleId, VehicleId] | None]:
    """Consensus level for one conflict pair, plus the majority direction.

    Exact needs unanimity; basic needs at least ceil(2/3 of the votes); a
    tied majority direction is reported as None.
    """
    votes: dict[tuple[VehicleId, VehicleId], int] = {}
    total = 0
    for prefs in opinions.values():
        for pref in prefs:
            if pref.pair() == pair_key:
                votes[(pref.first, pref.second)] = votes.get((pref.first, pref.second), 0) + 1
                total += 1
    if total == 0:
        return (ConsensusLevel.NONE, None)
    best_dir, best = None, -1
    for direction in sorted(votes):
        if votes[direction] > best:
            best, best_dir = votes[direction], direction
    if len(votes) == 2 and len(set(votes.values())) == 1:
        best_dir = None  # tie
    if best == total:
        return (ConsensusLevel.EXACT, best_dir)
    if best >= math.ceil(2.0 * total / 3.0):
        return (ConsensusLevel.BASIC, best_dir)
    return (ConsensusLevel.NONE, best_dir)


def _precedence_graph(
    precedences: list[PrecedencePreference],
    following: tuple[FollowingRelation, ...],
    members: set[VehicleId],
) -> dict[VehicleId, set[VehicleId]]:
    edges: dict[VehicleId, set[VehicleId]] = {m: set() for m in members}
    for pref in precedences:
        if pref.first in members and pref.second in members:
            edges[pref.first].add(pref.second)
    for rel in following:
        if rel.leader in members and rel.follower in members:
            edges[rel.leader].add(rel.follower)
    return edges


def _find_cycle(edges: dict[VehicleId, set[VehicleId]]) -> list[VehicleId] | None:
    """Return one cycle if the digraph has any, via iterative DFS coloring."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {v: WHITE for v in edges}
    parent: dict[VehicleId, VehicleId] = {}
    for root in sorted(edges):
        if color[root] != WHITE:
            continue
        stack = [(root, iter(sorted(edges[root])))]
        color[root] = GRAY
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if color[nxt] == GRAY:
                    cycle = [nxt, node]
                    cur = node
                    while cur != nxt:
                        cur = parent[cur]
                        cycle.append(cur)
                    cycle.reverse()
                    return cycle
                if color[nxt] == WHITE:
                    color[nxt] = GRAY
                    parent[nxt] = node
                    stack.append((nxt, iter(sorted(edges[nxt]))))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack.pop()
    return None


def validate_precedences(
    precedences: list[PrecedencePreference],
    members: list[VehicleId],
    following: tuple[FollowingRelation, ...] = (),
    required_pairs: list[tuple[VehicleId, VehicleId]] | None = None,
) -> list[Violation]:
    """Check the three order rules; returns every violation found.

    Rule 1: no vehicle outside the group may appear, and every required
    conflict pair must be covered.  Rule 2: no stated precedence may put a
    follower before its leader.  Rule 3: the precedence digraph (including
    following edges) must admit a topological order.
    """
    violations: list[Violation] = []
    member_set = set(members)

    for pref in precedences:
        for vid in (pref.first, pref.second):
            if vid not in member_set:
                violations.append(
                    Violation("addition", f"vehicle {vid} is not a group member")
                )
    if required_pairs is not None:
        covered = {p.pair() for p in precedences}
        for pair in required_pairs:
            key = (min(pair), max(pair))
            if key not in covered:
                violations.append(
                    Violation("omission", f"conflict pair {key} has no precedence")
                )

    follow_map = {(r.follower, r.leader) for r in following}
    for pref in precedences:
        if (pref.first, pref.second) in follow_map:
            violations.append(
                Violation(
                    "following",
                    f"vehicle {pref.first} follows {pref.second} and cannot pass first",
                )
            )

    in_scope = [p for p in precedences if p.first in member_set and p.second in member_set]
    edges = _precedence_graph(in_scope, following, member_set)
    cycle = _find_cycle(edges)
    if cycle is not None:
        violations.append(
            Violation("cycle", "precedence cycle " + " -> ".join(str(v) for v in cycle))
        )
    return violations


def validate_order(
    order: list[VehicleId],
    members: list[VehicleId],
    following: tuple[FollowingRelation, ...] = (),
    intra_orders: list[PassOrder] | None = None,
) -> list[Violation]:
    """Rules applied to a complete order list (used for merge proposals)."""
    violations: list[Violation] = []
    member_set = set(members)
    order_set = set(order)
    for vid in order:
        if vid not in member_set:
            violations.append(Violation("addition", f"vehicle {vid} is not a member"))
    for vid in sorted(member_set - order_set):
        violations.append(Violation("omission", f"vehicle {vid} missing from order"))
    if len(order) != len(order_set):
        violations.append(Violation("addition", "order repeats a vehicle"))
    if violations:
        return violations

    position = {vid: i for i, vid in enumerate(order)}
    for rel in following:
        if rel.leader in position and rel.follower in position:
            if position[rel.follower] < position[rel.leader]:
                violations.append(
                    Violation(
                        "following",
                        f"follower {rel.follower} placed before leader {rel.leader}",
                    )
                )
    if intra_orders:
        for po in intra_orders:
            ranks = [position[v] for v in po.ordered_ids if v in position]
            if ranks != sorted(ranks):
                violations.append(
                    Violation(
                        "cycle",
                        f"group {po.scope} order {po.ordered_ids} not kept as a subsequence",
                    )
                )
    return violations


def resolve_divergence(
    backend: NegotiatorBackend,
    context: NegotiationContext,
    disputed: list[ConflictPairInfo],
    max_retries: int = 2,
) -> list[PrecedencePreference]:
    """One final precedence per disputed pair, consistent with what is
    already agreed; the backend is retried on inconsistent replies."""
    if not disputed:
        return []
    expected = {pair.key() for pair in disputed}
    member_set = set(context.members)
    last_problem = ""
    for _ in range(max_retries + 1):
        prefs = backend.resolve(context, disputed)
        covered = [p.pair() for p in prefs]
        if sorted(covered) != sorted(expected):
            last_problem = "resolution does not cover the disputed pairs exactly once"
            continue
        combined = list(context.agreed) + list(prefs)
        edges = _precedence_graph(combined, context.following, member_set)
        cycle = _find_cycle(edges)
        if cycle is None:
            return list(prefs)
        last_problem = "resolution introduces cycle " + " -> ".join(map(str, cycle))
    raise UnresolvableDispute(last_problem)


def linearize(
    members: list[VehicleId],
    precedences: list[PrecedencePreference],
    following: tuple[FollowingRelation, ...],
    context: NegotiationContext,
) -> list[VehicleId]:
    """Topological order of the precedence digraph.

    Pinned vehicles drain first; remaining ties break on estimated arrival
    time, then vehicle id.  Callers must pass an acyclic precedence set.
    """
    member_set = set(members)
    edges = _precedence_graph(list(precedences), following, member_set)
    indegree = {v: 0 for v in member_set}
    for src, dsts in edges.items():
        for dst in dsts:
            indegree[dst] += 1
    pinned = set(context.pinned)

    def key(vid: VehicleId) -> tuple:
        return (0 if vid in pinned else 1, context.arrival_estimate(vid), vid)

    heap = [(key(v), v) for v in member_set if indegree[v] == 0]
    heapq.heapify(heap)
    out: list[VehicleId] = []
    while heap:
        _, vid = heapq.heappop(heap)
        out.append(vid)
        for dst in sorted(edges[vid]):
            indegree[dst] -= 1
            if indegree[dst] == 0:
                heapq.heappush(heap, (key(dst), dst))
    if len(out) != len(member_set):
        raise ValueError("cannot linearize a cyclic precedence set")
    return out


def fallback_order(context: NegotiationContext) -> list[VehicleId]:
    """First-come-first-served order respecting following relations."""
    return linearize(list(context.members), [], context.following, context)


def intra_group_order(
    backend: NegotiatorBackend,
    context: NegotiationContext,
    max_renegotiations: int = 20,
    scope: int | None = None,
    observer=None,
) -> PassOrder:
    """Negotiate a pass order for one group.

    Runs up to ``max_renegotiations + 1`` rounds; every failed validation
    (or backend error) consumes a round and appends its finding to the
    context, and exhausting the cap returns the deterministic FCFS fallback.
    ``observer``, when given, is called once per round with a record dict.
    """
    members = list(context.members)
    if len(members) <= 1:
        return PassOrder(
            ordered_ids=tuple(members),
            scope=scope,
            rounds_used=0,
            backend_name=backend.name,
        )
    cap = max_renegotiations + 1
    ctx = context
    required = [pair.key() for pair in ctx.conflict_pairs]
    rounds = 0

    def _note_round(accepted: bool, notes: tuple[str, ...]) -> None:
        if observer is not None:
            observer(
                {"scope": scope, "round": rounds, "accepted": accepted,
                 "notes": list(notes)}
            )

    while rounds < cap:
        rounds += 1
        try:
            opinions = generate_opinions(backend, ctx)
        except (BackendError, IncompleteOpinion) as exc:
            _note_round(False, (str(exc),))
            ctx = replace(ctx, violations_log=ctx.violations_log + (str(exc),))
            continue

        agreed: list[PrecedencePreference] = []
        disputed: list[ConflictPairInfo] = []
        for pair in ctx.conflict_pairs:
            level, direction = classify_consensus(opinions, pair.key())
            if level is ConsensusLevel.EXACT and direction is not None:
                agreed.append(
                    PrecedencePreference(
                        first=direction[0], second=direction[1],
                        stated_by=direction[0], rationale="unanimous",
                    )
                )
            else:
                disputed.append(pair)

        try:
            resolved = resolve_divergence(
                backend, replace(ctx, agreed=tuple(agreed)), disputed
            )
        except (BackendError, UnresolvableDispute) as exc:
            _note_round(False, (str(exc),))
            ctx = replace(ctx, violations_log=ctx.violations_log + (str(exc),))
            continue

        precedences = agreed + resolved
        violations = validate_precedences(
            precedences, members, ctx.following, required_pairs=required
        )
        if not violations:
            _note_round(True, ())
            order = linearize(members, precedences, ctx.following, ctx)
            return PassOrder(
                ordered_ids=tuple(order),
                scope=scope,
                rounds_used=rounds,
                backend_name=backend.name,
            )
        notes = tuple(f"{v.kind}: {v.detail}" for v in violations)
        _note_round(False, notes)
        ctx = replace(ctx, violations_log=ctx.violations_log + notes)

    return PassOrder(
        ordered_ids=tuple(fallback_order(context)),
        scope=scope,
        rounds_used=cap,
        backend_name=backend.name,
        fallback=True,
    )


def merge_orders_fcfs(
    intra_orders: list[PassOrder], context: NegotiationContext
) -> list[VehicleId]:
    """Constraint-respecting k-way merge of group orders by earliest arrival.

    Group chain edges and following relations both gate eligibility; if they
    ever deadlock jointly, following relations (physical constraints) win
    and the blocking chain edge is bypassed.
    """
    pending = {idx: list(po.ordered_ids) for idx, po in enumerate(intra_orders)}
    emitted: set[VehicleId] = set()
    leaders_of: dict[VehicleId, set[VehicleId]] = {}
    for rel in context.following:
        leaders_of.setdefault(rel.follower, set()).add(rel.leader)
    all_members = [v for po in intra_orders for v in po.ordered_ids]
    pinned = set(context.pinned)

    def sort_key(vid: VehicleId) -> tuple:
        return (0 if vid in pinned else 1, context.arrival_estimate(vid), vid)

    out: list[VehicleId] = []
    while len(out) < len(all_members):
        heads = [queue[0] for queue in pending.values() if queue]
        unblocked = [
            h for h in heads
            if not (leaders_of.get(h, set()) & (set(all_members) - emitted - {h}))
        ]
        candidates = unblocked if unblocked else [
            v for v in all_members
            if v not in emitted
            and not (leaders_of.get(v, set()) & (set(all_members) - emitted - {v}))
        ]
        pick = min(candidates, key=sort_key)
        out.append(pick)
        emitted.add(pick)
        for queue in pending.values():
            if pick in queue:
                queue.remove(pick)
    return out


def inter_group_order(
    backend: NegotiatorBackend,
    intra_orders: list[PassOrder],
    context: NegotiationContext,
    max_renegotiations: int = 20,
    observer=None,
) -> PassOrder:
    """Merge intra-group orders into one global pass order.

    A single group passes through untouched.  Merge proposals are validated
    (exact membership, following respected, every group order kept as a
    subsequence) and retried up to the round cap, after which the arrival
    k-way merge fallback applies.
    """
    if len(intra_orders) == 1:
        po = intra_orders[0]
        return PassOrder(
            ordered_ids=po.ordered_ids,
            scope=None,
            rounds_used=0,
            backend_name=backend.name,
        )
    members = list(context.members)
    cap = max_renegotiations + 1
    ctx = replace(context, group_orders=tuple(intra_orders))
    rounds = 0

    def _note_round(accepted: bool, notes: tuple[str, ...]) -> None:
        if observer is not None:
            observer(
                {"scope": None, "round": rounds, "accepted": accepted,
                 "notes": list(notes)}
            )

    while rounds < cap:
        rounds += 1
        try:
            proposal = backend.merge(intra_orders, ctx)
        except BackendError as exc:
            _note_round(False, (str(exc),))
            ctx = replace(ctx, violations_log=ctx.violations_log + (str(exc),))
            continue
        violations = validate_order(
            list(proposal), members, ctx.following, intra_orders
        )
        if not violations:
            _note_round(True, ())
            return PassOrder(
                ordered_ids=tuple(proposal),
                scope=None,
                rounds_used=rounds,
                backend_name=backend.name,
            )
        notes = tuple(f"{v.kind}: {v.detail}" for v in violations)
        _note_round(False, notes)
        ctx = replace(ctx, violations_log=ctx.violations_log + notes)

    return PassOrder(
        ordered_ids=tuple(merge_orders_fcfs(intra_orders, ctx)),
        scope=None,
        rounds_used=cap,
        backend_name=backend.name,
        fallback=True,
    )


class RuleBackend:
    """Deterministic first-come-first-served oracle.

    Every stated precedence is read off one first-come-first-served ranking
    of the group (estimated arrival, ties to the lower vehicle id, computed
    subject to car-following), so opinions are unanimous, acyclic, and
    consistent with following by construction: a rule negotiation always
    settles in one round.
    """

    name = "rule"

    @staticmethod
    def _ranking(context: NegotiationContext) -> dict[VehicleId, int]:
        order = linearize(list(context.members), [], context.following, context)
        return {vid: pos for pos, vid in enumerate(order)}

    @staticmethod
    def _direction(
        pair: ConflictPairInfo, rank: dict[VehicleId, int]
    ) -> tuple[VehicleId, VehicleId]:
        if rank[pair.a] < rank[pair.b]:
            return (pair.a, pair.b)
        return (pair.b, pair.a)

    def opinion(
        self, context: NegotiationContext, vehicle_id: VehicleId
    ) -> list[PrecedencePreference]:
        rank = self._ranking(context)
        prefs = []
        for pair in context.conflict_pairs:
            first, second = self._direction(pair, rank)
            prefs.append(
                PrecedencePreference(
                    first=first, second=second, stated_by=vehicle_id,
                    rationale="earlier estimated arrival",
                )
            )
        return prefs

    def resolve(
        self,
        context: NegotiationContext,
        disputed: list[ConflictPairInfo],
    ) -> list[PrecedencePreference]:
        rank = self._ranking(context)
        out = []
        for pair in disputed:
            first, second = self._direction(pair, rank)
            out.append(
                PrecedencePreference(
                    first=first, second=second, stated_by=first,
                    rationale="rule resolution by earlier arrival",
                )
            )
        return out

    def merge(
        self,
        intra_orders: list[PassOrder],
        context: NegotiationContext,
    ) -> list[VehicleId]:
        return merge_orders_fcfs(intra_orders, context)
