"""Shared fixtures: offline guard, brute-force oracles, scripted backends,
and a local mock chat-completion server."""
import itertools
import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from coopcross.negotiation import (
    ConflictPairInfo,
    NegotiationContext,
    PassOrder,
    PrecedencePreference,
    RuleBackend,
)

# ---------------------------------------------------------------------------
# offline guard: the whole suite must run without touching the network.
# Loopback stays open for the mock server; anything else fails the test.

_BLOCKED: list[tuple] = []
_REAL_CONNECT = socket.socket.connect


def _is_loopback(address) -> bool:
    if not isinstance(address, tuple) or not address:
        return False
    host = address[0]
    return (
        host in ("localhost", "::1")
        or host.startswith("127.")
        or host.startswith("::ffff:127.")
    )


def _guarded_connect(self, address):
    if self.family in (socket.AF_INET, socket.AF_INET6) and not _is_loopback(address):
        _BLOCKED.append(address)
        raise RuntimeError(f"test suite attempted a non-loopback connection: {address}")
    return _REAL_CONNECT(self, address)


@pytest.fixture(scope="session", autouse=True)
def no_network():
    socket.socket.connect = _guarded_connect
    yield _BLOCKED
    socket.socket.connect = _REAL_CONNECT


# ---------------------------------------------------------------------------
# random digraphs and the brute-force influence oracle

def random_digraph(rng: np.random.Generator, n: int, density: float = 0.5) -> np.ndarray:
    """Nonnegative weighted digraph with zero diagonal, entries in [0, 1]."""
    w = rng.uniform(0.05, 1.0, size=(n, n))
    w *= rng.random((n, n)) < density
    np.fill_diagonal(w, 0.0)
    return w


def oracle_simple_paths(a: np.ndarray, i: int, j: int) -> list[tuple[int, ...]]:
    """Every simple i->j path, found by scanning node permutations.

    Deliberately naive: for each subset order of intermediate nodes, accept
    the sequence if every hop has positive weight.  Exponential, fine for
    n <= 6.
    """
    n = a.shape[0]
    others = [v for v in range(n) if v not in (i, j)]
    found = []
    for k in range(len(others) + 1):
        for mids in itertools.permutations(others, k):
            seq = (i,) + mids + (j,)
            if all(a[u, v] > 0 for u, v in zip(seq, seq[1:])):
                found.append(seq)
    return found


def oracle_cumulative(a: np.ndarray) -> np.ndarray:
    """Sum of edge-weight products over all simple paths, per pair."""
    n = a.shape[0]
    f = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            total = 0.0
            for seq in oracle_simple_paths(a, i, j):
                prod = 1.0
                for u, v in zip(seq, seq[1:]):
                    prod *= a[u, v]
                total += prod
            f[i, j] = total
    return f


# ---------------------------------------------------------------------------
# brute-force motif adjacency oracle

def _oracle_autos(motif) -> list[tuple[int, ...]]:
    edge_set = set(motif.edges)
    anchors = set(motif.anchor_pair)
    out = []
    for perm in itertools.permutations(range(motif.node_count)):
        if {perm[a] for a in anchors} != anchors:
            continue
        if {(perm[u], perm[v]) for u, v in edge_set} == edge_set:
            out.append(perm)
    return out


def oracle_motif_adjacency(w: np.ndarray, motif) -> np.ndarray:
    """Anchored placement enumeration, one mean-weight term per placement.

    Placements assign the anchor pair to (i, j) or (j, i) and the leftover
    motif nodes injectively onto the remaining graph nodes; placements that
    coincide under an anchor-preserving motif automorphism count once.
    """
    n = w.shape[0]
    m = np.zeros((n, n))
    autos = _oracle_autos(motif)
    a1, a2 = motif.anchor_pair
    free = [v for v in range(motif.node_count) if v not in (a1, a2)]
    for i in range(n):
        for j in range(i + 1, n):
            rest = [v for v in range(n) if v not in (i, j)]
            classes = set()
            total = 0.0
            for x, y in ((i, j), (j, i)):
                for chosen in itertools.permutations(rest, len(free)):
                    sigma = {a1: x, a2: y}
                    sigma.update(dict(zip(free, chosen)))
                    orbit = frozenset(
                        tuple(sigma[p[v]] for v in range(motif.node_count))
                        for p in autos
                    )
                    if orbit in classes:
                        continue
                    classes.add(orbit)
                    weights = [w[sigma[u], sigma[v]] for u, v in motif.edges]
                    if all(x > 0.0 for x in weights):
                        total += sum(weights) / len(motif.edges)
            m[i, j] = m[j, i] = total
    return m


# ---------------------------------------------------------------------------
# negotiation context builders and scripted backends

def make_pair(a, b, dist_a, dist_b, speed_a=10.0, speed_b=10.0, cp_id=0):
    return ConflictPairInfo(
        a=a, b=b, cp_id=cp_id, location=(0.0, 0.0),
        dist_a=dist_a, dist_b=dist_b, speed_a=speed_a, speed_b=speed_b,
    )


def make_context(members, pairs=(), following=(), arrivals=None, pinned=()):
    return NegotiationContext(
        members=tuple(members),
        conflict_pairs=tuple(pairs),
        following=tuple(following),
        arrivals=dict(arrivals or {}),
        pinned=tuple(pinned),
    )


def random_context(rng: np.random.Generator, size: int) -> NegotiationContext:
    """Random negotiation scene: every member pair conflicts with odds 0.6."""
    members = list(range(size))
    pairs = []
    cp = 0
    for i in members:
        for j in members[i + 1:]:
            if rng.random() < 0.6:
                pairs.append(make_pair(
                    i, j,
                    dist_a=float(rng.uniform(5.0, 80.0)),
                    dist_b=float(rng.uniform(5.0, 80.0)),
                    cp_id=cp,
                ))
                cp += 1
    following = []
    arrivals = {m: float(rng.uniform(0.5, 9.0)) for m in members}
    return make_context(members, pairs, following, arrivals)


class ChaosBackend:
    """Adversarial scripted backend: replies are randomly omissive,
    duplicated, cyclic, phantom-ridden, or flipped; occasionally honest."""

    name = "chaos"

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.rule = RuleBackend()

    def opinion(self, context, vehicle_id):
        prefs = self.rule.opinion(context, vehicle_id)
        roll = self.rng.random()
        if roll < 0.15 and prefs:
            return prefs[:-1]                       # omit a pair
        if roll < 0.30 and prefs:
            return prefs + [prefs[0]]               # duplicate a pair
        if roll < 0.45:
            ghost = 10_000 + int(self.rng.integers(100))
            return prefs + [PrecedencePreference(
                first=ghost, second=context.members[0], stated_by=vehicle_id)]
        if roll < 0.75:
            return [                                # random flips breed disputes
                PrecedencePreference(
                    first=p.second, second=p.first, stated_by=vehicle_id)
                if self.rng.random() < 0.5 else p
                for p in prefs
            ]
        return prefs

    def resolve(self, context, disputed):
        roll = self.rng.random()
        if roll < 0.3 and context.agreed:
            # contradict something agreed: with the disputed pair answered
            # both ways this often closes a precedence cycle
            flip = context.agreed[0]
            out = [PrecedencePreference(first=flip.second, second=flip.first,
                                        stated_by=flip.second)]
            remaining = [p for p in disputed
                         if p.key() != (min(flip.pair()), max(flip.pair()))]
            out.extend(self.rule.resolve(context, remaining))
            covered = {(min(p.first, p.second), max(p.first, p.second)) for p in out}
            if covered != {p.key() for p in disputed}:
                return out                          # miscovered on purpose
            return out
        if roll < 0.45 and disputed:
            return self.rule.resolve(context, disputed)[:-1]   # omissive
        return self.rule.resolve(context, disputed)

    def merge(self, intra_orders, context):
        members = [v for po in intra_orders for v in po.ordered_ids]
        roll = self.rng.random()
        if roll < 0.2 and len(members) > 1:
            return members[:-1]                     # drops a vehicle
        if roll < 0.35:
            return members + [members[0]]           # repeats a vehicle
        if roll < 0.5:
            return members + [77_000]               # invents a vehicle
        if roll < 0.8 and len(members) > 1:
            shuffled = list(members)
            self.rng.shuffle(shuffled)
            return shuffled                         # likely breaks subsequences
        return self.rule.merge(intra_orders, context)


class StonewallBackend:
    """Never produces a usable reply; forces the round cap every time."""

    name = "stonewall"

    def opinion(self, context, vehicle_id):
        return []                                   # covers nothing

    def resolve(self, context, disputed):
        return []

    def merge(self, intra_orders, context):
        return []


class QuarrelBackend:
    """Rule backend that wrecks a round with probability growing in group
    size; used to script the round-count scaling trend."""

    name = "quarrel"

    def __init__(self, rng: np.random.Generator, slope: float = 0.15):
        self.rng = rng
        self.slope = slope
        self.rule = RuleBackend()

    def _fail_odds(self, size: int) -> float:
        return min(0.9, self.slope * (size - 1))

    def opinion(self, context, vehicle_id):
        prefs = self.rule.opinion(context, vehicle_id)
        if prefs and self.rng.random() < self._fail_odds(len(context.members)):
            return prefs[:-1]                       # round dies in validation
        return prefs

    def resolve(self, context, disputed):
        return self.rule.resolve(context, disputed)

    def merge(self, intra_orders, context):
        members = [v for po in intra_orders for v in po.ordered_ids]
        if len(members) > 1 and self.rng.random() < self._fail_odds(len(members)):
            return members[:-1]
        return self.rule.merge(intra_orders, context)


# ---------------------------------------------------------------------------
# local mock chat-completion server

class _MockHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length)) if length else {}
        self.server.record.append(
            {"body": body, "auth": self.headers.get("Authorization")}
        )
        status, payload = self.server.pop_script()
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


class MockChatServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self):
        super().__init__(("127.0.0.1", 0), _MockHandler)
        self.record: list[dict] = []
        self.scripted: list[tuple[int, dict]] = []
        self._lock = threading.Lock()

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"

    def script(self, *responses):
        """Queue (status, reply_text_or_payload) pairs, consumed in order.
        The last entry repeats once the queue drains."""
        with self._lock:
            self.scripted = [
                (status, {"choices": [{"message": {"content": item}}]}
                 if isinstance(item, str) else item)
                for status, item in responses
            ]

    def pop_script(self) -> tuple[int, dict]:
        with self._lock:
            if not self.scripted:
                return (200, {"choices": [{"message": {"content": "[]"}}]})
            if len(self.scripted) == 1:
                return self.scripted[0]
            return self.scripted.pop(0)


@pytest.fixture
def mock_chat():
    server = MockChatServer()
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    server.server_close()


@pytest.fixture
def two_group_orders():
    orders = [
        PassOrder(ordered_ids=(0, 1), scope=0, rounds_used=1, backend_name="rule"),
        PassOrder(ordered_ids=(2,), scope=1, rounds_used=0, backend_name="rule"),
    ]
    context = make_context(
        [0, 1, 2],
        pairs=[make_pair(0, 1, 30.0, 40.0), make_pair(1, 2, 45.0, 35.0)],
        arrivals={0: 3.0, 1: 4.0, 2: 3.5},
    )
    return orders, context
