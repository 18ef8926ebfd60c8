"""Motif-based spectral division of the influence graph into decision groups.

The weighted influence digraph is first lifted to a symmetric motif adjacency
matrix: for an anchored node pair, every placement of the motif's remaining
nodes that maps all motif edges onto positive-weight graph edges contributes
the mean weight of the mapped edges (extra graph edges are allowed, and
placements equivalent under anchor-preserving motif automorphisms count
once).  Groups are then connected components of that matrix, refined by
random-walk spectral embedding plus k-means with silhouette model selection.
"""
from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import ScenarioConfig, seeded_rng


class MotifArityUnsupported(ValueError):
    """Motifs outside the 2- and 3-node catalog."""


class IsolatedNode(ValueError):
    """Zero-degree row encountered while building the random-walk Laplacian."""


class EigenFailure(RuntimeError):
    """Eigen-decomposition did not converge."""


class UndefinedSilhouette(ValueError):
    """Silhouette requested for fewer than 2 clusters or fewer than 3 points."""


@dataclass(frozen=True)
class Motif:
    """A small directed graph pattern with a designated anchor pair."""

    name: str
    node_count: int
    edges: tuple[tuple[int, int], ...]
    anchor_pair: tuple[int, int]


def _motif(name: str, n: int, edges: list[tuple[int, int]],
           anchors: tuple[int, int] = (0, 1)) -> Motif:
    return Motif(name=name, node_count=n, edges=tuple(sorted(edges)), anchor_pair=anchors)


# Catalog: the single and double edge on two nodes, the seven triangle
# patterns, and the six wedge patterns (anchored on the outer nodes).
MOTIF_CATALOG: dict[str, Motif] = {
    m.name: m
    for m in [
        _motif("Ms", 2, [(0, 1)]),
        _motif("Md", 2, [(0, 1), (1, 0)]),
        _motif("M1", 3, [(0, 1), (1, 2), (2, 0)]),
        _motif("M2", 3, [(0, 1), (1, 0), (1, 2), (2, 0)]),
        _motif("M3", 3, [(0, 1), (1, 0), (0, 2), (2, 0), (1, 2)]),
        _motif("M4", 3, [(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)]),
        _motif("M5", 3, [(0, 1), (1, 2), (0, 2)]),
        _motif("M6", 3, [(0, 1), (1, 0), (2, 0), (2, 1)]),
        _motif("M7", 3, [(0, 1), (1, 0), (0, 2), (1, 2)]),
        _motif("M8", 3, [(0, 1), (0, 2)], anchors=(1, 2)),
        _motif("M9", 3, [(0, 1), (2, 0)], anchors=(1, 2)),
        _motif("M10", 3, [(1, 0), (2, 0)], anchors=(1, 2)),
        _motif("M11", 3, [(0, 1), (1, 0), (0, 2)], anchors=(1, 2)),
        _motif("M12", 3, [(0, 1), (1, 0), (2, 0)], anchors=(1, 2)),
        _motif("M13", 3, [(0, 1), (1, 0), (0, 2), (2, 0)], anchors=(1, 2)),
    ]
}


def _anchored_automorphisms(motif: Motif) -> list[tuple[int, ...]]:
    """Permutations of motif nodes preserving the edge set and the anchor set."""
    edge_set = set(motif.edges)
    anchors = set(motif.anchor_pair)
    autos = []
    for perm in itertools.permutations(range(motif.node_count)):
        if {perm[a] for a in anchors} != anchors:
            continue
        if {(perm[u], perm[v]) for (u, v) in edge_set} == edge_set:
            autos.append(perm)
    return autos


def motif_adjacency(w: np.ndarray, motif: Motif) -> np.ndarray:
    """Symmetric motif adjacency matrix of a weighted digraph.

    Args:
        w: nonnegative weight matrix with zero diagonal.
        motif: a catalog entry (2 or 3 nodes).

    Returns:
        Symmetric nonnegative matrix with zero diagonal; entry (i, j) sums
        the mean mapped-edge weight over all distinct anchored placements.
    """
    if motif.node_count not in (2, 3):
        raise MotifArityUnsupported(
            f"motif {motif.name!r} has {motif.node_count} nodes; only 2 or 3 supported"
        )
    n = w.shape[0]
    m = np.zeros((n, n))
    if n < motif.node_count:
        return m
    autos = _anchored_automorphisms(motif)
    a1, a2 = motif.anchor_pair
    non_anchors = [v for v in range(motif.node_count) if v not in (a1, a2)]
    edges = motif.edges
    n_edges = len(edges)
    nodes = list(range(n))

    for i in range(n):
        for j in range(i + 1, n):
            rest = [v for v in nodes if v != i and v != j]
            seen: set[tuple[int, ...]] = set()
            total = 0.0
            for x, y in ((i, j), (j, i)):
                for placement in itertools.permutations(rest, len(non_anchors)):
                    sigma = [0] * motif.node_count
                    sigma[a1] = x
                    sigma[a2] = y
                    for slot, node in zip(non_anchors, placement):
                        sigma[slot] = node
                    canon = min(
                        tuple(sigma[p[v]] for v in range(motif.node_count))
                        for p in autos
                    )
                    if canon in seen:
                        continue
                    seen.add(canon)
                    weights = [w[sigma[u], sigma[v]] for (u, v) in edges]
                    if all(wt > 0.0 for wt in weights):
                        total += sum(weights) / n_edges
            m[i, j] = total
            m[j, i] = total
    return m


def random_walk_laplacian(m: np.ndarray) -> np.ndarray:
    """L = I - D^-1 M for a symmetric nonnegative matrix M."""
    degrees = m.sum(axis=1)
    if np.any(degrees <= 0.0):
        idx = int(np.argmin(degrees))
        raise IsolatedNode(f"node {idx} has zero degree")
    return np.eye(m.shape[0]) - m / degrees[:, None]


def spectral_embedding(
    laplacian: np.ndarray,
    k: int,
    degrees: np.ndarray | None = None,
    row_normalize: bool = False,
) -> np.ndarray:
    """Rows are node coordinates from the k smallest-magnitude eigenvectors.

    When ``degrees`` is given, the random-walk Laplacian is solved through
    its symmetric similarity transform D^1/2 L D^-1/2 and the eigenvectors
    are mapped back; otherwise the matrix is solved directly (symmetrically
    when it is symmetric).  Each eigenvector's sign is fixed so its first
    nonzero component is positive.
    """
    n = laplacian.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"k={k} out of range for n={n}")
    try:
        if degrees is not None:
            d_sqrt = np.sqrt(degrees)
            sym = laplacian * (d_sqrt[:, None] / d_sqrt[None, :])
            sym = (sym + sym.T) / 2.0
            vals, vecs = np.linalg.eigh(sym)
            vecs = vecs / d_sqrt[:, None]
        elif np.allclose(laplacian, laplacian.T, atol=1e-12):
            vals, vecs = np.linalg.eigh(laplacian)
        else:
            cvals, cvecs = np.linalg.eig(laplacian)
            order = np.argsort(np.abs(cvals), kind="stable")
            vals = np.real(cvals[order])
            vecs = np.real(cvecs[:, order])
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(str(exc)) from exc

    order = np.argsort(np.abs(vals), kind="stable")
    emb = vecs[:, order[:k]].copy()
    for col in range(emb.shape[1]):
        column = emb[:, col]
        nz = np.flatnonzero(np.abs(column) > 1e-12)
        if nz.size and column[nz[0]] < 0:
            emb[:, col] = -column
    if row_normalize:
        norms = np.linalg.norm(emb, axis=1)
        norms[norms == 0.0] = 1.0
        emb = emb / norms[:, None]
    return emb


def kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means with ++-style seeding drawn from the provided stream.

    Lloyd iterations run until the largest centroid shift drops below 1e-9
    or 300 iterations elapse.  Returns integer labels in [0, k).
    """
    n = points.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"k={k} out of range for {n} points")
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            r = float(rng.random()) * total
            pick = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            pick = min(pick, n - 1)
        centers[c] = points[pick]
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))

    labels = np.zeros(n, dtype=int)
    for _ in range(300):
        dists = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
        labels = np.argmin(dists, axis=1)
        shift = 0.0
        for c in range(k):
            member = points[labels == c]
            if member.size == 0:
                continue
            new_center = member.mean(axis=0)
            shift = max(shift, float(np.linalg.norm(new_center - centers[c])))
            centers[c] = new_center
        if shift < 1e-9:
            break
    return labels


def silhouette(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette score (b - a) / max(a, b); singletons score 0."""
    n = points.shape[0]
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if n < 3 or clusters.size < 2:
        raise UndefinedSilhouette(
            f"need >= 3 points and >= 2 clusters, got n={n}, clusters={clusters.size}"
        )
    dists = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    scores = np.zeros(n)
    for idx in range(n):
        own = labels[idx]
        own_mask = labels == own
        own_size = int(own_mask.sum())
        if own_size <= 1:
            scores[idx] = 0.0
            continue
        a = dists[idx][own_mask].sum() / (own_size - 1)
        b = math.inf
        for other in clusters:
            if other == own:
                continue
            other_mask = labels == other
            b = min(b, float(dists[idx][other_mask].mean()))
        denom = max(a, b)
        scores[idx] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


@dataclass(frozen=True)
class GroupPartition:
    """Disjoint exhaustive grouping of vehicle ids."""

    groups: tuple[tuple[int, ...], ...]

    @property
    def assignment(self) -> dict[int, int]:
        return {vid: gi for gi, group in enumerate(self.groups) for vid in group}

    def group_of(self, vid: int) -> int:
        return self.assignment[vid]

    def validate(self, ids: list[int]) -> None:
        seen = [vid for group in self.groups for vid in group]
        if sorted(seen) != sorted(ids):
            raise ValueError("partition is not an exhaustive disjoint cover")


def _connected_components(m: np.ndarray) -> list[list[int]]:
    n = m.shape[0]
    seen = [False] * n
    comps: list[list[int]] = []
    for start in range(n):
        if seen[start]:
            continue
        queue = [start]
        seen[start] = True
        comp = []
        while queue:
            v = queue.pop()
            comp.append(v)
            for u in np.flatnonzero(m[v] > 0.0):
                u = int(u)
                if not seen[u]:
                    seen[u] = True
                    queue.append(u)
        comps.append(sorted(comp))
    return comps


def _component_fingerprint(sub: np.ndarray) -> str:
    """Label-independent digest of a component's weight multiset."""
    weights = np.sort(np.round(sub[sub > 0.0], 9))
    payload = f"{sub.shape[0]}|" + ",".join(f"{w:.9f}" for w in weights)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _canonical_order(sub: np.ndarray) -> list[int]:
    """Order component rows by strength then row-weight profile.

    The key depends only on the weighted graph, not on input labeling, so
    random draws consume the stream in a relabeling-independent order.
    """
    n = sub.shape[0]
    keys = []
    for v in range(n):
        strength = round(float(sub[v].sum()), 9)
        profile = tuple(np.round(np.sort(sub[v]), 9).tolist())
        keys.append((strength, profile, v))
    return [k[-1] for k in sorted(keys)]


def divide_groups(
    f: np.ndarray,
    config: ScenarioConfig,
    ids: list[int] | None = None,
    following_pairs: list[tuple[int, int]] = (),
) -> GroupPartition:
    """Partition vehicles by cumulative influence.

    Pipeline: renormalize the influence matrix to [0, 1]; optionally inject
    symmetric edges for car-following index pairs; build the motif adjacency
    matrix; split into connected components; refine each component of 3+
    nodes by spectral embedding and k-means, keeping the cluster count with
    the best silhouette and staying whole below the acceptance threshold.
    """
    n = f.shape[0]
    if ids is None:
        ids = list(range(n))
    if len(ids) != n:
        raise ValueError("ids length must match matrix size")
    if n == 0:
        return GroupPartition(groups=())

    peak = float(f.max()) if f.size else 0.0
    w = f / peak if peak > 0.0 else f.copy()
    if config.car_following_augmentation and following_pairs:
        w = w.copy()
        for i, j in following_pairs:
            if i != j:
                w[i, j] = 1.0
                w[j, i] = 1.0

    motif = MOTIF_CATALOG[config.motif]
    m = motif_adjacency(w, motif)

    groups: list[tuple[int, ...]] = []
    for comp in _connected_components(m):
        if len(comp) <= 2:
            groups.append(tuple(ids[v] for v in comp))
            continue
        sub = m[np.ix_(comp, comp)]
        order = _canonical_order(sub)
        fp = _component_fingerprint(sub)
        rng = seeded_rng(config.seed, f"kmeans:{fp}")
        degrees = sub.sum(axis=1)
        laplacian = random_walk_laplacian(sub)

        best_labels = None
        best_score = -math.inf
        k_hi = min(len(comp) - 1, config.k_max)
        for k in range(2, k_hi + 1):
            emb = spectral_embedding(
                laplacian, k, degrees=degrees,
                row_normalize=config.row_normalize_embedding,
            )
            labels = kmeans_pp(emb[order], k, rng)
            if np.unique(labels).size < 2:
                continue
            score = silhouette(emb[order], labels)
            if score > best_score + 1e-12:
                best_score = score
                best_labels = labels
        if best_labels is None or best_score < config.s_min:
            groups.append(tuple(ids[v] for v in comp))
            continue
        by_label: dict[int, list[int]] = {}
        for pos, label in zip(order, best_labels):
            by_label.setdefault(int(label), []).append(comp[pos])
        for label in sorted(by_label, key=lambda lb: min(by_label[lb])):
            groups.append(tuple(ids[v] for v in sorted(by_label[label])))

    normalized = [tuple(sorted(g)) for g in groups]
    normalized.sort(key=lambda g: g[0])
    partition = GroupPartition(groups=tuple(normalized))
    partition.validate(ids)
    return partition
