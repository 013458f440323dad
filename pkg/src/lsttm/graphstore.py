"""User-item interaction graphs with time-cutoff snapshots and neighbor sampling.

Two graph kinds are kept:

* ``short``: internal click edges only, sampled by recency.
* ``long``: clicks from every source over internal and external items,
  sampled uniformly and walked by DeepWalk.

Nodes are ``(kind, id)`` tuples where kind is :data:`USER` or :data:`ITEM`.
Every node's adjacency is held in ascending ``(timestamp, insertion order)``.
"""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Literal, NamedTuple

import numpy as np

USER = "u"
ITEM = "i"

INTERNAL = "internal"
EXTERNAL = "external"

Node = tuple[str, int]


class ContextFeatures(NamedTuple):
    hour: int
    position: int


@dataclass(frozen=True)
class EventRecord:
    user: int
    item: int
    timestamp: int
    source: str
    clicked: bool
    context: ContextFeatures = ContextFeatures(0, 0)
    dwell: float = 0.0

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")
        if self.source not in (INTERNAL, EXTERNAL):
            raise ValueError(f"unknown source {self.source!r}")
        if self.source == EXTERNAL and not self.clicked:
            raise ValueError("external events are clicks only")
        if not 0 <= self.context.hour <= 23 or self.context.position < 0:
            raise ValueError(f"bad context {self.context}")


class _Adjacency:
    __slots__ = ("ts", "seq", "nbr")

    def __init__(self):
        self.ts: list[int] = []
        self.seq: list[int] = []
        self.nbr: list[Node] = []

    def insert(self, ts: int, seq: int, nbr: Node) -> None:
        if not self.ts or ts >= self.ts[-1]:
            self.ts.append(ts)
            self.seq.append(seq)
            self.nbr.append(nbr)
            return
        pos = bisect.bisect_right(self.ts, ts)
        self.ts.insert(pos, ts)
        self.seq.insert(pos, seq)
        self.nbr.insert(pos, nbr)


class InteractionGraph:
    """A bipartite user-item graph that grows by appending events."""

    def __init__(self, kind: Literal["short", "long"]):
        if kind not in ("short", "long"):
            raise ValueError(f"unknown graph kind {kind!r}")
        self.kind = kind
        self.users: dict[int, None] = {}
        self.internal_items: dict[int, None] = {}
        self.external_items: dict[int, None] = {}
        self._adj: dict[Node, _Adjacency] = {}
        self._seq = itertools.count()
        self.n_edges = 0
        self.max_timestamp = -1

    def skip_reason(self, event: EventRecord) -> str | None:
        if not event.clicked:
            return "unclicked events are not edges"
        if self.kind == "short" and event.source != INTERNAL:
            return "short-term graph keeps internal events only"
        return None

    def append(self, event: EventRecord) -> str | None:
        """Add ``event`` as an edge; returns a skip reason instead if filtered out."""
        reason = self.skip_reason(event)
        if reason is not None:
            return reason
        self.add_edge(event.user, event.item, event.timestamp, event.source)
        return None

    def add_edge(self, user: int, item: int, timestamp: int, source: str = INTERNAL) -> None:
        self.users.setdefault(user)
        (self.internal_items if source == INTERNAL else self.external_items).setdefault(item)
        seq = next(self._seq)
        u, d = (USER, user), (ITEM, item)
        self._adj.setdefault(u, _Adjacency()).insert(timestamp, seq, d)
        self._adj.setdefault(d, _Adjacency()).insert(timestamp, seq, u)
        self.n_edges += 1
        self.max_timestamp = max(self.max_timestamp, timestamp)

    def extend(self, events: Iterable[EventRecord]) -> int:
        """Append many events; returns how many became edges."""
        return sum(self.append(e) is None for e in events)

    def edges(self) -> list[tuple[int, int, int, int]]:
        """All edges as ``(seq, user, item, timestamp)`` in insertion order."""
        out = []
        for (kind, uid), adj in self._adj.items():
            if kind != USER:
                continue
            out.extend((s, uid, nbr[1], t) for t, s, nbr in zip(adj.ts, adj.seq, adj.nbr))
        out.sort()
        return out

    def nodes(self) -> list[Node]:
        us = sorted((USER, u) for u in self.users)
        ds = sorted((ITEM, d) for d in itertools.chain(self.internal_items, self.external_items))
        return us + ds

    def snapshot(self, cutoff: int) -> GraphSnapshot:
        return GraphSnapshot(self, cutoff, next(self._seq))


def snapshot(graph: InteractionGraph, cutoff: int) -> GraphSnapshot:
    return graph.snapshot(cutoff)


@dataclass(frozen=True)
class GraphSnapshot:
    """Edges with ``timestamp <= cutoff`` that existed when the snapshot was taken."""

    graph: InteractionGraph
    cutoff: int
    seq_mark: int

    def _visible_end(self, node: Node) -> tuple[_Adjacency | None, int]:
        adj = self.graph._adj.get(node)
        if adj is None:
            return None, 0
        return adj, bisect.bisect_right(adj.ts, self.cutoff)

    def neighbors(self, node: Node) -> list[Node]:
        """Visible neighbors in ascending time order."""
        adj, hi = self._visible_end(node)
        if adj is None:
            return []
        mark = self.seq_mark
        return [n for n, s in zip(adj.nbr[:hi], adj.seq[:hi]) if s < mark]

    def degree(self, node: Node) -> int:
        return len(self.neighbors(node))

    def temporal_neighbors(self, node: Node, k: int) -> list[Node]:
        """The ``k`` most recent neighbors, oldest first."""
        if k < 1:
            raise ValueError("k must be >= 1")
        adj, hi = self._visible_end(node)
        if adj is None:
            return []
        out: list[Node] = []
        seqs, nbrs, mark = adj.seq, adj.nbr, self.seq_mark
        for i in range(hi - 1, -1, -1):
            if seqs[i] < mark:
                out.append(nbrs[i])
                if len(out) == k:
                    break
        out.reverse()
        return out

    def uniform_neighbors(self, node: Node, k: int, seed: int) -> list[Node]:
        """``min(k, degree)`` neighbors drawn uniformly without replacement."""
        if k < 1:
            raise ValueError("k must be >= 1")
        nbrs = self.neighbors(node)
        if len(nbrs) <= k:
            return nbrs
        rng = np.random.default_rng([seed, node[0] == ITEM, node[1]])
        picks = np.sort(rng.choice(len(nbrs), size=k, replace=False))
        return [nbrs[i] for i in picks]

    def deepwalk_paths(self, paths_per_node: int, k: int, seed: int) -> PathSet:
        return deepwalk_paths(self, paths_per_node, k, seed)


def temporal_neighbors(snap: GraphSnapshot, node: Node, k: int) -> list[Node]:
    return snap.temporal_neighbors(node, k)


def uniform_neighbors(snap: GraphSnapshot, node: Node, k: int, seed: int) -> list[Node]:
    return snap.uniform_neighbors(node, k, seed)


@dataclass
class PathSet:
    paths: list[tuple[Node, ...]]
    length: int
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.paths)


def deepwalk_paths(snap: GraphSnapshot, paths_per_node: int, k: int, seed: int) -> PathSet:
    """Uniform random walks of ``k`` nodes, ``paths_per_node`` from every non-isolated node."""
    if k < 2:
        raise ValueError("walk length k must be >= 2")
    rng = np.random.default_rng(seed)
    cache: dict[Node, list[Node]] = {}

    def nbrs(n: Node) -> list[Node]:
        if n not in cache:
            cache[n] = snap.neighbors(n)
        return cache[n]

    paths = []
    for start in snap.graph.nodes():
        if not nbrs(start):
            continue
        for _ in range(paths_per_node):
            walk = [start]
            for _ in range(k - 1):
                options = nbrs(walk[-1])
                walk.append(options[int(rng.integers(len(options)))])
            paths.append(tuple(walk))
    return PathSet(paths, k, seed)
