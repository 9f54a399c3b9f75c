"""Loopless k-shortest path enumeration and padded per-OD path sets.

Paths are ranked by zero-flow base-class cost; ties break on fewer links,
then lexicographic link ids, so every collection is reproducible bit for bit.
Each OD pair owns exactly ``k`` slots, zero-padded when fewer paths exist.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractError, ParseError, ScenarioInfeasibleError
from .network import Network

#: sentinel link id used to pad packed link-index arrays
PAD = -1


@dataclass(frozen=True)
class Path:
    links: tuple[int, ...]
    freeflow_cost: float

    @property
    def n_links(self) -> int:
        return len(self.links)


EMPTY_PATH = Path(links=(), freeflow_cost=0.0)


@dataclass(frozen=True)
class PathSet:
    """Up to k ranked paths of one ordered OD pair, padded to exactly k."""

    origin: int
    dest: int
    paths: tuple[Path, ...]
    pad_mask: tuple[bool, ...]  # True = padded slot
    reachable: bool

    @property
    def n_real(self) -> int:
        return sum(1 for p in self.pad_mask if not p)


class PackedPaths(NamedTuple):
    """Flat array view of a collection, shared by the solver and datagen.

    ``link_idx`` is (N^2, k, Lmax) int32 padded with -1; entry arrays list
    every (pair, slot, position) with a real link: ``link_of_entry`` holds the
    link id and ``slot_of_entry`` the flat ``pair * k + slot`` index.
    """

    link_idx: np.ndarray
    slot_mask: np.ndarray   # (N^2, k) True = real path
    freeflow_cost: np.ndarray  # (N^2, k) base-class zero-flow cost, 0 on pads
    link_of_entry: np.ndarray
    slot_of_entry: np.ndarray


class PathSetCollection:
    """One PathSet per ordered node pair, row index ``origin * N + dest``."""

    def __init__(self, n_nodes: int, k: int, sets: list[PathSet]):
        if len(sets) != n_nodes * n_nodes:
            raise ContractError(
                f"expected {n_nodes * n_nodes} path sets, got {len(sets)}"
            )
        self.n_nodes = n_nodes
        self.k = k
        self.sets = sets
        self._packed = None

    @property
    def n_pairs(self) -> int:
        return self.n_nodes * self.n_nodes

    def get(self, origin: int, dest: int) -> PathSet:
        return self.sets[origin * self.n_nodes + dest]

    def unreachable_pairs(self) -> list[tuple[int, int]]:
        """Off-diagonal pairs with no feasible path at all."""
        return [
            (s.origin, s.dest)
            for s in self.sets
            if s.origin != s.dest and not s.reachable
        ]

    def packed(self) -> PackedPaths:
        if self._packed is None:
            self._packed = _pack(self)
        return self._packed

    def __iter__(self):
        return iter(self.sets)


def _pack(collection: PathSetCollection) -> PackedPaths:
    n_pairs, k = collection.n_pairs, collection.k
    max_len = 1
    for pset in collection.sets:
        for path in pset.paths:
            max_len = max(max_len, path.n_links)
    link_idx = np.full((n_pairs, k, max_len), PAD, dtype=np.int32)
    slot_mask = np.zeros((n_pairs, k), dtype=bool)
    cost = np.zeros((n_pairs, k), dtype=np.float64)
    for row, pset in enumerate(collection.sets):
        for slot, (path, padded) in enumerate(zip(pset.paths, pset.pad_mask)):
            if padded:
                continue
            slot_mask[row, slot] = True
            cost[row, slot] = path.freeflow_cost
            link_idx[row, slot, : path.n_links] = path.links
    flat = link_idx.reshape(n_pairs * k, max_len)
    entry_slot, entry_pos = np.nonzero(flat != PAD)
    link_of_entry = flat[entry_slot, entry_pos].astype(np.int64)
    return PackedPaths(link_idx, slot_mask, cost,
                       link_of_entry, entry_slot.astype(np.int64))


# ---------------------------------------------------------------------------
# shortest-path machinery
# ---------------------------------------------------------------------------

def _dijkstra(network: Network, origin: int, dest: int,
              banned_links: frozenset, banned_nodes: frozenset):
    """Cheapest loopless path by (cost, n_links, link ids); None if unreachable.

    Link free-flow times are strictly positive, so the lexicographic key is
    strictly increasing along any extension and the first settle is optimal.
    """
    fft = network.freeflow_time
    links = network.links
    best = {}
    heap = [(0.0, 0, (), origin)]
    while heap:
        cost, n_links, trail, node = heapq.heappop(heap)
        if node == dest:
            return Path(links=trail, freeflow_cost=cost)
        if node in best and best[node] <= (cost, n_links, trail):
            continue
        best[node] = (cost, n_links, trail)
        for lid in network.adjacency[node]:
            if lid in banned_links:
                continue
            head = links[lid].head
            if head in banned_nodes or head == origin:
                continue
            heapq.heappush(heap, (cost + fft[lid], n_links + 1, trail + (lid,), head))
    return None


def _path_key(path: Path, links):
    return (path.freeflow_cost, path.n_links, path.links)


def k_shortest(network: Network, origin: int, dest: int, k: int) -> PathSet:
    """Yen-style loopless k-shortest paths by zero-flow base-class cost."""
    if origin == dest:
        raise ContractError("origin and destination must differ")
    if k < 1:
        raise ContractError("k must be >= 1")

    found: list[Path] = []
    first = _dijkstra(network, origin, dest, frozenset(), frozenset())
    if first is not None:
        found.append(first)
        candidates: list[tuple] = []
        seen = {first.links}
        links = network.links
        while len(found) < k:
            prev = found[-1]
            prev_nodes = [origin] + [links[l].head for l in prev.links]
            for i in range(len(prev.links)):
                spur_node = prev_nodes[i]
                root_links = prev.links[:i]
                root_cost = sum(network.freeflow_time[l] for l in root_links)
                banned_links = set()
                for path in found:
                    if path.links[:i] == root_links and len(path.links) > i:
                        banned_links.add(path.links[i])
                banned_nodes = frozenset(prev_nodes[:i])
                spur = _dijkstra(network, spur_node, dest,
                                 frozenset(banned_links), banned_nodes)
                if spur is None:
                    continue
                total = Path(links=root_links + spur.links,
                             freeflow_cost=root_cost + spur.freeflow_cost)
                if total.links not in seen:
                    seen.add(total.links)
                    heapq.heappush(candidates, (_path_key(total, links), total))
            if not candidates:
                break
            _, nxt = heapq.heappop(candidates)
            found.append(nxt)

    # canonical left-to-right cost so ordering never depends on how Yen
    # split a path into root + spur
    fft = network.freeflow_time
    found = [Path(p.links, sum(float(fft[l]) for l in p.links)) for p in found]
    found.sort(key=lambda p: _path_key(p, network.links))
    padded = [EMPTY_PATH] * (k - len(found))
    return PathSet(
        origin=origin,
        dest=dest,
        paths=tuple(found) + tuple(padded),
        pad_mask=tuple([False] * len(found) + [True] * len(padded)),
        reachable=bool(found),
    )


def _diagonal_set(node: int, k: int) -> PathSet:
    return PathSet(node, node, tuple([EMPTY_PATH] * k), tuple([True] * k), False)


def build_path_sets(network: Network, k: int) -> PathSetCollection:
    """One PathSet per ordered node pair; diagonal pairs get all-padded sets."""
    n = network.n_nodes
    sets = []
    for origin in range(n):
        for dest in range(n):
            if origin == dest:
                sets.append(_diagonal_set(origin, k))
            else:
                sets.append(k_shortest(network, origin, dest, k))
    return PathSetCollection(n, k, sets)


def rebuild_after_removal(network: Network, removed, k: int,
                          demand=None) -> tuple[Network, PathSetCollection]:
    """Path sets for the network with ``removed`` links disabled.

    When ``demand`` (an ODMatrix) is given, raises ScenarioInfeasibleError
    listing every demanded pair left without a path.
    """
    removed = frozenset(int(i) for i in removed)
    bad = removed - set(range(network.n_links))
    if bad:
        raise ContractError(f"removed ids outside link range: {sorted(bad)}")
    reduced = network.with_disabled(removed) if removed else network
    collection = build_path_sets(reduced, k)
    if demand is not None:
        lost = []
        for origin, dest in collection.unreachable_pairs():
            if demand.demand[origin * network.n_nodes + dest].sum() > 0:
                lost.append((origin, dest))
        if lost:
            raise ScenarioInfeasibleError(
                f"{len(lost)} demanded OD pairs lost all paths: {lost[:20]}",
                pairs=lost,
            )
    return reduced, collection


# ---------------------------------------------------------------------------
# dump format: one JSON record per OD pair and slot
# ---------------------------------------------------------------------------

def dump_path_sets(collection: PathSetCollection, fh):
    """Write line-delimited JSON records (origin, dest, slot, links, cost, pad)."""
    for pset in collection.sets:
        for slot, (path, padded) in enumerate(zip(pset.paths, pset.pad_mask)):
            record = {
                "origin": pset.origin,
                "dest": pset.dest,
                "slot": slot,
                "links": list(path.links),
                "freeflow_cost": path.freeflow_cost,
                "pad": bool(padded),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_path_sets(fh, n_nodes: int, k: int) -> PathSetCollection:
    """Inverse of :func:`dump_path_sets`."""
    slots = {}
    for lineno, line in enumerate(fh, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            key = (rec["origin"], rec["dest"])
            slots.setdefault(key, {})[rec["slot"]] = rec
        except (json.JSONDecodeError, KeyError) as exc:
            raise ParseError(f"bad path-set record: {exc}", line=lineno) from None
    sets = []
    for origin in range(n_nodes):
        for dest in range(n_nodes):
            recs = slots.get((origin, dest))
            if recs is None:
                sets.append(_diagonal_set(origin, k) if origin == dest else PathSet(
                    origin, dest, tuple([EMPTY_PATH] * k), tuple([True] * k), False))
                continue
            paths, mask = [], []
            for slot in range(k):
                rec = recs.get(slot)
                if rec is None or rec["pad"]:
                    paths.append(EMPTY_PATH)
                    mask.append(True)
                else:
                    paths.append(Path(tuple(rec["links"]), float(rec["freeflow_cost"])))
                    mask.append(False)
            sets.append(PathSet(origin, dest, tuple(paths), tuple(mask),
                                reachable=not all(mask)))
    return PathSetCollection(n_nodes, k, sets)
