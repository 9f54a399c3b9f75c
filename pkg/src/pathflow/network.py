"""Road-network data model, TNTP ingestion, synthetic grids and BPR cost primitives.

Conventions used throughout the package:

* nodes are 0-based integers ``0..N-1``; an ordered OD pair ``(i, j)`` is
  addressed by the row index ``i * N + j``;
* links are 0-based integers ``0..L-1`` and keep their id when disabled, so
  what-if scenarios can toggle links without reshuffling every array;
* link travel time follows the BPR curve ``t0 * (1 + 0.15 * (v / C) ** 4)``
  where ``v`` is the flow totalled over every vehicle class;
* per-class free-flow time is the base time scaled by the class multiplier,
  and class path costs are computed as ``multiplier * base_path_cost`` so the
  class cost ratio is exact in floating point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    InfeasiblePathError,
    NetworkValidationError,
    NoFeasiblePathError,
    ParseError,
    SizeError,
)

BPR_ALPHA = 0.15
BPR_BETA = 4

#: hard cap for synthetic generators, large enough for any desk experiment
MAX_NODES = 20_000


@dataclass(frozen=True)
class VehicleClass:
    """One demand class; ``freeflow_multiplier`` scales base link times."""

    id: int
    name: str
    freeflow_multiplier: float = 1.0

    def __post_init__(self):
        if self.freeflow_multiplier < 1.0:
            raise NetworkValidationError(
                f"class {self.name!r}: freeflow multiplier must be >= 1, "
                f"got {self.freeflow_multiplier}"
            )


def default_classes(multipliers=(1.0,)) -> tuple[VehicleClass, ...]:
    """Build a class list from multipliers; the base class must be exactly 1."""
    if not multipliers:
        raise NetworkValidationError("at least one vehicle class is required")
    if multipliers[0] != 1.0:
        raise NetworkValidationError("base class multiplier must be exactly 1.0")
    names = ["car", "truck", "bus", "moto"]
    return tuple(
        VehicleClass(i, names[i] if i < len(names) else f"class{i}", float(m))
        for i, m in enumerate(multipliers)
    )


@dataclass(frozen=True)
class Link:
    id: int
    tail: int
    head: int
    length: float
    capacity: float
    freeflow_time: float

    def __post_init__(self):
        for name in ("length", "capacity", "freeflow_time"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.capacity <= 0:
            raise NetworkValidationError(f"link {self.id}: capacity must be > 0")
        if self.freeflow_time <= 0:
            raise NetworkValidationError(f"link {self.id}: freeflow_time must be > 0")
        if self.tail == self.head:
            raise NetworkValidationError(f"link {self.id}: self-loop {self.tail}")


@dataclass(frozen=True)
class Units:
    """Unit labels carried as annotations only; no conversion is performed."""

    length: str = "km"
    time: str = "h"


class Network:
    """Immutable directed network with per-link attributes and a disabled set.

    Disabled links stay in the link array (stable ids); every cost and
    path operation treats them as absent.
    """

    def __init__(self, n_nodes, links, classes=None, disabled=(), units=Units()):
        self.n_nodes = int(n_nodes)
        self.links: tuple[Link, ...] = tuple(links)
        self.classes: tuple[VehicleClass, ...] = (
            tuple(classes) if classes is not None else default_classes()
        )
        self.disabled: frozenset[int] = frozenset(int(i) for i in disabled)
        self.units = units
        self._validate()

        n_links = len(self.links)
        self.tail = np.fromiter((l.tail for l in self.links), dtype=np.int32, count=n_links)
        self.head = np.fromiter((l.head for l in self.links), dtype=np.int32, count=n_links)
        self.length = np.fromiter((l.length for l in self.links), dtype=np.float64, count=n_links)
        self.capacity = np.fromiter((l.capacity for l in self.links), dtype=np.float64, count=n_links)
        self.freeflow_time = np.fromiter(
            (l.freeflow_time for l in self.links), dtype=np.float64, count=n_links
        )
        self.enabled_mask = np.ones(n_links, dtype=bool)
        for i in self.disabled:
            self.enabled_mask[i] = False

        adjacency = [[] for _ in range(self.n_nodes)]
        for link in self.links:
            if link.id not in self.disabled:
                adjacency[link.tail].append(link.id)
        self.adjacency: tuple[tuple[int, ...], ...] = tuple(tuple(a) for a in adjacency)

    def _validate(self):
        if self.n_nodes < 1:
            raise NetworkValidationError("network needs at least one node")
        seen = {}
        for i, link in enumerate(self.links):
            if link.id != i:
                raise NetworkValidationError(f"link ids must be contiguous, got {link.id} at {i}")
            if not (0 <= link.tail < self.n_nodes and 0 <= link.head < self.n_nodes):
                raise NetworkValidationError(
                    f"link {link.id}: node id out of range 0..{self.n_nodes - 1}"
                )
            key = (link.tail, link.head)
            if key in seen:
                raise NetworkValidationError(
                    f"duplicate link {key}: ids {seen[key]} and {link.id}"
                )
            seen[key] = link.id
        for cid, cls in enumerate(self.classes):
            if cls.id != cid:
                raise NetworkValidationError("class ids must be contiguous 0..n-1")
        if self.classes[0].freeflow_multiplier != 1.0:
            raise NetworkValidationError("base class multiplier must be exactly 1.0")
        bad = [i for i in self.disabled if not (0 <= i < len(self.links))]
        if bad:
            raise NetworkValidationError(f"disabled ids outside link range: {bad}")

    # -- derived quantities -------------------------------------------------

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_pairs(self) -> int:
        return self.n_nodes * self.n_nodes

    def class_multipliers(self) -> np.ndarray:
        return np.array([c.freeflow_multiplier for c in self.classes], dtype=np.float64)

    def with_disabled(self, link_ids) -> "Network":
        """Copy of this network with the given links (additionally) disabled."""
        return Network(
            self.n_nodes,
            self.links,
            self.classes,
            self.disabled | frozenset(int(i) for i in link_ids),
            self.units,
        )

    def link_id(self, tail, head):
        """Link id for a (tail, head) pair, or None if absent/disabled."""
        for lid in self.adjacency[tail]:
            if self.links[lid].head == head:
                return lid
        return None

    def __repr__(self):
        return (
            f"Network(N={self.n_nodes}, L={self.n_links}, classes={self.n_classes}, "
            f"disabled={sorted(self.disabled)})"
        )


class ODMatrix:
    """Per-class demand over ordered node pairs, row index ``tail * N + head``."""

    def __init__(self, n_nodes, demand):
        self.n_nodes = int(n_nodes)
        demand = np.asarray(demand, dtype=np.float64)
        if demand.ndim == 1:
            demand = demand[:, None]
        if demand.shape[0] != self.n_nodes * self.n_nodes:
            raise NetworkValidationError(
                f"demand must have N^2={self.n_nodes ** 2} rows, got {demand.shape[0]}"
            )
        if np.any(demand < 0):
            raise NetworkValidationError("demand entries must be >= 0")
        diag = np.arange(self.n_nodes) * self.n_nodes + np.arange(self.n_nodes)
        if np.any(demand[diag] != 0):
            raise NetworkValidationError("diagonal (v, v) pairs must carry zero demand")
        self.demand = demand

    @property
    def n_classes(self) -> int:
        return self.demand.shape[1]

    def total(self) -> float:
        return float(self.demand.sum())

    def pair(self, origin, dest) -> np.ndarray:
        return self.demand[origin * self.n_nodes + dest]


class LinkFlows:
    """Dense per-class link flows, shape (L, n)."""

    def __init__(self, flow):
        flow = np.asarray(flow, dtype=np.float64)
        if flow.ndim == 1:
            flow = flow[:, None]
        if np.any(flow < 0):
            raise NetworkValidationError("link flows must be >= 0")
        self.flow = flow

    def total(self) -> np.ndarray:
        """Flow per link summed over classes."""
        return self.flow.sum(axis=1)


# ---------------------------------------------------------------------------
# BPR / path cost primitives
# ---------------------------------------------------------------------------

def bpr_factor(total_flow, capacity):
    """Congestion multiplier ``1 + 0.15 (v / C)^4`` (vectorized)."""
    ratio = np.asarray(total_flow, dtype=np.float64) / capacity
    return 1.0 + BPR_ALPHA * ratio ** BPR_BETA


def bpr_cost(link: Link, vclass: VehicleClass, total_flow: float) -> float:
    """Class travel time on one link at the given total (all-class) flow."""
    if total_flow < 0:
        raise ContractError(f"total_flow must be >= 0, got {total_flow}")
    base = link.freeflow_time * (1.0 + BPR_ALPHA * (total_flow / link.capacity) ** BPR_BETA)
    return vclass.freeflow_multiplier * base


def link_costs(network: Network, total_flow: np.ndarray) -> np.ndarray:
    """Base-class travel time for every link at the given total flows (L,)."""
    return network.freeflow_time * bpr_factor(total_flow, network.capacity)


def path_cost(network: Network, path, vclass: VehicleClass, flows: LinkFlows) -> float:
    """Class cost of one path: multiplier times the sum of base link costs."""
    total = flows.total()
    base = 0.0
    for lid in path:
        lid = int(lid)
        if lid < 0 or lid >= network.n_links:
            raise InfeasiblePathError(f"link {lid} does not exist")
        if lid in network.disabled:
            raise InfeasiblePathError(f"link {lid} is disabled")
        link = network.links[lid]
        base += link.freeflow_time * (1.0 + BPR_ALPHA * (total[lid] / link.capacity) ** BPR_BETA)
    return vclass.freeflow_multiplier * base


def aggregate_link_flows(network: Network, path_sets, path_flows) -> LinkFlows:
    """Sum path flows onto links: ``v[e, z] = sum_r sum_p delta(e in p) f[r, z, p]``.

    ``path_sets`` is a PathSetCollection (see :mod:`pathflow.paths`);
    ``path_flows`` has shape (N^2, n, k) aligned with it.
    """
    packed = path_sets.packed()
    flows = np.asarray(path_flows, dtype=np.float64)
    if flows.shape != (path_sets.n_pairs, network.n_classes, path_sets.k):
        raise ContractError(
            f"path_flows shape {flows.shape} does not match "
            f"({path_sets.n_pairs}, {network.n_classes}, {path_sets.k})"
        )
    if np.any(flows < 0):
        raise ContractError("path flows must be >= 0")
    out = np.zeros((network.n_links, network.n_classes), dtype=np.float64)
    # packed.slot_of_entry maps every (pair, slot, position) entry to its
    # flat (pair * k + slot) index; link_of_entry holds the link id.
    for z in range(network.n_classes):
        fz = flows[:, z, :].reshape(-1)
        out[:, z] = np.bincount(
            packed.link_of_entry,
            weights=fz[packed.slot_of_entry],
            minlength=network.n_links,
        )
    return LinkFlows(out)


def min_path_cost(network: Network, path_set, vclass: VehicleClass, flows: LinkFlows) -> float:
    """Minimum class cost over the non-padded paths of one OD's path set."""
    best = math.inf
    for path, padded in zip(path_set.paths, path_set.pad_mask):
        if padded:
            continue
        best = min(best, path_cost(network, path.links, vclass, flows))
    if math.isinf(best):
        raise NoFeasiblePathError(
            f"OD pair ({path_set.origin}, {path_set.dest}) has no feasible path"
        )
    return best


# ---------------------------------------------------------------------------
# TNTP text format
# ---------------------------------------------------------------------------

def _parse_metadata(lines):
    meta = {}
    body_start = None
    for i, raw in enumerate(lines):
        line = raw.split("~")[0].strip()
        if not line:
            continue
        if line.upper().startswith("<END OF METADATA>"):
            body_start = i + 1
            break
        if line.startswith("<"):
            close = line.find(">")
            if close < 0:
                raise ParseError(f"unterminated metadata tag: {line!r}", line=i + 1)
            key = line[1:close].strip().upper()
            value = line[close + 1:].strip()
            meta[key] = value
    if body_start is None:
        raise ParseError("missing <END OF METADATA> marker")
    return meta, body_start


def load_tntp_network(net_text: str, class_multipliers=(1.0,), units=Units()) -> Network:
    """Parse a TNTP net file into a Network (1-based ids remapped to 0-based).

    Only capacity, length and free_flow_time are retained; the b, power,
    speed, toll and type columns are parsed and discarded.
    """
    lines = net_text.splitlines()
    meta, body_start = _parse_metadata(lines)
    try:
        n_nodes = int(meta["NUMBER OF NODES"])
        n_links = int(meta["NUMBER OF LINKS"])
    except KeyError as exc:
        raise ParseError(f"missing metadata field {exc.args[0]!r}") from None
    except ValueError:
        raise ParseError("metadata counts must be integers") from None

    links = []
    for lineno, raw in enumerate(lines[body_start:], start=body_start + 1):
        line = raw.split("~")[0].strip()
        if not line:
            continue
        if not line.endswith(";"):
            raise ParseError(f"link row must end with ';': {line!r}", line=lineno)
        fields = line[:-1].split()
        if len(fields) < 10:
            raise ParseError(
                f"expected 10 link columns, got {len(fields)}", line=lineno
            )
        try:
            init_node = int(fields[0])
            term_node = int(fields[1])
            capacity = float(fields[2])
            length = float(fields[3])
            fft = float(fields[4])
            # columns 5..9 (b, power, speed, toll, type) parsed for validity only
            for col in fields[5:10]:
                float(col)
        except ValueError:
            raise ParseError(f"non-numeric link field in: {line!r}", line=lineno) from None
        if not (1 <= init_node <= n_nodes) or not (1 <= term_node <= n_nodes):
            raise NetworkValidationError(
                f"line {lineno}: node id out of range 1..{n_nodes}"
            )
        links.append(
            Link(
                id=len(links),
                tail=init_node - 1,
                head=term_node - 1,
                length=length,
                capacity=capacity,
                freeflow_time=fft,
            )
        )
    if len(links) != n_links:
        raise ParseError(f"header declares {n_links} links, found {len(links)}")
    return Network(n_nodes, links, default_classes(class_multipliers), units=units)


def load_tntp_trips(trips_text: str, n_nodes: int, n_classes: int = 1) -> ODMatrix:
    """Parse a TNTP trips file into an ODMatrix for the base class."""
    demand = np.zeros((n_nodes * n_nodes, n_classes), dtype=np.float64)
    origin = None
    for lineno, raw in enumerate(trips_text.splitlines(), start=1):
        line = raw.split("~")[0].strip()
        if not line:
            continue
        if line.startswith("<"):
            continue  # metadata tags (total flows etc.) are informational
        if line.lower().startswith("origin"):
            try:
                origin = int(line.split()[1])
            except (IndexError, ValueError):
                raise ParseError(f"malformed origin header: {line!r}", line=lineno) from None
            if not (1 <= origin <= n_nodes):
                raise NetworkValidationError(f"line {lineno}: origin {origin} >= N={n_nodes}")
            continue
        if origin is None:
            raise ParseError("destination entry before any 'Origin' header", line=lineno)
        for entry in line.split(";"):
            entry = entry.strip()
            if not entry:
                continue
            if ":" not in entry:
                raise ParseError(f"expected 'dest : demand', got {entry!r}", line=lineno)
            dest_s, value_s = entry.split(":", 1)
            try:
                dest = int(dest_s)
                value = float(value_s)
            except ValueError:
                raise ParseError(f"non-numeric trip entry {entry!r}", line=lineno) from None
            if not (1 <= dest <= n_nodes):
                raise NetworkValidationError(f"line {lineno}: destination {dest} >= N={n_nodes}")
            if value < 0:
                raise NetworkValidationError(f"line {lineno}: negative demand {value}")
            if dest != origin:
                demand[(origin - 1) * n_nodes + (dest - 1), 0] = value
    return ODMatrix(n_nodes, demand)


def dump_tntp_network(network: Network) -> str:
    """Serialize to TNTP net text (b/power/speed/toll/type get BPR defaults)."""
    out = [
        f"<NUMBER OF ZONES> {network.n_nodes}",
        f"<NUMBER OF NODES> {network.n_nodes}",
        "<FIRST THRU NODE> 1",
        f"<NUMBER OF LINKS> {network.n_links}",
        "<END OF METADATA>",
        "~ init_node term_node capacity length free_flow_time b power speed toll type ;",
    ]
    for link in network.links:
        out.append(
            f"{link.tail + 1}\t{link.head + 1}\t{link.capacity!r}\t{link.length!r}\t"
            f"{link.freeflow_time!r}\t{BPR_ALPHA}\t{BPR_BETA}\t0\t0\t1\t;"
        )
    return "\n".join(out) + "\n"


def dump_tntp_trips(od: ODMatrix, class_index: int = 0) -> str:
    """Serialize one class of an ODMatrix to TNTP trips text."""
    n = od.n_nodes
    out = [f"<NUMBER OF ZONES> {n}",
           f"<TOTAL OD FLOW> {float(od.demand[:, class_index].sum())!r}",
           "<END OF METADATA>", ""]
    for origin in range(n):
        out.append(f"Origin {origin + 1}")
        row = []
        for dest in range(n):
            value = float(od.demand[origin * n + dest, class_index])
            if value > 0:
                row.append(f"    {dest + 1} : {value!r};")
        out.extend(row if row else [])
        out.append("")
    return "\n".join(out)


def network_sidecar(network: Network, rng_seed=None) -> dict:
    """JSON-ready sidecar recording class multipliers, units and the RNG seed."""
    return {
        "schema": "pathflow.network-sidecar.v1",
        "classes": [
            {"id": c.id, "name": c.name, "freeflow_multiplier": c.freeflow_multiplier}
            for c in network.classes
        ],
        "units": {"length": network.units.length, "time": network.units.time},
        "rng_seed": rng_seed,
        "n_nodes": network.n_nodes,
        "n_links": network.n_links,
        "disabled": sorted(network.disabled),
    }


def save_network(network: Network, net_path, sidecar_path=None, rng_seed=None):
    """Write TNTP text plus the JSON sidecar next to it."""
    with open(net_path, "w") as fh:
        fh.write(dump_tntp_network(network))
    if sidecar_path is not None:
        with open(sidecar_path, "w") as fh:
            json.dump(network_sidecar(network, rng_seed), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# Synthetic Manhattan-like grids
# ---------------------------------------------------------------------------

def generate_manhattan(rows: int, cols: int, rng_seed: int,
                       class_multipliers=(1.0,)) -> Network:
    """Random 4-neighbour grid with every edge materialized in both directions.

    Per directed link, independently: length ~ U[20, 40] km,
    capacity ~ U[1000, 2000] veh, free-flow time ~ U[0.5, 1] h.
    """
    if rows < 2 or cols < 2:
        raise NetworkValidationError("grid needs rows >= 2 and cols >= 2")
    if rows * cols > MAX_NODES:
        raise SizeError(f"{rows}x{cols} grid exceeds the {MAX_NODES}-node limit")

    def node(r, c):
        return r * cols + c

    pairs = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                pairs.append((node(r, c), node(r, c + 1)))
                pairs.append((node(r, c + 1), node(r, c)))
            if r + 1 < rows:
                pairs.append((node(r, c), node(r + 1, c)))
                pairs.append((node(r + 1, c), node(r, c)))

    rng = np.random.default_rng(rng_seed)
    n_links = len(pairs)
    lengths = rng.uniform(20.0, 40.0, n_links)
    capacities = rng.uniform(1000.0, 2000.0, n_links)
    ffts = rng.uniform(0.5, 1.0, n_links)
    links = [
        Link(i, tail, head, lengths[i], capacities[i], ffts[i])
        for i, (tail, head) in enumerate(pairs)
    ]
    return Network(rows * cols, links, default_classes(class_multipliers),
                   units=Units(length="km", time="h"))
