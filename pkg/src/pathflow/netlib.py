"""Bundled and synthesizable benchmark networks.

``siouxfalls`` ships as TNTP text (24 nodes, 76 links, standard demand).
``ema-like`` is generated on demand: a deterministic 74-node, 258-link
network whose attribute ranges match the Eastern-Massachusetts instance;
the real EMA geometry is not redistributed here, so treat it as a
stand-in of equal size, not the published network.
``manhattan-RxC`` delegates to :func:`pathflow.network.generate_manhattan`.
"""

from __future__ import annotations

import re
from importlib import resources

import numpy as np

from .errors import ConfigError
from .network import (
    Link,
    Network,
    ODMatrix,
    Units,
    default_classes,
    generate_manhattan,
    load_tntp_network,
    load_tntp_trips,
)

EMA_N_NODES = 74
EMA_N_UNDIRECTED = 129  # 258 directed links


def _data_text(name: str) -> str:
    return resources.files("pathflow.data").joinpath(name).read_text()


def siouxfalls_network(class_multipliers=(1.0,)) -> Network:
    return load_tntp_network(
        _data_text("siouxfalls_net.tntp"),
        class_multipliers,
        units=Units(length="km", time="min"),
    )


def siouxfalls_trips(n_classes: int = 1) -> ODMatrix:
    return load_tntp_trips(_data_text("siouxfalls_trips.tntp"), 24, n_classes)


def ema_like_network(rng_seed: int = 7, class_multipliers=(1.0,)) -> Network:
    """Deterministic EMA-sized stand-in: ring plus nearest-pair chords."""
    rng = np.random.default_rng(rng_seed)
    xy = rng.uniform(0.0, 1.0, size=(EMA_N_NODES, 2))

    order = sorted(range(EMA_N_NODES), key=lambda i: (np.arctan2(*(xy[i] - 0.5)[::-1]), i))
    undirected = []
    present = set()
    for idx in range(EMA_N_NODES):  # ring keeps the graph strongly connected
        a, b = order[idx], order[(idx + 1) % EMA_N_NODES]
        key = (min(a, b), max(a, b))
        if key not in present:
            present.add(key)
            undirected.append(key)

    dists = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=2)
    candidates = sorted(
        ((dists[i, j], i, j) for i in range(EMA_N_NODES) for j in range(i + 1, EMA_N_NODES)
         if (i, j) not in present),
        key=lambda t: (t[0], t[1], t[2]),
    )
    for _, i, j in candidates:
        if len(undirected) >= EMA_N_UNDIRECTED:
            break
        present.add((i, j))
        undirected.append((i, j))

    pairs = []
    for a, b in undirected:
        pairs.append((a, b))
        pairs.append((b, a))

    n_links = len(pairs)
    lengths = rng.uniform(1.06, 32.925, n_links)
    capacities = rng.uniform(825.0, 8352.013, n_links)
    ffts = rng.uniform(0.016, 0.88, n_links)
    links = [
        Link(i, tail, head, lengths[i], capacities[i], ffts[i])
        for i, (tail, head) in enumerate(pairs)
    ]
    return Network(EMA_N_NODES, links, default_classes(class_multipliers),
                   units=Units(length="mi", time="h"))


def builtin_network(name: str, class_multipliers=(1.0,), rng_seed: int = 7) -> Network:
    """Resolve a network by name: siouxfalls, ema-like, or manhattan-RxC."""
    lowered = name.lower()
    if lowered == "siouxfalls":
        return siouxfalls_network(class_multipliers)
    if lowered in ("ema-like", "ema_like", "emalike"):
        return ema_like_network(rng_seed, class_multipliers)
    m = re.fullmatch(r"manhattan-(\d+)x(\d+)", lowered)
    if m:
        return generate_manhattan(int(m.group(1)), int(m.group(2)), rng_seed,
                                  class_multipliers)
    raise ConfigError(
        f"unknown builtin network {name!r}; expected siouxfalls, ema-like "
        f"or manhattan-RxC"
    )
