"""Scenario perturbation, labelled dataset generation and tensor building.

A dataset directory is self-contained:

    manifest.json        normalization stats, splits, seeds, solver residuals
    net.tntp / net.json  the (possibly reduced) network and its sidecar
    paths.ndjson         the fixed path sets the labels were solved over
    samples/{split}/{idx:05d}.bin

Each sample file is little-endian: a 16-byte header of four uint32 words
(magic, rows, input width a, target width k*n) followed by row-major
float32 blocks: input (rows x a), target (rows x k*n), demand (rows x n),
path free-flow costs (rows x k).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    NetworkValidationError,
    ParseError,
    ScenarioInfeasibleError,
)
from .network import (
    bpr_factor,
    Network,
    ODMatrix,
    Units,
    default_classes,
    dump_tntp_network,
    load_tntp_network,
    network_sidecar,
)
from .paths import PathSetCollection, build_path_sets, dump_path_sets, load_path_sets, rebuild_after_removal
from .equilibrium import SolverConfig, UESolution, solve_ue

log = logging.getLogger(__name__)

SAMPLE_MAGIC = 0x31534650  # "PFS1"
M_LINK_FEATURES = 2        # length, capacity
TRUCK_SHARE = 0.5
TRUCK_FFT_MULTIPLIER = 1.5


@dataclass(frozen=True)
class ScenarioSpec:
    """What-if perturbation recipe for one dataset.

    ``warm_start_iters`` controls the fixed, cheap gradient-projection budget
    whose congested path costs and shares become input features (a few
    milliseconds; far from equilibrium on congested instances).  The
    surrogate learns the remaining correction.
    """

    od_missing_ratio: float = 0.0
    link_missing_ratio: float = 0.0
    removed_links: tuple = ()
    classes: int = 1
    demand_range: tuple = (100.0, 4000.0)
    n_samples: int = 100
    seed: int = 0
    k: int = 3
    warm_start_iters: int = 150   # iteration cap for the warm-start budget
    warm_start_gap: float = 1e-4  # warm start stops at this relative gap

    def __post_init__(self):
        if not (0.0 <= self.od_missing_ratio < 1.0):
            raise ConfigError("od_missing_ratio must be in [0, 1)")
        if not (0.0 <= self.link_missing_ratio < 1.0):
            raise ConfigError("link_missing_ratio must be in [0, 1)")
        if self.link_missing_ratio > 0 and self.removed_links:
            raise ConfigError(
                "use either link_missing_ratio or removed_links, not both"
            )
        if self.classes not in (1, 2):
            raise ConfigError("classes must be 1 or 2")
        if not (0 < self.demand_range[0] <= self.demand_range[1]):
            raise ConfigError("demand range must be positive and ordered")
        if self.n_samples < 1 or self.k < 1:
            raise ConfigError("n_samples and k must be >= 1")

    def class_multipliers(self) -> tuple:
        return (1.0,) if self.classes == 1 else (1.0, TRUCK_FFT_MULTIPLIER)


def sample_od_matrix(network: Network, demand_range, od_missing_ratio: float,
                     rng) -> ODMatrix:
    """Uniform base-class demand on off-diagonal pairs, then mask a ratio to 0."""
    if not (0.0 <= od_missing_ratio < 1.0):
        raise ConfigError("od_missing_ratio must be in [0, 1)")
    n = network.n_nodes
    off_diag = np.array([i * n + j for i in range(n) for j in range(n) if i != j])
    s = off_diag.size
    demand = np.zeros((n * n, 1))
    demand[off_diag, 0] = rng.uniform(demand_range[0], demand_range[1], s)
    n_masked = int(np.floor(od_missing_ratio * s))
    if n_masked:
        masked = rng.choice(s, size=n_masked, replace=False)
        demand[off_diag[masked], 0] = 0.0
    return ODMatrix(n, demand)


def make_multiclass(demand: ODMatrix, rng=None) -> ODMatrix:
    """Add a truck class at half the car demand (masked pairs stay zero)."""
    if demand.n_classes != 1:
        raise ConfigError(
            f"make_multiclass expects single-class demand, got {demand.n_classes}"
        )
    car = demand.demand[:, 0]
    return ODMatrix(demand.n_nodes, np.column_stack([car, TRUCK_SHARE * car]))


def apply_link_scenario(network: Network, spec: ScenarioSpec,
                        rng) -> tuple[Network, PathSetCollection]:
    """Disable links per the scenario and rebuild path sets.

    ``link_missing_ratio`` removes ``floor(j * L)`` enabled links once for the
    whole dataset, retrying (bounded) until no reachable OD pair is lost;
    ``removed_links`` disables exactly those ids (inference-time scenario).
    """
    if spec.removed_links:
        return rebuild_after_removal(network, spec.removed_links, spec.k)
    if spec.link_missing_ratio <= 0:
        return network, build_path_sets(network, spec.k)

    base_unreachable = set(build_path_sets(network, spec.k).unreachable_pairs())
    enabled = np.nonzero(network.enabled_mask)[0]
    n_remove = int(np.floor(spec.link_missing_ratio * network.n_links))
    if n_remove == 0:
        return network, build_path_sets(network, spec.k)
    for attempt in range(100):
        chosen = rng.choice(enabled.size, size=n_remove, replace=False)
        candidate = network.with_disabled(enabled[chosen])
        collection = build_path_sets(candidate, spec.k)
        newly_lost = set(collection.unreachable_pairs()) - base_unreachable
        if not newly_lost:
            return candidate, collection
        log.debug("link scenario attempt %d lost %d pairs, retrying",
                  attempt, len(newly_lost))
    raise ScenarioInfeasibleError(
        f"could not remove {n_remove} links without disconnecting OD pairs "
        f"after 100 attempts"
    )


# ---------------------------------------------------------------------------
# tensors and normalization
# ---------------------------------------------------------------------------

def input_width(n_classes: int, k: int) -> int:
    return M_LINK_FEATURES + 2 * n_classes + k


def warm_start(network: Network, demand: ODMatrix,
               path_sets: PathSetCollection,
               iters: int, gap: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Congested path costs and shares after a bounded projection budget.

    The budget stops at relative gap ``gap`` or after ``iters`` iterations,
    whichever comes first.  Returns base-class path costs (N^2, k) at the
    warm volumes (free-flow costs when demand is zero) and warm shares
    (N^2, k*n) in target layout.
    """
    packed = path_sets.packed()
    R, k = packed.slot_mask.shape
    n = network.n_classes
    if demand.total() > 0 and iters > 0:
        sol = solve_ue(network, demand, path_sets,
                       SolverConfig(rel_gap_tol=gap, max_iters=iters),
                       _quiet=True)
        flows = sol.path_flows
    else:
        flows = np.zeros((R, n, k))
    per_slot = flows.sum(axis=1).reshape(-1)
    volume = np.bincount(packed.link_of_entry,
                         weights=per_slot[packed.slot_of_entry],
                         minlength=network.n_links)
    link_cost = network.freeflow_time * bpr_factor(volume, network.capacity)
    costs = np.bincount(packed.slot_of_entry,
                        weights=link_cost[packed.link_of_entry],
                        minlength=R * k).reshape(R, k)
    costs *= packed.slot_mask
    shares = normalize_target(flows, demand)
    return costs, shares


def raw_input_tensor(network: Network, demand: ODMatrix,
                     path_sets: PathSetCollection,
                     warm_costs: np.ndarray | None = None) -> np.ndarray:
    """Unnormalized (N^2, a) feature rows; see build_input_tensor for layout."""
    n = network.n_nodes
    n_classes = network.n_classes
    k = path_sets.k
    a = input_width(n_classes, k)
    rows = np.zeros((n * n, a))
    mult = network.class_multipliers()
    for tail in range(n):
        for lid in network.adjacency[tail]:
            head = network.links[lid].head
            row = tail * n + head
            rows[row, 0] = network.length[lid]
            rows[row, 1] = network.capacity[lid]
            rows[row, 2:2 + n_classes] = network.freeflow_time[lid] * mult
    rows[:, 2 + n_classes:2 + 2 * n_classes] = demand.demand
    if warm_costs is None:
        warm_costs = path_sets.packed().freeflow_cost
    rows[:, 2 + 2 * n_classes:] = warm_costs
    return rows


@dataclass
class NormStats:
    """Per-column min/max over the training split; zero-variance maps to 0."""

    col_min: np.ndarray
    col_max: np.ndarray

    @classmethod
    def fit(cls, stacked_rows: np.ndarray) -> "NormStats":
        return cls(stacked_rows.min(axis=0), stacked_rows.max(axis=0))

    def apply(self, rows: np.ndarray, clamp: bool = True) -> np.ndarray:
        span = self.col_max - self.col_min
        safe = np.where(span > 0, span, 1.0)
        out = (rows - self.col_min) / safe
        out[:, span <= 0] = 0.0
        if clamp:
            np.clip(out, 0.0, 1.0, out=out)
        return out

    def to_json(self):
        return {"col_min": self.col_min.tolist(), "col_max": self.col_max.tolist()}

    @classmethod
    def from_json(cls, data):
        return cls(np.asarray(data["col_min"], dtype=np.float64),
                   np.asarray(data["col_max"], dtype=np.float64))


def build_input_tensor(network: Network, demand: ODMatrix,
                       path_sets: PathSetCollection,
                       stats: NormStats | None,
                       warm_iters: int = 150, warm_gap: float = 1e-4,
                       warm_costs: np.ndarray | None = None) -> np.ndarray:
    """Normalized (N^2, a) input rows.

    Row (i, j) concatenates: [length, capacity] of the direct enabled link
    i->j (zeros when absent), per-class free-flow time of that link, the
    per-class demand of the pair, then one congested-cost scalar per path
    slot from the fixed warm-start budget (0 on padded slots; reduces to the
    free-flow cost at zero demand).  Columns are min-max normalized with
    training-split stats and clamped to [0, 1].
    """
    if stats is None:
        raise ContractError("normalization stats are required at inference time")
    if warm_costs is None:
        warm_costs, _ = warm_start(network, demand, path_sets, warm_iters, warm_gap)
    return stats.apply(raw_input_tensor(network, demand, path_sets, warm_costs))


def normalize_target(flows, demand: ODMatrix, mode: str = "per-od-share",
                     global_max: float | None = None) -> np.ndarray:
    """(N^2, n, k) label flows -> (N^2, k*n) normalized targets.

    ``per-od-share`` divides by the pair's class demand (sigmoid range,
    conservation becomes "shares sum to one"); ``global-max`` divides by the
    training-split max flow.  Column layout is class-major: z * k + p.
    """
    flows3 = flows.path_flows if isinstance(flows, UESolution) else np.asarray(flows)
    R, n, k = flows3.shape
    if demand.demand.shape != (R, n):
        raise ContractError("demand shape does not match flows")
    if mode == "per-od-share":
        denom = demand.demand[:, :, None]
        shares = np.divide(flows3, denom, out=np.zeros_like(flows3),
                           where=denom > 0)
    elif mode == "global-max":
        if not global_max or global_max <= 0:
            raise ConfigError("global-max mode needs a positive global_max")
        shares = flows3 / global_max
    else:
        raise ConfigError(f"unknown target normalization mode {mode!r}")
    return shares.transpose(0, 1, 2).reshape(R, n * k)


def denormalize_prediction(pred: np.ndarray, demand: ODMatrix,
                           pad_mask: np.ndarray, mode: str = "per-od-share",
                           global_max: float | None = None,
                           renormalize: bool = False) -> np.ndarray:
    """(N^2, k*n) predicted shares -> (N^2, n, k) flows; pads forced to 0.

    With ``renormalize`` the shares of each (OD, class) block are first
    rescaled to sum to one over non-padded slots (exact OD conservation);
    default off, honoring the learned-conservation claim.
    """
    R, w = pred.shape
    k = pad_mask.shape[1]
    n = w // k
    shares = pred.reshape(R, n, k).copy()
    shares[:, :, :] *= pad_mask[:, None, :]
    if mode == "per-od-share":
        if renormalize:
            totals = shares.sum(axis=2, keepdims=True)
            shares = np.divide(shares, totals, out=np.zeros_like(shares),
                               where=totals > 0)
        flows = shares * demand.demand[:, :, None]
    elif mode == "global-max":
        if not global_max or global_max <= 0:
            raise ConfigError("global-max mode needs a positive global_max")
        flows = shares * global_max
        if renormalize:
            totals = flows.sum(axis=2, keepdims=True)
            scale = np.divide(demand.demand[:, :, None], totals,
                              out=np.zeros_like(totals), where=totals > 0)
            flows = flows * scale
    else:
        raise ConfigError(f"unknown target normalization mode {mode!r}")
    return flows


# ---------------------------------------------------------------------------
# sample records and binary io
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    input: np.ndarray        # (R, a) normalized
    target: np.ndarray       # (R, k*n)
    demand: np.ndarray       # (R, n) raw vehicles
    path_costs: np.ndarray   # (R, k) free-flow costs, 0 on pads
    warm: np.ndarray         # (R, k*n) warm-start shares

    @property
    def n_demanded_rows(self) -> int:
        return int((self.demand.sum(axis=1) > 0).sum())

    def od_matrix(self, n_nodes: int) -> ODMatrix:
        return ODMatrix(n_nodes, self.demand)


def write_sample(path, record: SampleRecord):
    rows, a = record.input.shape
    t_cols = record.target.shape[1]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4I", SAMPLE_MAGIC, rows, a, t_cols))
        for block in (record.input, record.target, record.demand,
                      record.path_costs, record.warm):
            fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())


def read_sample(path, n_classes: int, k: int) -> SampleRecord:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, rows, a, t_cols = struct.unpack("<4I", raw[:16])
    if magic != SAMPLE_MAGIC:
        raise ParseError(f"{path}: bad sample magic")
    offset = 16
    blocks = []
    for cols in (a, t_cols, n_classes, k, t_cols):
        count = rows * cols
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        blocks.append(arr.reshape(rows, cols).astype(np.float64))
    return SampleRecord(*blocks)


# ---------------------------------------------------------------------------
# manifest and dataset
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    n_nodes: int
    n_links: int
    k: int
    n: int
    m: int
    a: int
    n_samples: int
    splits: dict
    target_mode: str
    stats: NormStats
    scenario: dict
    solver: dict
    seeds: dict
    units: dict
    class_multipliers: list
    disabled_links: list
    sample_stats: dict
    regen_failures: int
    global_max_flow: float
    manifest_hash: str = ""

    def to_json(self) -> dict:
        data = {
            "schema": "pathflow.dataset-manifest.v1",
            "n_nodes": self.n_nodes, "n_links": self.n_links,
            "k": self.k, "n": self.n, "m": self.m, "a": self.a,
            "n_samples": self.n_samples, "splits": self.splits,
            "target_mode": self.target_mode,
            "normalization": self.stats.to_json(),
            "scenario": self.scenario, "solver": self.solver,
            "seeds": self.seeds, "units": self.units,
            "class_multipliers": self.class_multipliers,
            "disabled_links": self.disabled_links,
            "sample_stats": self.sample_stats,
            "regen_failures": self.regen_failures,
            "global_max_flow": self.global_max_flow,
        }
        data["manifest_hash"] = _hash_obj(data)
        return data

    @classmethod
    def from_json(cls, data) -> "DatasetManifest":
        return cls(
            n_nodes=data["n_nodes"], n_links=data["n_links"], k=data["k"],
            n=data["n"], m=data["m"], a=data["a"], n_samples=data["n_samples"],
            splits=data["splits"], target_mode=data["target_mode"],
            stats=NormStats.from_json(data["normalization"]),
            scenario=data["scenario"], solver=data["solver"],
            seeds=data["seeds"], units=data["units"],
            class_multipliers=data["class_multipliers"],
            disabled_links=data["disabled_links"],
            sample_stats=data["sample_stats"],
            regen_failures=data["regen_failures"],
            global_max_flow=data["global_max_flow"],
            manifest_hash=data["manifest_hash"],
        )


def _hash_obj(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def split_sizes(n_samples: int) -> tuple[int, int, int]:
    """70/20/10 with floor on val/test and the remainder to train."""
    n_val = int(np.floor(0.2 * n_samples))
    n_test = int(np.floor(0.1 * n_samples))
    return n_samples - n_val - n_test, n_val, n_test


def generate_dataset(network: Network, spec: ScenarioSpec,
                     solver_cfg: SolverConfig, out_dir,
                     max_retries: int = 20) -> "Dataset":
    """Sample demands, solve labels, normalize and write a dataset directory."""
    if spec.classes != network.n_classes:
        network = Network(network.n_nodes, network.links,
                          default_classes(spec.class_multipliers()),
                          network.disabled, network.units)
    link_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 1)))
    net, path_sets = apply_link_scenario(network, spec, link_rng)

    raw_inputs, targets, demands, warms = [], [], [], []
    rel_gaps, kkts, iters_list = [], [], []
    regen_failures = 0
    for idx in range(spec.n_samples):
        solution = None
        for retry in range(max_retries):
            rng = np.random.default_rng(
                np.random.SeedSequence((spec.seed, 2, idx, retry)))
            od = sample_od_matrix(net, spec.demand_range,
                                  spec.od_missing_ratio, rng)
            if spec.classes == 2:
                od = make_multiclass(od, rng)
            try:
                candidate = solve_ue(net, od, path_sets, solver_cfg)
            except Exception as exc:  # infeasible draw: resample
                log.warning("sample %d retry %d failed: %s", idx, retry, exc)
                regen_failures += 1
                continue
            if candidate.converged or candidate.rel_gap <= 1e-4:
                solution = (od, candidate)
                break
            regen_failures += 1
            log.warning("sample %d retry %d did not converge (gap %.2e)",
                        idx, retry, candidate.rel_gap)
        if solution is None:
            raise ScenarioInfeasibleError(
                f"sample {idx}: no solvable demand draw in {max_retries} tries"
            )
        od, sol = solution
        warm_costs, warm_shares = warm_start(net, od, path_sets,
                                             spec.warm_start_iters,
                                             spec.warm_start_gap)
        raw_inputs.append(raw_input_tensor(net, od, path_sets, warm_costs))
        targets.append(normalize_target(sol, od))
        demands.append(od.demand.copy())
        warms.append(warm_shares)
        rel_gaps.append(sol.rel_gap)
        kkts.append(sol.kkt_residual)
        iters_list.append(sol.iterations)

    shuffle_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 3)))
    order = shuffle_rng.permutation(spec.n_samples)
    n_train, n_val, n_test = split_sizes(spec.n_samples)
    splits = {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val:]),
    }

    stats = NormStats.fit(np.concatenate([raw_inputs[i] for i in splits["train"]]))
    path_cost_block = path_sets.packed().freeflow_cost
    global_max = max((float(t.max()) for t in targets), default=1.0)

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "net.tntp"), "w") as fh:
        fh.write(dump_tntp_network(net))
    with open(os.path.join(out_dir, "net.json"), "w") as fh:
        json.dump(network_sidecar(net, spec.seed), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "paths.ndjson"), "w") as fh:
        dump_path_sets(path_sets, fh)

    manifest = DatasetManifest(
        n_nodes=net.n_nodes, n_links=net.n_links, k=spec.k, n=spec.classes,
        m=M_LINK_FEATURES, a=input_width(spec.classes, spec.k),
        n_samples=spec.n_samples, splits=splits, target_mode="per-od-share",
        stats=stats, scenario=asdict_spec(spec),
        solver={"rel_gap_tol": solver_cfg.rel_gap_tol,
                "max_iters": solver_cfg.max_iters,
                "step_rule": solver_cfg.step_rule},
        seeds={"dataset": spec.seed},
        units={"length": net.units.length, "time": net.units.time},
        class_multipliers=list(net.class_multipliers()),
        disabled_links=sorted(net.disabled),
        sample_stats={"rel_gap": rel_gaps, "kkt_residual": kkts,
                      "iterations": iters_list},
        regen_failures=regen_failures,
        global_max_flow=global_max,
    )
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    for split, indices in splits.items():
        split_dir = os.path.join(out_dir, "samples", split)
        os.makedirs(split_dir, exist_ok=True)
        for idx in indices:
            record = SampleRecord(
                input=stats.apply(raw_inputs[idx]),
                target=targets[idx],
                demand=demands[idx],
                path_costs=path_cost_block,
                warm=warms[idx],
            )
            write_sample(os.path.join(split_dir, f"{idx:05d}.bin"), record)
    if regen_failures:
        log.info("dataset %s: %d sample draws regenerated", out_dir, regen_failures)
    return Dataset(out_dir)


def asdict_spec(spec: ScenarioSpec) -> dict:
    data = asdict(spec)
    data["removed_links"] = list(data["removed_links"])
    data["demand_range"] = list(data["demand_range"])
    return data


class Dataset:
    """Read-only view over a generated dataset directory."""

    def __init__(self, directory):
        self.directory = str(directory)
        with open(os.path.join(directory, "manifest.json")) as fh:
            raw = json.load(fh)
        self.manifest = DatasetManifest.from_json(raw)
        with open(os.path.join(directory, "net.json")) as fh:
            sidecar = json.load(fh)
        with open(os.path.join(directory, "net.tntp")) as fh:
            net = load_tntp_network(
                fh.read(),
                tuple(c["freeflow_multiplier"] for c in sidecar["classes"]),
                units=Units(**sidecar["units"]),
            )
        self.network = net.with_disabled(sidecar["disabled"])
        with open(os.path.join(directory, "paths.ndjson")) as fh:
            self.path_sets = load_path_sets(fh, self.manifest.n_nodes,
                                            self.manifest.k)
        self._splits_cache: dict[str, list] = {}
        self._incidence = None

    # -- array accessors ----------------------------------------------------

    @property
    def freeflow_time(self) -> np.ndarray:
        return self.network.freeflow_time

    @property
    def capacity(self) -> np.ndarray:
        return self.network.capacity

    @property
    def class_multipliers(self) -> np.ndarray:
        return self.network.class_multipliers()

    def load_split(self, split: str) -> list:
        if split not in self._splits_cache:
            records = []
            for idx in self.manifest.splits[split]:
                path = os.path.join(self.directory, "samples", split,
                                    f"{idx:05d}.bin")
                records.append(read_sample(path, self.manifest.n,
                                           self.manifest.k))
            self._splits_cache[split] = records
        return self._splits_cache[split]

    def incidence_matrix(self) -> np.ndarray:
        """(R * k * n, L) path-link incidence, class blocks repeated."""
        if self._incidence is None:
            packed = self.path_sets.packed()
            R, k = packed.slot_mask.shape
            n = self.manifest.n
            L = self.network.n_links
            inc = np.zeros((R * k * n, L))
            for z in range(n):
                rows = (packed.slot_of_entry // k) * (k * n) + z * k \
                    + (packed.slot_of_entry % k)
                inc[rows, packed.link_of_entry] = 1.0
            self._incidence = inc
        return self._incidence

    # -- prediction plumbing -------------------------------------------------

    def pad_mask(self) -> np.ndarray:
        return self.path_sets.packed().slot_mask

    def denormalize(self, pred: np.ndarray, sample: SampleRecord,
                    renormalize: bool = False) -> np.ndarray:
        od = sample.od_matrix(self.manifest.n_nodes)
        return denormalize_prediction(
            pred, od, self.pad_mask(), mode=self.manifest.target_mode,
            global_max=self.manifest.global_max_flow, renormalize=renormalize,
        )

    def label_flows(self, sample: SampleRecord) -> np.ndarray:
        """Recover raw label path flows from the stored normalized target."""
        od = sample.od_matrix(self.manifest.n_nodes)
        return denormalize_prediction(
            sample.target, od, self.pad_mask(), mode=self.manifest.target_mode,
            global_max=self.manifest.global_max_flow, renormalize=False,
        )

    def od_residual(self, flows3: np.ndarray, sample: SampleRecord) -> float:
        from .equilibrium import od_conservation_residual

        return od_conservation_residual(
            sample.od_matrix(self.manifest.n_nodes), flows3)

    def kkt_residual_np(self, flows3: np.ndarray, sample: SampleRecord) -> float:
        from .equilibrium import kkt_residual

        return kkt_residual(self.network, sample.od_matrix(self.manifest.n_nodes),
                            self.path_sets, flows3)


def rebuild_eval_samples(dataset: Dataset, removed_links, solver_cfg: SolverConfig,
                         split: str = "test", limit: int | None = None):
    """Re-label a split on a link-removal scenario without retraining.

    Takes the split's demands, disables ``removed_links``, rebuilds path
    sets, re-solves the labels and rebuilds inputs with the dataset's own
    normalization stats and warm policy.  Returns (network, path_sets,
    samples) ready for :func:`pathflow.evalkit.pooled_split_metrics`.
    """
    base = dataset.load_split(split)
    if limit is not None:
        base = base[:limit]
    demands = [s.od_matrix(dataset.manifest.n_nodes) for s in base]
    reduced, path_sets = rebuild_after_removal(dataset.network, removed_links,
                                               dataset.manifest.k)
    lost = set(path_sets.unreachable_pairs())
    for od in demands:
        n = dataset.manifest.n_nodes
        bad = [(i, j) for (i, j) in lost if od.demand[i * n + j].sum() > 0]
        if bad:
            raise ScenarioInfeasibleError(
                f"removal disconnects demanded pairs: {bad[:10]}", pairs=bad)

    spec = dataset.manifest.scenario
    samples = []
    pad_costs = path_sets.packed().freeflow_cost
    for od in demands:
        sol = solve_ue(reduced, od, path_sets, solver_cfg)
        warm_costs, warm_shares = warm_start(
            reduced, od, path_sets,
            int(spec.get("warm_start_iters", 150)),
            float(spec.get("warm_start_gap", 1e-4)))
        samples.append(SampleRecord(
            input=dataset.manifest.stats.apply(
                raw_input_tensor(reduced, od, path_sets, warm_costs)),
            target=normalize_target(sol, od),
            demand=od.demand.copy(),
            path_costs=pad_costs,
            warm=warm_shares,
        ))
    return reduced, path_sets, samples
