"""Restricted multi-class user equilibrium over fixed path sets.

The solver minimizes the Beckmann potential

    B(V) = sum_e t0_e * (V_e + 0.03 * V_e**5 / C_e**4),    V_e = total link flow,

whose stationary points over the per-OD simplices {f >= 0, sum_p f = demand}
are exactly the Wardrop conditions restricted to the given path sets.  Flow
is shifted toward each OD's minimum-cost path by a projected gradient step;
the default "line-search" rule is a spectral (Barzilai-Borwein) step with
monotone Armijo backtracking, so the potential never increases.

Because class costs share the congestion factor and differ only by the
free-flow multiplier, the gradient of B equals the base-class path cost for
every class; class path costs are ``multiplier * base`` exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    InfeasibleInstanceError,
    NetworkValidationError,
    UndefinedMetricError,
)
from .network import LinkFlows, Network, ODMatrix, bpr_factor
from .paths import PathSetCollection

log = logging.getLogger(__name__)

STEP_RULES = ("fixed", "diminishing", "line-search")


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 5000
    step_rule: str = "line-search"
    initial_step: float = 0.0  # 0 = auto-scale from the instance
    rel_gap_tol: float = 1e-6
    kkt_tol: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.rel_gap_tol <= 0:
            raise ContractError("rel_gap_tol must be > 0")
        if self.max_iters < 1:
            raise ContractError("max_iters must be >= 1")
        if self.step_rule not in STEP_RULES:
            raise ContractError(f"step_rule must be one of {STEP_RULES}")


@dataclass
class UESolution:
    """Equilibrium path flows plus the convergence/quality report."""

    path_flows: np.ndarray   # (N^2, n, k)
    link_flows: LinkFlows
    min_costs: np.ndarray    # (N^2, n) class minimum path costs
    rel_gap: float
    kkt_residual: float
    iterations: int
    converged: bool
    objective: float
    wall_time: float = 0.0

    def report(self) -> dict:
        """Deterministic convergence summary (timing kept separate)."""
        return {
            "schema": "pathflow.ue-report.v1",
            "rel_gap": self.rel_gap,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "objective": self.objective,
        }


class _Instance:
    """Packed arrays shared by the solver and the residual metrics."""

    def __init__(self, network: Network, demand: ODMatrix, path_sets: PathSetCollection):
        if demand.n_nodes != network.n_nodes or path_sets.n_nodes != network.n_nodes:
            raise ContractError("network, demand and path sets disagree on N")
        if demand.n_classes != network.n_classes:
            raise ContractError(
                f"demand has {demand.n_classes} classes, network {network.n_classes}"
            )
        self.network = network
        self.demand = demand.demand                 # (R, n)
        self.packed = path_sets.packed()
        self.k = path_sets.k
        self.n = network.n_classes
        self.R = path_sets.n_pairs
        self.mult = network.class_multipliers()     # (n,)
        self.slot_mask = self.packed.slot_mask      # (R, k)
        self.demanded_rz = self.demand > 0          # (R, n)
        self.demanded_rows = self.demand.sum(axis=1) > 0
        self.n_demanded_rows = int(self.demanded_rows.sum())

    def check_feasible(self):
        has_path = self.slot_mask.any(axis=1)       # (R,)
        bad_rows = np.nonzero(self.demanded_rows & ~has_path)[0]
        if bad_rows.size:
            n = self.network.n_nodes
            pairs = [(int(r) // n, int(r) % n) for r in bad_rows]
            raise InfeasibleInstanceError(
                f"{len(pairs)} demanded OD pairs have no path: {pairs[:20]}",
                pairs=pairs,
            )

    def total_link_flow(self, flows3: np.ndarray) -> np.ndarray:
        """(R, n, k) path flows -> (L,) all-class link flows."""
        per_slot = flows3.sum(axis=1).reshape(-1)
        return np.bincount(
            self.packed.link_of_entry,
            weights=per_slot[self.packed.slot_of_entry],
            minlength=self.network.n_links,
        )

    def base_link_costs(self, V: np.ndarray) -> np.ndarray:
        return self.network.freeflow_time * bpr_factor(V, self.network.capacity)

    def base_path_costs(self, link_cost: np.ndarray) -> np.ndarray:
        """(L,) link costs -> (R, k) base-class path costs (0 on padded slots)."""
        c = np.bincount(
            self.packed.slot_of_entry,
            weights=link_cost[self.packed.link_of_entry],
            minlength=self.R * self.k,
        )
        return c.reshape(self.R, self.k)

    def beckmann(self, V: np.ndarray) -> float:
        t0, C = self.network.freeflow_time, self.network.capacity
        return float(np.sum(t0 * (V + 0.03 * V ** 5 / C ** 4)))

    def min_base_costs(self, c_base: np.ndarray) -> np.ndarray:
        """(R,) minimum over non-padded slots; +inf when no path exists."""
        masked = np.where(self.slot_mask, c_base, np.inf)
        return masked.min(axis=1)

    def rel_gap(self, flows3: np.ndarray, c_base: np.ndarray) -> float:
        u_base = self.min_base_costs(c_base)
        per_slot_class_cost = c_base[:, None, :] * self.mult[None, :, None]
        total_cost = float(np.sum(flows3 * per_slot_class_cost))
        u_expanded = np.where(np.isfinite(u_base), u_base, 0.0)
        best_cost = float(np.sum(self.demand * u_expanded[:, None] * self.mult[None, :]))
        if total_cost <= 0.0:
            if self.demand.sum() > 0:
                raise ContractError("zero total cost with positive demand")
            return 0.0
        return (total_cost - best_cost) / total_cost


def _project_rows_simplex(values: np.ndarray, totals: np.ndarray,
                          mask: np.ndarray) -> np.ndarray:
    """Per-row Euclidean projection onto {f >= 0, sum(f[mask]) = total, f[~mask] = 0}."""
    m, k = values.shape
    w = np.where(mask, values, -np.inf)
    ws = -np.sort(-w, axis=1)                        # descending
    counts = mask.sum(axis=1)
    finite = np.isfinite(ws)
    cums = np.cumsum(np.where(finite, ws, 0.0), axis=1) - totals[:, None]
    j = np.arange(1, k + 1, dtype=np.float64)
    cond = (ws * j > cums) & finite
    # rho = largest index where cond holds
    rho = (k - 1) - np.argmax(cond[:, ::-1], axis=1)
    any_cond = cond.any(axis=1)
    rho = np.where(any_cond, rho, 0)
    tau = cums[np.arange(m), rho] / (rho + 1.0)
    out = np.maximum(values - tau[:, None], 0.0)
    out[~mask] = 0.0
    empty = (counts == 0) | (totals <= 0)
    out[empty] = 0.0
    return out


def _project(instance: _Instance, values3: np.ndarray) -> np.ndarray:
    """Project (R, n, k) values block-wise onto each (r, z) demand simplex."""
    R, n, k = values3.shape
    flat = values3.transpose(0, 1, 2).reshape(R * n, k)
    totals = instance.demand.reshape(R * n)
    mask = np.broadcast_to(instance.slot_mask[:, None, :], (R, n, k)).reshape(R * n, k)
    return _project_rows_simplex(flat, totals, mask).reshape(R, n, k)


def solve_ue(network: Network, demand: ODMatrix, path_sets: PathSetCollection,
             cfg: SolverConfig = SolverConfig(),
             objective_trace: list | None = None,
             _quiet: bool = False) -> UESolution:
    """Solve restricted UE; returns flows plus convergence diagnostics.

    Non-convergence at ``max_iters`` is reported (``converged=False`` and a
    log warning), never silently ignored (``_quiet`` suppresses the warning
    for deliberately truncated warm-start runs).  ``objective_trace``, when
    given, collects the Beckmann value after every iteration.
    """
    import time as _time

    t_start = _time.perf_counter()
    inst = _Instance(network, demand, path_sets)
    inst.check_feasible()
    R, n, k = inst.R, inst.n, inst.k

    # start from all demand on the best-ranked (slot 0) path
    flows = np.zeros((R, n, k), dtype=np.float64)
    first_real = np.argmax(inst.slot_mask, axis=1)        # slot 0 when sorted
    rows = np.arange(R)
    for z in range(n):
        flows[rows, z, first_real] = inst.demand[:, z]
    flows[~inst.slot_mask.any(axis=1)] = 0.0

    if inst.demand.sum() == 0:
        V = np.zeros(network.n_links)
        c_base = inst.base_path_costs(inst.base_link_costs(V))
        return _finalize(inst, flows, V, c_base, 0.0, 0, True, t_start)

    V = inst.total_link_flow(flows)
    link_cost = inst.base_link_costs(V)
    c_base = inst.base_path_costs(link_cost)
    obj = inst.beckmann(V)
    gap = inst.rel_gap(flows, c_base)
    if objective_trace is not None:
        objective_trace.append(obj)

    # auto step: roughly one unit of demand moved per unit of cost difference
    if cfg.initial_step > 0:
        alpha = cfg.initial_step
    else:
        mean_dem = inst.demand[inst.demanded_rz].mean()
        mean_cost = c_base[inst.slot_mask].mean()
        alpha = mean_dem / max(mean_cost, 1e-12)
    alpha_min, alpha_max = alpha * 1e-10, alpha * 1e10

    prev_flows = None
    prev_grad = None
    iterations = 0
    converged = gap <= cfg.rel_gap_tol

    while not converged and iterations < cfg.max_iters:
        iterations += 1
        grad = np.broadcast_to(c_base[:, None, :], (R, n, k)).copy()

        if cfg.step_rule == "line-search" and prev_flows is not None:
            s = flows - prev_flows
            y = grad - prev_grad
            sy = float(np.sum(s * y))
            if sy > 1e-30:
                alpha = float(np.clip(np.sum(s * s) / sy, alpha_min, alpha_max))
            else:
                alpha = alpha_max
        elif cfg.step_rule == "diminishing":
            alpha = alpha / np.sqrt(iterations) if cfg.initial_step > 0 else \
                (inst.demand[inst.demanded_rz].mean()
                 / max(c_base[inst.slot_mask].mean(), 1e-12)) / np.sqrt(iterations)

        target = _project(inst, flows - alpha * grad)
        direction = target - flows
        gdotd = float(np.sum(grad * direction))

        prev_flows, prev_grad = flows, grad

        if cfg.step_rule == "line-search":
            step = 1.0
            accepted = False
            for _ in range(40):
                trial = flows + step * direction
                V_trial = inst.total_link_flow(trial)
                obj_trial = inst.beckmann(V_trial)
                if obj_trial <= obj + 1e-4 * step * gdotd:
                    flows, V, obj = trial, V_trial, obj_trial
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                # direction numerically flat: stop moving
                break
        else:
            flows = target
            V = inst.total_link_flow(flows)
            obj = inst.beckmann(V)

        link_cost = inst.base_link_costs(V)
        c_base = inst.base_path_costs(link_cost)
        gap = inst.rel_gap(flows, c_base)
        converged = gap <= cfg.rel_gap_tol
        if objective_trace is not None:
            objective_trace.append(obj)

    if not converged and not _quiet:
        log.warning(
            "UE solver hit max_iters=%d with rel_gap=%.3e (tol %.1e)",
            cfg.max_iters, gap, cfg.rel_gap_tol,
        )
    return _finalize(inst, flows, V, c_base, gap, iterations, converged, t_start)


def _finalize(inst, flows, V, c_base, gap, iterations, converged, t_start):
    import time as _time

    u_base = inst.min_base_costs(c_base)
    u_base = np.where(np.isfinite(u_base), u_base, 0.0)
    min_costs = u_base[:, None] * inst.mult[None, :]
    kkt = _kkt_from_parts(inst, flows, c_base, u_base)
    per_class = _per_class_link_flows(inst, flows)
    return UESolution(
        path_flows=flows,
        link_flows=LinkFlows(per_class),
        min_costs=min_costs,
        rel_gap=float(gap),
        kkt_residual=float(kkt),
        iterations=iterations,
        converged=bool(converged),
        objective=float(inst.beckmann(V)),
        wall_time=_time.perf_counter() - t_start,
    )


def _per_class_link_flows(inst: _Instance, flows3: np.ndarray) -> np.ndarray:
    out = np.zeros((inst.network.n_links, inst.n))
    for z in range(inst.n):
        fz = flows3[:, z, :].reshape(-1)
        out[:, z] = np.bincount(
            inst.packed.link_of_entry,
            weights=fz[inst.packed.slot_of_entry],
            minlength=inst.network.n_links,
        )
    return out


def _kkt_from_parts(inst, flows3, c_base, u_base) -> float:
    if inst.n_demanded_rows == 0:
        return 0.0
    excess = np.maximum(c_base - u_base[:, None], 0.0)   # (R, k)
    excess = np.where(inst.slot_mask, excess, 0.0)
    total = 0.0
    for z in range(inst.n):
        total += inst.mult[z] * float(np.sum(flows3[:, z, :] * excess))
    return total / (inst.n_demanded_rows * inst.n)


# ---------------------------------------------------------------------------
# public residual / quality metrics
# ---------------------------------------------------------------------------

def _costs_for(network, demand, path_sets, flows3):
    inst = _Instance(network, demand, path_sets)
    flows3 = np.asarray(flows3, dtype=np.float64)
    if flows3.shape != (inst.R, inst.n, inst.k):
        raise ContractError(
            f"flows shape {flows3.shape} != ({inst.R}, {inst.n}, {inst.k})"
        )
    V = inst.total_link_flow(flows3)
    c_base = inst.base_path_costs(inst.base_link_costs(V))
    u_base = inst.min_base_costs(c_base)
    return inst, flows3, c_base, u_base


def relative_gap(network: Network, demand: ODMatrix, path_sets: PathSetCollection,
                 solution) -> float:
    """(total experienced cost - total minimum cost) / total experienced cost."""
    flows3 = solution.path_flows if isinstance(solution, UESolution) else solution
    inst, flows3, c_base, _ = _costs_for(network, demand, path_sets, flows3)
    return float(inst.rel_gap(flows3, c_base))


def kkt_residual(network: Network, demand: ODMatrix, path_sets: PathSetCollection,
                 flows) -> float:
    """Demand-normalized complementarity residual of the Wardrop conditions."""
    flows3 = flows.path_flows if isinstance(flows, UESolution) else flows
    inst, flows3, c_base, u_base = _costs_for(network, demand, path_sets, flows3)
    u_base = np.where(np.isfinite(u_base), u_base, 0.0)
    return float(_kkt_from_parts(inst, flows3, c_base, u_base))


def od_conservation_residual(demand: ODMatrix, flows) -> float:
    """Mean absolute per-(OD, class) gap between summed path flows and demand."""
    flows3 = flows.path_flows if isinstance(flows, UESolution) else np.asarray(flows)
    if flows3.shape[0] != demand.demand.shape[0] or flows3.shape[1] != demand.n_classes:
        raise ContractError(
            f"flows shape {flows3.shape} incompatible with demand "
            f"{demand.demand.shape}"
        )
    demanded_rows = demand.demand.sum(axis=1) > 0
    n_rows = int(demanded_rows.sum())
    if n_rows == 0:
        return 0.0
    diff = np.abs(flows3.sum(axis=2) - demand.demand)
    return float(diff[demanded_rows].sum() / (n_rows * demand.n_classes))


def link_aggregation_residual(network: Network, path_sets: PathSetCollection,
                              path_flows, link_flows: LinkFlows) -> float:
    """Mean absolute per-link gap between aggregated path flows and link flows."""
    from .network import aggregate_link_flows

    agg = aggregate_link_flows(network, path_sets, path_flows)
    if link_flows.flow.shape != agg.flow.shape:
        raise ContractError(
            f"link flow shape {link_flows.flow.shape} != {agg.flow.shape}"
        )
    total_given = link_flows.flow.sum(axis=1)
    total_agg = agg.flow.sum(axis=1)
    return float(np.abs(total_agg - total_given).sum() / network.n_links)


def average_delay(network: Network, demand: ODMatrix, path_sets: PathSetCollection,
                  flows, class_index: int) -> float:
    """Flow-weighted mean excess of path cost over the OD minimum, per unit demand."""
    flows3 = flows.path_flows if isinstance(flows, UESolution) else flows
    inst, flows3, c_base, u_base = _costs_for(network, demand, path_sets, flows3)
    class_demand = demand.demand[:, class_index].sum()
    if class_demand <= 0:
        raise UndefinedMetricError(f"class {class_index} has zero total demand")
    u_base = np.where(np.isfinite(u_base), u_base, 0.0)
    excess = np.where(inst.slot_mask, c_base - u_base[:, None], 0.0)
    mult = inst.mult[class_index]
    return float(mult * np.sum(flows3[:, class_index, :] * excess) / class_demand)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_solution(solution: UESolution, directory):
    """Write flow arrays (.npy) plus deterministic report and timing sidecar."""
    import os

    os.makedirs(directory, exist_ok=True)
    np.save(os.path.join(directory, "path_flows.npy"), solution.path_flows)
    np.save(os.path.join(directory, "link_flows.npy"), solution.link_flows.flow)
    np.save(os.path.join(directory, "min_costs.npy"), solution.min_costs)
    with open(os.path.join(directory, "solution.json"), "w") as fh:
        json.dump(solution.report(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "timing.json"), "w") as fh:
        json.dump({"wall_time_s": solution.wall_time}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_solution(directory) -> UESolution:
    import os

    with open(os.path.join(directory, "solution.json")) as fh:
        rep = json.load(fh)
    path_flows = np.load(os.path.join(directory, "path_flows.npy"))
    link = np.load(os.path.join(directory, "link_flows.npy"))
    min_costs = np.load(os.path.join(directory, "min_costs.npy"))
    return UESolution(
        path_flows=path_flows,
        link_flows=LinkFlows(link),
        min_costs=min_costs,
        rel_gap=rep["rel_gap"],
        kkt_residual=rep["kkt_residual"],
        iterations=rep["iterations"],
        converged=rep["converged"],
        objective=rep["objective"],
    )
