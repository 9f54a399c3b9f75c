"""HTTP scenario service: the trained surrogate and the solver side by side.

Stateless JSON endpoints over one immutable bundle (network, base demand,
path sets, checkpoint).  ``POST /predict`` accepts demand overrides, a
global demand scale and a disabled-link set, runs the surrogate and/or the
solver, and reports flows plus quality metrics.  Error mapping: 400 invalid
request (field-level messages), 409 disabled links strand a demanded OD
pair, 422 checkpoint/scenario signature mismatch.
"""

from __future__ import annotations

import time
from typing import Literal

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field, ValidationError

from .datagen import Dataset
from .equilibrium import SolverConfig, average_delay, kkt_residual, \
    od_conservation_residual, solve_ue
from .errors import ContractError, PathflowError
from .model import load_checkpoint, predict
from .network import ODMatrix, aggregate_link_flows
from .paths import rebuild_after_removal

API_SCHEMA = "pathflow.scenario-api.v1"

#: interactive solves run with a reduced budget by default; the achieved
#: relative gap always rides along in the response
SERVICE_SOLVER = SolverConfig(rel_gap_tol=1e-6, max_iters=1500)


class DemandOverride(BaseModel):
    origin: int = Field(ge=0)
    dest: int = Field(ge=0)
    class_index: int = Field(0, ge=0)
    value: float = Field(ge=0)


class ScenarioRequest(BaseModel):
    network_id: str = ""
    demand_overrides: list[DemandOverride] = []
    demand_scale: float = Field(1.0, gt=0)
    disabled_links: list[int] = []
    renormalize: bool = False
    engine: Literal["surrogate", "solver", "both"] = "surrogate"


class ServiceBundle:
    """Immutable shared state for the service."""

    def __init__(self, dataset: Dataset, checkpoint_path, base_demand: ODMatrix,
                 network_id: str = "default", solver_cfg: SolverConfig = SERVICE_SOLVER):
        self.dataset = dataset
        self.network = dataset.network
        self.path_sets = dataset.path_sets
        self.model, self.manifest_hash, self.extra = load_checkpoint(checkpoint_path)
        self.base_demand = base_demand
        self.network_id = network_id
        self.solver_cfg = solver_cfg
        if self.manifest_hash != dataset.manifest.manifest_hash:
            raise ContractError(
                "checkpoint was trained on a different dataset manifest")

    def network_json(self):
        net = self.network
        return {
            "schema": API_SCHEMA,
            "network_id": self.network_id,
            "n_nodes": net.n_nodes,
            "links": [
                {"id": l.id, "tail": l.tail, "head": l.head, "length": l.length,
                 "capacity": l.capacity, "freeflow_time": l.freeflow_time,
                 "disabled": l.id in net.disabled}
                for l in net.links
            ],
            "classes": [
                {"id": c.id, "name": c.name,
                 "freeflow_multiplier": c.freeflow_multiplier}
                for c in net.classes
            ],
            "disabled": sorted(net.disabled),
            "units": {"length": net.units.length, "time": net.units.time},
        }

    def manifest_json(self):
        m = self.dataset.manifest
        return {
            "schema": API_SCHEMA,
            "network_id": self.network_id,
            "manifest_hash": m.manifest_hash,
            "n_nodes": m.n_nodes, "k": m.k, "n": m.n, "a": m.a,
            "target_mode": m.target_mode,
            "scenario": m.scenario,
            "class_multipliers": m.class_multipliers,
            "solver_budget": {"rel_gap_tol": self.solver_cfg.rel_gap_tol,
                              "max_iters": self.solver_cfg.max_iters},
        }


def _apply_request(bundle: ServiceBundle, req: ScenarioRequest):
    net = bundle.network
    errors = []
    if req.network_id and req.network_id != bundle.network_id:
        errors.append({"field": "network_id",
                       "message": f"unknown network {req.network_id!r}"})
    demand = bundle.base_demand.demand.copy() * req.demand_scale
    for i, ov in enumerate(req.demand_overrides):
        if not (0 <= ov.origin < net.n_nodes):
            errors.append({"field": f"demand_overrides[{i}].origin",
                           "message": f"node {ov.origin} out of range"})
        elif not (0 <= ov.dest < net.n_nodes):
            errors.append({"field": f"demand_overrides[{i}].dest",
                           "message": f"node {ov.dest} out of range"})
        elif ov.origin == ov.dest:
            errors.append({"field": f"demand_overrides[{i}]",
                           "message": "origin and destination must differ"})
        elif not (0 <= ov.class_index < net.n_classes):
            errors.append({"field": f"demand_overrides[{i}].class_index",
                           "message": f"class {ov.class_index} out of range"})
        else:
            demand[ov.origin * net.n_nodes + ov.dest, ov.class_index] = ov.value
    bad_links = [l for l in req.disabled_links
                 if not (0 <= l < net.n_links)]
    if bad_links:
        errors.append({"field": "disabled_links",
                       "message": f"ids out of range: {bad_links}"})
    if errors:
        return None, errors
    return ODMatrix(net.n_nodes, demand), []


def _flows_payload(network, path_sets, demand, flows3):
    n = network.n_nodes
    packed = path_sets.packed()
    rows = np.nonzero(demand.demand.sum(axis=1) > 0)[0]
    per_path = []
    for r in rows:
        per_path.append({
            "origin": int(r // n),
            "dest": int(r % n),
            "demand": demand.demand[r].tolist(),
            "flows": flows3[r].tolist(),          # (classes, k)
            "pad_mask": packed.slot_mask[r].tolist(),
        })
    links = aggregate_link_flows(network, path_sets, flows3)
    return per_path, links.flow.sum(axis=1).tolist()


def create_app(bundle: ServiceBundle) -> FastAPI:
    app = FastAPI(title="pathflow scenario service")

    @app.get("/health")
    def health():
        return {"status": "ok", "schema": API_SCHEMA}

    @app.get("/network")
    def network():
        return bundle.network_json()

    @app.get("/manifest")
    def manifest():
        return bundle.manifest_json()

    @app.post("/predict")
    def predict_endpoint(body: dict):
        try:
            req = ScenarioRequest(**body)
        except ValidationError as exc:
            return JSONResponse(status_code=400, content={
                "detail": [{"field": ".".join(str(p) for p in e["loc"]),
                            "message": e["msg"]} for e in exc.errors()]})
        demand, errors = _apply_request(bundle, req)
        if errors:
            return JSONResponse(status_code=400, content={"detail": errors})

        network, path_sets = bundle.network, bundle.path_sets
        if req.disabled_links:
            try:
                network, path_sets = rebuild_after_removal(
                    bundle.network, req.disabled_links,
                    bundle.dataset.manifest.k, demand=demand)
            except PathflowError as exc:
                pairs = getattr(exc, "pairs", ())
                return JSONResponse(status_code=409, content={
                    "detail": str(exc),
                    "unreachable_pairs": [list(p) for p in pairs]})

        response = {"schema": API_SCHEMA, "engine": req.engine, "timings": {}}
        try:
            if req.engine in ("surrogate", "both"):
                flows, seconds = predict(bundle.model, bundle.extra, network,
                                         demand, path_sets,
                                         renormalize=req.renormalize)
                per_path, link_totals = _flows_payload(network, path_sets,
                                                       demand, flows)
                response["path_flows"] = per_path
                response["link_flows"] = link_totals
                response["ad"] = [average_delay(network, demand, path_sets, flows, z)
                                  for z in range(network.n_classes)]
                response["eps_od"] = od_conservation_residual(demand, flows)
                response["phi_kkt"] = kkt_residual(network, demand, path_sets, flows)
                response["timings"]["inference_s"] = seconds
            if req.engine in ("solver", "both"):
                t0 = time.perf_counter()
                sol = solve_ue(network, demand, path_sets, bundle.solver_cfg)
                solve_s = time.perf_counter() - t0
                s_paths, s_links = _flows_payload(network, path_sets, demand,
                                                  sol.path_flows)
                response["timings"]["solve_s"] = solve_s
                response["solver"] = {
                    "rel_gap": sol.rel_gap,
                    "iterations": sol.iterations,
                    "converged": sol.converged,
                    "budget_max_iters": bundle.solver_cfg.max_iters,
                    "ad": [average_delay(network, demand, path_sets,
                                         sol.path_flows, z)
                           for z in range(network.n_classes)],
                }
                if req.engine == "solver":
                    response["path_flows"] = s_paths
                    response["link_flows"] = s_links
                    response["ad"] = response["solver"]["ad"]
                    response["eps_od"] = od_conservation_residual(
                        demand, sol.path_flows)
                    response["phi_kkt"] = kkt_residual(network, demand,
                                                       path_sets, sol.path_flows)
                else:
                    surrogate_links = np.asarray(response["link_flows"])
                    solver_links = np.asarray(s_links)
                    used = solver_links > 0
                    mape = float(np.mean(
                        np.abs(surrogate_links[used] - solver_links[used])
                        / solver_links[used]) * 100.0) if used.any() else 0.0
                    response["divergence"] = {
                        "link_flow_mape_pct": mape,
                        "solver_link_flows": s_links,
                    }
                    if response["timings"].get("inference_s"):
                        response["timings"]["speedup"] = (
                            solve_s / response["timings"]["inference_s"])
        except ContractError as exc:
            return JSONResponse(status_code=422, content={"detail": str(exc)})
        except PathflowError as exc:
            return JSONResponse(status_code=400, content={"detail": str(exc)})
        return response

    return app
