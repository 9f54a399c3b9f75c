"""Prediction-quality metrics and report artifacts.

MAE averages absolute path-flow error over non-padded slots; MAPE excludes
labels below a flow floor (1 vehicle by default) because a percentage error
is undefined at zero flow, and always reports how many slots were excluded.
Delay metrics re-evaluate congested costs under each flow assignment.

``report`` emits a deterministic ``report.json`` plus CSV side files (link
errors for heat maps, path-error histogram bins, link-flow quartiles);
wall-clock timings and the derived speedup go to ``report_timing.json`` so
re-runs stay byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, UndefinedMetricError
from .network import LinkFlows, Network, ODMatrix, aggregate_link_flows
from .equilibrium import (
    average_delay,
    kkt_residual,
    link_aggregation_residual,
    od_conservation_residual,
)

MAPE_FLOOR = 1.0  # vehicles


def _check_shapes(pred, label, pad_mask):
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ContractError(f"pred shape {pred.shape} != label {label.shape}")
    if pad_mask.shape != (pred.shape[0], pred.shape[2]):
        raise ContractError("pad mask does not match flow arrays")
    return pred, label


def mae(pred, label, pad_mask) -> np.ndarray:
    """Per-class mean absolute path-flow error over non-padded slots."""
    pred, label = _check_shapes(pred, label, pad_mask)
    y = int(pad_mask.sum())
    if y == 0:
        raise UndefinedMetricError("no non-padded path slots")
    err = np.abs(pred - label) * pad_mask[:, None, :]
    return err.sum(axis=(0, 2)) / y


def mape(pred, label, pad_mask, floor: float = MAPE_FLOOR):
    """Per-class mean absolute percentage error over slots with label >= floor.

    Returns (percentages, included counts, excluded counts) per class.
    """
    if floor <= 0:
        raise ContractError("MAPE floor must be > 0")
    pred, label = _check_shapes(pred, label, pad_mask)
    include = (label >= floor) & pad_mask[:, None, :]
    n_classes = pred.shape[1]
    values = np.zeros(n_classes)
    included = np.zeros(n_classes, dtype=int)
    excluded = np.zeros(n_classes, dtype=int)
    for z in range(n_classes):
        m = include[:, z, :]
        included[z] = int(m.sum())
        excluded[z] = int(pad_mask.sum()) - included[z]
        if included[z] == 0:
            raise UndefinedMetricError(f"class {z}: all slots below MAPE floor")
        values[z] = float(
            (np.abs(pred[:, z, :] - label[:, z, :])[m] / label[:, z, :][m]).mean()
        ) * 100.0
    return values, included, excluded


def ad_difference(network: Network, demand: ODMatrix, path_sets, pred_flows,
                  label_flows, class_index: int) -> float:
    """|AD(pred) - AD(label)|, each evaluated at its own congested costs."""
    ad_pred = average_delay(network, demand, path_sets, pred_flows, class_index)
    ad_label = average_delay(network, demand, path_sets, label_flows, class_index)
    return abs(ad_pred - ad_label)


def mean_used_path_cost(network: Network, demand: ODMatrix, path_sets,
                        flows3) -> float:
    """Flow-weighted mean path cost under the given assignment."""
    from .equilibrium import _costs_for

    inst, flows3, c_base, _ = _costs_for(network, demand, path_sets, flows3)
    weights_per_class = flows3 * inst.mult[None, :, None]
    total_cost = float(np.sum(weights_per_class * c_base[:, None, :]))
    total_flow = float(np.sum(flows3))
    if total_flow <= 0:
        raise UndefinedMetricError("no flow to average over")
    return total_cost / total_flow


@dataclass
class EvalReport:
    scenario: dict
    per_class: list            # one dict per class
    eps_od: float
    eps_link: float
    phi_kkt: float
    link_abs_error: np.ndarray
    link_pct_error: np.ndarray
    link_error_p95: float
    histogram: dict            # path-flow |error| histogram bins
    link_flow_quartiles: dict
    timings: dict              # inference / solve seconds, speedup

    def deterministic_json(self) -> dict:
        return {
            "schema": "pathflow.eval-report.v1",
            "scenario": self.scenario,
            "per_class": self.per_class,
            "eps_od": self.eps_od,
            "eps_link": self.eps_link,
            "phi_kkt": self.phi_kkt,
            "link_error_p95": self.link_error_p95,
            "histogram": self.histogram,
            "link_flow_quartiles": self.link_flow_quartiles,
        }


def evaluate_flows(network: Network, demand: ODMatrix, path_sets, pred_flows,
                   label_flows, scenario: dict | None = None,
                   timings: dict | None = None,
                   mape_floor: float = MAPE_FLOOR) -> EvalReport:
    """All paper metrics for one (prediction, label) pair."""
    pad_mask = path_sets.packed().slot_mask
    pred_flows = np.asarray(pred_flows, dtype=np.float64)
    label_flows = np.asarray(label_flows, dtype=np.float64)
    mae_v = mae(pred_flows, label_flows, pad_mask)
    mape_v, included, excluded = mape(pred_flows, label_flows, pad_mask, mape_floor)

    pred_links = aggregate_link_flows(network, path_sets, pred_flows)
    label_links = aggregate_link_flows(network, path_sets, label_flows)
    link_abs = np.abs(pred_links.total() - label_links.total())
    with np.errstate(divide="ignore", invalid="ignore"):
        link_pct = np.where(label_links.total() > 0,
                            link_abs / label_links.total() * 100.0, 0.0)

    per_class = []
    for z in range(network.n_classes):
        ad_pred = average_delay(network, demand, path_sets, pred_flows, z)
        ad_label = average_delay(network, demand, path_sets, label_flows, z)
        mean_cost = mean_used_path_cost(network, demand, path_sets, pred_flows)
        per_class.append({
            "class": network.classes[z].name,
            "mae": float(mae_v[z]),
            "mape_pct": float(mape_v[z]),
            "mape_included": int(included[z]),
            "mape_excluded": int(excluded[z]),
            "predicted_ad": ad_pred,
            "label_ad": ad_label,
            "ad_difference": abs(ad_pred - ad_label),
            "delay_percentage": 100.0 * ad_pred / mean_cost,
        })

    counts, edges = np.histogram(np.abs(pred_flows - label_flows)[pad_mask[:, None, :]
                                 .repeat(network.n_classes, axis=1)], bins=20)
    q = np.percentile(pred_links.total(), [0, 25, 50, 75, 100])
    timings = dict(timings or {})
    if "solve_s" in timings and timings.get("inference_s"):
        timings["speedup"] = timings["solve_s"] / timings["inference_s"]
    return EvalReport(
        scenario=dict(scenario or {}),
        per_class=per_class,
        eps_od=od_conservation_residual(demand, pred_flows),
        eps_link=link_aggregation_residual(network, path_sets, pred_flows, pred_links),
        phi_kkt=kkt_residual(network, demand, path_sets, pred_flows),
        link_abs_error=link_abs,
        link_pct_error=link_pct,
        link_error_p95=float(np.percentile(link_abs, 95)),
        histogram={"counts": counts.tolist(), "edges": edges.tolist()},
        link_flow_quartiles={"min": q[0], "q1": q[1], "median": q[2],
                             "q3": q[3], "max": q[4]},
        timings=timings,
    )


def write_report(report: EvalReport, directory):
    """report.json + CSVs (deterministic) and report_timing.json (volatile)."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "report.json"), "w") as fh:
        json.dump(report.deterministic_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "report_timing.json"), "w") as fh:
        json.dump(report.timings, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "link_errors.csv"), "w") as fh:
        fh.write("link,abs_error,pct_error\n")
        for i, (a, p) in enumerate(zip(report.link_abs_error,
                                       report.link_pct_error)):
            fh.write(f"{i},{a!r},{p!r}\n")
    with open(os.path.join(directory, "path_error_histogram.csv"), "w") as fh:
        fh.write("bin_left,bin_right,count\n")
        edges = report.histogram["edges"]
        for left, right, count in zip(edges, edges[1:], report.histogram["counts"]):
            fh.write(f"{left!r},{right!r},{count}\n")
    with open(os.path.join(directory, "link_flow_quartiles.csv"), "w") as fh:
        fh.write("min,q1,median,q3,max\n")
        q = report.link_flow_quartiles
        fh.write(",".join(repr(q[k]) for k in ("min", "q1", "median", "q3", "max")) + "\n")


# ---------------------------------------------------------------------------
# pooled evaluation of a checkpoint over a dataset split
# ---------------------------------------------------------------------------

def pooled_split_metrics(dataset, model, cfg, split: str = "test",
                         renormalize: bool = False,
                         mape_floor: float = MAPE_FLOOR,
                         network=None, path_sets=None, samples=None) -> dict:
    """MAPE/MAE pooled over every sample of a split, plus mean residuals.

    ``network``/``path_sets``/``samples`` default to the dataset's own; pass
    replacements to evaluate link-removal scenarios without retraining.
    """
    from .model import decoder_input_for
    from .datagen import denormalize_prediction

    network = network or dataset.network
    path_sets = path_sets or dataset.path_sets
    samples = samples if samples is not None else dataset.load_split(split)
    pad_mask = path_sets.packed().slot_mask
    n = dataset.manifest.n

    abs_sum = np.zeros(n)
    slot_count = 0
    pct_sum = np.zeros(n)
    pct_count = np.zeros(n, dtype=int)
    eps_sum = 0.0
    ad_diff_sum = np.zeros(n)
    demand_means = []
    for sample in samples:
        dec_in = decoder_input_for(cfg.eval_decoder_input, cfg, sample, n)
        pred_rows = model.predict_rows(sample.input, dec_in,
                                       anchor=model.anchor_for(sample))
        od = sample.od_matrix(dataset.manifest.n_nodes)
        pred = denormalize_prediction(pred_rows, od, pad_mask,
                                      mode=dataset.manifest.target_mode,
                                      global_max=dataset.manifest.global_max_flow,
                                      renormalize=renormalize)
        label = denormalize_prediction(sample.target, od, pad_mask,
                                       mode=dataset.manifest.target_mode,
                                       global_max=dataset.manifest.global_max_flow)
        err = np.abs(pred - label)
        abs_sum += (err * pad_mask[:, None, :]).sum(axis=(0, 2))
        slot_count += int(pad_mask.sum())
        include = (label >= mape_floor) & pad_mask[:, None, :]
        for z in range(n):
            m = include[:, z, :]
            pct_sum[z] += float((err[:, z, :][m] / label[:, z, :][m]).sum())
            pct_count[z] += int(m.sum())
        eps_sum += od_conservation_residual(od, pred)
        for z in range(n):
            ad_diff_sum[z] += ad_difference(network, od, path_sets, pred, label, z)
        demanded = od.demand[od.demand.sum(axis=1) > 0]
        if demanded.size:
            demand_means.append(demanded.mean())

    m_samples = max(len(samples), 1)
    return {
        "mae": (abs_sum / max(slot_count, 1)).tolist(),
        "mape_pct": [float(pct_sum[z] / pct_count[z] * 100.0) if pct_count[z]
                     else float("nan") for z in range(n)],
        "mape_included": pct_count.tolist(),
        "eps_od": eps_sum / m_samples,
        "ad_difference": (ad_diff_sum / m_samples).tolist(),
        "mean_od_demand": float(np.mean(demand_means)) if demand_means else 0.0,
        "n_samples": len(samples),
    }
