"""Command-line front end for the full pipeline.

Subcommands: gen-net, gen-data, solve, train, predict, eval, scenario,
serve.  Every run writes a reproducibility stanza (arguments, seeds, config
hash, versions) next to its outputs.  Exit codes: 0 success, 1 domain
error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .datagen import (Dataset, ScenarioSpec, build_input_tensor,
                      generate_dataset)
from .equilibrium import SolverConfig, save_solution, solve_ue
from .errors import ConfigError, PathflowError
from .evalkit import evaluate_flows, pooled_split_metrics, write_report
from .model import (ModelConfig, checkpoint_extra, load_checkpoint,
                    predict, save_checkpoint, train_model)
from .netlib import builtin_network, siouxfalls_trips
from .network import (Network, Units, load_tntp_network, load_tntp_trips,
                      save_network, dump_tntp_trips)
from .paths import build_path_sets, dump_path_sets
from .workflows import DESK_MODEL, SCENARIOS


def _resolve_network(name, class_multipliers=(1.0,), seed=7) -> Network:
    if os.path.exists(name):
        with open(name) as fh:
            return load_tntp_network(fh.read(), class_multipliers)
    return builtin_network(name, class_multipliers, seed)


def _resolve_trips(name, network: Network):
    if name == "siouxfalls":
        return siouxfalls_trips(network.n_classes)
    with open(name) as fh:
        return load_tntp_trips(fh.read(), network.n_nodes, network.n_classes)


def _write_stanza(out_dir, args, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    payload = {k: v for k, v in vars(args).items() if k != "func"}
    stanza = {
        "schema": "pathflow.run.v1",
        "command": args.command,
        "arguments": payload,
        "config_hash": hashlib.sha256(
            json.dumps(payload, sort_keys=True, default=str).encode()
        ).hexdigest(),
        "versions": {"pathflow": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
    }
    if extra:
        stanza.update(extra)
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(stanza, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def cmd_gen_net(args):
    if args.grid:
        rows, cols = (int(x) for x in args.grid.lower().split("x"))
        from .network import generate_manhattan
        net = generate_manhattan(rows, cols, args.seed)
    else:
        net = _resolve_network(args.builtin, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_network(net, os.path.join(args.out, "net.tntp"),
                 os.path.join(args.out, "net.json"), rng_seed=args.seed)
    _write_stanza(args.out, args)
    print(f"wrote {args.out}/net.tntp ({net.n_nodes} nodes, {net.n_links} links)")
    return 0


def cmd_gen_data(args):
    multipliers = (1.0,) if args.classes == 1 else (1.0, 1.5)
    net = _resolve_network(args.net, multipliers, args.seed)
    spec = ScenarioSpec(
        od_missing_ratio=args.od_missing,
        link_missing_ratio=args.link_missing,
        removed_links=tuple(int(x) for x in args.removed.split(",") if x),
        classes=args.classes,
        demand_range=(args.demand_min, args.demand_max),
        n_samples=args.samples,
        seed=args.seed,
        k=args.k,
        warm_start_iters=args.warm_iters,
        warm_start_gap=args.warm_gap,
    )
    solver = SolverConfig(rel_gap_tol=args.tol, max_iters=args.max_iters)
    dataset = generate_dataset(net, spec, solver, args.out)
    _write_stanza(args.out, args,
                  {"manifest_hash": dataset.manifest.manifest_hash})
    sizes = {s: len(v) for s, v in dataset.manifest.splits.items()}
    print(f"dataset at {args.out}: {sizes}, manifest "
          f"{dataset.manifest.manifest_hash[:12]}")
    return 0


def cmd_solve(args):
    net = _resolve_network(args.net, seed=args.seed)
    od = _resolve_trips(args.trips, net)
    path_sets = build_path_sets(net, args.k)
    solution = solve_ue(net, od, path_sets,
                        SolverConfig(rel_gap_tol=args.tol,
                                     max_iters=args.max_iters))
    save_solution(solution, args.out)
    with open(os.path.join(args.out, "paths.ndjson"), "w") as fh:
        dump_path_sets(path_sets, fh)
    _write_stanza(args.out, args, {"rel_gap": solution.rel_gap,
                                   "iterations": solution.iterations})
    print(f"solved: rel_gap {solution.rel_gap:.2e} in {solution.iterations} "
          f"iterations ({solution.wall_time:.2f}s); wrote {args.out}")
    return 0


def cmd_train(args):
    dataset = Dataset(args.data)
    cfg = ModelConfig(
        heads=args.heads, dim=args.dim, encoder_layers=args.encoder_layers,
        decoder_layers=args.decoder_layers, dropout=args.dropout,
        batch=args.batch, epochs=args.epochs, lr=args.lr,
        ffn_hidden=args.ffn_hidden, lambda_od=args.lambda_od,
        lambda_kkt=args.lambda_kkt, seed=args.seed,
    )
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    history_path = args.history or (args.out + ".history.csv")
    result = train_model(dataset, cfg, history_path=history_path)
    model = result.best_model()
    save_checkpoint(model, args.out, dataset.manifest.manifest_hash,
                    extra=checkpoint_extra(dataset))
    _write_stanza(os.path.dirname(os.path.abspath(args.out)) or ".", args,
                  {"best_epoch": result.best_epoch,
                   "best_val_mse": result.best_val})
    print(f"checkpoint {args.out}: best val MSE {result.best_val:.5f} "
          f"at epoch {result.best_epoch}")
    return 0


def cmd_predict(args):
    model, _, extra = load_checkpoint(args.ckpt)
    dataset = Dataset(args.data)
    net, path_sets = dataset.network, dataset.path_sets
    if args.trips:
        od = _resolve_trips(args.trips, net)
    else:
        sample = dataset.load_split(args.split)[args.index]
        od = sample.od_matrix(dataset.manifest.n_nodes)
    flows, seconds = predict(model, extra, net, od, path_sets,
                             renormalize=args.renormalize)
    os.makedirs(args.out, exist_ok=True)
    np.save(os.path.join(args.out, "predicted_flows.npy"), flows)
    with open(os.path.join(args.out, "timing.json"), "w") as fh:
        json.dump({"inference_s": seconds}, fh, indent=2)
        fh.write("\n")
    _write_stanza(args.out, args)
    print(f"predicted flows -> {args.out} ({seconds * 1000:.1f} ms)")
    return 0


def cmd_eval(args):
    model, _, extra = load_checkpoint(args.ckpt)
    dataset = Dataset(args.data)
    cfg = model.cfg
    metrics = pooled_split_metrics(dataset, model, cfg, args.split,
                                   renormalize=args.renormalize)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "pooled_metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    # detailed single-sample report files (heat-map / histogram data)
    sample = dataset.load_split(args.split)[0]
    od = sample.od_matrix(dataset.manifest.n_nodes)
    import time as _time
    t0 = _time.perf_counter()
    flows, seconds = predict(model, extra, dataset.network, od,
                             dataset.path_sets, renormalize=args.renormalize)
    label = dataset.label_flows(sample)
    t0 = _time.perf_counter()
    from .equilibrium import solve_ue as _solve
    sol = _solve(dataset.network, od, dataset.path_sets,
                 SolverConfig(rel_gap_tol=1e-6))
    solve_s = _time.perf_counter() - t0
    report = evaluate_flows(dataset.network, od, dataset.path_sets, flows,
                            label, scenario=dataset.manifest.scenario,
                            timings={"inference_s": seconds,
                                     "solve_s": solve_s})
    write_report(report, args.out)
    _write_stanza(args.out, args)
    print(f"eval -> {args.out}: MAPE {metrics['mape_pct']}, "
          f"MAE {metrics['mae']}")
    return 0


def cmd_scenario(args):
    fn = SCENARIOS.get(args.template)
    if fn is None:
        raise ConfigError(f"unknown template {args.template!r}; "
                          f"choose from {sorted(SCENARIOS)}")
    kwargs = {"samples": args.samples, "epochs": args.epochs, "seed": args.seed}
    fn(args.out, **kwargs)
    _write_stanza(args.out, args)
    print(f"scenario {args.template} -> {args.out}")
    return 0


def cmd_serve(args):
    import uvicorn

    from .service import ServiceBundle, create_app

    dataset = Dataset(args.data)
    od = (_resolve_trips(args.trips, dataset.network) if args.trips else
          dataset.load_split("test")[0].od_matrix(dataset.manifest.n_nodes))
    bundle = ServiceBundle(dataset, args.ckpt, od, network_id=args.network_id,
                           solver_cfg=SolverConfig(rel_gap_tol=1e-6,
                                                   max_iters=args.solver_budget))
    app = create_app(bundle)
    host = args.host or os.environ.get("PATHFLOW_HOST", "127.0.0.1")
    port = args.port or int(os.environ.get("PATHFLOW_PORT", "8321"))
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathflow",
        description="User-equilibrium traffic assignment and a transformer "
                    "surrogate for instant what-if analysis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-net", help="generate or export a network")
    p.add_argument("--grid", help="RxC Manhattan grid, e.g. 5x5")
    p.add_argument("--builtin", default="siouxfalls",
                   help="builtin name when --grid is not given")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_net)

    p = sub.add_parser("gen-data", help="generate a labelled dataset")
    p.add_argument("--net", required=True,
                   help="builtin name (siouxfalls, ema-like, manhattan-RxC) "
                        "or a TNTP file path")
    p.add_argument("--od-missing", type=float, default=0.3)
    p.add_argument("--link-missing", type=float, default=0.0)
    p.add_argument("--removed", default="", help="comma-separated link ids")
    p.add_argument("--classes", type=int, default=1, choices=(1, 2))
    p.add_argument("--demand-min", type=float, default=100.0)
    p.add_argument("--demand-max", type=float, default=4000.0)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--warm-iters", type=int, default=150)
    p.add_argument("--warm-gap", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("solve", help="solve one instance to equilibrium")
    p.add_argument("--net", required=True)
    p.add_argument("--trips", required=True,
                   help="'siouxfalls' or a TNTP trips file")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="train the surrogate on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--heads", type=int, default=DESK_MODEL.heads)
    p.add_argument("--dim", type=int, default=DESK_MODEL.dim)
    p.add_argument("--encoder-layers", type=int, default=DESK_MODEL.encoder_layers)
    p.add_argument("--decoder-layers", type=int, default=DESK_MODEL.decoder_layers)
    p.add_argument("--dropout", type=float, default=DESK_MODEL.dropout)
    p.add_argument("--batch", type=int, default=DESK_MODEL.batch)
    p.add_argument("--epochs", type=int, default=DESK_MODEL.epochs)
    p.add_argument("--lr", type=float, default=DESK_MODEL.lr)
    p.add_argument("--ffn-hidden", type=int, default=DESK_MODEL.ffn_hidden)
    p.add_argument("--lambda-od", type=float, default=DESK_MODEL.lambda_od)
    p.add_argument("--lambda-kkt", type=float, default=DESK_MODEL.lambda_kkt)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--history", default="")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="one-shot inference from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True,
                   help="dataset directory providing network/paths/stats")
    p.add_argument("--trips", default="",
                   help="optional trips source; defaults to a test sample")
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--renormalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--renormalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("scenario", help="run a what-if scenario template")
    p.add_argument("--template", required=True,
                   choices=sorted(SCENARIOS))
    p.add_argument("--samples", type=int, default=120)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("serve", help="HTTP scenario service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trips", default="",
                   help="base demand; defaults to the first test sample")
    p.add_argument("--network-id", default="default")
    p.add_argument("--solver-budget", type=int, default=1500)
    p.add_argument("--host", default="")
    p.add_argument("--port", type=int, default=0)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PathflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
