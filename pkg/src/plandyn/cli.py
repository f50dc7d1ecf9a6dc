"""Command-line front door: gen-graph, train, verify, export."""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import THEOREM_CHECKS, verify_theorem
from .graphs import blocksworld_graph, gen_erdos_renyi_dag, graph_to_json
from .runner import (
    ConfigError,
    component_rng,
    export_bundle,
    load_experiment_config,
    load_run_artifacts,
    resolve_out_dir,
    run_experiment,
    theorem_bundle,
)


def _cmd_gen_graph(args) -> int:
    if (args.er is None) == (args.blocksworld is None):
        print("error: pass exactly one of --er N P or --blocksworld K", file=sys.stderr)
        return 2
    if args.er is not None:
        if args.seed is None:
            print("error: --er needs --seed", file=sys.stderr)
            return 2
        n, p = int(args.er[0]), float(args.er[1])
        g = gen_erdos_renyi_dag(n, p, args.seed)
    else:
        g = blocksworld_graph(int(args.blocksworld))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(graph_to_json(g) + "\n", encoding="utf-8")
    print(f"wrote {out} ({g.num_nodes} nodes, {int(g.adjacency.sum())} directed edges)")
    return 0


def _train_one(path: str, seed: int | None, out: str | None, out_root: str | None) -> str:
    cfg = load_experiment_config(path)
    if seed is not None:
        cfg.raw["seed"] = seed
        cfg = load_experiment_config_from_dict(cfg.raw)
    if out is not None:
        cfg.raw["out"] = out
        cfg = load_experiment_config_from_dict(cfg.raw)
    run_dir = run_experiment(cfg, out_root)
    return str(run_dir)


def load_experiment_config_from_dict(data: dict):
    from .runner import parse_experiment_config
    return parse_experiment_config(data)


def _cmd_train(args) -> int:
    configs = args.config
    try:
        if args.jobs > 1 and len(configs) > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
                futures = [
                    pool.submit(_train_one, path, args.seed, args.out if len(configs) == 1 else None, args.out_root)
                    for path in configs
                ]
                for fut in futures:
                    print(f"run complete: {fut.result()}")
        else:
            for path in configs:
                run_dir = _train_one(path, args.seed, args.out if len(configs) == 1 else None, args.out_root)
                print(f"run complete: {run_dir}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


def _cmd_verify(args) -> int:
    theorems = [t.strip() for t in args.theorems.split(",") if t.strip()]
    unknown = [t for t in theorems if t not in THEOREM_CHECKS]
    if unknown:
        print(f"error: unknown theorem id(s): {', '.join(unknown)}", file=sys.stderr)
        return 2
    needs_run = [t for t in theorems if t != "PPO"]
    artifacts = None
    if args.run:
        artifacts = load_run_artifacts(args.run)
    elif needs_run:
        print(f"error: theorems {needs_run} need --run DIR", file=sys.stderr)
        return 2
    reports = []
    for theorem in theorems:
        rng = component_rng(args.seed, f"verify:{theorem}")
        if theorem == "PPO" and artifacts is None:
            # standalone identity check on a fresh small world
            g = gen_erdos_renyi_dag(10, 0.3, args.seed)
            from .corpus import split_pairs
            from .policy import TabularPolicy
            split = split_pairs(g, 0.5, args.seed)
            bundle = {
                "graph": g, "model": TabularPolicy.zeros(g.num_nodes),
                "pairs": split.train_pairs, "rng": rng, "batches": args.batches,
            }
        else:
            bundle = theorem_bundle(theorem, artifacts, rng)
            if theorem == "PPO":
                bundle["batches"] = args.batches
        reports.append(verify_theorem(theorem, bundle))
    width = max(len(r.theorem) for r in reports)
    print(f"{'check'.ljust(width)}  {'residual':>12}  {'threshold':>12}  status")
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        print(f"{rep.theorem.ljust(width)}  {rep.residual:12.3e}  {rep.threshold:12.3e}  {status}")
    payload = [
        {"theorem": r.theorem, "residual": r.residual, "threshold": r.threshold,
         "pass": r.passed, "details": _jsonable(r.details)}
        for r in reports
    ]
    out_path = Path(args.json_out) if args.json_out else (Path(args.run) / "verify.json" if args.run else None)
    if out_path:
        out_path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        print(f"wrote {out_path}")
    return 0 if all(r.passed for r in reports) else 1


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def _cmd_export(args) -> int:
    out = export_bundle(args.run, resolve_out_dir(args.out, args.out_root))
    print(f"bundle written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plandyn",
                                     description="graph path-planning training-dynamics laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-graph", help="generate a graph file")
    gen.add_argument("--er", nargs=2, metavar=("N", "P"), help="random DAG with N nodes, edge prob P")
    gen.add_argument("--blocksworld", type=int, metavar="K", help="Blocksworld move graph for K blocks")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", required=True, help="output JSON path")
    gen.set_defaults(func=_cmd_gen_graph)

    train = sub.add_parser("train", help="run one or more experiment configs")
    train.add_argument("--config", action="append", required=True, help="config JSON path (repeatable)")
    train.add_argument("--seed", type=int, default=None, help="override the config seed")
    train.add_argument("--out", default=None, help="override the config output directory")
    train.add_argument("--out-root", default=None, help=f"output root (default ${'{'}PLANDYN_OUT{'}'})")
    train.add_argument("--jobs", type=int, default=1, help="independent configs to run concurrently")
    train.set_defaults(func=_cmd_train)

    verify = sub.add_parser("verify", help="run named stable-point checks")
    verify.add_argument("--run", default=None, help="run directory with checkpoints")
    verify.add_argument("--theorems", required=True, help="comma-separated ids (T1..T8, PPO)")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--batches", type=int, default=100)
    verify.add_argument("--json-out", default=None)
    verify.set_defaults(func=_cmd_verify)

    export = sub.add_parser("export", help="bundle runs for the figure tooling")
    export.add_argument("--run", action="append", required=True, help="run directory (repeatable)")
    export.add_argument("--out", required=True, help="bundle directory")
    export.add_argument("--out-root", default=None)
    export.set_defaults(func=_cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
