"""``dslsh`` command line: nodes, orchestrator, queries, data generation and benchmarks."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data_pipeline, eval_bench
from .node_runtime import serve
from .orchestrator import (
    ClusterConfig,
    ClusterError,
    Orchestrator,
    OrchestratorServer,
    VotingConfig,
    send_query,
)
from .points import read_dataset


def _cmd_node(args: argparse.Namespace) -> int:
    serve(args.listen, args.workers)
    return 0


def _cmd_build(args: argparse.Namespace) -> int:
    cfg = ClusterConfig.load(args.cluster)
    dataset = args.dataset or cfg.dataset
    if dataset is None:
        print("error: no dataset given (--dataset or config 'dataset')", file=sys.stderr)
        return 2
    with Orchestrator.from_config(cfg) as orch:
        try:
            report = orch.build(dataset)
        except ClusterError as exc:
            print(f"build failed: {exc}", file=sys.stderr)
            for endpoint, status in exc.node_status.items():
                print(f"  {endpoint}: {status}", file=sys.stderr)
            return 1
    print(json.dumps(report, indent=2))
    return 0


def _cmd_orchestrate(args: argparse.Namespace) -> int:
    cfg = ClusterConfig.load(args.cluster)
    dataset = args.dataset or cfg.dataset
    listen = args.listen or cfg.listen
    with Orchestrator.from_config(cfg) as orch:
        if dataset is not None and not args.no_build:
            try:
                report = orch.build(dataset)
            except ClusterError as exc:
                print(f"build failed: {exc}", file=sys.stderr)
                return 1
            logging.info("cluster built: n=%d nu=%d digest=%s", report["n"], report["nu"], report["spec_digest"][:12])
        server = OrchestratorServer(listen, orch)
        logging.info("orchestrator listening on %s", listen)
        try:
            server.serve_forever()
        finally:
            server.server_close()
    return 0


def _parse_vectors(args: argparse.Namespace) -> np.ndarray:
    if args.vector is not None:
        return np.array([[float(v) for v in args.vector.split(",")]])
    path = Path(args.file)
    if path.suffix == ".csv":
        with path.open() as fh:
            first = fh.readline()
        if first.startswith("f0"):
            return read_dataset(path).features
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def _cmd_query(args: argparse.Namespace) -> int:
    try:
        vectors = _parse_vectors(args)
    except (ValueError, OSError) as exc:
        print(f"error: cannot read query vectors: {exc}", file=sys.stderr)
        return 2
    status = 0
    for vec in vectors:
        reply = send_query(args.orchestrator, vec.tolist(), args.k)
        if reply.type.value == "error":
            print(json.dumps(reply.payload), file=sys.stderr)
            status = 1
            continue
        p = reply.payload
        print(
            json.dumps(
                {
                    "prediction": p["prediction"],
                    "neighbors": p["neighbors"],
                    "max_comparisons": max(p["comparisons"], default=0),
                    "latency_s": p["latency_s"],
                }
            )
        )
    return status


def _cmd_gen_data(args: argparse.Namespace) -> int:
    waves = data_pipeline.generate_synthetic(
        args.seed, args.waveforms, args.hours * 3600.0, args.ahe_rate, args.out, args.block
    )
    print(f"wrote {len(waves)} waveforms to {args.out}")
    return 0


def _cmd_extract(args: argparse.Namespace) -> int:
    spec = data_pipeline.WindowSpec(args.lag, args.cond, args.d)
    points, report = data_pipeline.extract_directory(args.in_dir, spec, args.out)
    share = report.positive / max(1, len(points))
    print(
        f"{len(points)} points ({report.positive} AHE, {share:.2%}); "
        f"{report.attempted} windows attempted, {report.rejected} rejected -> {args.out}"
    )
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    grid = eval_bench.load_grid(args.grid)
    queries = read_dataset(args.queries)
    factory = None
    nu, p = args.in_process if args.in_process else (1, 1)
    if args.cluster:
        cfg = ClusterConfig.load(args.cluster)
        nu = len(cfg.nodes)

        def factory(slsh):
            voting = dataclasses.replace(cfg.voting, K=slsh.K)
            return Orchestrator.from_config(dataclasses.replace(cfg, slsh=slsh, voting=voting))

    results = eval_bench.run_benchmark(args.dataset, queries, grid, nu, p, factory, seed=args.seed)
    eval_bench.write_results(args.out, results)
    print(f"{len(results)} grid points -> {args.out}")
    if grid:
        exact = eval_bench.exact_knn_batch(read_dataset(args.dataset), queries.features, grid[0].K)
        baseline = eval_bench.pknn_mcc(exact, queries.labels, VotingConfig(grid[0].K))
        print(f"PKNN MCC on the query set: {baseline:.4f}")
    if args.scaling:
        if args.cluster:
            print("error: --scaling needs --in-process", file=sys.stderr)
            return 2
        nus = [int(v) for v in args.scaling.split(",")]
        rows = eval_bench.strong_scaling(args.dataset, queries, grid[0], nus, p, args.seed)
        out = Path(args.out)
        scaling_path = out.with_name(out.stem + "_scaling.csv")
        eval_bench.write_scaling(scaling_path, rows)
        print(f"{len(rows)} scaling rows -> {scaling_path}")
    return 0


def _cmd_grid(args: argparse.Namespace) -> int:
    spec = eval_bench.reference_grid(args.d, args.k, args.master_seed)
    text = json.dumps(spec, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"{len(eval_bench.expand_grid(spec))} grid points -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dslsh", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    node = sub.add_parser("node", help="run one SLSH node service")
    node.add_argument("--listen", required=True, help="host:port to bind")
    node.add_argument("--workers", type=int, default=1, help="worker count p")
    node.set_defaults(func=_cmd_node)

    build = sub.add_parser("build", help="build tables on every node of a cluster")
    build.add_argument("--cluster", required=True, help="cluster config JSON")
    build.add_argument("--dataset", help="dataset CSV visible to all nodes")
    build.set_defaults(func=_cmd_build)

    orch = sub.add_parser("orchestrate", help="run the orchestrator query service")
    orch.add_argument("--cluster", required=True, help="cluster config JSON")
    orch.add_argument("--dataset", help="dataset CSV; builds the cluster before serving")
    orch.add_argument("--listen", help="host:port for query clients (default from config)")
    orch.add_argument("--no-build", action="store_true", help="assume nodes are already built")
    orch.set_defaults(func=_cmd_orchestrate)

    query = sub.add_parser("query", help="send queries to a running orchestrator")
    src = query.add_mutually_exclusive_group(required=True)
    src.add_argument("--vector", help="comma-separated feature values")
    src.add_argument("--file", help="CSV of vectors (dataset format or bare rows)")
    query.add_argument("--k", type=int, default=10)
    query.add_argument("--orchestrator", default="127.0.0.1:7600", help="orchestrator host:port")
    query.set_defaults(func=_cmd_query)

    gen = sub.add_parser("gen-data", help="write synthetic per-beat MAP waveforms")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--waveforms", type=int, required=True)
    gen.add_argument("--hours", type=float, required=True)
    gen.add_argument("--ahe-rate", type=float, default=0.05)
    gen.add_argument("--block", type=float, default=300.0, help="episode block length in seconds")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen_data)

    ext = sub.add_parser("extract", help="rolling-window extraction into a dataset CSV")
    ext.add_argument("--lag", type=float, required=True, help="lag window in seconds")
    ext.add_argument("--cond", type=float, required=True, help="condition window in seconds")
    ext.add_argument("--d", type=int, default=30, help="subwindows per lag window")
    ext.add_argument("--in", dest="in_dir", required=True)
    ext.add_argument("--out", required=True)
    ext.set_defaults(func=_cmd_extract)

    bench = sub.add_parser("bench", help="comparison-count benchmark over a parameter grid")
    bench.add_argument("--dataset", required=True)
    bench.add_argument("--queries", required=True, help="held-out query CSV (dataset format)")
    bench.add_argument("--grid", required=True, help="grid JSON")
    bench.add_argument("--out", required=True, help="results CSV")
    mode = bench.add_mutually_exclusive_group()
    mode.add_argument("--in-process", nargs=2, type=int, metavar=("NU", "P"))
    mode.add_argument("--cluster", help="cluster config JSON (network mode)")
    bench.add_argument("--scaling", help="comma-separated node counts for a strong-scaling table")
    bench.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    bench.set_defaults(func=_cmd_bench)

    grid = sub.add_parser("grid", help="write the reference parameter grid as JSON")
    grid.add_argument("--out", help="output path (default stdout)")
    grid.add_argument("--d", type=int, default=30)
    grid.add_argument("--k", type=int, default=10)
    grid.add_argument("--master-seed", type=int, default=0)
    grid.set_defaults(func=_cmd_grid)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose or args.command in ("node", "orchestrate") else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
