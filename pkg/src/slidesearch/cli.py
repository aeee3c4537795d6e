"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Errors are reported on stderr as a single machine-parsable line:
``error kind=<config|data|numeric> msg="..."``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import index as index_mod
from . import pipeline
from .config import PipelineConfig, derive_seed, parse_kv_file
from .errors import ConfigError, DataError, NumericError, SlideSearchError
from .graphs import GraphLabel, load_graphs
from .ingest import SyntheticSpec, generate_synthetic_wsi, read_manifest, save_patch_grid, write_manifest
from .model import binarize, encode_graph, load_checkpoint
from .train import TrainConfig, train as train_model

logger = logging.getLogger("slidesearch")


def _cmd_ingest_gen(args) -> int:
    spec = SyntheticSpec.from_mapping(parse_kv_file(args.spec))
    grid = generate_synthetic_wsi(spec, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_patch_grid(grid, out)
    manifest = read_manifest(out.parent)
    manifest[out.name] = grid.wsi_id
    write_manifest(out.parent, manifest)
    logger.info("wrote %s (%d patches, dim %d)", out, grid.n_patches, grid.feature_dim)
    return 0


def _cmd_graphs_build(args) -> int:
    pipeline._build_graph_split(Path(args.features), Path(args.out), args.nbar, args.linkage)
    return 0


def _cmd_train(args) -> int:
    kv = parse_kv_file(args.config) if args.config else {}
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    cfg = TrainConfig.from_mapping(kv)
    from .graphs import load_graph_dir
    from .model import save_checkpoint

    graphs = load_graph_dir(args.graphs)
    params, history = train_model(graphs, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out)
    history_path = Path(args.history) if args.history else Path(str(out) + ".history.csv")
    pipeline.write_history_csv(history_path, history)
    logger.info("trained %d epochs, final loss %.6f, checkpoint %s", len(history), history[-1], out)
    return 0


def _cmd_index_build(args) -> int:
    from .graphs import load_graph_dir

    params = load_checkpoint(args.checkpoint)
    graphs = load_graph_dir(args.graphs)
    idx = index_mod.build_index(graphs, params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    index_mod.save_index(idx, out)
    logger.info("indexed %d graphs -> %s", len(idx), out)
    return 0


def _cmd_index_query(args) -> int:
    idx = index_mod.load_index(args.index)
    params = load_checkpoint(args.checkpoint)
    graphs = load_graphs(args.code_from)
    if args.graph_id:
        graphs = [g for g in graphs if g.graph_id == args.graph_id]
        if not graphs:
            raise DataError(f"graph id {args.graph_id!r} not found in {args.code_from}")
    graph = graphs[0]
    y, _ = encode_graph(graph, params)
    result = index_mod.query(idx, index_mod.pack_code(binarize(y)), args.k, query_id=graph.graph_id)
    print("rank\tgraph_id\tdistance\tlabel")
    for rank, item in enumerate(result.ranked, 1):
        print(f"{rank}\t{item.graph_id}\t{item.distance}\t{item.label.name}")
    return 0


def _cmd_index_bench(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(derive_seed(seed, "bench"))
    n_bytes = (args.bits + 7) // 8
    codes = rng.integers(0, 256, size=(args.size, n_bytes), dtype=np.uint8)
    if args.bits % 8:
        codes[:, -1] &= (1 << (args.bits % 8)) - 1
    entries = [
        index_mod.IndexEntry(
            graph_id=f"bench/g{i:06d}",
            wsi_id="bench",
            label=GraphLabel.CANCER_FREE,
            code=codes[i],
        )
        for i in range(args.size)
    ]
    idx = index_mod.BinaryCodeIndex(code_bits=args.bits, entries=entries)
    queries = rng.integers(0, 256, size=(args.queries, n_bytes), dtype=np.uint8)
    if args.bits % 8:
        queries[:, -1] &= (1 << (args.bits % 8)) - 1
    index_mod.query(idx, queries[0], args.k)  # warm up
    times = []
    for q in queries:
        start = time.perf_counter()
        index_mod.query(idx, q, args.k)
        times.append((time.perf_counter() - start) * 1e3)
    print(
        f"bench entries={args.size} bits={args.bits} queries={args.queries} "
        f"k={args.k} mean_ms={np.mean(times):.4f} max_ms={np.max(times):.4f}"
    )
    return 0


def _cmd_eval_run(args) -> int:
    from . import metrics as metrics_mod
    from . import report
    from .graphs import load_graph_dir

    idx = index_mod.load_index(args.index)
    params = load_checkpoint(args.checkpoint)
    query_graphs = load_graph_dir(args.query_graphs)
    depth = min(args.depth, len(idx)) if args.depth else len(idx)
    results, query_labels = pipeline.run_queries(idx, params, query_graphs, depth)
    table = metrics_mod.relevance_table(results, query_labels, [e.label for e in idx.entries])
    ap_k = metrics_mod.average_precision_at_k(table, min(args.k, table.depth))
    map_value = metrics_mod.mean_average_precision(table)
    curve = metrics_mod.interpolated_pr_curve(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_metrics_csv(out / "metrics.csv", [(args.nbar, ap_k, map_value)])
    metrics_mod.write_pr_curve_csv(out / "pr_curve.csv", curve)
    report.render_pr_curve(curve, out / "pr_curve.png")
    print(f"eval queries={table.n_queries} depth={table.depth} AP{args.k}={ap_k:.6f} mAP={map_value:.6f}")
    return 0


def _cmd_pipeline_all(args) -> int:
    kv = parse_kv_file(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        kv[key.strip()] = value.strip()
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    cfg = PipelineConfig.from_mapping(kv)
    pipeline.run_pipeline(cfg)
    print(f"pipeline done: reports in {cfg.reports_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slidesearch", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="top-level random seed")
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="feature-grid input").add_subparsers(
        dest="subcommand", required=True
    )
    gen = ingest.add_parser("gen", help="generate one synthetic slide")
    gen.add_argument("--spec", required=True, help="key=value synthetic spec file")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", required=True, help="output .pgf path")
    gen.set_defaults(func=_cmd_ingest_gen)

    graphs = sub.add_parser("graphs", help="tissue graph construction").add_subparsers(
        dest="subcommand", required=True
    )
    build = graphs.add_parser("build", help="partition feature grids into graphs")
    build.add_argument("--features", required=True, help="directory of .pgf files")
    build.add_argument("--nbar", type=int, required=True, help="desired mean nodes per graph")
    build.add_argument("--out", required=True, help="output directory for .tgc files")
    build.add_argument("--linkage", default="union-ees", choices=["union-ees", "ward"])
    build.set_defaults(func=_cmd_graphs_build)

    tr = sub.add_parser("train", help="train the graph hash encoder")
    tr.add_argument("--graphs", required=True, help="directory of training .tgc files")
    tr.add_argument("--config", default=argparse.SUPPRESS, help="key=value training config")
    tr.add_argument("--out", required=True, help="output checkpoint path")
    tr.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    tr.add_argument("--history", default=None, help="loss history CSV path")
    tr.set_defaults(func=_cmd_train)

    index_p = sub.add_parser("index", help="binary code index").add_subparsers(
        dest="subcommand", required=True
    )
    ib = index_p.add_parser("build", help="encode graphs into an index")
    ib.add_argument("--graphs", required=True)
    ib.add_argument("--checkpoint", required=True)
    ib.add_argument("--out", required=True)
    ib.set_defaults(func=_cmd_index_build)
    iq = index_p.add_parser("query", help="rank the database for one graph")
    iq.add_argument("--index", required=True)
    iq.add_argument("--checkpoint", required=True)
    iq.add_argument("--code-from", required=True, help=".tgc file holding the query graph")
    iq.add_argument("--graph-id", default=None, help="pick one graph from the file (default: first)")
    iq.add_argument("--k", type=int, default=10)
    iq.set_defaults(func=_cmd_index_query)
    ibench = index_p.add_parser("bench", help="latency of random-code queries")
    ibench.add_argument("--size", type=int, required=True)
    ibench.add_argument("--bits", type=int, default=48)
    ibench.add_argument("--queries", type=int, default=50)
    ibench.add_argument("--k", type=int, default=10)
    ibench.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    ibench.set_defaults(func=_cmd_index_bench)

    ev = sub.add_parser("eval", help="retrieval metrics").add_subparsers(
        dest="subcommand", required=True
    )
    er = ev.add_parser("run", help="evaluate queries against an index")
    er.add_argument("--index", required=True)
    er.add_argument("--checkpoint", required=True)
    er.add_argument("--query-graphs", required=True, help="directory of query .tgc files")
    er.add_argument("--out", required=True, help="reports directory")
    er.add_argument("--k", type=int, default=50, help="precision depth for the AP column")
    er.add_argument("--depth", type=int, default=0, help="ranking depth (0 = full database)")
    er.add_argument("--nbar", type=int, default=0, help="granularity tag for metrics.csv")
    er.set_defaults(func=_cmd_eval_run)

    pl = sub.add_parser("pipeline", help="end-to-end run").add_subparsers(
        dest="subcommand", required=True
    )
    pa = pl.add_parser("all", help="run every stage in order")
    pa.add_argument("--config", default=argparse.SUPPRESS, help="pipeline config file")
    pa.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    pa.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    pa.set_defaults(func=_cmd_pipeline_all)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f'error kind=config msg="{exc}"', file=sys.stderr)
        return 2
    except DataError as exc:
        print(f'error kind=data msg="{exc}"', file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f'error kind=numeric msg="{exc}"', file=sys.stderr)
        return 4
    except SlideSearchError as exc:
        print(f'error kind=data msg="{exc}"', file=sys.stderr)
        return 3
    except OSError as exc:
        print(f'error kind=data msg="{exc}"', file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
