"""End-to-end orchestration: generate, build graphs, train, index, evaluate.

Stages run in dependency order and are idempotent: each stage writes a
content-hash stamp of its inputs and is skipped when the stamp still
matches and its outputs exist. All randomness derives from the single
top-level seed via labeled per-stage streams.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import replace
from pathlib import Path

from . import index as index_mod
from . import metrics as metrics_mod
from . import report
from .config import PipelineConfig, derive_seed
from .errors import ConfigError, DataError
from .graphs import GraphLabel, build_wsi_graphs, load_graph_dir, save_graphs
from .ingest import SyntheticSpec, generate_synthetic_wsi, load_patch_grid, save_patch_grid, write_manifest
from .model import binarize, encode_graph, load_checkpoint, save_checkpoint
from .train import train as train_model

logger = logging.getLogger(__name__)


def _digest_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _digest_files(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _stamp_matches(stamp_path: Path, digest: str, outputs) -> bool:
    if not stamp_path.is_file():
        return False
    if stamp_path.read_text().strip() != digest:
        return False
    return all(Path(o).exists() for o in outputs)


def _write_stamp(stamp_path: Path, digest: str) -> None:
    stamp_path.parent.mkdir(parents=True, exist_ok=True)
    stamp_path.write_text(digest + "\n")


def _gen_spec(cfg: PipelineConfig) -> SyntheticSpec:
    return SyntheticSpec(
        rows=cfg.gen_rows,
        cols=cfg.gen_cols,
        feature_dim=cfg.gen_feature_dim,
        blobs=cfg.gen_blobs,
        delta=cfg.gen_delta,
        sigma=cfg.gen_sigma,
        blob_min=cfg.gen_blob_min,
        blob_max=cfg.gen_blob_max,
    )


def stage_generate(cfg: PipelineConfig) -> None:
    """Synthesize the database and query feature sets."""
    cfg.require_paths("features_dir")
    root = Path(cfg.features_dir)
    spec = _gen_spec(cfg)
    digest = _digest_text(f"gen|{spec}|{cfg.seed}|{cfg.gen_db_wsis}|{cfg.gen_query_wsis}")
    stamp = root / ".gen.stamp"
    outputs = [root / "db", root / "query"]
    if _stamp_matches(stamp, digest, outputs):
        logger.info("generate: up to date, skipping")
        return
    for split, count in (("db", cfg.gen_db_wsis), ("query", cfg.gen_query_wsis)):
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        manifest = {}
        for i in range(count):
            grid = generate_synthetic_wsi(spec, derive_seed(cfg.seed, f"gen/{split}/{i}"))
            grid.wsi_id = f"{split}-{i:03d}"
            name = f"{grid.wsi_id}.pgf"
            save_patch_grid(grid, split_dir / name)
            manifest[name] = grid.wsi_id
        write_manifest(split_dir, manifest)
        logger.info("generate: wrote %d slides to %s", count, split_dir)
    _write_stamp(stamp, digest)


def _build_graph_split(features_dir: Path, out_dir: Path, n_bar: int, linkage: str) -> None:
    files = sorted(features_dir.glob("*.pgf"))
    if not files:
        raise DataError(f"{features_dir}: no .pgf feature files")
    out_dir.mkdir(parents=True, exist_ok=True)
    for f in files:
        grid = load_patch_grid(f)
        graphs = build_wsi_graphs(grid, n_bar, linkage=linkage)
        save_graphs(out_dir / f"{f.stem}.tgc", grid.wsi_id, graphs)
    logger.info("graphs: %s -> %s (%d slides)", features_dir, out_dir, len(files))


def stage_graphs(cfg: PipelineConfig) -> None:
    """Partition every slide into tissue graphs at the configured granularity."""
    cfg.require_paths("features_dir", "graphs_dir")
    root = Path(cfg.features_dir)
    out = Path(cfg.graphs_dir)
    inputs = list(root.glob("*/*.pgf")) + list(root.glob("*/manifest.txt"))
    digest = _digest_text(f"graphs|{cfg.n_bar}|{cfg.linkage}|" + _digest_files(inputs))
    stamp = out / ".graphs.stamp"
    outputs = [out / "db", out / "query"]
    if _stamp_matches(stamp, digest, outputs):
        logger.info("graphs: up to date, skipping")
        return
    for split in ("db", "query"):
        split_dir = root / split
        if split_dir.is_dir():
            _build_graph_split(split_dir, out / split, cfg.n_bar, cfg.linkage)
    _write_stamp(stamp, digest)


def stage_train(cfg: PipelineConfig) -> None:
    """Fit the encoder on the database graphs and write the checkpoint."""
    cfg.require_paths("graphs_dir", "checkpoint")
    graph_files = sorted((Path(cfg.graphs_dir) / "db").glob("*.tgc"))
    train_cfg = replace(cfg.train, seed=derive_seed(cfg.seed, "train"))
    digest = _digest_text(f"train|{train_cfg}|" + _digest_files(graph_files))
    ckpt = Path(cfg.checkpoint)
    stamp = Path(str(ckpt) + ".stamp")
    if _stamp_matches(stamp, digest, [ckpt]):
        logger.info("train: up to date, skipping")
        return
    graphs = load_graph_dir(Path(cfg.graphs_dir) / "db")
    params, history = train_model(graphs, train_cfg)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, ckpt)
    if cfg.reports_dir:
        reports = Path(cfg.reports_dir)
        reports.mkdir(parents=True, exist_ok=True)
        write_history_csv(reports / "history.csv", history)
        report.render_history(history, reports / "history.png")
    logger.info("train: %d epochs, final loss %.6f", len(history), history[-1])
    _write_stamp(stamp, digest)


def write_history_csv(path, history) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(history, 1):
            writer.writerow([epoch, repr(float(loss))])


def stage_index(cfg: PipelineConfig) -> None:
    """Encode all database graphs into the binary code index."""
    cfg.require_paths("graphs_dir", "checkpoint", "index")
    graph_files = sorted((Path(cfg.graphs_dir) / "db").glob("*.tgc"))
    digest = _digest_text("index|" + _digest_files(graph_files + [Path(cfg.checkpoint)]))
    out = Path(cfg.index)
    stamp = Path(str(out) + ".stamp")
    if _stamp_matches(stamp, digest, [out]):
        logger.info("index: up to date, skipping")
        return
    params = load_checkpoint(cfg.checkpoint)
    graphs = load_graph_dir(Path(cfg.graphs_dir) / "db")
    idx = index_mod.build_index(graphs, params)
    out.parent.mkdir(parents=True, exist_ok=True)
    index_mod.save_index(idx, out)
    logger.info("index: %d codes -> %s", len(idx), out)
    _write_stamp(stamp, digest)


def run_queries(idx, params, query_graphs, depth: int) -> tuple:
    """Rank the database for every non-excluded query graph."""
    queries = [g for g in query_graphs if g.label != GraphLabel.EXCLUDED]
    if not queries:
        raise DataError("evaluation: no non-excluded query graphs")
    results = []
    for g in queries:
        y, _ = encode_graph(g, params)
        code = index_mod.pack_code(binarize(y))
        results.append(index_mod.query(idx, code, depth, query_id=g.graph_id))
    return results, [g.label for g in queries]


def stage_eval(cfg: PipelineConfig) -> None:
    """Compute retrieval metrics and write the report files."""
    cfg.require_paths("graphs_dir", "checkpoint", "index", "reports_dir")
    reports = Path(cfg.reports_dir)
    query_files = sorted((Path(cfg.graphs_dir) / "query").glob("*.tgc"))
    digest = _digest_text(
        f"eval|{cfg.n_bar}|{cfg.ap_k}|{cfg.eval_depth}|"
        + _digest_files(query_files + [Path(cfg.index), Path(cfg.checkpoint)])
    )
    stamp = reports / ".eval.stamp"
    outputs = [reports / "metrics.csv", reports / "pr_curve.csv"]
    if _stamp_matches(stamp, digest, outputs):
        logger.info("eval: up to date, skipping")
        return
    idx = index_mod.load_index(cfg.index)
    params = load_checkpoint(cfg.checkpoint)
    query_graphs = load_graph_dir(Path(cfg.graphs_dir) / "query")
    depth = min(cfg.eval_depth, len(idx)) if cfg.eval_depth else len(idx)
    results, query_labels = run_queries(idx, params, query_graphs, depth)
    table = metrics_mod.relevance_table(results, query_labels, [e.label for e in idx.entries])
    ap50 = metrics_mod.average_precision_at_k(table, min(cfg.ap_k, table.depth))
    map_value = metrics_mod.mean_average_precision(table)
    curve = metrics_mod.interpolated_pr_curve(table)
    reports.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_metrics_csv(reports / "metrics.csv", [(cfg.n_bar, ap50, map_value)])
    metrics_mod.write_pr_curve_csv(reports / "pr_curve.csv", curve)
    report.render_pr_curve(curve, reports / "pr_curve.png")
    logger.info("eval: AP%d %.4f, mAP %.4f -> %s", cfg.ap_k, ap50, map_value, reports)
    _write_stamp(stamp, digest)


_STAGES = (
    ("generate", stage_generate),
    ("graphs", stage_graphs),
    ("train", stage_train),
    ("index", stage_index),
    ("eval", stage_eval),
)


def run_pipeline(cfg: PipelineConfig) -> None:
    """All stages in dependency order; validates the config up front."""
    cfg.validate()
    cfg.require_paths("features_dir", "graphs_dir", "checkpoint", "index", "reports_dir")
    for name, stage in _STAGES:
        try:
            stage(cfg)
        except ConfigError:
            raise
        except Exception as exc:
            raise type(exc)(f"stage {name}: {exc}") from exc
