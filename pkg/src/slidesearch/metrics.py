"""Retrieval evaluation: precision at k, mean average precision, PR curves.

Relevance is binary: a returned item is relevant when it shares the query's
label. Queries with no relevant database item are skipped (with a warning)
wherever a per-query normalization would divide by zero.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

RECALL_GRID = np.round(np.linspace(0.0, 1.0, 21), 2)


@dataclass
class RelevanceTable:
    """0/1 relevance flags, one row per query over its ranked results."""

    r: np.ndarray  # n_queries x depth, int8
    query_labels: list
    db_labels: list

    @property
    def n_queries(self) -> int:
        return self.r.shape[0]

    @property
    def depth(self) -> int:
        return self.r.shape[1]


def relevance_table(results, query_labels, db_labels) -> RelevanceTable:
    """Build the table from ranked retrieval results.

    ``results`` are per-query ranked lists of items carrying labels; every
    ranking must reach the same depth.
    """
    rows = []
    for res, qlab in zip(results, query_labels):
        rows.append([1 if item.label == qlab else 0 for item in res.ranked])
    depths = {len(row) for row in rows}
    if len(depths) > 1:
        raise DataError(f"relevance_table: rankings have mixed depths {sorted(depths)}")
    return RelevanceTable(
        r=np.asarray(rows, dtype=np.int8),
        query_labels=list(query_labels),
        db_labels=list(db_labels),
    )


def precision_at_k(relevance_row, k: int) -> float:
    """Fraction of the first k results that are relevant.

    >>> precision_at_k([1, 0, 1, 0], 4)
    0.5
    """
    row = np.asarray(relevance_row)
    if k < 1 or k > row.size:
        raise DataError(f"precision_at_k: k={k} out of range for depth {row.size}")
    return float(row[:k].sum() / k)


def average_precision_at_k(table: RelevanceTable, k: int) -> float:
    """Mean of per-query precision at k over all queries."""
    if table.n_queries == 0:
        raise DataError("average_precision_at_k: empty query set")
    if k < 1 or k > table.depth:
        raise DataError(f"average_precision_at_k: k={k} out of range for depth {table.depth}")
    return float(np.mean([precision_at_k(row, k) for row in table.r]))


def _queries_with_relevant(table: RelevanceTable) -> list:
    keep = []
    for i, row in enumerate(table.r):
        if row.sum() > 0:
            keep.append(i)
        else:
            warnings.warn(f"query {i} has no relevant database item; skipped")
    if not keep:
        raise DataError("no query has any relevant database item")
    return keep


def mean_average_precision(table: RelevanceTable) -> float:
    """Mean over queries of sum_k p(k) * r_k / sum_k r_k at full ranking depth."""
    if table.n_queries == 0:
        raise DataError("mean_average_precision: empty query set")
    per_query = []
    for i in _queries_with_relevant(table):
        row = table.r[i].astype(np.float64)
        ks = np.arange(1, row.size + 1)
        precisions = np.cumsum(row) / ks
        per_query.append(float((precisions * row).sum() / row.sum()))
    return float(np.mean(per_query))


def interpolated_pr_curve(table: RelevanceTable) -> list:
    """Interpolated precision-recall points on a fixed recall grid.

    Per query, precision at recall level g is the maximum precision at any
    rank whose recall is >= g; values are averaged over queries. Returns
    [(recall, precision), ...] over {0.0, 0.05, ..., 1.0}.
    """
    keep = _queries_with_relevant(table)
    curves = np.empty((len(keep), RECALL_GRID.size))
    for out_row, i in enumerate(keep):
        row = table.r[i].astype(np.float64)
        ks = np.arange(1, row.size + 1)
        precisions = np.cumsum(row) / ks
        recalls = np.cumsum(row) / row.sum()
        for j, g in enumerate(RECALL_GRID):
            mask = recalls >= g - 1e-12
            curves[out_row, j] = precisions[mask].max() if mask.any() else 0.0
    mean_curve = curves.mean(axis=0)
    return [(float(g), float(p)) for g, p in zip(RECALL_GRID, mean_curve)]


def write_metrics_csv(path, rows) -> None:
    """``metrics.csv``: one (n_bar, AP50, mAP) row per granularity setting."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_bar", "AP50", "mAP"])
        for n_bar, ap50, map_value in rows:
            writer.writerow([n_bar, repr(float(ap50)), repr(float(map_value))])


def write_pr_curve_csv(path, points) -> None:
    """``pr_curve.csv``: (recall, precision) rows on the fixed grid."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recall", "precision"])
        for recall, precision in points:
            writer.writerow([repr(float(recall)), repr(float(precision))])
