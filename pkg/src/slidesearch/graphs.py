"""Tissue graph construction.

A slide's patch grid is partitioned into connected sub-regions by greedy
agglomerative clustering: at every iteration, the cost of merging each pair
of spatially adjacent clusters is the within-cluster sum of squared
deviations of the merged member features, and the cheapest admissible pair
is merged. Each final cluster becomes one labeled tissue graph.

Graph container format (per slide, little-endian, extension ``.tgc``):

    magic   b"TGC1", u32 version
    header  u32 wsi_id length + utf-8 bytes, u32 n_graphs, u32 feature_dim
    graphs  { u32 id length + utf-8 bytes, u8 label, f64 tumor_fraction,
              u32 n_nodes, u32 n_edges,
              n_nodes x feature_dim f32 features,
              n_edges x (u32, u32) edges,
              n_nodes x u32 member patch ids }
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DataError
from .ingest import PatchAdjacency, PatchGrid, patch_adjacency

GRAPH_MAGIC = b"TGC1"
GRAPH_VERSION = 1
CANCEROUS_FRACTION = 0.10


class GraphLabel(Enum):
    CANCER_FREE = 0
    CANCEROUS = 1
    EXCLUDED = 2


def label_for_fraction(tumor_fraction: float) -> GraphLabel:
    """Cancerous above 10% tumor occupation, cancer-free at exactly zero,
    excluded in between."""
    if tumor_fraction > CANCEROUS_FRACTION:
        return GraphLabel.CANCEROUS
    if tumor_fraction == 0.0:
        return GraphLabel.CANCER_FREE
    return GraphLabel.EXCLUDED


@dataclass
class TissueGraph:
    """One connected sub-region: node features plus induced 4-adjacency."""

    graph_id: str
    wsi_id: str
    node_features: np.ndarray
    adjacency: PatchAdjacency
    member_patch_ids: list
    label: GraphLabel
    tumor_fraction: float

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]


@dataclass(frozen=True)
class MergeRecord:
    cluster_a: int
    cluster_b: int
    cost: float


@dataclass
class Partition:
    """Disjoint connected clusters covering all patches, plus the merge history."""

    clusters: list
    merge_log: list


def ees(features) -> float:
    """Sum of squared deviations from the centroid of the given row vectors."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 1:
        raise DataError("ees: empty input")
    dev = x - x.mean(axis=0)
    return float((dev * dev).sum())


def target_graph_count(n_patches: int, n_bar: int) -> int:
    """Desired cluster count: n_patches / n_bar, rounded half up, floored at 1.

    Integer arithmetic keeps the half-up rounding exact.
    """
    if n_patches < 1 or n_bar < 1:
        raise DataError(f"target_graph_count: need positive inputs, got ({n_patches}, {n_bar})")
    return max(1, (2 * n_patches + n_bar) // (2 * n_bar))


def _union_cost(grid: PatchGrid, members_a, members_b, linkage: str) -> float:
    merged = sorted(members_a + members_b)
    cost = ees(grid.features[merged])
    if linkage == "ward":
        cost -= ees(grid.features[sorted(members_a)]) + ees(grid.features[sorted(members_b)])
    return cost


def hac_partition(
    grid: PatchGrid,
    adjacency: PatchAdjacency,
    target: int,
    linkage: str = "union-ees",
) -> Partition:
    """Greedy adjacency-constrained agglomeration down to ``target`` clusters.

    Costs are recomputed from full cluster contents at every iteration.
    Ties break on the lowest (i, j) pair of current cluster ids; a merge of
    (i, j) keeps id i, so a cluster's id is its smallest member index.
    Stops early at the connected-component floor when no adjacent pair is
    left to merge. ``linkage="ward"`` switches the cost to the increase in
    the sum of squares instead of the merged total.
    """
    m = grid.n_patches
    if m < 1:
        raise DataError("hac_partition: empty grid")
    if adjacency.n != m:
        raise DataError(f"hac_partition: adjacency over {adjacency.n} patches, grid has {m}")
    if target > m:
        raise DataError(f"hac_partition: target {target} exceeds patch count {m}")
    if target < 1:
        raise DataError(f"hac_partition: target must be >= 1, got {target}")
    if linkage not in ("union-ees", "ward"):
        raise DataError(f"hac_partition: unknown linkage {linkage!r}")

    clusters = {i: [i] for i in range(m)}
    neighbors = {i: set() for i in range(m)}
    for i, j in adjacency.pairs:
        neighbors[i].add(j)
        neighbors[j].add(i)

    merge_log = []
    while len(clusters) > target:
        best = None
        for i in sorted(clusters):
            for j in sorted(neighbors[i]):
                if j <= i:
                    continue
                cost = _union_cost(grid, clusters[i], clusters[j], linkage)
                if best is None or cost < best[0] or (cost == best[0] and (i, j) < best[1:]):
                    best = (cost, i, j)
        if best is None:
            break  # disconnected: stop at the component floor
        cost, i, j = best
        clusters[i] = sorted(clusters[i] + clusters[j])
        neighbors[i] |= neighbors[j]
        neighbors[i].discard(i)
        neighbors[i].discard(j)
        for k in neighbors.pop(j):
            k_set = neighbors.get(k)
            if k_set is None:
                continue
            k_set.discard(j)
            if k != i:
                k_set.add(i)
        del clusters[j]
        merge_log.append(MergeRecord(cluster_a=i, cluster_b=j, cost=cost))

    ordered = [clusters[i] for i in sorted(clusters)]
    return Partition(clusters=ordered, merge_log=merge_log)


def extract_graphs(grid: PatchGrid, adjacency: PatchAdjacency, partition: Partition) -> list:
    """One labeled tissue graph per cluster, nodes in ascending patch order."""
    covered = sorted(i for cluster in partition.clusters for i in cluster)
    if covered != list(range(grid.n_patches)):
        raise DataError(
            f"extract_graphs: partition covers {len(covered)} patches, grid has {grid.n_patches}"
        )
    graphs = []
    for k, members in enumerate(partition.clusters):
        members = sorted(members)
        local = {p: idx for idx, p in enumerate(members)}
        member_set = set(members)
        pairs = frozenset(
            (min(local[a], local[b]), max(local[a], local[b]))
            for a, b in adjacency.pairs
            if a in member_set and b in member_set
        )
        fraction = float(np.mean(grid.tumor_ratio[members]))
        graphs.append(
            TissueGraph(
                graph_id=f"{grid.wsi_id}/g{k:03d}",
                wsi_id=grid.wsi_id,
                node_features=grid.features[members].copy(),
                adjacency=PatchAdjacency(n=len(members), pairs=pairs),
                member_patch_ids=list(members),
                label=label_for_fraction(fraction),
                tumor_fraction=fraction,
            )
        )
    return graphs


def build_wsi_graphs(grid: PatchGrid, n_bar: int, linkage: str = "union-ees") -> list:
    """Full per-slide path: adjacency, target count, partition, extraction."""
    adjacency = patch_adjacency(grid)
    target = min(target_graph_count(grid.n_patches, n_bar), grid.n_patches)
    partition = hac_partition(grid, adjacency, target, linkage=linkage)
    return extract_graphs(grid, adjacency, partition)


def save_graphs(path, wsi_id: str, graphs: list) -> None:
    if not graphs:
        raise DataError(f"save_graphs: no graphs for {wsi_id}")
    feature_dim = graphs[0].feature_dim
    out = bytearray()
    out += GRAPH_MAGIC
    out += struct.pack("<I", GRAPH_VERSION)
    wsi_bytes = wsi_id.encode("utf-8")
    out += struct.pack("<I", len(wsi_bytes)) + wsi_bytes
    out += struct.pack("<II", len(graphs), feature_dim)
    for g in graphs:
        if g.feature_dim != feature_dim:
            raise DataError(f"save_graphs: mixed feature dims in {wsi_id}")
        gid = g.graph_id.encode("utf-8")
        edges = sorted(g.adjacency.pairs)
        out += struct.pack("<I", len(gid)) + gid
        out += struct.pack("<Bd", g.label.value, g.tumor_fraction)
        out += struct.pack("<II", g.n_nodes, len(edges))
        out += g.node_features.astype("<f4").tobytes()
        out += np.asarray(edges, dtype="<u4").tobytes()
        out += np.asarray(g.member_patch_ids, dtype="<u4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_graphs(path) -> list:
    path = Path(path)
    raw = path.read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise DataError(f"{path}: truncated at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != GRAPH_MAGIC:
        raise DataError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != GRAPH_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    (id_len,) = struct.unpack("<I", take(4))
    wsi_id = bytes(take(id_len)).decode("utf-8")
    n_graphs, feature_dim = struct.unpack("<II", take(8))

    graphs = []
    for _ in range(n_graphs):
        (gid_len,) = struct.unpack("<I", take(4))
        graph_id = bytes(take(gid_len)).decode("utf-8")
        label_value, fraction = struct.unpack("<Bd", take(9))
        n_nodes, n_edges = struct.unpack("<II", take(8))
        feats = np.frombuffer(take(n_nodes * feature_dim * 4), dtype="<f4")
        feats = feats.astype(np.float64).reshape(n_nodes, feature_dim)
        edges = np.frombuffer(take(n_edges * 8), dtype="<u4").reshape(n_edges, 2)
        members = np.frombuffer(take(n_nodes * 4), dtype="<u4")
        pairs = frozenset((int(a), int(b)) for a, b in edges)
        graphs.append(
            TissueGraph(
                graph_id=graph_id,
                wsi_id=wsi_id,
                node_features=feats,
                adjacency=PatchAdjacency(n=n_nodes, pairs=pairs),
                member_patch_ids=[int(v) for v in members],
                label=GraphLabel(label_value),
                tumor_fraction=float(fraction),
            )
        )
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes")
    return graphs


def load_graph_dir(directory) -> list:
    """All tissue graphs from every ``.tgc`` file in a directory, sorted by file name."""
    directory = Path(directory)
    files = sorted(directory.glob("*.tgc"))
    if not files:
        raise DataError(f"{directory}: no .tgc graph files")
    graphs = []
    for f in files:
        graphs.extend(load_graphs(f))
    return graphs
