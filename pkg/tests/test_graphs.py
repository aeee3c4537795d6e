from collections import deque

import numpy as np
import pytest

from slidesearch.errors import DataError
from slidesearch.graphs import (
    GraphLabel,
    ees,
    extract_graphs,
    hac_partition,
    label_for_fraction,
    load_graphs,
    save_graphs,
    target_graph_count,
)
from slidesearch.ingest import PatchAdjacency, patch_adjacency
from tests.test_ingest import grid_from_positions


# --- independent reference: a literal transcription of the greedy
# adjacency-constrained agglomeration, kept separate from the library path.


def reference_agglomerate(features, dense_adj, target):
    """Clusters keyed by id; merge cheapest adjacent pair until target."""
    m = features.shape[0]
    clusters = {i: {i} for i in range(m)}
    while len(clusters) > target:
        candidates = []
        ids = sorted(clusters)
        for ai in range(len(ids)):
            for bi in range(ai + 1, len(ids)):
                i, j = ids[ai], ids[bi]
                adjacent = any(dense_adj[p, q] == 1 for p in clusters[i] for q in clusters[j])
                if not adjacent:
                    continue
                members = sorted(clusters[i] | clusters[j])
                pts = features[members]
                centroid = pts.sum(axis=0) / len(members)
                dev = pts - centroid
                cost = float((dev * dev).sum())
                candidates.append((cost, i, j))
        if not candidates:
            break
        cost, i, j = min(candidates)
        clusters[i] = clusters[i] | clusters[j]
        del clusters[j]
    return sorted(sorted(c) for c in clusters.values())


def random_grid(rng, max_side=3):
    while True:
        rows, cols = int(rng.integers(1, max_side + 1)), int(rng.integers(1, max_side + 1))
        cells = [(r, c) for r in range(rows) for c in range(cols)]
        keep = [cell for cell in cells if rng.random() < 0.8]
        if keep:
            break
    feats = rng.uniform(-1, 1, size=(len(keep), int(rng.integers(1, 4))))
    return grid_from_positions(keep, feats, [0.0] * len(keep), rows, cols)


class TestEes:
    def test_single_vector_is_zero(self):
        assert ees(np.array([[3.0, -1.0, 2.0]])) == 0.0

    def test_identical_vectors_are_zero(self):
        assert ees(np.array([[1.5, 2.5], [1.5, 2.5]])) == 0.0

    def test_hand_computed(self):
        # centroid (1, 0); deviations 1 + 1
        assert ees(np.array([[0.0, 0.0], [2.0, 0.0]])) == pytest.approx(2.0, abs=0)

    def test_empty_rejected(self):
        with pytest.raises(DataError, match="empty"):
            ees(np.zeros((0, 3)))


class TestTargetGraphCount:
    def test_exact_division(self):
        assert target_graph_count(100, 50) == 2

    def test_clamped_floor(self):
        assert target_graph_count(10, 100) == 1

    def test_half_rounds_up(self):
        assert target_graph_count(125, 50) == 3
        assert target_graph_count(75, 50) == 2
        assert target_graph_count(3, 2) == 2


class TestHacPartition:
    def test_identical_features_merge_to_one(self):
        grid = grid_from_positions(
            [[0, 0], [0, 1], [1, 0], [1, 1]], np.ones((4, 3)), [0.0] * 4, 2, 2
        )
        part = hac_partition(grid, patch_adjacency(grid), target=1)
        assert part.clusters == [[0, 1, 2, 3]]
        assert all(m.cost == 0.0 for m in part.merge_log)

    def test_strip_splits_by_feature_step(self):
        grid = grid_from_positions(
            [[0, 0], [0, 1], [0, 2], [0, 3]],
            np.array([[0.0], [0.0], [10.0], [10.0]]),
            [0.0] * 4,
            1,
            4,
        )
        adj = patch_adjacency(grid)
        part = hac_partition(grid, adj, target=2)
        assert part.clusters == [[0, 1], [2, 3]]
        # agreement with the literal reference
        assert reference_agglomerate(grid.features, adj.to_dense(), 2) == part.clusters
        # and with exhaustive search over connected 2-cluster splits of the strip
        splits = [([0], [1, 2, 3]), ([0, 1], [2, 3]), ([0, 1, 2], [3])]
        totals = [ees(grid.features[a]) + ees(grid.features[b]) for a, b in splits]
        assert splits[int(np.argmin(totals))] == ([0, 1], [2, 3])

    def test_disconnected_components_floor(self):
        # two tissue islands: target 1 is unreachable, stops at 2 clusters
        grid = grid_from_positions(
            [[0, 0], [0, 1], [0, 3], [0, 4]], np.zeros((4, 2)), [0.0] * 4, 1, 5
        )
        part = hac_partition(grid, patch_adjacency(grid), target=1)
        assert part.clusters == [[0, 1], [2, 3]]

    def test_matches_reference_on_random_grids(self):
        rng = np.random.default_rng(2024)
        for _ in range(60):
            grid = random_grid(rng)
            adj = patch_adjacency(grid)
            target = int(rng.integers(1, grid.n_patches + 1))
            part = hac_partition(grid, adj, target)
            assert part.clusters == reference_agglomerate(grid.features, adj.to_dense(), target)

    def test_merge_log_respects_adjacency(self):
        rng = np.random.default_rng(7)
        grid = random_grid(rng, max_side=4)
        adj = patch_adjacency(grid)
        part = hac_partition(grid, adj, target=1)
        dense = adj.to_dense()
        clusters = {i: {i} for i in range(grid.n_patches)}
        for rec in part.merge_log:
            a, b = clusters[rec.cluster_a], clusters[rec.cluster_b]
            assert any(dense[p, q] == 1 for p in a for q in b)
            # costs are the merged-union spread, recomputed fresh
            assert rec.cost == pytest.approx(ees(grid.features[sorted(a | b)]), abs=0)
            clusters[rec.cluster_a] = a | b
            del clusters[rec.cluster_b]

    def test_clusters_stay_connected(self):
        rng = np.random.default_rng(99)
        for _ in range(20):
            grid = random_grid(rng, max_side=4)
            adj = patch_adjacency(grid)
            neighbors = adj.neighbors()
            part = hac_partition(grid, adj, target=max(1, grid.n_patches // 3))
            for cluster in part.clusters:
                inside = set(cluster)
                seen = {cluster[0]}
                queue = deque([cluster[0]])
                while queue:
                    p = queue.popleft()
                    for q in neighbors[p]:
                        if q in inside and q not in seen:
                            seen.add(q)
                            queue.append(q)
                assert seen == inside

    def test_ward_linkage_differs_but_partitions(self):
        rng = np.random.default_rng(5)
        grid = random_grid(rng, max_side=3)
        adj = patch_adjacency(grid)
        part = hac_partition(grid, adj, target=1, linkage="ward")
        assert sorted(i for c in part.clusters for i in c) == list(range(grid.n_patches))

    def test_target_above_patch_count_rejected(self):
        grid = grid_from_positions([[0, 0]], np.zeros((1, 1)), [0.0], 1, 1)
        with pytest.raises(DataError, match="target 2 exceeds"):
            hac_partition(grid, patch_adjacency(grid), target=2)


class TestLabels:
    def test_thresholds(self):
        assert label_for_fraction(0.0) is GraphLabel.CANCER_FREE
        assert label_for_fraction(0.05) is GraphLabel.EXCLUDED
        assert label_for_fraction(0.10) is GraphLabel.EXCLUDED
        assert label_for_fraction(0.100001) is GraphLabel.CANCEROUS
        assert label_for_fraction(1.0) is GraphLabel.CANCEROUS


class TestExtractGraphs:
    def make(self, ratios):
        n = len(ratios)
        grid = grid_from_positions(
            [[0, i] for i in range(n)], np.arange(n * 2, dtype=float).reshape(n, 2), ratios, 1, n
        )
        return grid, patch_adjacency(grid)

    def test_singleton_cancer_free(self):
        grid, adj = self.make([0.0])
        graphs = extract_graphs(grid, adj, hac_partition(grid, adj, 1))
        assert len(graphs) == 1
        g = graphs[0]
        assert g.n_nodes == 1
        assert g.adjacency.pairs == frozenset()
        assert g.label is GraphLabel.CANCER_FREE

    def test_half_tumor_is_cancerous(self):
        grid, adj = self.make([1.0, 1.0, 0.0, 0.0])
        graphs = extract_graphs(grid, adj, hac_partition(grid, adj, 1))
        assert graphs[0].tumor_fraction == pytest.approx(0.5, abs=0)
        assert graphs[0].label is GraphLabel.CANCEROUS

    def test_small_fraction_excluded(self):
        grid, adj = self.make([0.2, 0.0, 0.0, 0.0])
        graphs = extract_graphs(grid, adj, hac_partition(grid, adj, 1))
        assert graphs[0].tumor_fraction == pytest.approx(0.05)
        assert graphs[0].label is GraphLabel.EXCLUDED

    def test_patch_count_preserved_and_reindexed(self):
        rng = np.random.default_rng(31)
        grid = random_grid(rng, max_side=4)
        adj = patch_adjacency(grid)
        part = hac_partition(grid, adj, target=max(1, grid.n_patches // 2))
        graphs = extract_graphs(grid, adj, part)
        assert sum(g.n_nodes for g in graphs) == grid.n_patches
        for g in graphs:
            assert sorted(set(g.member_patch_ids)) == g.member_patch_ids
            np.testing.assert_array_equal(
                g.node_features, grid.features[g.member_patch_ids]
            )
            for i, j in g.adjacency.pairs:
                assert 0 <= i < j < g.n_nodes

    def test_partition_mismatch_rejected(self):
        grid, adj = self.make([0.0, 0.0])
        part = hac_partition(grid, adj, 1)
        grid2, adj2 = self.make([0.0, 0.0, 0.0])
        with pytest.raises(DataError, match="partition covers"):
            extract_graphs(grid2, adj2, part)


class TestGraphContainer:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        grid = random_grid(rng, max_side=4)
        adj = patch_adjacency(grid)
        graphs = extract_graphs(grid, adj, hac_partition(grid, adj, 2))
        path = tmp_path / "w.tgc"
        save_graphs(path, grid.wsi_id, graphs)
        back = load_graphs(path)
        assert len(back) == len(graphs)
        for a, b in zip(graphs, back):
            assert a.graph_id == b.graph_id
            assert a.wsi_id == b.wsi_id
            assert a.label is b.label
            assert a.tumor_fraction == b.tumor_fraction
            assert a.member_patch_ids == b.member_patch_ids
            assert a.adjacency.pairs == b.adjacency.pairs
            np.testing.assert_array_equal(
                a.node_features.astype(np.float32), b.node_features.astype(np.float32)
            )

    def test_truncated_rejected(self, tmp_path):
        rng = np.random.default_rng(8)
        grid = random_grid(rng, max_side=3)
        adj = patch_adjacency(grid)
        graphs = extract_graphs(grid, adj, hac_partition(grid, adj, 1))
        path = tmp_path / "w.tgc"
        save_graphs(path, grid.wsi_id, graphs)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 5])
        with pytest.raises(DataError, match="truncated"):
            load_graphs(path)
