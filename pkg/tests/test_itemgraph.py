"""Graph construction, topological-similarity pruning, and corruption."""

import math

import numpy as np
import pytest

from oracles import (
    dense_to_graph,
    graph_edge_set,
    knn_oracle,
    prune_oracle,
    random_graph,
    ts_set_oracle,
)
from toporec.itemgraph import (
    SparseGraph,
    build_knn_graph,
    corrupt_graph,
    fuse_graphs,
    graphs_equal,
    load_graph,
    random_prune,
    row_neighbors,
    save_graph,
    topological_similarity,
    tps_prune,
)


def test_sparse_graph_validation():
    g = SparseGraph(3, [0, 1, 2, 3], [1, 2, 0], [1.0, 1.0, 1.0])
    g.validate()
    assert g.nnz == 3
    assert g.out_degree(0) == 1
    assert g.out_degrees().tolist() == [1, 1, 1]

    with pytest.raises(ValueError, match="indptr length"):
        SparseGraph(3, [0, 1], [1], [1.0]).validate()
    with pytest.raises(ValueError, match="cover"):
        SparseGraph(2, [0, 1, 3], [1, 0], [1.0, 1.0]).validate()
    with pytest.raises(ValueError, match="out of range"):
        SparseGraph(2, [0, 1, 2], [1, 5], [1.0, 1.0]).validate()
    with pytest.raises(ValueError, match="non-negative"):
        SparseGraph(2, [0, 1, 2], [1, 0], [1.0, -1.0]).validate()
    with pytest.raises(ValueError, match="unsorted or duplicate"):
        SparseGraph(2, [0, 2, 2], [1, 1], [1.0, 1.0]).validate()


def test_from_rows_sorts_and_roundtrips():
    g = SparseGraph.from_rows(3, [([2, 1], [0.5, 0.25]), ([], []), ([0], [1.0])])
    cols, w = g.row(0)
    assert cols.tolist() == [1, 2]
    assert w.tolist() == [0.25, 0.5]
    dense = g.to_dense()
    assert dense[0, 1] == 0.25 and dense[0, 2] == 0.5 and dense[2, 0] == 1.0
    src, dst, wts = g.to_edges()
    rebuilt = SparseGraph.from_edges(3, src, dst, wts)
    assert graphs_equal(g, rebuilt)
    assert not graphs_equal(g, SparseGraph.from_rows(3, [([1], [1.0]), ([], []), ([], [])]))


def test_row_neighbors_includes_self():
    g = SparseGraph.from_rows(4, [([1, 2, 3], [1, 1, 1]), ([], []), ([0], [1]), ([], [])])
    assert row_neighbors(g, 0).members.tolist() == [0, 1, 2, 3]
    assert row_neighbors(g, 1).members.tolist() == [1]  # isolated: just itself
    assert len(row_neighbors(g, 2)) == 2
    with pytest.raises(IndexError):
        row_neighbors(g, 4)


def test_row_neighbors_matches_set_oracle():
    rng = np.random.default_rng(31)
    for _ in range(20):
        n = int(rng.integers(3, 20))
        dense = random_graph(rng, n, 4)
        g = dense_to_graph(dense)
        for m in range(n):
            expected = {m} | {j for j in range(n) if dense[m, j] != 0}
            assert set(row_neighbors(g, m).members.tolist()) == expected


def test_knn_tie_breaks_toward_lower_index():
    feats = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    g = build_knn_graph(feats, 1)
    assert graph_edge_set(g) == {(0, 1), (1, 0), (2, 0)}
    assert np.all(g.weights == 1.0)


def test_knn_identical_rows_get_mutual_edges():
    feats = np.array([[2.0, 2.0], [1.0, 1.0], [5.0, -1.0]])
    g = build_knn_graph(feats, 1)
    edges = graph_edge_set(g)
    assert (0, 1) in edges and (1, 0) in edges


def test_knn_matches_exhaustive_oracle():
    rng = np.random.default_rng(32)
    for _ in range(15):
        n = int(rng.integers(5, 30))
        k = int(rng.integers(1, min(5, n - 1) + 1))
        feats = rng.standard_normal((n, 4))
        g = build_knn_graph(feats, k)
        assert graph_edge_set(g) == knn_oracle(feats, k)
        assert np.all(g.out_degrees() == k)


def test_knn_zero_rows_and_errors():
    feats = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    g = build_knn_graph(feats, 2)
    g.validate()  # zero feature row still gets edges, at similarity zero
    with pytest.raises(ValueError, match="k=4"):
        build_knn_graph(feats, 4)
    with pytest.raises(ValueError, match=">= 1"):
        build_knn_graph(feats, 0)


def test_knn_cosine_weights_when_not_binarized():
    rng = np.random.default_rng(33)
    feats = rng.standard_normal((8, 3))
    g = build_knn_graph(feats, 3, binarize=False)
    normed = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    sims = normed @ normed.T
    for m in range(8):
        cols, w = g.row(m)
        assert np.allclose(w, np.clip(sims[m, cols], 0.0, None), atol=1e-12)


def test_fuse_graphs_weighted_sum_and_union_pattern():
    a = SparseGraph.from_rows(3, [([1], [1.0]), ([2], [1.0]), ([], [])])
    b = SparseGraph.from_rows(3, [([1, 2], [1.0, 1.0]), ([], []), ([0], [1.0])])
    fused = fuse_graphs(a, b, 0.1)
    dense = fused.to_dense()
    assert abs(dense[0, 1] - 1.0) < 1e-15  # edge in both graphs
    assert abs(dense[0, 2] - 0.9) < 1e-15
    assert abs(dense[1, 2] - 0.1) < 1e-15
    assert abs(dense[2, 0] - 0.9) < 1e-15
    union = graph_edge_set(a) | graph_edge_set(b)
    assert graph_edge_set(fused) == union


def test_fuse_graphs_degenerate_weights():
    rng = np.random.default_rng(34)
    a = dense_to_graph(random_graph(rng, 10, 3))
    b = dense_to_graph(random_graph(rng, 10, 3))
    # at the endpoints fusion reduces to one input as a weighted matrix
    assert np.array_equal(fuse_graphs(a, b, 1.0).to_dense(), a.to_dense())
    assert np.array_equal(fuse_graphs(a, b, 0.0).to_dense(), b.to_dense())
    assert graph_edge_set(fuse_graphs(a, b, 1.0)) == graph_edge_set(a) | graph_edge_set(b)
    with pytest.raises(ValueError, match="weight"):
        fuse_graphs(a, b, 1.5)
    with pytest.raises(ValueError, match="nodes"):
        fuse_graphs(a, dense_to_graph(random_graph(rng, 9, 3)), 0.5)


def test_topological_similarity_closed_forms():
    # two nodes sharing an identical 2-element neighborhood in a 4-node
    # graph: membership is Bernoulli(1/2) and fully dependent
    g = SparseGraph.from_rows(4, [([1], [1.0]), ([0], [1.0]), ([], []), ([], [])])
    assert abs(topological_similarity(g, 0, 1) - math.log(2.0)) < 1e-12

    # a node adjacent to everything has a constant indicator: zero info
    full = SparseGraph.from_rows(
        4, [([1, 2, 3], [1, 1, 1]), ([2], [1.0]), ([], []), ([], [])]
    )
    assert topological_similarity(full, 0, 1) == 0.0
    assert topological_similarity(full, 0, 3) == 0.0


def test_topological_similarity_matches_set_oracle():
    rng = np.random.default_rng(35)
    for _ in range(40):
        n = int(rng.integers(4, 24))
        dense = random_graph(rng, n, 5)
        g = dense_to_graph(dense)
        pairs = rng.integers(0, n, size=(15, 2))
        for m, nn in pairs:
            got = topological_similarity(g, int(m), int(nn))
            want = ts_set_oracle(dense, int(m), int(nn))
            assert abs(got - want) < 1e-9
            assert got >= 0.0


def test_topological_similarity_symmetry_and_log_base():
    rng = np.random.default_rng(36)
    for _ in range(10):
        n = int(rng.integers(4, 16))
        g = dense_to_graph(random_graph(rng, n, 4))
        for m in range(n):
            for nn in range(n):
                a = topological_similarity(g, m, nn)
                b = topological_similarity(g, nn, m)
                assert abs(a - b) < 1e-12
                halved = topological_similarity(g, m, nn, log_base=2.0)
                assert abs(halved - a / math.log(2.0)) < 1e-12


def test_tps_prune_matches_oracle_selection():
    rng = np.random.default_rng(37)
    for _ in range(25):
        n = int(rng.integers(5, 24))
        dense = random_graph(rng, n, 6)
        k = int(rng.integers(1, 4))
        pruned, _ = tps_prune(dense_to_graph(dense), k)
        assert graph_edge_set(pruned) == prune_oracle(dense, k)


def test_tps_prune_pass_through_and_subset():
    rng = np.random.default_rng(38)
    dense = random_graph(rng, 12, 4)
    g = dense_to_graph(dense)
    same, report = tps_prune(g, 10)  # k above the max out-degree
    assert graphs_equal(g, same)
    assert report.total_dropped() == 0

    pruned, report = tps_prune(g, 2)
    kept = graph_edge_set(pruned)
    assert kept <= graph_edge_set(g)
    for m, j in kept:  # weights of surviving edges are untouched
        assert pruned.to_dense()[m, j] == dense[m, j]
    degs = pruned.out_degrees()
    orig = g.out_degrees()
    assert np.all(degs == np.minimum(orig, 2))
    assert report.total_kept() == pruned.nnz
    assert report.total_kept() + report.total_dropped() == g.nnz


def test_tps_prune_tie_breaks():
    # neighbors 1 and 2 have interchangeable topologies, so their TS from
    # node 0 is identical; the heavier edge must win
    rows = [
        ([1, 2], [0.5, 0.9]),
        ([4], [1.0]),
        ([4], [1.0]),
        ([], []),
        ([], []),
        ([], []),
    ]
    g = SparseGraph.from_rows(6, rows)
    pruned, _ = tps_prune(g, 1)
    assert graph_edge_set(pruned) >= {(0, 2)}

    # equal weights: the lower column index wins
    rows[0] = ([1, 2], [0.7, 0.7])
    pruned, _ = tps_prune(SparseGraph.from_rows(6, rows), 1)
    assert graph_edge_set(pruned) >= {(0, 1)}


def test_tps_prune_log_base_invariance():
    rng = np.random.default_rng(39)
    for _ in range(10):
        dense = random_graph(rng, 14, 5)
        g = dense_to_graph(dense)
        nat, _ = tps_prune(g, 2)
        base2, _ = tps_prune(g, 2, log_base=2.0)
        assert graph_edge_set(nat) == graph_edge_set(base2)


def test_tps_prune_report_csv(tmp_path):
    g = SparseGraph.from_rows(3, [([1, 2], [1.0, 1.0]), ([], []), ([0], [1.0])])
    _, report = tps_prune(g, 1)
    path = tmp_path / "report.csv"
    report.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "node,kept,dropped,min_ts,max_ts"
    assert len(lines) == 4
    assert lines[2].startswith("1,0,0,,")  # empty row: no scores to report


def test_random_prune_degrees_and_determinism():
    rng = np.random.default_rng(40)
    g = dense_to_graph(random_graph(rng, 20, 6))
    pruned = random_prune(g, 3, 123)
    assert np.all(pruned.out_degrees() == np.minimum(g.out_degrees(), 3))
    assert graph_edge_set(pruned) <= graph_edge_set(g)
    again = random_prune(g, 3, 123)
    assert graphs_equal(pruned, again)
    other = random_prune(g, 3, 124)
    assert not graphs_equal(pruned, other)


def test_corrupt_graph_identity_and_full_replacement():
    rng = np.random.default_rng(41)
    g = dense_to_graph(random_graph(rng, 30, 4))
    assert graphs_equal(corrupt_graph(g, 0.0, 7), g)

    noisy = corrupt_graph(g, 1.0, 7)
    assert np.array_equal(noisy.out_degrees(), g.out_degrees())
    for m in range(30):
        before, w_before = g.row(m)
        after, w_after = noisy.row(m)
        assert not set(before.tolist()) & set(after.tolist())
        assert m not in after.tolist()
        assert sorted(w_before.tolist()) == sorted(w_after.tolist())
    noisy.validate()


def test_corrupt_graph_determinism_and_rate():
    rng = np.random.default_rng(42)
    g = dense_to_graph(random_graph(rng, 40, 5))
    a = corrupt_graph(g, 0.3, 99)
    b = corrupt_graph(g, 0.3, 99)
    assert graphs_equal(a, b)

    base = g.to_dense() != 0
    changed = int((~base[np.nonzero(a.to_dense())]).sum())
    assert 0 < changed < g.nnz


def test_corrupt_graph_replaced_fraction_concentrates():
    # a graph with 10^4 edges: the replaced share stays near epsilon
    rng = np.random.default_rng(43)
    n = 500
    rows = []
    for m in range(n):
        cols = rng.choice([j for j in range(n) if j != m], size=20, replace=False)
        rows.append((np.sort(cols), np.ones(20)))
    g = SparseGraph.from_rows(n, rows)
    assert g.nnz == 10_000
    for eps in (0.05, 0.1):
        for seed in range(5):
            noisy = corrupt_graph(g, eps, seed)
            replaced = int((g.indices != noisy.indices).sum())
            # sorting can only mask a replacement by pure coincidence;
            # count via set difference instead to be exact
            moved = sum(
                len(set(g.row(m)[0].tolist()) - set(noisy.row(m)[0].tolist()))
                for m in range(n)
            )
            assert abs(moved / g.nnz - eps) < 0.01
            assert replaced >= moved


def test_corrupt_graph_degenerate_row_keeps_edge():
    # node 0 already points at every other node: nothing to rewire to
    g = SparseGraph.from_rows(3, [([1, 2], [1.0, 1.0]), ([], []), ([], [])])
    noisy = corrupt_graph(g, 1.0, 0)
    assert graphs_equal(noisy, g)
    with pytest.raises(ValueError, match="rate"):
        corrupt_graph(g, 1.5, 0)


def test_graph_io_text_and_binary(tmp_path):
    rng = np.random.default_rng(44)
    g = dense_to_graph(random_graph(rng, 25, 5, weight_choices=(0.1, 1 / 3, 0.9)))
    text = tmp_path / "g.tmg"
    save_graph(text, g)
    assert graphs_equal(load_graph(text), g)

    binary = tmp_path / "g.tmgb"
    save_graph(binary, g, binary=True)
    assert graphs_equal(load_graph(binary), g)

    empty = SparseGraph.from_rows(4, [([], [])] * 4)
    save_graph(tmp_path / "e.tmg", empty)
    assert graphs_equal(load_graph(tmp_path / "e.tmg"), empty)


def test_graph_io_rejects_malformed(tmp_path):
    bad = tmp_path / "bad.tmg"
    bad.write_text("WHAT 3 1\n0 1 1.0\n")
    with pytest.raises(ValueError, match="TMG1 or TMG2"):
        load_graph(bad)
    short = tmp_path / "short.tmg"
    short.write_text("TMG1 3 2\n0 1 1.0\n0 2\n")
    with pytest.raises(ValueError, match="line 2"):
        load_graph(short)
