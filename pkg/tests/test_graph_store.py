import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anygraph.graph_store import (
    GraphDataset,
    GraphParseError,
    GraphValidationError,
    attach_class_nodes,
    canonical_edges,
    gen_synthetic,
    load_dataset,
    normalize_adjacency,
    read_matrix,
    save_dataset,
    split_edges,
    write_matrix,
)


def _manifest(tmp_path, edges_text, num_nodes=3, features=None, labels_text=None, **extra):
    (tmp_path / "e.csv").write_text(edges_text)
    m = {"name": "toy", "num_nodes": num_nodes, "edges": "e.csv", "features": None,
         "labels": None, "format_version": 1}
    if features is not None:
        write_matrix(tmp_path / "f.bin", features)
        m["features"] = "f.bin"
    if labels_text is not None:
        (tmp_path / "l.csv").write_text(labels_text)
        m["labels"] = "l.csv"
    m.update(extra)
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(m))
    return path


def test_load_dedups_and_symmetrizes(tmp_path):
    g = load_dataset(_manifest(tmp_path, "0,1\n1,0\n1,2\n"))
    assert g.edges.tolist() == [[0, 1], [1, 2]]


def test_load_rejects_out_of_range(tmp_path):
    with pytest.raises(GraphValidationError):
        load_dataset(_manifest(tmp_path, "0,5\n"))


def test_load_features_shape(tmp_path):
    feats = np.arange(12, dtype=np.float64).reshape(3, 4)
    g = load_dataset(_manifest(tmp_path, "0,1\n", features=feats))
    assert g.feature_dim == 4
    np.testing.assert_array_equal(g.features, feats)


def test_load_feature_row_mismatch(tmp_path):
    with pytest.raises(GraphValidationError):
        load_dataset(_manifest(tmp_path, "0,1\n", features=np.ones((2, 4))))


def test_parse_error_names_line(tmp_path):
    with pytest.raises(GraphParseError, match=":2:"):
        load_dataset(_manifest(tmp_path, "0,1\nx,2\n"))


def test_labels_file(tmp_path):
    g = load_dataset(_manifest(tmp_path, "0,1\n", labels_text="0,1,train\n2,0,test\n"))
    assert g.labels.tolist() == [1, -1, 0]
    assert g.train_label_mask.tolist() == [True, False, False]
    assert g.test_label_mask.tolist() == [False, False, True]


def test_bad_split_name(tmp_path):
    with pytest.raises(GraphParseError):
        load_dataset(_manifest(tmp_path, "0,1\n", labels_text="0,1,valid\n"))


def test_matrix_format_bytes(tmp_path):
    write_matrix(tmp_path / "m.bin", np.array([[1.0, 2.0, 3.0]]))
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:16] == (1).to_bytes(8, "little") + (3).to_bytes(8, "little")
    assert np.frombuffer(raw[16:], dtype="<f4").tolist() == [1.0, 2.0, 3.0]
    np.testing.assert_array_equal(read_matrix(tmp_path / "m.bin"), [[1.0, 2.0, 3.0]])


def test_save_load_round_trip(tmp_path):
    g = gen_synthetic("sbm", 30, {"blocks": 3, "feat_dim": 5}, seed=3)
    h = load_dataset(save_dataset(g, tmp_path))
    assert h.name == g.name and h.num_nodes == g.num_nodes
    np.testing.assert_array_equal(h.edges, g.edges)
    np.testing.assert_allclose(h.features, g.features.astype(np.float32))
    np.testing.assert_array_equal(h.labels, g.labels)


def test_self_loops_dropped():
    assert canonical_edges(np.array([[1, 1], [0, 1]]), 2).tolist() == [[0, 1]]


def test_dataset_is_immutable():
    g = GraphDataset("g", 3, canonical_edges(np.array([[0, 1]]), 3))
    with pytest.raises(ValueError):
        g.edges[0, 0] = 2


# --- normalization -----------------------------------------------------------

def _pair():
    return GraphDataset("pair", 2, np.array([[0, 1]]))


def test_normalize_two_nodes_with_loops():
    np.testing.assert_allclose(normalize_adjacency(_pair(), True).toarray(), [[0.5, 0.5], [0.5, 0.5]])


def test_normalize_single_node():
    g = GraphDataset("one", 1, np.zeros((0, 2), dtype=np.int64))
    np.testing.assert_array_equal(normalize_adjacency(g, True).toarray(), [[1.0]])


def test_normalize_without_loops():
    np.testing.assert_array_equal(normalize_adjacency(_pair(), False).toarray(), [[0, 1], [1, 0]])


def test_isolated_node_zero_row():
    g = GraphDataset("iso", 3, np.array([[0, 1]]))
    a = normalize_adjacency(g, False).toarray()
    assert np.all(a[2] == 0)


def test_regular_graph_rows_sum_to_one():
    ring = GraphDataset("ring", 12, canonical_edges(np.array([[i, (i + 1) % 12] for i in range(12)]), 12))
    a = normalize_adjacency(ring, True).toarray()
    np.testing.assert_allclose(a.sum(axis=1), 1.0, rtol=0, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 25), st.floats(0.05, 0.6), st.integers(0, 10_000), st.booleans())
def test_normalized_adjacency_exactly_symmetric(n, p, seed, loops):
    g = gen_synthetic("sbm", n, {"blocks": 1, "p_in": p}, seed=seed)
    a = normalize_adjacency(g, loops).matrix
    assert (a != a.T).nnz == 0
    assert np.all(a.data != 0)
    deg = np.bincount(np.concatenate([g.edges.ravel(), np.arange(n) if loops else []]).astype(int),
                      minlength=n).astype(float)
    coo = a.tocoo()
    np.testing.assert_array_equal(coo.data, 1.0 / np.sqrt(deg[coo.row] * deg[coo.col]))


# --- splitting ----------------------------------------------------------------

def _ten_edge_graph():
    return gen_synthetic("grid", 8, {"rows": 2}, seed=0)  # 2x4 lattice: 10 edges


def test_split_cardinality_and_determinism():
    g = _ten_edge_graph()
    assert g.num_edges == 10
    a = split_edges(g, 0.2, seed=7)
    b = split_edges(g, 0.2, seed=7)
    assert len(a.train_edges) == 8 and len(a.test_edges) == 2
    np.testing.assert_array_equal(a.test_mask, b.test_mask)


def test_split_empty_test_set_rejected():
    g = GraphDataset("one-edge", 2, np.array([[0, 1]]))
    with pytest.raises(ValueError, match="empty test set"):
        split_edges(g, 0.5, seed=0)


def test_split_no_edges_rejected():
    with pytest.raises(ValueError):
        split_edges(GraphDataset("none", 3, np.zeros((0, 2), dtype=np.int64)), 0.5, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.5))
def test_split_partition_properties(seed, ratio):
    g = gen_synthetic("sbm", 40, {"blocks": 2, "p_in": 0.3, "p_out": 0.05}, seed=seed)
    if int(ratio * g.num_edges) == 0:
        return
    s = split_edges(g, ratio, seed)
    train = {tuple(e) for e in s.train_edges.tolist()}
    test = {tuple(e) for e in s.test_edges.tolist()}
    assert not train & test
    assert train | test == {tuple(e) for e in g.edges.tolist()}
    kept = np.bincount(s.train_edges.ravel(), minlength=g.num_nodes)
    touched = np.bincount(g.edges.ravel(), minlength=g.num_nodes) > 0
    assert set(np.flatnonzero(touched & (kept == 0)).tolist()) == set(s.train_isolated)


def test_split_keeps_train_edge_per_node_when_possible():
    g = gen_synthetic("sbm", 60, {"blocks": 2, "p_in": 0.4, "p_out": 0.05}, seed=1)
    s = split_edges(g, 0.2, seed=4)
    assert s.train_isolated == ()


# --- synthetic generators -----------------------------------------------------

def test_grid_counts():
    g = gen_synthetic("grid", 25, {"rows": 5}, seed=0)
    assert g.num_nodes == 25 and g.num_edges == 40


def test_ba_edge_count_by_simulation():
    g = gen_synthetic("ba", 50, {"m": 2}, seed=1)
    # seed clique on m nodes plus m edges for every later node
    assert g.num_edges == 1 + (50 - 2) * 2
    deg = np.bincount(g.edges.ravel(), minlength=50)
    assert np.all(deg[2:] >= 2)


def test_sbm_labels_and_determinism():
    params = {"blocks": 4, "p_in": 0.2, "p_out": 0.01}
    g = gen_synthetic("sbm", 100, params, seed=1)
    h = gen_synthetic("sbm", 100, params, seed=1)
    assert sorted(set(g.labels.tolist())) == [0, 1, 2, 3]
    np.testing.assert_array_equal(g.edges, h.edges)
    same = g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]
    assert same.mean() > 0.7


def test_bipartite_edges_cross_sides():
    g = gen_synthetic("bipartite", 60, {"groups": 3}, seed=2)
    assert np.all(g.edges[:, 0] < 30) and np.all(g.edges[:, 1] >= 30)


def test_planted_features():
    g = gen_synthetic("sbm", 80, {"blocks": 4, "feat_dim": 6, "feat_noise": 0.01}, seed=5)
    assert g.features.shape == (80, 6)
    assert np.all(np.argmax(g.features, axis=1) == g.labels)


def test_generator_errors():
    with pytest.raises(ValueError):
        gen_synthetic("smallworld", 10)
    with pytest.raises(ValueError):
        gen_synthetic("sbm", 1)


# --- class nodes --------------------------------------------------------------

def _labeled(train_nodes, labels, n=4):
    split = np.zeros(n, dtype=np.int8)
    split[list(train_nodes)] = 1
    return GraphDataset("lab", n, np.array([[0, 1], [2, 3]]), features=np.ones((n, 3)),
                        labels=np.array(labels), label_split=split)


def test_attach_class_nodes_basic():
    g = attach_class_nodes(_labeled({0, 1}, [0, 1, 0, 1]))
    assert g.num_nodes == 6 and g.class_offset == 4
    assert {(0, 4), (1, 5)} <= {tuple(e) for e in g.edges.tolist()}
    assert g.num_edges == 4
    assert np.all(g.features[4:] == 0)


def test_attach_class_nodes_empty_mask():
    g = attach_class_nodes(_labeled(set(), [0, 1, 0, 1]))
    assert g.num_nodes == 6 and g.num_edges == 2


def test_attach_class_nodes_single_class():
    g = attach_class_nodes(_labeled({0, 1, 2, 3}, [0, 0, 0, 0]))
    assert np.bincount(g.edges.ravel())[4] == 4


def test_attach_class_nodes_skips_test_nodes():
    base = _labeled({0}, [0, 1, 0, 1])
    split = base.label_split.copy()
    split[3] = 2
    g = attach_class_nodes(base.replace(label_split=split))
    touched = set(g.edges[g.edges[:, 1] >= 4, 0].tolist())
    assert 3 not in touched


def test_attach_class_nodes_requires_labels():
    with pytest.raises(ValueError):
        attach_class_nodes(GraphDataset("x", 2, np.array([[0, 1]])))
