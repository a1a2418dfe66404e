import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from stgnn_lab import tensor as T
from stgnn_lab.graph import (
    Graph,
    NormalizedAdjacency,
    build_adjacency_from_distances,
    neighbor_sets,
    normalize_adjacency,
    random_sensor_network,
    read_distance_csv,
    read_weight_csv,
    sigma_from_distances,
    spmm,
    write_distance_csv,
    write_weight_csv,
)
from stgnn_lab.tensor import ShapeError, Tensor, grad_check


def random_graph(rng, n, p=0.4, symmetric=True):
    a = (rng.uniform(size=(n, n)) < p) * rng.uniform(0.1, 1.0, (n, n))
    np.fill_diagonal(a, 0.0)
    if symmetric:
        a = np.triu(a) + np.triu(a, 1).T
    return Graph.from_dense(a)


@st.composite
def graphs(draw, max_n=12, symmetric=True):
    n = draw(st.integers(1, max_n))
    seed = draw(st.integers(0, 2**31))
    p = draw(st.floats(0.0, 1.0))
    return random_graph(np.random.default_rng(seed), n, p, symmetric)


class TestAdjacency:
    def test_zero_distance_gives_unit_weight(self):
        g = build_adjacency_from_distances([("a", "b", 0.0), ("b", "a", 3.0)], sigma=2.0)
        assert g.dense()[0, 1] == 1.0

    def test_distance_equal_sigma(self):
        g = build_adjacency_from_distances([("a", "b", 1.5)], sigma=1.5)
        assert g.dense()[0, 1] == math.exp(-1.0)
        assert abs(g.dense()[0, 1] - 0.367879) < 1e-6

    def test_below_threshold_is_absent(self):
        d = math.sqrt(-math.log(0.09))                      # exp(-d^2) = 0.09 with sigma 1
        g = build_adjacency_from_distances([("a", "b", d), ("a", "c", 0.5)], sigma=1.0, epsilon=0.1)
        assert [(s, t) for s, t, _ in g.edges] == [(0, 2)]

    def test_threshold_is_inclusive(self):
        d = math.sqrt(-math.log(0.1))
        w = math.exp(-(d * d))
        g = build_adjacency_from_distances([("a", "b", d)], sigma=1.0, epsilon=w)
        assert g.edge_count == 1

    def test_errors(self):
        with pytest.raises(ValueError, match="negative"):
            build_adjacency_from_distances([("a", "b", -1.0)], sigma=1.0)
        with pytest.raises(ValueError, match="sigma"):
            build_adjacency_from_distances([("a", "b", 1.0)], sigma=0.0)
        with pytest.raises(ValueError, match="epsilon"):
            build_adjacency_from_distances([("a", "b", 1.0)], sigma=1.0, epsilon=1.0)

    def test_default_sigma_is_distance_std(self):
        rows = [("a", "b", 1.0), ("b", "c", 2.0), ("c", "a", 3.0)]
        g = build_adjacency_from_distances(rows, epsilon=0.0)
        sigma = float(np.std([1.0, 2.0, 3.0]))
        assert g.dense()[1, 2] == math.exp(-4.0 / sigma**2)

    def test_node_order(self):
        rows = [("x", "y", 1.0)]
        assert build_adjacency_from_distances(rows, sigma=1.0).node_ids == ("x", "y")
        g = build_adjacency_from_distances(rows, sigma=1.0, node_ids=["z", "y", "x"])
        assert g.node_ids == ("z", "y", "x") and g.edges[0][:2] == (2, 1)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.0, 10.0), min_size=2, max_size=20), st.floats(0.0, 0.99))
    def test_weights_respect_threshold(self, ds, eps):
        rows = [(f"n{i}", f"n{i + 1}", d) for i, d in enumerate(ds)]
        g = build_adjacency_from_distances(rows, sigma=2.0, epsilon=eps)
        assert all(eps <= w <= 1.0 and w > 0 for _, _, w in g.edges)


class TestSigma:
    def test_degenerate(self):
        with pytest.raises(ValueError):
            sigma_from_distances([1, 1, 1, 1])

    def test_values(self):
        assert sigma_from_distances([0, 2]) == 1.0
        assert abs(sigma_from_distances([1, 2, 3, 4]) - 1.118034) < 1e-6
        assert sigma_from_distances([1, 2, 3, 4]) == math.sqrt(1.25)


class TestNormalize:
    def test_empty_graph_gives_identity(self):
        for n in (1, 4):
            g = Graph(n, tuple(map(str, range(n))), ())
            np.testing.assert_array_equal(normalize_adjacency(g).to_dense(), np.eye(n))

    def test_self_loops_give_identity(self):
        g = Graph.from_dense(np.eye(2))
        np.testing.assert_allclose(normalize_adjacency(g).to_dense(), np.eye(2), rtol=0, atol=1e-15)

    def test_two_node_edge(self):
        g = Graph.from_dense(np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(normalize_adjacency(g).to_dense(), np.full((2, 2), 0.5), atol=1e-15)

    def test_matches_dense_formula(self, rng):
        g = random_graph(rng, 7, symmetric=False)
        a_t = np.eye(7) + g.dense()
        d = np.diag(1 / np.sqrt(a_t.sum(axis=1)))
        np.testing.assert_allclose(normalize_adjacency(g).to_dense(), d @ a_t @ d, rtol=0, atol=1e-14)

    def test_sparse_above_threshold(self, rng):
        g = random_graph(rng, 70, p=0.05)
        assert normalize_adjacency(g).is_sparse
        assert not normalize_adjacency(g, dense=True).is_sparse

    @settings(max_examples=40, deadline=None)
    @given(graphs())
    def test_symmetric_with_bounded_spectrum(self, g):
        a_hat = normalize_adjacency(g).to_dense()
        np.testing.assert_allclose(a_hat, a_hat.T, rtol=0, atol=1e-12)
        # power iteration on A_hat^2 bounds |lambda|
        v = np.random.default_rng(0).normal(size=g.n)
        for _ in range(200):
            v = a_hat @ (a_hat @ v)
            norm = np.linalg.norm(v)
            if norm == 0:
                break
            v /= norm
        radius = math.sqrt(np.linalg.norm(a_hat @ (a_hat @ v))) if norm else 0.0
        assert radius <= 1 + 1e-8
        assert np.all(np.linalg.eigvalsh(a_hat) >= -1 - 1e-8)


class TestNeighborSets:
    def test_edgeless(self):
        nb = neighbor_sets(Graph(3, ("a", "b", "c"), ()))
        assert nb.sets == ((0,), (1,), (2,))

    def test_single_edge_incoming(self):
        nb = neighbor_sets(Graph(2, ("a", "b"), ((0, 1, 0.5),)))
        assert nb[1] == (0, 1) and nb[0] == (0,)

    def test_complete(self):
        g = Graph.from_dense(np.ones((3, 3)) - np.eye(3))
        assert all(s == (0, 1, 2) for s in neighbor_sets(g).sets)

    @settings(max_examples=40, deadline=None)
    @given(graphs(symmetric=False))
    def test_size_identity(self, g):
        nb = neighbor_sets(g)
        assert sum(len(s) - 1 for s in nb.sets) == np.count_nonzero(g.dense())
        assert all(i in nb[i] for i in range(g.n))
        a = g.dense()
        for i in range(g.n):
            assert set(nb[i]) == {j for j in range(g.n) if a[j, i] > 0} | {i}

    def test_mask(self):
        nb = neighbor_sets(Graph(2, ("a", "b"), ((0, 1, 0.5),)))
        np.testing.assert_array_equal(nb.mask(), [[False, True], [False, False]])


class TestGraphType:
    def test_validation(self):
        with pytest.raises(ValueError, match="range"):
            Graph(2, ("a", "b"), ((0, 2, 0.5),))
        with pytest.raises(ValueError, match="weight"):
            Graph(2, ("a", "b"), ((0, 1, 1.5),))
        with pytest.raises(ValueError, match="duplicate"):
            Graph(2, ("a", "b"), ((0, 1, 0.5), (0, 1, 0.4)))

    def test_permuted(self, rng):
        g = random_graph(rng, 5, symmetric=False)
        perm = rng.permutation(5)
        np.testing.assert_array_equal(g.permuted(perm).dense(), g.dense()[np.ix_(perm, perm)])


class TestSpmm:
    def test_identity(self, rng):
        x = rng.normal(size=(4, 3))
        a = normalize_adjacency(Graph(4, tuple("abcd"), ()))
        np.testing.assert_array_equal(spmm(a, Tensor(x)).data, x)

    def test_hand_product(self):
        a = NormalizedAdjacency(2, np.full((2, 2), 0.5))
        np.testing.assert_array_equal(spmm(a, Tensor([[2.0], [4.0]])).data, [[3.0], [3.0]])

    @pytest.mark.parametrize("dense", [True, False])
    def test_matches_dense_with_batch_axes(self, rng, dense):
        g = random_graph(rng, 9)
        a = normalize_adjacency(g, dense=dense)
        x = rng.normal(size=(2, 3, 9, 4))
        np.testing.assert_allclose(spmm(a, Tensor(x)).data, a.to_dense() @ x, rtol=0, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 50), st.integers(0, 2**31))
    def test_sparse_matches_dense(self, n, seed):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, n, p=0.2)
        x = rng.normal(size=(n, 3))
        dense = normalize_adjacency(g, dense=True)
        sparse = normalize_adjacency(g, dense=False)
        np.testing.assert_allclose(spmm(sparse, Tensor(x)).data, dense.values @ x, rtol=0, atol=1e-12)

    def test_shape_error(self):
        a = NormalizedAdjacency(2, np.eye(2))
        with pytest.raises(ShapeError, match="spmm"):
            spmm(a, Tensor(np.zeros((3, 1))))

    @pytest.mark.parametrize("dense", [True, False])
    def test_gradient(self, rng, dense):
        g = random_graph(rng, 5, symmetric=False)
        a = normalize_adjacency(g, dense=dense)
        x = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 5, 3)))
        assert grad_check(lambda t: T.sum(T.tanh(spmm(a, t)) * w), x) <= 1e-6


class TestFiles:
    def test_distance_round_trip(self, tmp_path):
        rows = [("a", "b", 0.1), ("b", "a", 1 / 3), ("a", "c", 2.5e-7)]
        write_distance_csv(rows, tmp_path / "d.csv")
        assert read_distance_csv(tmp_path / "d.csv") == rows

    def test_weight_round_trip(self, tmp_path, rng):
        g = random_graph(rng, 6)
        g = Graph(g.n, g.node_ids, g.edges)
        write_weight_csv(g, tmp_path / "w.csv")
        back = read_weight_csv(tmp_path / "w.csv")
        assert {(back.node_ids[s], back.node_ids[d], w) for s, d, w in back.edges} == \
               {(g.node_ids[s], g.node_ids[d], w) for s, d, w in g.edges}

    def test_weight_node_order(self, tmp_path, rng):
        g = random_graph(rng, 6)
        write_weight_csv(g, tmp_path / "w.csv")
        back = read_weight_csv(tmp_path / "w.csv", node_ids=g.node_ids)
        assert back == g
        extra = read_weight_csv(tmp_path / "w.csv", node_ids=list(g.node_ids) + ["lonely"])
        assert extra.n == 7 and extra.node_ids[-1] == "lonely"
        with pytest.raises(ValueError, match="unknown node"):
            read_weight_csv(tmp_path / "w.csv", node_ids=g.node_ids[:3])

    def test_binary_weights_recorded(self, tmp_path):
        (tmp_path / "w.csv").write_text("src_id,dst_id,weight\na,b,1\nb,c,1\n")
        assert read_weight_csv(tmp_path / "w.csv").weighted is False

    def test_bad_header(self, tmp_path):
        (tmp_path / "d.csv").write_text("from,to,dist\na,b,1\n")
        with pytest.raises(ValueError, match="header"):
            read_distance_csv(tmp_path / "d.csv")

    def test_bad_value_names_line(self, tmp_path):
        (tmp_path / "d.csv").write_text("src_id,dst_id,distance\na,b,1\na,c,far\n")
        with pytest.raises(ValueError, match=":3:"):
            read_distance_csv(tmp_path / "d.csv")


class TestSensorNetwork:
    def test_connected_and_deterministic(self):
        g1, rows1 = random_sensor_network(20, 1)
        g2, rows2 = random_sensor_network(20, 1)
        assert g1 == g2 and rows1 == rows2
        assert g1.is_symmetric()
        assert g1.edge_count > 0
        reach = np.linalg.matrix_power(np.eye(20) + (g1.dense() > 0), 20)
        assert np.all(reach > 0)
