import numpy as np
import pytest

from meshmotion import autodiff as ad
from meshmotion.autodiff import ShapeError, Tape, Tensor, gradcheck
from meshmotion.body_graph import (
    BodyGraph,
    GraphConvLayer,
    GraphError,
    ToyBodyConfig,
    build_adjacency,
    generate_toy_body,
    graph_conv,
    graph_from_json,
    graph_to_json,
    is_connected,
    resample,
)


def test_adjacency_single_edge():
    # degrees are 2 after self-loops: every entry 1/sqrt(2*2) or diag 1/2 + ...
    out = build_adjacency([(0, 1)], 2)
    np.testing.assert_allclose(out.data, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def test_adjacency_no_edges_is_identity():
    out = build_adjacency([], 3)
    np.testing.assert_allclose(out.data, np.eye(3), atol=1e-15)


def test_adjacency_triangle_uniform():
    out = build_adjacency([(0, 1), (1, 2), (0, 2)], 3)
    np.testing.assert_allclose(out.data, np.full((3, 3), 1 / 3), atol=1e-15)


def test_adjacency_symmetric_entries_in_unit_interval():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n = int(rng.integers(2, 9))
        pairs = {(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4}
        out = build_adjacency(sorted(pairs), n).data
        np.testing.assert_allclose(out, out.T, atol=1e-15)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_adjacency_row_sums_on_regular_graphs():
    # for k-regular graphs D^-1/2 (A+I) D^-1/2 rows sum to exactly 1
    ring = [(i, (i + 1) % 6) for i in range(6)]
    out = build_adjacency(ring, 6).data
    np.testing.assert_allclose(out.sum(axis=1), np.ones(6), atol=1e-12)
    tri = build_adjacency([(0, 1), (1, 2), (0, 2)], 3).data
    np.testing.assert_allclose(tri.sum(axis=1), np.ones(3), atol=1e-12)


def test_adjacency_input_errors():
    with pytest.raises(GraphError):
        build_adjacency([(0, 5)], 3)
    with pytest.raises(GraphError):
        build_adjacency([(1, 1)], 3)
    with pytest.raises(GraphError):
        build_adjacency([(0, 1), (1, 0)], 3)


def test_adjacency_row_mode():
    out = build_adjacency([(0, 1)], 2, mode="row").data
    np.testing.assert_allclose(out, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)
    out3 = build_adjacency([(0, 1)], 3, mode="row").data
    np.testing.assert_allclose(out3.sum(axis=1), np.ones(3), atol=1e-15)


def _tiny_graph(edges, n):
    adjacency = build_adjacency(edges, n)
    down = np.eye(n)
    return BodyGraph(
        n_vertices=n,
        edges=tuple(edges),
        adjacency_norm=adjacency,
        part_labels=np.zeros(n, dtype=np.int64),
        part_names=("all",),
        down_matrix=Tensor(down),
        up_matrix=Tensor(down),
    )


def test_graph_conv_identity_composition():
    g = _tiny_graph([], 3)
    layer = GraphConvLayer(1, 1, activation="relu")
    layer.p["weight"] = Tensor(np.eye(1), requires_grad=True)
    y = np.array([[1.0], [2.0], [3.0]])
    out = graph_conv(layer, g, y)
    np.testing.assert_allclose(out.data, y, atol=1e-15)


def test_graph_conv_two_vertex_example():
    g = _tiny_graph([(0, 1)], 2)
    layer = GraphConvLayer(1, 1, activation="relu")
    layer.p["weight"] = Tensor([[1.0]], requires_grad=True)
    out = graph_conv(layer, g, np.array([[2.0], [4.0]]))
    np.testing.assert_allclose(out.data, [[3.0], [3.0]], atol=1e-15)


def test_graph_conv_permutation_equivariance():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = 5
        pairs = sorted({(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.5})
        adjacency = build_adjacency(pairs, n).data
        y = rng.standard_normal((n, 3))
        w = rng.standard_normal((3, 2))
        perm = rng.permutation(n)
        p = np.eye(n)[perm]

        def forward(a_mat, y_mat):
            return np.maximum(a_mat @ y_mat @ w, 0.0)

        base = forward(adjacency, y)
        permuted = forward(p @ adjacency @ p.T, p @ y)
        np.testing.assert_allclose(permuted, p @ base, atol=1e-9)


def test_graph_conv_weight_gradient():
    g = _tiny_graph([(0, 1), (1, 2)], 3)
    rng = np.random.default_rng(2)
    y = rng.standard_normal((3, 4))
    w0 = rng.standard_normal((4, 2))

    def op(w):
        return ad.relu(ad.matmul(ad.matmul(g.adjacency_norm, ad.constant(y)), w))

    assert gradcheck(op, [w0]) < 1e-4


def test_graph_conv_shape_errors():
    g = _tiny_graph([(0, 1)], 2)
    layer = GraphConvLayer(3, 2)
    with pytest.raises(ShapeError):
        graph_conv(layer, g, np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        graph_conv(layer, g, np.zeros((5, 3)))


def test_spectral_boundedness():
    # repeated application never exceeds input sup-norm times max row sum
    rng = np.random.default_rng(3)
    graph = generate_toy_body()
    a = graph.adjacency_norm.data
    row_max = a.sum(axis=1).max()
    x = rng.standard_normal(graph.n_vertices)
    bound = np.abs(x).max()
    for _ in range(50):
        x = a @ x
        bound = bound * row_max
        assert np.abs(x).max() <= bound + 1e-9


def test_resample_down_up_reproduces_coarse_signal():
    graph = generate_toy_body()
    rng = np.random.default_rng(4)
    coarse = rng.standard_normal((graph.n_coarse, 3))
    lifted = resample(graph, coarse, "up")
    back = resample(graph, lifted, "down")
    np.testing.assert_allclose(back.data, coarse, atol=1e-9)


def test_resample_constant_per_part():
    graph = generate_toy_body()
    consts = np.arange(graph.n_parts, dtype=float) + 1.0
    y = consts[graph.part_labels][:, None]
    down = resample(graph, y, "down").data
    np.testing.assert_allclose(down, consts[graph.coarse_labels()][:, None], atol=1e-12)


def test_resample_matches_dense_oracle():
    graph = generate_toy_body()
    rng = np.random.default_rng(5)
    y = rng.standard_normal((graph.n_vertices, 2))
    out = resample(graph, y, "down")
    np.testing.assert_allclose(out.data, graph.down_matrix.data @ y, atol=1e-12)
    coarse = rng.standard_normal((graph.n_coarse, 2))
    out_up = resample(graph, coarse, "up")
    np.testing.assert_allclose(out_up.data, graph.up_matrix.data @ coarse, atol=1e-12)


def test_resample_errors():
    graph = generate_toy_body()
    with pytest.raises(ShapeError):
        resample(graph, np.zeros((5, 3)), "down")
    with pytest.raises(GraphError):
        resample(graph, np.zeros((graph.n_vertices, 3)), "sideways")


def test_resample_is_differentiable():
    graph = generate_toy_body(ToyBodyConfig(vertices_per_part=2, coarse_per_part=1))
    rng = np.random.default_rng(6)
    y = rng.standard_normal((graph.n_vertices, 2))
    assert gradcheck(lambda t: resample(graph, t, "down"), [y]) < 1e-4


def test_toy_body_default_dimensions():
    graph = generate_toy_body()
    assert graph.n_vertices == 96
    assert graph.n_coarse == 24
    ranges = graph.part_ranges()
    assert len(ranges) == 8
    covered = []
    for s, e in ranges:
        covered.extend(range(s, e + 1))
    assert covered == list(range(96))


def test_toy_body_deterministic():
    a = generate_toy_body()
    b = generate_toy_body()
    assert a.edges == b.edges
    np.testing.assert_array_equal(a.adjacency_norm.data, b.adjacency_norm.data)
    np.testing.assert_array_equal(a.down_matrix.data, b.down_matrix.data)
    np.testing.assert_array_equal(a.part_labels, b.part_labels)


def test_toy_body_connected():
    assert is_connected(generate_toy_body())
    assert is_connected(generate_toy_body(ToyBodyConfig(
        parts=("a", "b", "c", "d"), vertices_per_part=2, coarse_per_part=1)))


def test_toy_body_config_errors():
    with pytest.raises(GraphError):
        generate_toy_body(ToyBodyConfig(parts=("solo",)))
    with pytest.raises(GraphError):
        generate_toy_body(ToyBodyConfig(vertices_per_part=1))


def test_coarse_adjacency_structure():
    graph = generate_toy_body()
    coarse = graph.coarse_adjacency().data
    assert coarse.shape == (24, 24)
    np.testing.assert_allclose(coarse, coarse.T, atol=1e-12)
    assert (coarse.diagonal() > 0).all()


def test_graph_json_roundtrip(tmp_path):
    graph = generate_toy_body()
    doc = graph_to_json(graph)
    back = graph_from_json(doc)
    assert back.edges == graph.edges
    np.testing.assert_array_equal(back.adjacency_norm.data, graph.adjacency_norm.data)
    np.testing.assert_array_equal(back.up_matrix.data, graph.up_matrix.data)
    np.testing.assert_array_equal(back.part_labels, graph.part_labels)
    assert back.part_names == graph.part_names
