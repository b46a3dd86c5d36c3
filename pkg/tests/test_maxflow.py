import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import all_binary, brute_force_cut, random_graph
from nestcut.maxflow import (
    INF,
    FlowGraph,
    GraphBuilder,
    InfeasibleCutError,
    cut_cost,
    reparameterize_pairwise,
    solve_min_cut,
)


def make_graph(src, snk, u, v, cap, rcap):
    return FlowGraph(len(src), src, snk, u, v, cap, rcap)


def test_random_graphs_match_enumeration(rng):
    for _ in range(100):
        n = int(rng.integers(1, 9))
        arrays = random_graph(rng, n)
        res = solve_min_cut(make_graph(*arrays))
        assert res.cut_value == brute_force_cut(*arrays)
        assert res.flow_value == res.cut_value


def test_flow_equals_reported_partition_cost(rng):
    for _ in range(50):
        arrays = random_graph(rng, 12, max_cap=20, density=0.4)
        g = make_graph(*arrays)
        res = solve_min_cut(g)
        assert cut_cost(g, res.side) == pytest.approx(res.cut_value)


def test_source_side_is_minimal_on_ties():
    # both partitions of the single node cost 3
    g = make_graph(np.array([3.0]), np.array([3.0]), *[np.zeros(0, np.int64)] * 2, np.zeros(0), np.zeros(0))
    assert not solve_min_cut(g).side[0]
    # a zero-capacity graph cuts nothing and leaves everything on the sink side
    g = make_graph(np.zeros(4), np.zeros(4), np.array([0, 1]), np.array([1, 2]), np.zeros(2), np.zeros(2))
    res = solve_min_cut(g)
    assert res.cut_value == 0 and not res.side.any()


def test_chain_bottleneck():
    # s -> 0 -> 1 -> 2 -> t with a bottleneck of 2 on the middle arc
    g = make_graph(
        np.array([10.0, 0, 0]),
        np.array([0, 0, 10.0]),
        np.array([0, 1]),
        np.array([1, 2]),
        np.array([5.0, 2.0]),
        np.array([0.0, 0.0]),
    )
    res = solve_min_cut(g)
    assert res.cut_value == 2
    assert res.side.tolist() == [True, True, False]


def test_inf_links_are_never_cut():
    g = make_graph(
        np.array([INF, 0.0]),
        np.array([0.0, 4.0]),
        np.array([0]),
        np.array([1]),
        np.array([INF]),
        np.array([0.0]),
    )
    res = solve_min_cut(g)
    assert res.cut_value == 4
    assert res.side.tolist() == [True, True]


def test_contradictory_inf_links_raise():
    g = make_graph(np.array([INF]), np.array([INF]), *[np.zeros(0, np.int64)] * 2, np.zeros(0), np.zeros(0))
    with pytest.raises(InfeasibleCutError):
        solve_min_cut(g)


def test_graph_validation():
    with pytest.raises(ValueError):
        make_graph(np.array([-1.0]), np.array([0.0]), *[np.zeros(0, np.int64)] * 2, np.zeros(0), np.zeros(0))
    with pytest.raises(ValueError):
        make_graph(np.zeros(2), np.zeros(2), np.array([0]), np.array([0]), np.ones(1), np.ones(1))
    with pytest.raises(ValueError):
        make_graph(np.zeros(2), np.zeros(2), np.array([0]), np.array([5]), np.ones(1), np.ones(1))


def test_reparameterization_reconstructs_table():
    c = np.array([[3.0, 7.0], [5.0, 2.0]])
    b, cc, d = reparameterize_pairwise(c[0, 0], c[0, 1], c[1, 0], c[1, 1])
    a = (c[0, 0] + c[1, 1] + c[1, 0] - c[0, 1]) / 2
    rebuilt = a + b * np.array([[1, 1], [0, 0]]) + cc * np.array([[0, 1], [0, 1]]) + d * np.array([[0, 1], [1, 0]])
    np.testing.assert_allclose(rebuilt, c)
    assert d == pytest.approx(3.5)


def test_reparameterization_rejects_non_submodular():
    with pytest.raises(ValueError):
        reparameterize_pairwise(5.0, 0.0, 0.0, 5.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=4, max_size=4), st.floats(0, 10))
def test_builder_energy_matches_cut(costs, extra):
    # one pair with a submodular table plus arbitrary unaries: min cut = min energy up to a constant
    c_ss, c_tt, c_st, c_ts = costs[0], costs[1], costs[2], costs[3]
    if c_st + c_ts < c_ss + c_tt:
        c_st += c_ss + c_tt - (c_st + c_ts) + extra
    unary = np.array([[costs[0] / 3, -costs[1]], [costs[2], costs[3] / 2]])  # [node][SOURCE, SINK]
    gb = GraphBuilder(2)
    gb.add_unary([0, 1], cost_source=unary[:, 0], cost_sink=unary[:, 1])
    gb.add_pairwise([0], [1], c_ss, c_st, c_ts, c_tt)
    res = solve_min_cut(gb.build())
    table = {(True, True): c_ss, (True, False): c_st, (False, True): c_ts, (False, False): c_tt}

    def energy(side):
        e = table[(bool(side[0]), bool(side[1]))]
        return e + sum(unary[i, 0] if side[i] else unary[i, 1] for i in range(2))

    best = min(energy(s) for s in all_binary(2))
    assert energy(res.side) == pytest.approx(best, abs=1e-9)


def test_grid_graph_solves():
    # 2D grid: bright left half, dark right half; Potts smoothing keeps the split straight
    rng = np.random.default_rng(5)
    h, w = 20, 20
    img = np.where(np.arange(w)[None, :] < 10, 1.0, 0.0) + 0.3 * rng.standard_normal((h, w))
    idx = np.arange(h * w).reshape(h, w)
    gb = GraphBuilder(h * w)
    gb.add_unary(idx.ravel(), cost_source=(img.ravel() - 1) ** 2, cost_sink=img.ravel() ** 2)
    gb.add_edges(idx[:, :-1].ravel(), idx[:, 1:].ravel(), 0.5, 0.5)
    gb.add_edges(idx[:-1].ravel(), idx[1:].ravel(), 0.5, 0.5)
    side = solve_min_cut(gb.build()).side.reshape(h, w)
    assert side[:, :10].mean() > 0.95 and side[:, 10:].mean() < 0.05
