import numpy as np
import pytest
import torch

from helpers import MINI_GR, ramp_noise, randomise
from oracles import autodiff, brute_force_messages, central_difference, connected, gru_cell, relative_error
from smfnet.graph import GraphBundle, GraphReasoning, GrConfig, adjacency, edge_count, neighbours


@pytest.mark.parametrize("n", [2, 3, 4])
def test_adjacency_matches_enumeration(n):
    expected = {(k, l) for k in range(2 * n) for l in range(2 * n) if connected(k, l, n)}
    got = adjacency(n)
    assert len(got) == len(set(got)) == len(expected) == edge_count(n) == 2 * n * n
    assert set(got) == expected


def test_neighbour_order_is_modality_symmetric():
    n = 3
    for s in range(n):
        vis, ir = neighbours(s, n), neighbours(n + s, n)
        assert [(k + n) % (2 * n) for k in vis] == ir


def _toy_graph(n=2, c=3, hw=(4, 5), seed=0):
    g = torch.Generator().manual_seed(seed)
    nodes = [torch.randn(1, c, *hw, generator=g, dtype=torch.float64) for _ in range(2 * n)]
    edges = {e: torch.randn(1, c, *hw, generator=g, dtype=torch.float64) for e in adjacency(n)}
    return GraphBundle(nodes, n, edges)


@pytest.mark.parametrize("seed", range(3))
def test_message_pass_matches_brute_force(seed):
    g = _toy_graph(seed=seed)
    got = GraphReasoning.message_pass(g)
    ref = brute_force_messages(g.nodes, g.edges, g.n)
    for a, b in zip(got, ref):
        assert (a - b).abs().max() < 1e-6


def test_message_pass_swaps_with_modalities():
    g = _toy_graph(n=3, seed=7)
    n = g.n
    perm = lambda k: (k + n) % (2 * n)  # noqa: E731
    swapped = GraphBundle(
        g.nodes[n:] + g.nodes[:n], n, {(perm(k), perm(l)): e for (k, l), e in g.edges.items()}
    )
    a = GraphReasoning.message_pass(g)
    b = GraphReasoning.message_pass(swapped)
    for l in range(2 * n):
        assert torch.equal(a[l], b[perm(l)])


def test_node_update_matches_gru_oracle():
    c = 3
    gr = randomise(GraphReasoning(4, GrConfig(node_channels=c, gru_kernel=1)), seed=4).double()
    g = _toy_graph(c=c, hw=(2, 3), seed=4)
    msgs = GraphReasoning.message_pass(g)
    new = gr.node_update(g, msgs)
    cell = gr.gru
    wz, wr, wn = (conv.weight[:, :, 0, 0].detach().numpy() for conv in (cell.conv_z, cell.conv_r, cell.conv_n))
    bz, br, bn = (conv.bias.detach().numpy() for conv in (cell.conv_z, cell.conv_r, cell.conv_n))
    for i in range(2 * g.n):
        for r in range(2):
            for col in range(3):
                h = g.nodes[i][0, :, r, col].numpy()
                x = msgs[i][0, :, r, col].numpy()
                ref = gru_cell(h, x, wz, bz, wr, br, wn, bn)
                np.testing.assert_allclose(new.nodes[i][0, :, r, col].detach().numpy(), ref, atol=1e-6)


def test_edges_from_node_differences():
    gr = randomise(GraphReasoning(8, MINI_GR), seed=5).double()
    x = torch.randn(1, 8, 16, 16, dtype=torch.float64)
    g = gr.build_nodes(x, x.flip(-1))
    assert g.num_nodes == 6 and len(g.edges) == 18
    for (k, l), e in g.edges.items():
        assert torch.allclose(e, gr.edge_embed(g.nodes[k], g.nodes[l]))
    with pytest.raises(ValueError):
        gr.edge_embed(g.nodes[0], g.nodes[0][..., :1])


def test_graph_shapes_and_node_resolution():
    gr = GraphReasoning(8, MINI_GR)
    v, i = torch.randn(2, 8, 16, 24), torch.randn(2, 8, 16, 24)
    g = gr.build_nodes(v, i)
    assert all(node.shape == (2, 8, 4, 6) for node in g.nodes)
    ov, oi = gr(v, i)
    assert ov.shape == oi.shape == v.shape


def test_graph_rejects_bad_inputs():
    gr = GraphReasoning(8, MINI_GR)
    with pytest.raises(ValueError):
        gr(torch.randn(1, 8, 12, 16), torch.randn(1, 8, 12, 16))  # 12 is not a multiple of 8
    with pytest.raises(ValueError):
        gr(torch.randn(1, 8, 16, 16), torch.randn(1, 8, 8, 16))
    with pytest.raises(ValueError):
        GrConfig(pool_factors=(2,))
    with pytest.raises(ValueError):
        GrConfig(rounds=0)


def test_graph_symmetric_under_modality_swap():
    gr = randomise(GraphReasoning(8, GrConfig(node_channels=8, rounds=2)), seed=6).double()
    v, i = torch.randn(1, 8, 16, 16, dtype=torch.float64), torch.randn(1, 8, 16, 16, dtype=torch.float64)
    ov, oi = gr(v, i)
    sv, si = gr(i, v)
    assert torch.allclose(ov, si, atol=1e-12) and torch.allclose(oi, sv, atol=1e-12)


def test_graph_round_composes_oracles():
    """One full round equals: embed nodes, brute-force messages, oracle GRU, readout."""
    gr = randomise(GraphReasoning(4, GrConfig(node_channels=3, gru_kernel=1)), seed=8).double()
    v, i = torch.randn(1, 4, 8, 8, dtype=torch.float64), torch.randn(1, 4, 8, 8, dtype=torch.float64)
    g = gr.build_nodes(v, i)
    msgs = brute_force_messages(g.nodes, g.edges, g.n)
    new = gr.node_update(g, msgs)
    ref_v = gr.readout_modality(new.nodes[: g.n], (8, 8))
    ov, _ = gr(v, i)
    assert torch.allclose(ov, ref_v, atol=1e-10)


def test_gr_gradient():
    gr = randomise(GraphReasoning(8, MINI_GR), seed=9).double()
    x = ramp_noise(1, 16, 8, 8, seed=9)

    def fn(t):
        ov, oi = gr(t[:, :8], t[:, 8:])
        return (ov.mean() + 2 * oi.mean()) / 3

    assert relative_error(autodiff(fn, x), central_difference(fn, x)) < 1e-3
