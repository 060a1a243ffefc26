"""Attention, message passing, gating, and cross-attention against oracles."""

import numpy as np
import pytest

from graphtext import tensor as T
from graphtext.data import TextAttributedGraph
from graphtext.layers import (CrossAttention, FeedForward, FusionLayer,
                              MessagePassing, ParamStore, SelfAttention,
                              prepare_graph_tensors)
from graphtext.sequence import assemble_sequence, build_cross_mask, build_self_mask
from graphtext.tensor import Tensor

from oracles import (causal_attention_loops, cross_attention_loops,
                     finite_difference_check, mpnn_aggregate_loops)

rng = np.random.default_rng(42)


def graph_with_edges(n, edges, l_n=3, seed=0):
    r = np.random.default_rng(seed)
    text = [[int(t) for t in r.integers(7, 200, size=l_n)] for _ in range(n)]
    return TextAttributedGraph.build(n, [(u, v, (11,)) for (u, v) in edges], text, l_n)


# -- self-attention -----------------------------------------------------------------


def test_single_token_attention_is_value_projection():
    store = ParamStore(0)
    attn = SelfAttention(store, "a", 16, 4)
    z = Tensor(rng.normal(size=(1, 16)))
    out = attn(z, np.ones((1, 1), dtype=bool))
    expect = (z.data @ attn.wv.data + attn.bv.data) @ attn.wo.data + attn.bo.data
    assert np.max(np.abs(out.data - expect)) < 1e-12


def test_attention_matches_causal_reference():
    store = ParamStore(1)
    attn = SelfAttention(store, "a", 16, 4)
    L = 7
    z = rng.normal(size=(L, 16))
    out = attn(Tensor(z), np.tril(np.ones((L, L), dtype=bool)))
    expect = causal_attention_loops(z, attn.wq.data, attn.bq.data, attn.wk.data, attn.bk.data,
                                    attn.wv.data, attn.bv.data, attn.wo.data, attn.bo.data, 4)
    assert np.max(np.abs(out.data - expect)) < 1e-10


def test_zeroing_future_tokens_leaves_earlier_outputs_bit_exact():
    store = ParamStore(2)
    attn = SelfAttention(store, "a", 16, 2)
    L = 6
    z = rng.normal(size=(L, 16))
    mask = np.tril(np.ones((L, L), dtype=bool))
    full = attn(Tensor(z), mask).data
    z2 = z.copy()
    z2[4:] = 0.0
    cut = attn(Tensor(z2), mask).data
    assert np.array_equal(full[:4], cut[:4])


def test_attention_mask_length_mismatch():
    store = ParamStore(3)
    attn = SelfAttention(store, "a", 8, 2)
    with pytest.raises(T.ShapeError):
        attn(Tensor(np.zeros((3, 8))), np.ones((4, 4), dtype=bool))


# -- message passing -----------------------------------------------------------------


def mp_setup(n, edges, d=8, seed=5, **kw):
    store = ParamStore(seed)
    mp = MessagePassing(store, "mp", d, **kw)
    g = graph_with_edges(n, edges)
    gt = prepare_graph_tensors(g, l_e=1)
    h = Tensor(np.random.default_rng(seed + 1).normal(size=(n, d)))
    e = Tensor(np.random.default_rng(seed + 2).normal(size=(gt.n_edges, d)))
    return store, mp, gt, h, e


def test_isolated_node_gets_projected_zero_block():
    store, mp, gt, h, e = mp_setup(3, [(1, 2)])
    out = mp.aggregate(h, gt, e)
    # node 0 has no in-edges: its row is the projection of an all-zero block
    assert np.max(np.abs(out.data[0] - mp.b_comb.data)) < 1e-12


def test_single_neighbor_statistics():
    store, mp, gt, h, e = mp_setup(2, [(1, 0)])
    e = Tensor(np.ones((1, 8)))  # edge feature of ones: message = h_1
    out = mp.aggregate(h, gt, e)
    msg = h.data[1]
    expect = np.concatenate([msg, msg, np.zeros(8)]) @ mp.w_comb.data + mp.b_comb.data
    assert np.max(np.abs(out.data[0] - expect)) < 1e-12


def test_aggregate_matches_per_node_loop_oracle():
    edges = [(0, 1), (1, 0), (2, 1), (3, 1), (4, 5), (5, 4), (0, 5), (2, 0)]
    store, mp, gt, h, e = mp_setup(6, edges, seed=9)
    out = mp.aggregate(h, gt, e)
    sorted_edges = [(int(s), int(t)) for s, t in zip(gt.edge_src, gt.edge_dst)]
    expect = mpnn_aggregate_loops(h.data, sorted_edges, e.data, mp.w_comb.data, mp.b_comb.data)
    assert np.max(np.abs(out.data - expect)) < 1e-10


def test_mean_only_mode_shrinks_combine_input():
    store, mp, gt, h, e = mp_setup(3, [(0, 1)], multi_aggregators=False)
    assert mp.w_comb.data.shape == (8, 8)
    out = mp.aggregate(h, gt, e)
    assert out.data.shape == (3, 8)


def test_gate_zero_init_makes_update_zero():
    store, mp, gt, h, e = mp_setup(4, [(0, 1), (1, 0), (2, 3)])
    z_nodes = Tensor(rng.normal(size=(4, 8)))
    update = mp(z_nodes, gt, e)
    assert np.array_equal(update.data, np.zeros((4, 8)))


def test_gate_saturation_and_midpoint():
    store = ParamStore(10)
    mp = MessagePassing(store, "mp", 4)
    # drive the gate by hand: tanh(w . z) scales the combined vector
    mp.w_gate.data[:] = 0.0
    mp.w_gate.data[0, 0] = 1.0
    g = graph_with_edges(2, [(1, 0)])
    gt = prepare_graph_tensors(g, l_e=1)
    e = Tensor(np.ones((1, 4)))
    z_sat = Tensor(np.array([[50.0, 0, 0, 0], [50.0, 0, 0, 0]]))
    combined = mp.aggregate(T.linear(z_sat, mp.w_node, mp.b_node), gt, e)
    out = mp(z_sat, gt, e)
    assert np.max(np.abs(out.data - combined.data)) < 1e-10  # tanh saturated to 1
    z_half = Tensor(np.array([[0.5, 0, 0, 0], [0.5, 0, 0, 0]]))
    combined_h = mp.aggregate(T.linear(z_half, mp.w_node, mp.b_node), gt, e)
    out_h = mp(z_half, gt, e)
    assert np.max(np.abs(out_h.data - np.tanh(0.5) * combined_h.data)) < 1e-12


def test_ungated_mode_returns_combined_directly():
    store, mp, gt, h, e = mp_setup(3, [(0, 1)], gated=False)
    z_nodes = Tensor(rng.normal(size=(3, 8)))
    update = mp(z_nodes, gt, e)
    expect = mp.aggregate(T.linear(z_nodes, mp.w_node, mp.b_node), gt, e)
    assert np.array_equal(update.data, expect.data)


def test_prepare_graph_rejects_missing_node():
    g = TextAttributedGraph(n=2, edges=((0, 3, (11,)),), node_text=((8,), (8,)))
    with pytest.raises(ValueError, match="missing node"):
        prepare_graph_tensors(g, l_e=1)


# -- cross-attention ------------------------------------------------------------------


def ca_setup(n_prompt, n_nodes, n_question, d=8, seed=21, l_n=3):
    store = ParamStore(seed)
    ca = CrossAttention(store, "ca", d)
    # give the zero-init output projection real values so oracles see signal
    r = np.random.default_rng(seed + 50)
    ca.wo.data = r.normal(0, 0.3, size=(d, d))
    ca.bo.data = r.normal(0, 0.1, size=d)
    g = graph_with_edges(n_nodes, [], l_n=l_n, seed=seed)
    seq = assemble_sequence([8] * n_prompt, g, [9] * n_question)
    gt = prepare_graph_tensors(g, l_e=1)
    cross = build_cross_mask(seq)
    z = Tensor(r.normal(size=(len(seq), d)))
    x = Tensor(r.normal(size=(n_nodes, l_n, d)))
    return ca, gt, cross, z, x


def test_pre_graph_text_rows_exactly_zero_before_projection():
    ca, gt, cross, z, x = ca_setup(3, 2, 2)
    ca.wo.data = np.eye(8)  # make the projection transparent
    ca.bo.data = np.zeros(8)
    out = ca(z, x, cross, gt.text_real)
    for i in range(4):  # <bos> + 3 prompt tokens sit before the graph
        assert np.array_equal(out.data[i], np.zeros(8))


def test_node_token_with_identical_text_rows_returns_that_row():
    ca, gt, cross, z, x = ca_setup(1, 2, 1)
    ca.wo.data = np.eye(8)
    ca.bo.data = np.zeros(8)
    row = np.random.default_rng(1).normal(size=8)
    x.data[1, :, :] = row  # node 1: all text rows identical
    out = ca(z, x, cross, gt.text_real)
    node1_row = 4  # <bos>, prompt, GS, N0, N1
    assert np.max(np.abs(out.data[node1_row] - row)) < 1e-12


def test_cross_attention_matches_nested_loop_oracle():
    ca, gt, cross, z, x = ca_setup(2, 2, 3)
    out = ca(z, x, cross, gt.text_real)
    expect = cross_attention_loops(z.data, x.data, cross, gt.text_real,
                                   ca.wq1.data, ca.wk1.data, ca.wq2.data, ca.wk2.data,
                                   ca.wo.data, ca.bo.data)
    assert np.max(np.abs(out.data - expect)) < 1e-10


def test_cross_attention_respects_pad_mask():
    ca, gt, cross, z, x = ca_setup(1, 2, 2)
    gt.text_real[0, 2] = False  # pretend last token of node 0 text is padding
    base = ca(z, x, cross, gt.text_real).data
    x.data[0, 2, :] = 1e6  # garbage in the padded slot must not matter
    again = ca(z, x, cross, gt.text_real).data
    assert np.array_equal(base, again)


def test_cross_attention_score_count():
    ca, gt, cross, z, x = ca_setup(2, 3, 2)
    ca.score_evaluations = 0
    ca(z, x, cross, gt.text_real)
    L, n, l_n = z.shape[0], 3, 3
    assert ca.score_evaluations == L * n * l_n + L * n


def test_node_token_reads_only_its_own_text():
    ca, gt, cross, z, x = ca_setup(1, 3, 2)
    out = ca(z, x, cross, gt.text_real).data
    x.data[0] = -np.random.default_rng(2).normal(size=x.data[0].shape)
    x.data[2] = 0.0
    out2 = ca(z, x, cross, gt.text_real).data
    node1_row = 4
    assert np.array_equal(out[node1_row], out2[node1_row])


# -- full layer ------------------------------------------------------------------------


def full_layer_setup(seed=31, d=8, zero_extras=True):
    store = ParamStore(seed)
    layer = FusionLayer(store, "L", d, 2, has_mpnn=True, has_cross_attention=True)
    if not zero_extras:
        r = np.random.default_rng(seed + 9)
        layer.mpnn.w_gate.data = r.normal(0, 0.5, size=layer.mpnn.w_gate.data.shape)
        layer.cross.wo.data = r.normal(0, 0.3, size=(d, d))
    g = graph_with_edges(3, [(0, 1), (1, 0), (2, 1)], seed=seed)
    seq = assemble_sequence([8, 8], g, [9, 9])
    gt = prepare_graph_tensors(g, l_e=1)
    r2 = np.random.default_rng(seed + 1)
    t = Tensor(r2.normal(size=(len(seq), d)))
    x = Tensor(r2.normal(size=(3, 3, d)))
    e = Tensor(r2.normal(size=(gt.n_edges, d)))
    return store, layer, seq, gt, t, x, e


def np_layer_norm(v, gain, bias, eps=1e-5):
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    return (v - mu) / np.sqrt(var + eps) * gain + bias


def test_layer_zero_init_equals_plain_transformer_layer():
    store, layer, seq, gt, t, x, e = full_layer_setup(zero_extras=True)
    store2 = ParamStore(31)
    plain = FusionLayer(store2, "L", 8, 2, has_mpnn=False, has_cross_attention=False)
    mask = build_self_mask(seq)
    cross = build_cross_mask(seq)
    node_rows = np.array(seq.node_indices)
    full = layer(t, mask, cross, node_rows, gt, x, e)
    bare = plain(t, mask, cross, node_rows, gt, x, e)
    assert np.array_equal(full.data, bare.data)


def test_layer_matches_straight_line_reference():
    store, layer, seq, gt, t, x, e = full_layer_setup(zero_extras=False)
    mask = build_self_mask(seq)
    cross = build_cross_mask(seq)
    node_rows = np.array(seq.node_indices)
    out = layer(t, mask, cross, node_rows, gt, t_x := x, e).data

    # straight-line recomputation with numpy only
    v = t.data.copy()
    z = np_layer_norm(v, layer.ln_attn.gain.data, layer.ln_attn.bias.data)
    a = layer.attn
    attn_out = np.zeros_like(v)
    dh = 4
    q_all, k_all, val_all = z @ a.wq.data + a.bq.data, z @ a.wk.data + a.bk.data, z @ a.wv.data + a.bv.data
    for h in range(2):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(len(v)):
            cols = np.where(mask[i])[0]
            scores = np.array([q_all[i, sl] @ k_all[j, sl] for j in cols]) / np.sqrt(dh)
            w = np.exp(scores - scores.max())
            w /= w.sum()
            attn_out[i, sl] = sum(wj * val_all[j, sl] for wj, j in zip(w, cols))
    v = v + attn_out @ a.wo.data + a.bo.data

    zmp = np_layer_norm(v, layer.ln_mp.gain.data, layer.ln_mp.bias.data)[node_rows]
    h_nodes = zmp @ layer.mpnn.w_node.data + layer.mpnn.b_node.data
    sorted_edges = [(int(s), int(tt)) for s, tt in zip(gt.edge_src, gt.edge_dst)]
    combined = mpnn_aggregate_loops(h_nodes, sorted_edges, e.data,
                                    layer.mpnn.w_comb.data, layer.mpnn.b_comb.data)
    gate = np.tanh(zmp @ layer.mpnn.w_gate.data)
    v[node_rows] += gate * combined

    zca = np_layer_norm(v, layer.ln_ca.gain.data, layer.ln_ca.bias.data)
    ca = layer.cross
    v = v + cross_attention_loops(zca, t_x.data, cross, gt.text_real,
                                  ca.wq1.data, ca.wk1.data, ca.wq2.data, ca.wk2.data,
                                  ca.wo.data, ca.bo.data)

    zff = np_layer_norm(v, layer.ln_ff.gain.data, layer.ln_ff.bias.data)
    u = zff @ layer.ff.w1.data + layer.ff.b1.data
    gelu_u = 0.5 * u * (1 + np.tanh(np.sqrt(2 / np.pi) * (u + 0.044715 * u**3)))
    v = v + gelu_u @ layer.ff.w2.data + layer.ff.b2.data

    assert np.max(np.abs(out - v)) < 1e-10


def test_layer_gradients_match_finite_differences():
    store, layer, seq, gt, t, x, e = full_layer_setup(seed=77, zero_extras=False)
    mask = build_self_mask(seq)
    cross = build_cross_mask(seq)
    node_rows = np.array(seq.node_indices)
    r = np.random.default_rng(5)
    w_out = Tensor(r.normal(size=(len(seq), 8)))
    # check a representative spread of block parameters end to end
    names = ["L.attn.wq", "L.attn.bo", "L.mpnn.w_comb", "L.mpnn.gate",
             "L.cross.wq1", "L.cross.wk2", "L.cross.wo", "L.ff.w1", "L.ln_mp.gain"]
    params = [store.params[n] for n in names]

    def make_loss():
        out = layer(t, mask, cross, node_rows, gt, x, e)
        return (out * w_out).sum()

    for p in params:
        p.zero_grad()
    finite_difference_check(make_loss, params)
