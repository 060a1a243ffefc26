"""The three computational blocks of a structure-aware transformer layer.

Each layer is: masked multi-head self-attention, then (optionally) gated
message passing applied to the node-token rows, then (optionally) two-stage
graph-text cross-attention, then a feed-forward block. Every block is
pre-normalized and residual.

Message passing aggregates in-neighbor messages h_v * e_uv with three
reductions — mean, max, std — concatenated and projected back to width d,
then written into the residual stream through a tanh gate whose weight vector
starts at exactly zero, so a fresh model ignores the graph structure until
training opens the gate.

Cross-attention reads the uncompressed per-node text in two stages: stage one
collapses each node's text to one vector per (query, node) pair; stage two
lets the query choose among nodes. Its output projection starts at zero for
the same reason the gate does. Stage one performs L*n*L_n score evaluations
(stage two adds L*n), linear in the node-text volume rather than quadratic in
the would-be concatenated sequence; `score_evaluations` counts them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import TextAttributedGraph
from .tensor import Parameter, Tensor

__all__ = [
    "ParamStore",
    "GraphTensors",
    "SelfAttention",
    "FeedForward",
    "MessagePassing",
    "CrossAttention",
    "FusionLayer",
    "prepare_graph_tensors",
]

_NEG_BIG = -1e30


def _name_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class ParamStore:
    """Creates and registers named parameters.

    Initialization is keyed by (seed, name), so a parameter gets the same
    values no matter which other parameters exist — configs that share names
    share weights exactly, which is what the zero-init identity tests rely on.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.params: dict[str, Parameter] = {}

    def _register(self, p: Parameter) -> Parameter:
        if p.name in self.params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self.params[p.name] = p
        return p

    def normal(self, name: str, shape, scale: float = 0.02) -> Parameter:
        rng = np.random.default_rng(_name_seed(self.seed, name))
        return self._register(Parameter(rng.normal(0.0, scale, size=shape), name))

    def zeros(self, name: str, shape) -> Parameter:
        return self._register(Parameter(np.zeros(shape), name))

    def ones(self, name: str, shape) -> Parameter:
        return self._register(Parameter(np.ones(shape), name))


class LayerNormParams:
    def __init__(self, store: ParamStore, prefix: str, d: int):
        self.gain = store.ones(f"{prefix}.gain", (d,))
        self.bias = store.zeros(f"{prefix}.bias", (d,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


@dataclass
class GraphTensors:
    """Precomputed index arrays for one graph, shared by every layer.

    Messages flow along directed edges from source to target; edges are kept
    in (target, source) order so per-node summation order is canonical. Each
    node's messages occupy `slot_idx` positions of a dense (n, K) layout with
    `slot_valid` marking real slots, K being the maximum in-degree.
    """

    n: int
    edge_src: np.ndarray          # (E,)
    edge_dst: np.ndarray          # (E,)
    edge_tok: np.ndarray          # (E, L_e) padded token ids
    edge_tok_mask: np.ndarray     # (E, L_e, 1) 1.0 on real tokens
    edge_inv_count: np.ndarray    # (E, 1)
    slot_idx: np.ndarray          # (n, K) message-row indices
    slot_valid: np.ndarray        # (n, K, 1)
    in_inv_count: np.ndarray      # (n, 1) 1/in-degree, 0 for isolated nodes
    in_nonempty: np.ndarray       # (n, 1) 1.0 where in-degree > 0
    node_text: np.ndarray         # (n, L_n) token ids
    text_real: np.ndarray         # (n, L_n) bool, True on real (non-pad) tokens
    text_mask_f: np.ndarray       # (n, L_n, 1) float version
    text_inv_count: np.ndarray    # (n, 1)

    @property
    def n_edges(self) -> int:
        return len(self.edge_src)


def prepare_graph_tensors(graph: TextAttributedGraph, l_e: int, pad_id: int = 0) -> GraphTensors:
    n = graph.n
    edges = sorted(graph.edges, key=lambda e: (e[1], e[0]))
    for (u, v, _) in edges:
        if not (0 <= u < n and 0 <= v < n):
            raise ValueError(f"edge ({u}, {v}) references a missing node (n={n})")
    e_count = len(edges)
    src = np.array([e[0] for e in edges], dtype=np.intp)
    dst = np.array([e[1] for e in edges], dtype=np.intp)
    etok = np.full((e_count, max(l_e, 1)), pad_id, dtype=np.intp)
    for i, (_, _, ts) in enumerate(edges):
        etok[i, : len(ts)] = ts
    ereal = np.zeros(etok.shape, dtype=bool)
    for i, (_, _, ts) in enumerate(edges):
        ereal[i, : len(ts)] = True
    ecount = ereal.sum(axis=1, keepdims=True)
    einv = np.where(ecount > 0, 1.0 / np.maximum(ecount, 1), 0.0)

    indeg = np.zeros(n, dtype=np.intp)
    for t_ in dst:
        indeg[t_] += 1
    k = int(indeg.max()) if e_count else 0
    slot_idx = np.zeros((n, max(k, 1)), dtype=np.intp)
    slot_valid = np.zeros((n, max(k, 1), 1))
    fill = np.zeros(n, dtype=np.intp)
    for row, t_ in enumerate(dst):
        slot_idx[t_, fill[t_]] = row
        slot_valid[t_, fill[t_], 0] = 1.0
        fill[t_] += 1
    inv = np.where(indeg[:, None] > 0, 1.0 / np.maximum(indeg[:, None], 1), 0.0)

    ntext = np.array([list(r) for r in graph.node_text], dtype=np.intp).reshape(n, graph.l_n)
    treal = ntext != pad_id
    tcount = treal.sum(axis=1, keepdims=True)
    tinv = np.where(tcount > 0, 1.0 / np.maximum(tcount, 1), 0.0)

    return GraphTensors(
        n=n, edge_src=src, edge_dst=dst,
        edge_tok=etok, edge_tok_mask=ereal[:, :, None].astype(float), edge_inv_count=einv,
        slot_idx=slot_idx, slot_valid=slot_valid,
        in_inv_count=inv, in_nonempty=(indeg[:, None] > 0).astype(float),
        node_text=ntext, text_real=treal, text_mask_f=treal[:, :, None].astype(float),
        text_inv_count=tinv,
    )


class SelfAttention:
    """Multi-head attention under an arbitrary boolean visibility mask."""

    def __init__(self, store: ParamStore, prefix: str, d: int, n_heads: int):
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        s = d**-0.5
        self.wq = store.normal(f"{prefix}.wq", (d, d), s)
        self.wk = store.normal(f"{prefix}.wk", (d, d), s)
        self.wv = store.normal(f"{prefix}.wv", (d, d), s)
        self.wo = store.normal(f"{prefix}.wo", (d, d), s)
        self.bq = store.zeros(f"{prefix}.bq", (d,))
        self.bk = store.zeros(f"{prefix}.bk", (d,))
        self.bv = store.zeros(f"{prefix}.bv", (d,))
        self.bo = store.zeros(f"{prefix}.bo", (d,))

    def __call__(self, z: Tensor, mask: np.ndarray) -> Tensor:
        L = z.shape[0]
        if mask.shape != (L, L):
            raise T.ShapeError(f"self mask shape {mask.shape} does not fit sequence length {L}")
        h, dh = self.n_heads, self.d_head

        def split(x):  # (L, d) -> (h, L, dh)
            return x.reshape(L, h, dh).transpose(1, 0, 2)

        q = split(T.linear(z, self.wq, self.bq))
        k = split(T.linear(z, self.wk, self.bk))
        v = split(T.linear(z, self.wv, self.bv))
        scores = T.matmul(q, k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh))
        tiled = np.broadcast_to(mask, (h, L, L)).reshape(h * L, L)
        attn = T.masked_softmax_rows(scores.reshape(h * L, L), tiled).reshape(h, L, L)
        ctx = T.matmul(attn, v).transpose(1, 0, 2).reshape(L, self.d)
        return T.linear(ctx, self.wo, self.bo)


class FeedForward:
    def __init__(self, store: ParamStore, prefix: str, d: int):
        self.w1 = store.normal(f"{prefix}.w1", (d, 4 * d), d**-0.5)
        self.b1 = store.zeros(f"{prefix}.b1", (4 * d,))
        self.w2 = store.normal(f"{prefix}.w2", (4 * d, d), (4 * d) ** -0.5)
        self.b2 = store.zeros(f"{prefix}.b2", (d,))

    def __call__(self, z: Tensor) -> Tensor:
        return T.linear(T.gelu(T.linear(z, self.w1, self.b1)), self.w2, self.b2)


class MessagePassing:
    """Gated multi-aggregator message passing over node-token rows."""

    def __init__(self, store: ParamStore, prefix: str, d: int,
                 multi_aggregators: bool = True, gated: bool = True):
        self.multi_aggregators = multi_aggregators
        self.gated = gated
        self.w_node = store.normal(f"{prefix}.w_node", (d, d), d**-0.5)
        self.b_node = store.zeros(f"{prefix}.b_node", (d,))
        agg_width = 3 * d if multi_aggregators else d
        self.w_comb = store.normal(f"{prefix}.w_comb", (agg_width, d), agg_width**-0.5)
        self.b_comb = store.zeros(f"{prefix}.b_comb", (d,))
        if gated:
            # zero so message passing contributes nothing until trained
            self.w_gate = store.zeros(f"{prefix}.gate", (d, 1))

    def aggregate(self, h: Tensor, gt: GraphTensors, edge_emb: Tensor) -> Tensor:
        """Combine in-neighbor messages into one vector per node."""
        n, d = gt.n, h.shape[1]
        if gt.n_edges == 0:
            zeros = Tensor(np.zeros((n, 3 * d if self.multi_aggregators else d)))
            return T.linear(zeros, self.w_comb, self.b_comb)
        messages = T.gather_rows(h, gt.edge_src) * edge_emb
        k = gt.slot_idx.shape[1]
        padded = T.gather_rows(messages, gt.slot_idx.reshape(-1)).reshape(n, k, d)
        masked = padded * Tensor(gt.slot_valid)
        inv = Tensor(gt.in_inv_count)
        m1 = T.reduce_sum(masked, 1) * inv
        if self.multi_aggregators:
            m2 = T.reduce_sum(masked * masked, 1) * inv
            var = m2 - m1 * m1
            std = T.sqrt(var + 1e-9) - Tensor(np.full(var.shape, np.sqrt(1e-9)))
            shifted = masked + Tensor(_NEG_BIG * (1.0 - gt.slot_valid))
            mx = T.reduce_max(shifted, 1) * Tensor(gt.in_nonempty)
            agg = T.concat_last([m1, mx, std])
        else:
            agg = m1
        return T.linear(agg, self.w_comb, self.b_comb)

    def __call__(self, z_nodes: Tensor, gt: GraphTensors, edge_emb: Tensor) -> Tensor:
        """Per-node residual update from the normalized node-token rows."""
        h = T.linear(z_nodes, self.w_node, self.b_node)
        combined = self.aggregate(h, gt, edge_emb)
        if not self.gated:
            return combined
        gate = T.tanh(T.matmul(z_nodes, self.w_gate))  # (n, 1)
        return gate * combined


class CrossAttention:
    """Two-stage attention from sequence positions into per-node text."""

    def __init__(self, store: ParamStore, prefix: str, d: int):
        self.d = d
        s = d**-0.5
        self.wq1 = store.normal(f"{prefix}.wq1", (d, d), s)
        self.wk1 = store.normal(f"{prefix}.wk1", (d, d), s)
        self.wq2 = store.normal(f"{prefix}.wq2", (d, d), s)
        self.wk2 = store.normal(f"{prefix}.wk2", (d, d), s)
        # zero so the block contributes nothing until trained
        self.wo = store.zeros(f"{prefix}.wo", (d, d))
        self.bo = store.zeros(f"{prefix}.bo", (d,))
        self.score_evaluations = 0

    def __call__(self, z: Tensor, x: Tensor, cross_mask: np.ndarray, text_real: np.ndarray) -> Tensor:
        L, d = z.shape
        n, l_n = text_real.shape
        if x.shape != (n, l_n, d):
            raise T.ShapeError(f"node text embedding shape {x.shape} does not match ({n}, {l_n}, {d})")
        if cross_mask.shape != (L, n):
            raise T.ShapeError(f"cross mask shape {cross_mask.shape} does not fit (L={L}, n={n})")
        if n == 0:
            return Tensor(np.zeros((L, d)))

        # stage 1: collapse each node's text to one vector per query; the
        # softmax runs over that node's own tokens, separately per (query,
        # node) pair, with padded slots excluded
        q1 = T.matmul(z, self.wq1)
        k1 = T.matmul(x.reshape(n * l_n, d), self.wk1)
        scores1 = T.matmul(q1, k1.transpose()) * (1.0 / np.sqrt(d))  # (L, n*l_n)
        self.score_evaluations += L * n * l_n
        pad = np.broadcast_to(text_real.reshape(1, n, l_n), (L, n, l_n)).reshape(L * n, l_n)
        attn1 = T.masked_softmax_rows(scores1.reshape(L * n, l_n), pad).reshape(L, n, l_n)
        x_per = T.matmul(attn1.transpose(1, 0, 2), x).transpose(1, 0, 2)  # (L, n, d)

        # stage 2: node rows keep their own column (the mask leaves exactly
        # one key, so the softmax weight is 1); text rows choose among nodes
        q2 = T.matmul(z, self.wq2)
        k2 = T.matmul(x_per.reshape(L * n, d), self.wk2).reshape(L, n, d)
        scores2 = T.matmul(k2, q2.reshape(L, d, 1)).reshape(L, n)
        self.score_evaluations += L * n
        w2 = T.masked_softmax_rows(scores2, cross_mask)
        out = T.matmul(w2.reshape(L, 1, n), x_per).reshape(L, d)
        return T.linear(out, self.wo, self.bo)


class FusionLayer:
    """One transformer layer, optionally structure-aware."""

    def __init__(self, store: ParamStore, prefix: str, d: int, n_heads: int,
                 has_mpnn: bool, has_cross_attention: bool,
                 multi_aggregators: bool = True, gated: bool = True):
        self.has_mpnn = has_mpnn
        self.has_cross_attention = has_cross_attention
        self.ln_attn = LayerNormParams(store, f"{prefix}.ln_attn", d)
        self.attn = SelfAttention(store, f"{prefix}.attn", d, n_heads)
        if has_mpnn:
            self.ln_mp = LayerNormParams(store, f"{prefix}.ln_mp", d)
            self.mpnn = MessagePassing(store, f"{prefix}.mpnn", d, multi_aggregators, gated)
        if has_cross_attention:
            self.ln_ca = LayerNormParams(store, f"{prefix}.ln_ca", d)
            self.cross = CrossAttention(store, f"{prefix}.cross", d)
        self.ln_ff = LayerNormParams(store, f"{prefix}.ln_ff", d)
        self.ff = FeedForward(store, f"{prefix}.ff", d)

    def __call__(self, t: Tensor, self_mask: np.ndarray, cross_mask: np.ndarray,
                 node_rows: np.ndarray, gt: GraphTensors | None,
                 x: Tensor | None, edge_emb: Tensor | None) -> Tensor:
        t = t + self.attn(self.ln_attn(t), self_mask)
        if self.has_mpnn and gt is not None and gt.n > 0:
            z_nodes = T.gather_rows(self.ln_mp(t), node_rows)
            update = self.mpnn(z_nodes, gt, edge_emb)
            t = T.add_rows(t, node_rows, update)
        if self.has_cross_attention and gt is not None:
            t = t + self.cross(self.ln_ca(t), x, cross_mask, gt.text_real)
        t = t + self.ff(self.ln_ff(t))
        return t
