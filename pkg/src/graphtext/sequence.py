"""Mixed graph-text sequences, shared positional indices, and attention masks.

The input to the model interleaves ordinary text tokens with graph sentinels:

    <bos> prompt... <graph_start> <node>*n <graph_end> question...

Two masks govern attention over this sequence. The self mask keeps text
causal while letting every token of one graph block see the whole block plus
the text before it. The cross mask controls which node texts each sequence
position may read: nothing before the graph, only its own text for a node
token, all of them after the graph.

One graph per sequence; the token type reserves room for more, but the
builders reject multi-graph streams to keep the block rule unambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BOS

__all__ = [
    "TEXT", "G_START", "G_NODE", "G_END",
    "MixedToken", "MixedSequence", "AttentionMaskPair", "SequenceError",
    "assemble_sequence", "assign_positions", "build_self_mask",
    "build_cross_mask", "build_masks", "render_mask_ascii",
]

TEXT = "text"
G_START = "graph_start"
G_NODE = "node"
G_END = "graph_end"


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class MixedToken:
    """One sequence slot: a text token id, or a graph sentinel.

    `value` is the token id for text and the node index for node sentinels;
    it is -1 for the start/end sentinels.
    """

    kind: str
    value: int = -1

    @classmethod
    def text(cls, token_id: int) -> "MixedToken":
        return cls(TEXT, int(token_id))

    @classmethod
    def node(cls, index: int) -> "MixedToken":
        return cls(G_NODE, int(index))

    @property
    def is_graph(self) -> bool:
        return self.kind != TEXT


@dataclass(frozen=True)
class MixedSequence:
    tokens: tuple
    positions: tuple
    graph_span: tuple | None  # (index of <graph_start>, index of <graph_end>)

    def __len__(self):
        return len(self.tokens)

    @property
    def node_indices(self) -> list[int]:
        """Sequence indices of the node tokens, in storage order."""
        return [i for i, t in enumerate(self.tokens) if t.kind == G_NODE]

    @property
    def n_nodes(self) -> int:
        return len(self.node_indices)


def _check_wellformed(tokens) -> tuple | None:
    """Return the single graph span, or None for pure text; raise otherwise."""
    starts = [i for i, t in enumerate(tokens) if t.kind == G_START]
    ends = [i for i, t in enumerate(tokens) if t.kind == G_END]
    nodes = [i for i, t in enumerate(tokens) if t.kind == G_NODE]
    if not starts and not ends:
        if nodes:
            raise SequenceError("node tokens outside any graph block")
        return None
    if len(starts) != 1 or len(ends) != 1:
        raise SequenceError(f"expected exactly one graph block, found {len(starts)} starts / {len(ends)} ends")
    s, e = starts[0], ends[0]
    if not s < e:
        raise SequenceError("graph_end precedes graph_start")
    inside = set(range(s + 1, e))
    if set(nodes) != inside:
        raise SequenceError("the tokens between graph_start and graph_end must be exactly the node tokens")
    seen = [tokens[i].value for i in nodes]
    if sorted(seen) != list(range(len(seen))):
        raise SequenceError(f"node indices must be a permutation of 0..n-1, got {seen}")
    return (s, e)


def assign_positions(tokens) -> tuple:
    """Positional indices: text counts up from 0; a whole graph block shares
    the index its <graph_start> lands on, and text resumes one past it."""
    span = _check_wellformed(tuple(tokens))
    positions = []
    pos = 0
    i = 0
    while i < len(tokens):
        if span is not None and i == span[0]:
            for _ in range(span[0], span[1] + 1):
                positions.append(pos)
            pos += 1
            i = span[1] + 1
        else:
            positions.append(pos)
            pos += 1
            i += 1
    return tuple(positions)


def assemble_sequence(prompt, graph, question, max_len: int = 512) -> MixedSequence:
    """Build <bos>, prompt, graph block, question — with positions assigned.

    Node tokens appear in the graph's storage order, which permutation tests
    are free to shuffle upstream.
    """
    tokens = [MixedToken.text(BOS)]
    tokens += [MixedToken.text(t) for t in prompt]
    gs = len(tokens)
    tokens.append(MixedToken(G_START))
    tokens += [MixedToken.node(v) for v in range(graph.n)]
    tokens.append(MixedToken(G_END))
    ge = len(tokens) - 1
    tokens += [MixedToken.text(t) for t in question]
    if len(tokens) > max_len:
        raise SequenceError(f"sequence length {len(tokens)} exceeds the configured maximum {max_len}")
    return MixedSequence(tokens=tuple(tokens), positions=assign_positions(tokens), graph_span=(gs, ge))


def extend_with_text(seq: MixedSequence, tokens, max_len: int = 512) -> MixedSequence:
    """Append text tokens (teacher-forced answers, generated continuations)."""
    toks = tuple(seq.tokens) + tuple(MixedToken.text(t) for t in tokens)
    if len(toks) > max_len:
        raise SequenceError(f"sequence length {len(toks)} exceeds the configured maximum {max_len}")
    return MixedSequence(tokens=toks, positions=assign_positions(toks), graph_span=seq.graph_span)


def build_self_mask(seq: MixedSequence) -> np.ndarray:
    """L x L boolean self-attention visibility (row = query, column = key).

    Text queries see everything at or before them. Graph-block queries see
    their whole block — start, every node, end — plus the text strictly
    before the block; nothing after the block ever becomes visible to them.
    """
    tokens = seq.tokens
    span = _check_wellformed(tokens)
    L = len(tokens)
    mask = np.tril(np.ones((L, L), dtype=bool))
    if span is not None:
        s, e = span
        # every intra-block pair is mutually visible
        mask[s:e + 1, s:e + 1] = True
    return mask


def build_cross_mask(seq: MixedSequence) -> np.ndarray:
    """L x n boolean visibility of node texts from each sequence position.

    Pre-graph text sees none (causality); a node token sees only its own
    text; post-graph text sees all of them. The start/end sentinels read
    nothing.
    """
    tokens = seq.tokens
    span = _check_wellformed(tokens)
    n = sum(1 for t in tokens if t.kind == G_NODE)
    mask = np.zeros((len(tokens), n), dtype=bool)
    if span is None:
        return mask
    s, e = span
    for i, tok in enumerate(tokens):
        if tok.kind == G_NODE:
            mask[i, tok.value] = True
        elif tok.kind == TEXT and i > e:
            mask[i, :] = True
    return mask


@dataclass(frozen=True)
class AttentionMaskPair:
    self_mask: np.ndarray
    cross_mask: np.ndarray


def build_masks(seq: MixedSequence) -> AttentionMaskPair:
    return AttentionMaskPair(self_mask=build_self_mask(seq), cross_mask=build_cross_mask(seq))


def _token_label(tok: MixedToken) -> str:
    return {TEXT: f"t{tok.value}", G_START: "GS", G_NODE: f"N{tok.value}", G_END: "GE"}[tok.kind]


def render_mask_ascii(mask: np.ndarray, row_labels, col_labels) -> str:
    """Render a boolean mask as a '#'/'.' grid for eyeballing."""
    width = max((len(l) for l in list(row_labels) + list(col_labels)), default=1)
    lines = []
    header = " " * (width + 1) + " ".join(f"{c:>{width}}" for c in col_labels)
    lines.append(header)
    for lbl, row in zip(row_labels, mask):
        cells = " ".join(f"{'#' if v else '.':>{width}}" for v in row)
        lines.append(f"{lbl:>{width}} {cells}")
    return "\n".join(lines)


def render_sequence_masks(seq: MixedSequence) -> str:
    """ASCII report of both masks plus the position row, for visual diffing."""
    labels = [_token_label(t) for t in seq.tokens]
    node_labels = [f"x{v}" for v in range(seq.n_nodes)]
    parts = [
        "tokens:    " + " ".join(labels),
        "positions: " + " ".join(str(p) for p in seq.positions),
        "",
        "self-attention mask (row attends column):",
        render_mask_ascii(build_self_mask(seq), labels, labels),
        "",
        "cross-attention mask (row reads node-text column):",
        render_mask_ascii(build_cross_mask(seq), labels, node_labels) if seq.n_nodes else "(no nodes)",
    ]
    return "\n".join(parts)
