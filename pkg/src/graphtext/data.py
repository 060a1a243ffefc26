"""Text-attributed graphs, a closed word-level vocabulary, and dataset files.

A graph instance couples a directed graph with token text on every node and
edge. Node text rows are padded to a fixed length so they can be stored as a
dense matrix; edge text is variable up to a cap. Everything here is immutable
after construction and safe to share across threads.

Dataset files are line-delimited JSON, one instance per line; the vocabulary
file is one word per line with the line number as the id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

__all__ = [
    "PAD", "UNK", "GRAPH_START", "NODE", "GRAPH_END", "BOS", "EOS",
    "RESERVED", "Vocabulary", "TextAttributedGraph", "TaskText",
    "pad_to", "validate_graph", "PaddingError",
    "write_dataset", "read_dataset",
]

PAD = 0
UNK = 1
GRAPH_START = 2
NODE = 3
GRAPH_END = 4
BOS = 5
EOS = 6

RESERVED = ("<pad>", "<unk>", "<graph_start>", "<node>", "<graph_end>", "<bos>", "<eos>")


class PaddingError(ValueError):
    pass


class Vocabulary:
    """Closed word vocabulary with dense, stable 0-based ids.

    The seven reserved sentinels always occupy ids 0..6; ordinary words follow
    in the order given. Out-of-vocabulary words map to <unk> (lossy by design).
    """

    def __init__(self, words):
        self.words: list[str] = list(RESERVED) + [w for w in words if w not in RESERVED]
        self._ids = {w: i for i, w in enumerate(self.words)}
        if len(self._ids) != len(self.words):
            dupes = sorted({w for w in self.words if self.words.count(w) > 1})
            raise ValueError(f"duplicate vocabulary words: {dupes}")

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self._ids

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK)

    def word_of(self, idx: int) -> str:
        return self.words[idx]

    def tokenize(self, text: str) -> list[int]:
        """Whitespace-split words to ids; unknown words become <unk>."""
        return [self._ids.get(w, UNK) for w in text.split()]

    def detokenize(self, tokens) -> str:
        """Ids back to a space-joined string; inverse of tokenize for
        whitespace-normalized in-vocabulary text."""
        return " ".join(self.words[t] for t in tokens)

    def save(self, path):
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary file {path} does not start with the reserved sentinels")
        return cls(lines[len(RESERVED):])


def pad_to(tokens, length: int) -> list[int]:
    """Right-pad a token sequence with <pad> to exactly `length`."""
    tokens = list(tokens)
    if len(tokens) > length:
        raise PaddingError(f"sequence of length {len(tokens)} does not fit in {length}")
    return tokens + [PAD] * (length - len(tokens))


@dataclass(frozen=True)
class TextAttributedGraph:
    """A directed graph with token text on every node and edge.

    `node_text` rows are all padded to the same length; edge token sequences
    are variable-length up to the dataset's edge cap. Endpoints index nodes.
    """

    n: int
    edges: tuple  # of (src, dst, tuple of edge token ids)
    node_text: tuple  # of tuples, each exactly L_n long

    @property
    def l_n(self) -> int:
        return len(self.node_text[0]) if self.node_text else 0

    def neighbors_in(self, u: int) -> list[int]:
        return [s for (s, t, _) in self.edges if t == u]

    def has_edge(self, u: int, v: int) -> bool:
        return any(s == u and t == v for (s, t, _) in self.edges)

    @classmethod
    def build(cls, n, edges, node_text, l_n) -> "TextAttributedGraph":
        rows = tuple(tuple(pad_to(row, l_n)) for row in node_text)
        es = tuple((int(u), int(v), tuple(int(t) for t in ts)) for (u, v, ts) in edges)
        return cls(n=int(n), edges=es, node_text=rows)


def validate_graph(g: TextAttributedGraph, l_e: int | None = None) -> str | None:
    """Check the type invariants; return the first violation or None if ok."""
    if g.n < 0:
        return f"node count {g.n} is negative"
    if len(g.node_text) != g.n:
        return f"node_text has {len(g.node_text)} rows for {g.n} nodes"
    l_n = g.l_n
    for v, row in enumerate(g.node_text):
        if len(row) != l_n:
            return f"node {v} text row has length {len(row)}, expected {l_n}"
    for i, (u, v, ts) in enumerate(g.edges):
        if not (0 <= u < g.n):
            return f"edge {i} source {u} out of range [0, {g.n})"
        if not (0 <= v < g.n):
            return f"edge {i} target {v} out of range [0, {g.n})"
        if l_e is not None and len(ts) > l_e:
            return f"edge {i} text has {len(ts)} tokens, cap is {l_e}"
    return None


@dataclass(frozen=True)
class TaskText:
    """Task wording around the graph: prefix prompt, suffix question, and the
    supervision — generated target tokens, a class/regression label, or both."""

    prompt: tuple
    question: tuple
    target: tuple | None = None
    label: int | float | None = None

    def __post_init__(self):
        if self.target is None and self.label is None:
            raise ValueError("an instance needs a target, a label, or both")


@dataclass(frozen=True)
class Instance:
    """One dataset record: a graph plus its task text.

    `query_nodes` carries the node indices the question refers to (one for
    degree / node-text, the ordered pair for edge existence) so the readout
    head knows which rows to supervise and score.
    """

    graph: TextAttributedGraph
    text: TaskText
    query_nodes: tuple = ()


def _instance_to_record(inst: Instance) -> dict:
    rec = {
        "graph": {
            "n": inst.graph.n,
            "edges": [[u, v, list(ts)] for (u, v, ts) in inst.graph.edges],
            "node_text": [list(r) for r in inst.graph.node_text],
        },
        "prompt": list(inst.text.prompt),
        "question": list(inst.text.question),
    }
    if inst.text.target is not None:
        rec["target"] = list(inst.text.target)
    if inst.text.label is not None:
        rec["label"] = inst.text.label
    if inst.query_nodes:
        rec["query_nodes"] = list(inst.query_nodes)
    return rec


def _instance_from_record(rec: dict) -> Instance:
    g = rec["graph"]
    graph = TextAttributedGraph(
        n=g["n"],
        edges=tuple((u, v, tuple(ts)) for (u, v, ts) in g["edges"]),
        node_text=tuple(tuple(r) for r in g["node_text"]),
    )
    text = TaskText(
        prompt=tuple(rec["prompt"]),
        question=tuple(rec["question"]),
        target=tuple(rec["target"]) if "target" in rec else None,
        label=rec.get("label"),
    )
    return Instance(graph=graph, text=text, query_nodes=tuple(rec.get("query_nodes", ())))


def write_dataset(path, instances):
    """Write instances as line-delimited JSON records."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps(_instance_to_record(inst), separators=(",", ":")) + "\n")


def read_dataset(path) -> list[Instance]:
    out = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(_instance_from_record(json.loads(line)))
    return out
