"""Generators and exact oracles for the synthetic graph-property tasks.

Three tasks: degree (state a named node's degree), edge (does a directed
edge exist between a named ordered pair), and node-text retrieval (repeat a
named node's sentence verbatim).

Graphs are Erdős–Rényi with both directions emitted for every sampled
undirected edge. Every node's sentence begins with a unique name word — that
is how the question refers to a node — followed by random filler words.
Every instance is checked against an independent oracle at generation time,
and generation is fully determined by (seed, split, index), so regenerating
a dataset yields byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (Instance, TaskText, TextAttributedGraph, Vocabulary,
                   pad_to, validate_graph, write_dataset)

__all__ = [
    "NAME_WORDS", "GeneratorConfig", "build_default_vocabulary",
    "generate_split", "generate_degree_task", "generate_edge_task",
    "generate_node_text_task", "score", "write_task_dataset",
    "task_readout_kind", "task_n_classes", "class_verbalizer",
    "GenerationError",
]

TASKS = ("degree", "edge", "node-text")

_TEMPLATE_WORDS = [
    "task", "degree", "edge", "text", "of", "node", "from", "to",
    "is", "what", "the", "link", "yes", "no",
]

_DIGIT_WORDS = [str(i) for i in range(10)]

NAME_WORDS = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
    "india", "juliet", "kilo", "lima", "mike", "november", "oscar", "papa",
    "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu", "amber", "basil", "cedar", "dune", "ember",
    "fern", "grove", "hazel", "iris", "jade", "kelp", "lotus", "maple",
    "nectar",
]

_FILLER_WORDS = [
    "apple", "arrow", "badge", "ball", "barn", "basket", "beach", "bell",
    "bench", "bird", "blade", "boat", "book", "boot", "bottle", "bowl",
    "box", "branch", "bread", "brick", "bridge", "broom", "brush", "button",
    "cable", "cake", "camp", "candle", "card", "carpet", "cart", "castle",
    "cave", "chain", "chair", "chalk", "cherry", "chest", "cloud", "coast",
    "coin", "comb", "corn", "crane", "creek", "crown", "cup", "curtain",
    "desk", "dish", "door", "drum", "eagle", "engine", "fence", "field",
    "flag", "flame", "floor", "flour", "flower", "forest", "fork", "fox",
    "frame", "frost", "garden", "gate", "glass", "glove", "grain", "grape",
    "grass", "hammer", "harbor", "hat", "hill", "horn", "horse", "house",
    "island", "jar", "kettle", "key", "kite", "knife", "ladder", "lake",
    "lamp", "leaf", "lemon", "letter", "lion", "lock", "log", "marsh",
    "meadow", "mill", "mirror", "moon", "moss", "mountain", "nail", "needle",
    "nest", "oak", "ocean", "orchard", "oven", "owl", "paddle", "page",
    "paint", "pan", "path", "peach", "pearl", "pebble", "pen", "piano",
    "pillow", "pine", "pipe", "plate", "plum", "pond", "river", "road",
    "rock",
]


class GenerationError(RuntimeError):
    pass


def build_default_vocabulary() -> Vocabulary:
    return Vocabulary(_TEMPLATE_WORDS + _DIGIT_WORDS + NAME_WORDS + _FILLER_WORDS)


@dataclass(frozen=True)
class GeneratorConfig:
    task: str = "degree"
    n_min: int = 5
    n_max: int = 20
    edge_prob: float = 0.25
    sent_min: int = 3
    sent_max: int = 8
    instances: dict = field(default_factory=lambda: {"train": 2000, "val": 200, "test": 400})
    seed: int = 0
    degree_cap: int = 8

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not (1 <= self.n_min <= self.n_max <= len(NAME_WORDS)):
            raise ValueError(f"node count range [{self.n_min}, {self.n_max}] is empty or too large")
        if not (0.0 <= self.edge_prob <= 1.0):
            raise ValueError(f"edge probability {self.edge_prob} outside [0, 1]")
        if not (1 <= self.sent_min <= self.sent_max):
            raise ValueError(f"sentence length range [{self.sent_min}, {self.sent_max}] is empty")

    @property
    def l_n(self) -> int:
        return self.sent_max

    @property
    def l_e(self) -> int:
        return 1


def _rng_for(cfg: GeneratorConfig, split: str, index: int) -> np.random.Generator:
    split_ord = {"train": 0, "val": 1, "test": 2}.get(split)
    if split_ord is None:
        raise ValueError(f"unknown split {split!r}")
    return np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(split_ord, index)))


def _random_graph(rng, cfg: GeneratorConfig, vocab: Vocabulary) -> tuple[TextAttributedGraph, list[int]]:
    """Mirrored Erdős–Rényi graph with a named sentence on every node."""
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    name_slots = rng.choice(len(NAME_WORDS), size=n, replace=False)
    name_ids = [vocab.id_of(NAME_WORDS[i]) for i in name_slots]
    link_id = vocab.id_of("link")
    filler_ids = [vocab.id_of(w) for w in _FILLER_WORDS]

    sentences = []
    for v in range(n):
        length = int(rng.integers(cfg.sent_min, cfg.sent_max + 1))
        fill = rng.choice(filler_ids, size=length - 1, replace=True).tolist()
        sentences.append([name_ids[v]] + [int(w) for w in fill])

    edges = []
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < cfg.edge_prob:
                edges.append((u, v, (link_id,)))
                edges.append((v, u, (link_id,)))
    graph = TextAttributedGraph.build(n, edges, sentences, cfg.l_n)
    problem = validate_graph(graph, cfg.l_e)
    if problem:
        raise GenerationError(f"generator produced an invalid graph: {problem}")
    return graph, name_ids


def _degree_of(graph: TextAttributedGraph, v: int) -> int:
    # independent recount straight off the edge list
    return sum(1 for (_, t, _) in graph.edges if t == v)


def _question(vocab: Vocabulary, words: list[str], names: list[int]) -> tuple:
    out = []
    for w in words:
        if isinstance(w, int):
            out.append(w)
        else:
            out.append(vocab.id_of(w))
    return tuple(out)


def generate_degree_task(cfg: GeneratorConfig, vocab: Vocabulary, split: str, index: int) -> Instance:
    rng = _rng_for(cfg, split, index)
    for _ in range(100):
        graph, names = _random_graph(rng, cfg, vocab)
        eligible = [v for v in range(graph.n) if _degree_of(graph, v) <= cfg.degree_cap]
        if not eligible:
            continue  # every node exceeds the cap; resample the graph
        q = int(eligible[rng.integers(len(eligible))])
        deg = _degree_of(graph, q)
        target = (vocab.id_of(str(deg)),)
        inst = Instance(
            graph=graph,
            text=TaskText(
                prompt=_question(vocab, ["task", "degree"], names),
                question=_question(vocab, ["degree", "of", "node", names[q], "is"], names),
                target=target,
                label=deg,
            ),
            query_nodes=(q,),
        )
        assert sum(1 for (s, t, _) in graph.edges if t == q) == deg  # oracle recount
        return inst
    raise GenerationError(f"could not sample a degree instance under cap {cfg.degree_cap} "
                          f"after 100 graphs (seed {cfg.seed}, {split}[{index}])")


def generate_edge_task(cfg: GeneratorConfig, vocab: Vocabulary, split: str, index: int) -> Instance:
    rng = _rng_for(cfg, split, index)
    positive = index % 2 == 0  # exact 50/50 balance across a split
    for _ in range(100):
        graph, names = _random_graph(rng, cfg, vocab)
        pairs = {(s, t) for (s, t, _) in graph.edges}
        if positive:
            if not pairs:
                continue  # too sparse for a positive pair; resample
            chosen = sorted(pairs)[int(rng.integers(len(pairs)))]
        else:
            non_edges = [(u, v) for u in range(graph.n) for v in range(graph.n)
                         if u != v and (u, v) not in pairs]
            if not non_edges:
                continue  # complete graph; resample
            chosen = non_edges[int(rng.integers(len(non_edges)))]
        u, v = chosen
        label = int(positive)
        target = (vocab.id_of("yes" if positive else "no"),)
        inst = Instance(
            graph=graph,
            text=TaskText(
                prompt=_question(vocab, ["task", "edge"], names),
                question=_question(vocab, ["edge", "from", names[u], "to", names[v], "is"], names),
                target=target,
                label=label,
            ),
            query_nodes=(u, v),
        )
        assert graph.has_edge(u, v) == bool(label)  # oracle membership check
        return inst
    raise GenerationError(f"could not balance an edge instance after 100 graphs "
                          f"(p={cfg.edge_prob}, seed {cfg.seed}, {split}[{index}])")


def generate_node_text_task(cfg: GeneratorConfig, vocab: Vocabulary, split: str, index: int) -> Instance:
    rng = _rng_for(cfg, split, index)
    for _ in range(100):
        graph, names = _random_graph(rng, cfg, vocab)
        stripped = [tuple(t for t in row if t != 0) for row in graph.node_text]
        if len(set(stripped)) != len(stripped):
            continue  # sentence collision; resample
        q = int(rng.integers(graph.n))
        target = stripped[q]
        inst = Instance(
            graph=graph,
            text=TaskText(
                prompt=_question(vocab, ["task", "text"], names),
                question=_question(vocab, ["text", "of", "node", names[q], "is"], names),
                target=target,
            ),
            query_nodes=(q,),
        )
        assert target == tuple(t for t in graph.node_text[q] if t != 0)  # oracle lookup
        return inst
    raise GenerationError("could not sample distinct sentences after 100 graphs")


_GENERATORS = {
    "degree": generate_degree_task,
    "edge": generate_edge_task,
    "node-text": generate_node_text_task,
}


def generate_split(cfg: GeneratorConfig, vocab: Vocabulary, split: str) -> list[Instance]:
    gen = _GENERATORS[cfg.task]
    return [gen(cfg, vocab, split, i) for i in range(cfg.instances[split])]


def task_readout_kind(task: str) -> str:
    return {"degree": "node_classify", "edge": "graph_classify", "node-text": "none"}[task]


def task_n_classes(cfg: GeneratorConfig) -> int:
    return {"degree": cfg.degree_cap + 1, "edge": 2, "node-text": 0}[cfg.task]


def class_verbalizer(task: str, vocab: Vocabulary, n_classes: int) -> list[tuple]:
    """Single-token verbalizations of readout classes, for the ensemble."""
    if task == "degree":
        return [(vocab.id_of(str(i)),) for i in range(n_classes)]
    if task == "edge":
        return [(vocab.id_of("no"),), (vocab.id_of("yes"),)]
    raise ValueError(f"task {task!r} has no class verbalizer")


def score(predictions, instances, metric: str) -> float:
    """Fraction correct under the chosen comparison.

    exact_match compares whole generated token sequences against targets;
    token_accuracy scores position-by-position against the target length;
    label_match compares integer class predictions against labels.
    """
    if len(predictions) != len(instances):
        raise ValueError(f"{len(predictions)} predictions for {len(instances)} instances")
    if not instances:
        return 0.0
    if metric == "exact_match":
        hits = sum(1 for p, inst in zip(predictions, instances)
                   if tuple(p) == tuple(inst.text.target))
        return hits / len(instances)
    if metric == "token_accuracy":
        total, hit = 0, 0
        for p, inst in zip(predictions, instances):
            tgt = tuple(inst.text.target)
            total += len(tgt)
            hit += sum(1 for i, t in enumerate(tgt) if i < len(p) and p[i] == t)
        return hit / total if total else 0.0
    if metric == "label_match":
        hits = sum(1 for p, inst in zip(predictions, instances) if p == inst.text.label)
        return hits / len(instances)
    raise ValueError(f"unknown metric {metric!r}")


def write_task_dataset(cfg: GeneratorConfig, out_dir) -> dict:
    """Write vocab, splits, and a metadata sidecar; idempotent per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = build_default_vocabulary()
    vocab.save(out / "vocab.txt")
    counts = {}
    for split in cfg.instances:
        insts = generate_split(cfg, vocab, split)
        write_dataset(out / f"{split}.jsonl", insts)
        counts[split] = len(insts)
    meta = {
        "task": cfg.task,
        "l_n": cfg.l_n,
        "l_e": cfg.l_e,
        "n_classes": task_n_classes(cfg),
        "readout": task_readout_kind(cfg.task),
        "vocab_size": len(vocab),
        "vocab_file": "vocab.txt",
        "splits": counts,
        "config": dataclasses.asdict(cfg),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta
