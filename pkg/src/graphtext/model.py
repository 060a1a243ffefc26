"""Full model assembly: embeddings, layer stack, twin prediction heads.

The model consumes a mixed graph-text sequence and produces, in one pass,
next-token logits for every position (the language-model predictor) and a
representation for every node (fed to a task readout head, the graph
predictor). Both heads train jointly; either can be ablated.

Checkpoints are single versioned binary files: a JSON header describing the
config and tensor manifest, raw little-endian float64 payloads, and a trailing
whole-file checksum. Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (BOS, EOS, GRAPH_END, GRAPH_START, NODE, PAD, UNK,
                   Instance, TextAttributedGraph)
from .layers import (FusionLayer, GraphTensors, LayerNormParams, ParamStore,
                     prepare_graph_tensors)
from .optim import AdamW
from .sequence import (G_END, G_NODE, G_START, TEXT, MixedSequence,
                       assemble_sequence, build_cross_mask, build_self_mask,
                       extend_with_text)
from .tensor import Parameter, Tensor

__all__ = [
    "ModelConfig", "TwinOutput", "Prepared", "Model",
    "ConfigError", "CheckpointError", "PredictorDisabledError",
    "prepare_instance", "save_checkpoint", "load_checkpoint",
]

READOUT_KINDS = ("node_classify", "graph_classify", "graph_regress", "none")

_SENTINEL_IDS = (PAD, UNK, GRAPH_START, NODE, GRAPH_END, BOS)


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class PredictorDisabledError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_layers: int = 8
    n_heads: int = 4
    vocab_size: int = 200
    max_positions: int = 64
    max_seq_len: int = 128
    l_n: int = 8
    l_e: int = 1
    mpnn_layer_ids: tuple = (0, 2, 4, 6)
    cross_attention_layer_ids: tuple = (1, 3, 5, 7)
    readout: str = "node_classify"
    n_classes: int = 10
    lambda_lm: float = 1.0
    lambda_gnn: float = 1.0
    no_cross_attention: bool = False
    no_gate: bool = False
    no_multi_aggregators: bool = False
    no_gnn_predictor: bool = False
    no_text_predictor: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ConfigError(f"width {self.d} is not divisible by {self.n_heads} heads")
        for i in tuple(self.mpnn_layer_ids) + tuple(self.cross_attention_layer_ids):
            if not (0 <= i < self.n_layers):
                raise ConfigError(f"layer id {i} outside [0, {self.n_layers})")
        if self.readout not in READOUT_KINDS:
            raise ConfigError(f"unknown readout kind {self.readout!r}")
        if self.no_gnn_predictor and self.no_text_predictor:
            raise ConfigError("at least one predictor must stay enabled")
        object.__setattr__(self, "mpnn_layer_ids", tuple(self.mpnn_layer_ids))
        object.__setattr__(self, "cross_attention_layer_ids", tuple(self.cross_attention_layer_ids))

    @property
    def gnn_predictor_enabled(self) -> bool:
        return not self.no_gnn_predictor and self.readout != "none"

    @property
    def text_predictor_enabled(self) -> bool:
        return not self.no_text_predictor

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mpnn_layer_ids"] = list(self.mpnn_layer_ids)
        d["cross_attention_layer_ids"] = list(self.cross_attention_layer_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["mpnn_layer_ids"] = tuple(d.get("mpnn_layer_ids", ()))
        d["cross_attention_layer_ids"] = tuple(d.get("cross_attention_layer_ids", ()))
        return cls(**d)


@dataclass
class TwinOutput:
    lm_logits: Tensor | None          # (L, vocab)
    node_representations: Tensor      # (n, d)
    readout: Tensor | None            # task-shaped


@dataclass
class Prepared:
    """One instance lowered to the arrays a forward pass consumes."""

    seq: MixedSequence
    self_mask: np.ndarray
    cross_mask: np.ndarray
    node_rows: np.ndarray
    row_token_ids: np.ndarray
    row_positions: np.ndarray
    gt: GraphTensors
    answer_rows: np.ndarray | None = None
    answer_ids: np.ndarray | None = None
    label: int | float | None = None
    query_nodes: tuple = ()


_KIND_TO_ID = {G_START: GRAPH_START, G_NODE: NODE, G_END: GRAPH_END}


def lower_sequence(seq: MixedSequence):
    """Token-id and position arrays for a mixed sequence."""
    ids = np.array([t.value if t.kind == TEXT else _KIND_TO_ID[t.kind] for t in seq.tokens], dtype=np.intp)
    pos = np.array(seq.positions, dtype=np.intp)
    node_rows = np.array(seq.node_indices, dtype=np.intp)
    return ids, pos, node_rows


def prepare_instance(config: ModelConfig, instance: Instance, with_target: bool) -> Prepared:
    """Assemble the sequence (teacher-forced when with_target) and its masks."""
    text = instance.text
    question = list(text.question)
    answer_rows = answer_ids = None
    if with_target and text.target is not None:
        answer = list(text.target) + [EOS]
        question = question + answer
    seq = assemble_sequence(text.prompt, instance.graph, question, max_len=config.max_seq_len)
    if with_target and text.target is not None:
        L = len(seq)
        a = len(text.target) + 1
        answer_rows = np.arange(L - a, L, dtype=np.intp) - 1
        answer_ids = np.array(list(text.target) + [EOS], dtype=np.intp)
    ids, pos, node_rows = lower_sequence(seq)
    return Prepared(
        seq=seq,
        self_mask=build_self_mask(seq),
        cross_mask=build_cross_mask(seq),
        node_rows=node_rows,
        row_token_ids=ids,
        row_positions=pos,
        gt=prepare_graph_tensors(instance.graph, config.l_e),
        answer_rows=answer_rows,
        answer_ids=answer_ids,
        label=text.label,
        query_nodes=instance.query_nodes,
    )


class Model:
    """Layer stack plus twin heads over mixed graph-text sequences."""

    def __init__(self, config: ModelConfig):
        self.config = config
        store = ParamStore(config.seed)
        self.store = store
        d = config.d
        self.tok_emb = store.normal("embed.token", (config.vocab_size, d), 0.08)
        self.pos_emb = store.normal("embed.position", (config.max_positions, d), 0.08)
        # positions of text tokens inside a node's own text, so the
        # uncompressed per-node embeddings keep word order
        self.text_pos_emb = store.normal("embed.text_position", (config.l_n, d), 0.08)
        self.node_feat_w = store.normal("embed.node_feat.w", (d, d), d**-0.5)
        self.node_feat_b = store.zeros("embed.node_feat.b", (d,))
        cross_ids = () if config.no_cross_attention else config.cross_attention_layer_ids
        self.layers = [
            FusionLayer(
                store, f"layers.{i}", d, config.n_heads,
                has_mpnn=i in config.mpnn_layer_ids,
                has_cross_attention=i in cross_ids,
                multi_aggregators=not config.no_multi_aggregators,
                gated=not config.no_gate,
            )
            for i in range(config.n_layers)
        ]
        self.ln_f = LayerNormParams(store, "ln_final", d)
        if config.text_predictor_enabled:
            self.lm_w = store.normal("lm_head.w", (d, config.vocab_size))
            self.lm_b = store.zeros("lm_head.b", (config.vocab_size,))
        if config.gnn_predictor_enabled:
            width = 1 if config.readout == "graph_regress" else config.n_classes
            self.readout_w = store.normal("readout.w", (d, width))
            self.readout_b = store.zeros("readout.b", (width,))

    # -- parameter access -----------------------------------------------------

    @property
    def params(self) -> dict[str, Parameter]:
        return self.store.params

    def parameters(self) -> list[Parameter]:
        return list(self.store.params.values())

    def cross_score_evaluations(self) -> int:
        return sum(l.cross.score_evaluations for l in self.layers if l.has_cross_attention)

    def reset_score_evaluations(self):
        for l in self.layers:
            if l.has_cross_attention:
                l.cross.score_evaluations = 0

    # -- forward --------------------------------------------------------------

    def embed(self, prep: Prepared):
        """Sequence embedding plus the uncompressed node-text tensor.

        Text rows get token + position embeddings. A node row additionally
        carries a projection of the mean of its own text embeddings. Node
        text embeds through the shared token table plus an intra-text
        position table; padded slots are masked out downstream.
        """
        cfg = self.config
        if prep.row_positions.size and prep.row_positions.max() >= cfg.max_positions:
            raise ConfigError(
                f"position {int(prep.row_positions.max())} exceeds max_positions {cfg.max_positions}")
        gt = prep.gt
        n, l_n, d = gt.n, cfg.l_n, cfg.d

        x = T.gather_rows(self.tok_emb, gt.node_text.reshape(-1)).reshape(n, l_n, d) + self.text_pos_emb

        t = T.gather_rows(self.tok_emb, prep.row_token_ids) + T.gather_rows(self.pos_emb, prep.row_positions)
        if n > 0:
            node_feat = T.reduce_sum(x * Tensor(gt.text_mask_f), 1) * Tensor(gt.text_inv_count)
            node_extra = T.linear(node_feat, self.node_feat_w, self.node_feat_b)
            t = T.add_rows(t, prep.node_rows, node_extra)

        if gt.n_edges > 0:
            e_raw = T.gather_rows(self.tok_emb, gt.edge_tok.reshape(-1)).reshape(gt.n_edges, -1, d)
            edge_emb = T.reduce_sum(e_raw * Tensor(gt.edge_tok_mask), 1) * Tensor(gt.edge_inv_count)
        else:
            edge_emb = Tensor(np.zeros((0, d)))
        return t, x, edge_emb

    def forward(self, prep: Prepared) -> TwinOutput:
        t, x, edge_emb = self.embed(prep)
        for layer in self.layers:
            t = layer(t, prep.self_mask, prep.cross_mask, prep.node_rows, prep.gt, x, edge_emb)
        tf = self.ln_f(t)
        lm_logits = T.linear(tf, self.lm_w, self.lm_b) if self.config.text_predictor_enabled else None
        node_reps = T.gather_rows(tf, prep.node_rows)
        readout = self._readout(node_reps) if prep.gt.n > 0 else None
        return TwinOutput(lm_logits=lm_logits, node_representations=node_reps, readout=readout)

    def _readout(self, node_reps: Tensor) -> Tensor | None:
        cfg = self.config
        if not cfg.gnn_predictor_enabled:
            return None
        if cfg.readout == "node_classify":
            return T.linear(node_reps, self.readout_w, self.readout_b)
        pooled = T.mean(node_reps, 0).reshape(1, cfg.d)
        return T.linear(pooled, self.readout_w, self.readout_b)

    # -- losses ----------------------------------------------------------------

    def joint_loss(self, out: TwinOutput, prep: Prepared) -> Tensor:
        """lambda_lm * answer-span cross-entropy + lambda_gnn * readout loss.

        The language loss covers only the positions that predict answer
        tokens; prompt and question perplexity never enter. Disabled
        predictors contribute nothing.
        """
        cfg = self.config
        pieces = []
        if cfg.text_predictor_enabled and prep.answer_rows is not None:
            rows = T.gather_rows(out.lm_logits, prep.answer_rows)
            logp = T.log_softmax_rows(rows)
            a, v = rows.shape
            picks = T.gather_rows(logp.reshape(a * v), np.arange(a) * v + prep.answer_ids)
            pieces.append(T.mean(picks, 0) * (-cfg.lambda_lm))
        if cfg.gnn_predictor_enabled and prep.label is not None and out.readout is not None:
            pieces.append(self._readout_loss(out.readout, prep) * cfg.lambda_gnn)
        if not pieces:
            raise ValueError("instance provides no supervision for any enabled predictor")
        total = pieces[0]
        for p in pieces[1:]:
            total = total + p
        return total

    def _readout_loss(self, readout: Tensor, prep: Prepared) -> Tensor:
        cfg = self.config
        if cfg.readout == "graph_regress":
            diff = readout - Tensor(np.full((1, 1), float(prep.label)))
            return (diff * diff).sum()
        if cfg.readout == "node_classify":
            row = T.gather_rows(readout, np.array([prep.query_nodes[0]], dtype=np.intp))
        else:
            row = readout
        logp = T.log_softmax_rows(row)
        pick = T.gather_rows(logp.reshape(logp.shape[1]), np.array([int(prep.label)], dtype=np.intp))
        return T.mean(pick, 0) * -1.0

    # -- decoding ----------------------------------------------------------------

    def generate(self, instance: Instance, max_new_tokens: int) -> list[int]:
        """Greedy decoding after the question; graph sentinels are never
        emitted, and <eos> (not returned) terminates the output."""
        if not self.config.text_predictor_enabled:
            raise PredictorDisabledError("text predictor is disabled in this config")
        cfg = self.config
        base = assemble_sequence(instance.text.prompt, instance.graph,
                                 instance.text.question, max_len=cfg.max_seq_len)
        gt = prepare_graph_tensors(instance.graph, cfg.l_e)
        generated: list[int] = []
        with T.no_grad():
            for _ in range(max_new_tokens):
                seq = extend_with_text(base, generated, max_len=cfg.max_seq_len)
                ids, pos, node_rows = lower_sequence(seq)
                prep = Prepared(seq=seq, self_mask=build_self_mask(seq),
                                cross_mask=build_cross_mask(seq), node_rows=node_rows,
                                row_token_ids=ids, row_positions=pos, gt=gt)
                out = self.forward(prep)
                logits = out.lm_logits.data[-1].copy()
                logits[list(_SENTINEL_IDS)] = -np.inf
                nxt = int(np.argmax(logits))
                if nxt == EOS:
                    break
                generated.append(nxt)
        return generated

    def ensemble_predict(self, out: TwinOutput, class_verbalizer, prep: Prepared) -> int:
        """Equal-weight sum of readout log-probs and answer-position LM
        log-probs restricted to the class verbalizer tokens."""
        if not (self.config.text_predictor_enabled and self.config.gnn_predictor_enabled):
            raise PredictorDisabledError("ensemble needs both predictors enabled")
        verb_ids = []
        for toks in class_verbalizer:
            if len(toks) != 1:
                raise ValueError(f"multi-token class verbalization {toks!r} is unsupported")
            verb_ids.append(toks[0])
        if self.config.readout == "node_classify":
            r = out.readout.data[prep.query_nodes[0]]
        else:
            r = out.readout.data[0]
        lm_row = out.lm_logits.data[-1][verb_ids]
        return int(np.argmax(_log_softmax_np(r) + _log_softmax_np(lm_row)))


def _log_softmax_np(v: np.ndarray) -> np.ndarray:
    z = v - v.max()
    return z - np.log(np.exp(z).sum())


# -- checkpoint container ---------------------------------------------------------

_MAGIC = b"GTXCKPT1"
_VERSION = 1


def save_checkpoint(path, model: Model, optimizer: AdamW | None = None, extra: dict | None = None):
    """Write config, parameters, optimizer state, and extras with a checksum."""
    params = model.params
    manifest = [[name, list(p.data.shape)] for name, p in params.items()]
    opt_block = None
    opt_arrays = {}
    if optimizer is not None:
        opt_arrays = optimizer.state_arrays()
        opt_block = {"scalars": optimizer.state_scalars(),
                     "arrays": [[k, list(a.shape)] for k, a in opt_arrays.items()]}
    header = {
        "version": _VERSION,
        "config": model.config.to_dict(),
        "params": manifest,
        "opt": opt_block,
        "extra": extra or {},
    }
    hb = json.dumps(header, separators=(",", ":")).encode()
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", len(hb))
    blob += hb
    for name, _ in manifest:
        blob += params[name].data.astype("<f8").tobytes()
    if opt_block is not None:
        for k, _ in opt_block["arrays"]:
            blob += opt_arrays[k].astype("<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(blob))
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    opt_scalars: dict | None
    opt_arrays: dict
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 4 + 32 or raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path} failed its checksum; the file is corrupt")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", body, off)
    off += 4
    header = json.loads(body[off: off + hlen].decode())
    off += hlen
    if header["version"] != _VERSION:
        raise CheckpointError(f"checkpoint version {header['version']} != supported {_VERSION}")

    def take(shape):
        nonlocal off
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += count * 8
        return arr

    params = {name: take(shape) for name, shape in header["params"]}
    opt_scalars, opt_arrays = None, {}
    if header["opt"] is not None:
        opt_scalars = header["opt"]["scalars"]
        opt_arrays = {k: take(shape) for k, shape in header["opt"]["arrays"]}
    return Checkpoint(config=ModelConfig.from_dict(header["config"]), params=params,
                      opt_scalars=opt_scalars, opt_arrays=opt_arrays, extra=header["extra"])


def restore_model(ckpt: Checkpoint) -> Model:
    model = Model(ckpt.config)
    load_params_into(model, ckpt)
    return model


def load_params_into(model: Model, ckpt: Checkpoint):
    """Copy checkpoint tensors into an existing model; configs must agree."""
    if ckpt.config != model.config:
        raise ConfigError("checkpoint config does not match the model "
                          f"(checkpoint d={ckpt.config.d}, model d={model.config.d})")
    for name, p in model.params.items():
        if name not in ckpt.params:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        arr = ckpt.params[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"parameter {name!r} shape {arr.shape} != expected {p.data.shape}")
        p.data = arr.copy()
        p.zero_grad()
