"""Step-budgeted training and evaluation over generated task datasets.

A run directory receives everything needed to reproduce the run bit-exactly:
the full config, the seed, a content hash of the package source, an
append-only line-delimited metrics log, and checkpoints that carry optimizer
state plus the batch-sampling RNG state (so a resumed run walks the same
trajectory as an uninterrupted one).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Instance, Vocabulary, read_dataset
from .model import (Model, ModelConfig, Prepared, load_checkpoint,
                    load_params_into, prepare_instance, save_checkpoint)
from .optim import AdamW
from .tasks import class_verbalizer, score

__all__ = [
    "RunConfig", "TrainingAborted", "train_run", "evaluate_model",
    "load_task_data", "model_config_from_meta", "code_state_hash",
    "MetricsLog",
]


class TrainingAborted(RuntimeError):
    pass


@dataclass
class RunConfig:
    data_dir: str = ""
    out_dir: str = "run"
    seed: int = 0
    # model shape
    d: int = 64
    n_layers: int = 8
    n_heads: int = 4
    mpnn_layer_ids: tuple = (0, 2, 4, 6)
    cross_attention_layer_ids: tuple = (1, 3, 5, 7)
    lambda_lm: float = 1.0
    lambda_gnn: float = 1.0
    # ablation switches
    no_cross_attention: bool = False
    no_gate: bool = False
    no_multi_aggregators: bool = False
    no_gnn_predictor: bool = False
    no_text_predictor: bool = False
    # optimizer
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # schedule
    batch_size: int = 8
    max_steps: int = 3000
    eval_interval: int = 250
    log_interval: int = 50
    eval_subset: int = 128
    resume_from: str = ""

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["mpnn_layer_ids"] = list(self.mpnn_layer_ids)
        d["cross_attention_layer_ids"] = list(self.cross_attention_layer_ids)
        return d


def code_state_hash() -> str:
    """Content hash of the package source, recorded for reproducibility."""
    pkg = Path(__file__).parent
    h = hashlib.sha256()
    for path in sorted(pkg.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def load_task_data(data_dir) -> tuple[dict, Vocabulary, dict[str, list[Instance]]]:
    data_dir = Path(data_dir)
    meta = json.loads((data_dir / "meta.json").read_text())
    vocab = Vocabulary.load(data_dir / meta["vocab_file"])
    splits = {}
    for split in meta["splits"]:
        splits[split] = read_dataset(data_dir / f"{split}.jsonl")
    return meta, vocab, splits


def model_config_from_meta(meta: dict, run: RunConfig) -> ModelConfig:
    task = meta["task"]
    no_gnn = run.no_gnn_predictor or meta["readout"] == "none"
    return ModelConfig(
        d=run.d, n_layers=run.n_layers, n_heads=run.n_heads,
        vocab_size=meta["vocab_size"], max_positions=64, max_seq_len=128,
        l_n=meta["l_n"], l_e=meta["l_e"],
        mpnn_layer_ids=tuple(run.mpnn_layer_ids),
        cross_attention_layer_ids=tuple(run.cross_attention_layer_ids),
        readout=meta["readout"] if not no_gnn else "none",
        n_classes=max(meta["n_classes"], 1),
        lambda_lm=run.lambda_lm, lambda_gnn=run.lambda_gnn,
        no_cross_attention=run.no_cross_attention,
        no_gate=run.no_gate,
        no_multi_aggregators=run.no_multi_aggregators,
        no_gnn_predictor=no_gnn,
        no_text_predictor=run.no_text_predictor,
        seed=run.seed,
    )


class MetricsLog:
    """Append-only line-delimited metrics records."""

    FIELDS = ("step", "split", "predictor", "metric", "value", "wall_ms")

    def __init__(self, path):
        self.path = Path(path)

    def append(self, step, split, predictor, metric, value, wall_ms):
        rec = {"step": int(step), "split": split, "predictor": predictor,
               "metric": metric, "value": float(value), "wall_ms": float(wall_ms)}
        with self.path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")

    def read(self):
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]


def _gen_budget(task: str, meta: dict) -> int:
    return meta["l_n"] + 2 if task == "node-text" else 3


def evaluate_model(model: Model, instances, vocab: Vocabulary, meta: dict,
                   subset: int = 0, seed: int = 0) -> dict:
    """Accuracy of every enabled predictor on (a subset of) a split.

    Returns {"llm": {...}, "gnn": {...}, "ensemble": {...}} with whichever of
    the three are computable under the model's config and the task's labels.
    """
    task = meta["task"]
    if subset and len(instances) > subset:
        idx = np.random.default_rng(seed).choice(len(instances), size=subset, replace=False)
        instances = [instances[i] for i in sorted(idx)]
    cfg = model.config
    budget = _gen_budget(task, meta)
    report: dict = {"instances": len(instances)}

    details = []
    lm_preds = []
    gnn_preds = []
    ens_preds = []
    has_labels = all(i.text.label is not None for i in instances)
    want_gnn = cfg.gnn_predictor_enabled and has_labels
    want_ens = want_gnn and cfg.text_predictor_enabled and task in ("degree", "edge")
    verb = class_verbalizer(task, vocab, cfg.n_classes) if want_ens else None

    for inst in instances:
        row: dict = {}
        if cfg.text_predictor_enabled:
            pred = model.generate(inst, max_new_tokens=budget)
            lm_preds.append(pred)
            row["lm"] = pred
        if want_gnn or want_ens:
            prep = prepare_instance(cfg, inst, with_target=False)
            with T.no_grad():
                out = model.forward(prep)
            if want_gnn:
                if cfg.readout == "node_classify":
                    g = int(np.argmax(out.readout.data[inst.query_nodes[0]]))
                else:
                    g = int(np.argmax(out.readout.data[0]))
                gnn_preds.append(g)
                row["gnn"] = g
            if want_ens:
                e = model.ensemble_predict(out, verb, prep)
                ens_preds.append(e)
                row["ensemble"] = e
        details.append(row)

    if cfg.text_predictor_enabled:
        metrics = {"exact_match": score(lm_preds, instances, "exact_match")}
        if task == "node-text":
            metrics["token_accuracy"] = score(lm_preds, instances, "token_accuracy")
        report["llm"] = metrics
    if want_gnn:
        report["gnn"] = {"accuracy": score(gnn_preds, instances, "label_match")}
    if want_ens:
        report["ensemble"] = {"accuracy": score(ens_preds, instances, "label_match")}
    report["_details"] = details
    return report


def _selection_metric(report: dict) -> float:
    vals = []
    if "llm" in report:
        vals.append(report["llm"]["exact_match"])
    if "gnn" in report:
        vals.append(report["gnn"]["accuracy"])
    return float(np.mean(vals)) if vals else 0.0


def train_run(run: RunConfig, quiet: bool = False) -> dict:
    """Train to the step budget; write metrics, checkpoints, and a summary."""
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta, vocab, splits = load_task_data(run.data_dir)
    cfg = model_config_from_meta(meta, run)
    model = Model(cfg)
    opt = AdamW(model.parameters(), lr=run.lr, weight_decay=run.weight_decay,
                betas=(run.beta1, run.beta2), eps=run.eps)
    rng = np.random.default_rng(run.seed)
    start_step = 0
    if run.resume_from:
        ckpt = load_checkpoint(run.resume_from)
        load_params_into(model, ckpt)
        opt.load_state(ckpt.opt_scalars, ckpt.opt_arrays)
        rng.bit_generator.state = ckpt.extra["rng_state"]
        start_step = int(ckpt.extra["step"])

    (out / "config.json").write_text(json.dumps(
        {"run": run.to_dict(), "model": cfg.to_dict(), "meta": meta}, indent=2) + "\n")
    (out / "run.json").write_text(json.dumps({
        "seed": run.seed,
        "code_hash": code_state_hash(),
        "argv": sys.argv,
        "started_unix": time.time(),
    }, indent=2) + "\n")
    log = MetricsLog(out / "metrics.jsonl")

    train_insts = splits["train"]
    preps = [prepare_instance(cfg, inst, with_target=True) for inst in train_insts]
    val_insts = splits.get("val", [])

    def save(step, name):
        save_checkpoint(out / name, model, opt,
                        extra={"step": step, "rng_state": rng.bit_generator.state,
                               "task": meta["task"]})

    def run_eval(step):
        t0 = time.perf_counter()
        rep = evaluate_model(model, val_insts, vocab, meta, subset=run.eval_subset, seed=run.seed)
        ms = (time.perf_counter() - t0) * 1e3
        for predictor in ("llm", "gnn", "ensemble"):
            if predictor in rep:
                for m, v in rep[predictor].items():
                    log.append(step, "val", "llm" if predictor == "llm" else predictor, m, v, ms)
        if not quiet:
            parts = [f"{p}:{rep[p]}" for p in ("llm", "gnn", "ensemble") if p in rep]
            print(f"step {step}: val " + " ".join(parts), flush=True)
        return rep

    best = -1.0
    if start_step == 0:
        save(0, "last.ckpt")
    window = []
    t_wall = time.perf_counter()
    for step in range(start_step, run.max_steps):
        batch_idx = rng.integers(len(preps), size=run.batch_size)
        losses = []
        for i in batch_idx:
            prep = preps[int(i)]
            losses.append(model.joint_loss(model.forward(prep), prep))
        total = losses[0]
        for l in losses[1:]:
            total = total + l
        total = total * (1.0 / len(losses))
        value = total.item()
        if not np.isfinite(value):
            save(step, "aborted.ckpt")
            (out / "abort.json").write_text(json.dumps({
                "step": step, "loss": value,
                "note": "non-finite loss; last good parameters in last.ckpt",
            }) + "\n")
            raise TrainingAborted(f"non-finite loss {value} at step {step}; "
                                  f"last good checkpoint: {out / 'last.ckpt'}")
        T.backward(total)
        opt.step()
        window.append(value)

        done = step + 1
        if done % run.log_interval == 0 or done == run.max_steps:
            ms = (time.perf_counter() - t_wall) * 1e3
            log.append(done, "train", "ensemble", "loss", float(np.mean(window)), ms)
            if not quiet:
                print(f"step {done}: train loss {np.mean(window):.4f}", flush=True)
            window = []
            t_wall = time.perf_counter()
        if val_insts and (done % run.eval_interval == 0 or done == run.max_steps):
            rep = run_eval(done)
            sel = _selection_metric(rep)
            if sel > best:
                best = sel
                save(done, "best.ckpt")
            save(done, "last.ckpt")

    if run.max_steps > start_step:
        save(run.max_steps, "last.ckpt")
        if not (out / "best.ckpt").exists():
            save(run.max_steps, "best.ckpt")

    summary = {"steps": run.max_steps, "best_val_selection": best}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
