"""Command-line entry points: generate | train | eval | ablate | masks.

Flags mirror the run-config fields in kebab-case. A JSON config file passed
with --config overrides any flag of the same name. The GRAPHTEXT_RUN_ROOT
environment variable, when set, anchors relative output directories.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import TextAttributedGraph
from .model import load_checkpoint, restore_model
from .report import ablation_figure, eval_report_figure, training_curves_figure, write_tsv
from .sequence import assemble_sequence, render_sequence_masks
from .tasks import GeneratorConfig, write_task_dataset
from .train import (MetricsLog, RunConfig, code_state_hash, evaluate_model,
                    load_task_data, train_run)

ABLATION_FLAGS = ("no_cross_attention", "no_gate", "no_multi_aggregators",
                  "no_gnn_predictor", "no_text_predictor")


def _resolve_out(path: str) -> str:
    root = os.environ.get("GRAPHTEXT_RUN_ROOT")
    p = Path(path)
    if root and not p.is_absolute():
        return str(Path(root) / p)
    return str(p)


def _apply_config_file(args: argparse.Namespace) -> argparse.Namespace:
    if getattr(args, "config", None):
        overrides = json.loads(Path(args.config).read_text())
        for key, value in overrides.items():
            dest = key.replace("-", "_")
            if not hasattr(args, dest):
                raise SystemExit(f"config file sets unknown field {key!r}")
            setattr(args, dest, value)
    return args


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file whose fields override these flags")
    p.add_argument("--data-dir", required=False, default="")
    p.add_argument("--out-dir", default="run")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=8)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--lambda-lm", type=float, default=1.0)
    p.add_argument("--lambda-gnn", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-steps", type=int, default=3000)
    p.add_argument("--eval-interval", type=int, default=250)
    p.add_argument("--log-interval", type=int, default=50)
    p.add_argument("--eval-subset", type=int, default=128)
    p.add_argument("--resume-from", default="")
    p.add_argument("--mpnn-layers", default="0,2,4,6",
                   help="comma-separated layer ids that run message passing")
    p.add_argument("--cross-attention-layers", default="1,3,5,7")
    for flag in ABLATION_FLAGS:
        p.add_argument(f"--{flag.replace('_', '-')}", action="store_true")


def _ids(spec) -> tuple:
    if isinstance(spec, (list, tuple)):
        return tuple(int(x) for x in spec)
    spec = str(spec).strip()
    return tuple(int(x) for x in spec.split(",") if x != "") if spec else ()


def _run_config(args) -> RunConfig:
    return RunConfig(
        data_dir=args.data_dir,
        out_dir=_resolve_out(args.out_dir),
        seed=args.seed,
        d=args.d, n_layers=args.n_layers, n_heads=args.n_heads,
        mpnn_layer_ids=_ids(args.mpnn_layers),
        cross_attention_layer_ids=_ids(args.cross_attention_layers),
        lambda_lm=args.lambda_lm, lambda_gnn=args.lambda_gnn,
        no_cross_attention=args.no_cross_attention,
        no_gate=args.no_gate,
        no_multi_aggregators=args.no_multi_aggregators,
        no_gnn_predictor=args.no_gnn_predictor,
        no_text_predictor=args.no_text_predictor,
        lr=args.lr, weight_decay=args.weight_decay,
        beta1=args.beta1, beta2=args.beta2, eps=args.eps,
        batch_size=args.batch_size, max_steps=args.max_steps,
        eval_interval=args.eval_interval, log_interval=args.log_interval,
        eval_subset=args.eval_subset, resume_from=args.resume_from,
    )


# -- subcommands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    args = _apply_config_file(args)
    cfg = GeneratorConfig(
        task=args.task,
        n_min=args.n_min, n_max=args.n_max, edge_prob=args.edge_prob,
        sent_min=args.sent_min, sent_max=args.sent_max,
        instances={"train": args.train, "val": args.val, "test": args.test},
        seed=args.seed, degree_cap=args.degree_cap,
    )
    out = _resolve_out(args.out_dir)
    meta = write_task_dataset(cfg, out)
    print(f"wrote {sum(meta['splits'].values())} instances across "
          f"{len(meta['splits'])} splits to {out}")
    return 0


def cmd_train(args) -> int:
    args = _apply_config_file(args)
    run = _run_config(args)
    summary = train_run(run)
    out = Path(run.out_dir)
    training_curves_figure(MetricsLog(out / "metrics.jsonl").read(), out / "training_curves.png")
    print(f"done: best val selection {summary['best_val_selection']:.4f}; "
          f"artifacts in {out}")
    return 0


def _eval_and_write(model, insts, vocab, meta, out_dir: Path, tag: str, seed: int,
                    subset: int = 0) -> dict:
    report = evaluate_model(model, insts, vocab, meta, subset=subset, seed=seed)
    details = report.pop("_details")
    report_full = {
        "task": meta["task"],
        "split": tag,
        "instances": report["instances"],
        "seed": seed,
        "config_hash": code_state_hash(),
        **{k: v for k, v in report.items() if k != "instances"},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"report_{tag}.json").write_text(json.dumps(report_full, indent=2) + "\n")
    with (out_dir / f"predictions_{tag}.jsonl").open("w") as f:
        for i, row in enumerate(details):
            f.write(json.dumps({"index": i, **row}) + "\n")
    rows = []
    for predictor in ("llm", "gnn", "ensemble"):
        for metric, value in report_full.get(predictor, {}).items():
            rows.append((predictor, metric, f"{value:.6f}"))
    write_tsv(out_dir / f"report_{tag}.tsv", ("predictor", "metric", "value"), rows)
    eval_report_figure(report_full, out_dir / f"report_{tag}.png")
    for predictor, metric, value in rows:
        print(f"{tag:>6} {predictor:>9} {metric:<16} {value}")
    return report_full


def cmd_eval(args) -> int:
    args = _apply_config_file(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    meta, vocab, splits = load_task_data(args.data_dir)
    if args.split not in splits:
        raise SystemExit(f"split {args.split!r} not in dataset ({sorted(splits)})")
    out = Path(_resolve_out(args.out_dir or str(Path(args.checkpoint).parent)))
    _eval_and_write(model, splits[args.split], vocab, meta, out, args.split,
                    seed=args.seed, subset=args.eval_subset)
    return 0


def cmd_ablate(args) -> int:
    args = _apply_config_file(args)
    base = _run_config(args)
    variants = ["full"] + [f for f in ABLATION_FLAGS]
    if args.variants:
        keep = set(v.strip() for v in args.variants.split(","))
        variants = [v for v in variants if v in keep]
    out_root = Path(base.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    meta, vocab, splits = load_task_data(base.data_dir)
    table: dict[str, dict[str, float]] = {}
    for variant in variants:
        run = dataclasses.replace(base, out_dir=str(out_root / variant))
        if variant != "full":
            run = dataclasses.replace(run, **{variant: True})
        print(f"=== ablation variant: {variant} ===", flush=True)
        try:
            train_run(run)
            ckpt = load_checkpoint(Path(run.out_dir) / "best.ckpt")
            model = restore_model(ckpt)
            report = _eval_and_write(model, splits["test"], vocab, meta,
                                     Path(run.out_dir), "test", seed=base.seed)
            for predictor in ("llm", "gnn", "ensemble"):
                if predictor in report:
                    metric = "exact_match" if predictor == "llm" else "accuracy"
                    table.setdefault(predictor, {})[variant] = report[predictor][metric]
        except Exception as exc:  # keep the remaining variants running
            print(f"variant {variant} failed: {exc}", file=sys.stderr, flush=True)
            table.setdefault("error", {})[variant] = float("nan")
    rows = [(predictor,) + tuple(f"{table[predictor].get(v, float('nan')):.4f}" for v in variants)
            for predictor in sorted(table)]
    write_tsv(out_root / "comparison.tsv", ("predictor",) + tuple(variants), rows)
    ablation_figure(variants, {k: v for k, v in table.items() if k != "error"},
                    out_root / "comparison.png")
    print(f"ablation table in {out_root / 'comparison.tsv'}")
    return 0


def cmd_masks(args) -> int:
    n = args.n_nodes
    graph = TextAttributedGraph.build(n, [], [[8]] * n, l_n=1)
    seq = assemble_sequence([9] * args.prompt_tokens, graph, [10] * args.question_tokens)
    print(render_sequence_masks(seq))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphtext",
        description="train and probe a structure-aware graph-text transformer")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic task dataset")
    g.add_argument("--config", help="JSON file whose fields override these flags")
    g.add_argument("--task", choices=("degree", "edge", "node-text"), required=True)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int, default=2000)
    g.add_argument("--val", type=int, default=200)
    g.add_argument("--test", type=int, default=400)
    g.add_argument("--n-min", type=int, default=5)
    g.add_argument("--n-max", type=int, default=20)
    g.add_argument("--edge-prob", type=float, default=0.25)
    g.add_argument("--sent-min", type=int, default=3)
    g.add_argument("--sent-max", type=int, default=8)
    g.add_argument("--degree-cap", type=int, default=8)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on a generated dataset")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--config", help="JSON file whose fields override these flags")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out-dir", default="")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--eval-subset", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the single-flag ablation matrix")
    _add_run_flags(a)
    a.add_argument("--variants", default="",
                   help="comma-separated subset of: full," + ",".join(ABLATION_FLAGS))
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("masks", help="render attention masks as ASCII grids")
    m.add_argument("--n-nodes", type=int, default=3)
    m.add_argument("--prompt-tokens", type=int, default=2)
    m.add_argument("--question-tokens", type=int, default=2)
    m.set_defaults(func=cmd_masks)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
