"""Figures and delimited tables for run reports.

Every reporting path writes the numbers first (JSON / TSV / metrics log) and
then renders matplotlib figures next to them, so runs diff cleanly and still
have something to look at.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = ["write_tsv", "training_curves_figure", "eval_report_figure",
           "ablation_figure"]

_PREDICTOR_COLORS = {"llm": "tab:blue", "gnn": "tab:orange", "ensemble": "tab:green"}


def write_tsv(path, header, rows):
    lines = ["\t".join(str(c) for c in header)]
    lines += ["\t".join(str(c) for c in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def training_curves_figure(records, out_png):
    """Loss and validation-accuracy curves from metrics-log records."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    loss = [(r["step"], r["value"]) for r in records
            if r["split"] == "train" and r["metric"] == "loss"]
    if loss:
        steps, vals = zip(*loss)
        ax_loss.plot(steps, vals, color="tab:red")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("train loss")
    ax_loss.set_title("training loss")

    for predictor, color in _PREDICTOR_COLORS.items():
        pts = [(r["step"], r["value"]) for r in records
               if r["split"] == "val" and r["predictor"] == predictor
               and r["metric"] in ("exact_match", "accuracy")]
        if pts:
            steps, vals = zip(*pts)
            ax_acc.plot(steps, vals, label=predictor, color=color, marker="o", ms=3)
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("val accuracy")
    ax_acc.set_ylim(-0.02, 1.02)
    ax_acc.set_title("validation accuracy")
    if ax_acc.lines:
        ax_acc.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def eval_report_figure(report, out_png):
    """One bar per (predictor, metric) pair."""
    bars = []
    for predictor in ("llm", "gnn", "ensemble"):
        for metric, value in report.get(predictor, {}).items():
            bars.append((f"{predictor}\n{metric}", value,
                         _PREDICTOR_COLORS.get(predictor, "gray")))
    fig, ax = plt.subplots(figsize=(1.6 * max(len(bars), 2) + 1, 4))
    if bars:
        labels, values, colors = zip(*bars)
        ax.bar(range(len(bars)), values, color=colors)
        ax.set_xticks(range(len(bars)), labels)
        for i, v in enumerate(values):
            ax.text(i, v + 0.01, f"{v:.3f}", ha="center")
    ax.set_ylim(0, 1.1)
    ax.set_ylabel("score")
    ax.set_title(f"evaluation over {report.get('instances', '?')} instances")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def ablation_figure(variants, table, out_png):
    """Grouped bars: one cluster per predictor row, one bar per variant."""
    predictors = sorted(table)
    fig, ax = plt.subplots(figsize=(1.2 * len(variants) + 3, 4))
    width = 0.8 / max(len(variants), 1)
    for j, variant in enumerate(variants):
        xs = [i + j * width for i in range(len(predictors))]
        ys = [table[p].get(variant, float("nan")) for p in predictors]
        ax.bar(xs, ys, width=width, label=variant)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(predictors))], predictors)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("test accuracy")
    ax.set_title("ablation comparison")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
