"""Report rendering: build summaries as text/CSV and matplotlib figures.

All figures are rendered with the Agg backend straight to files; nothing
here opens a window.  The build report prints one row per stage (block
list, token grid, channel width, parameter count) plus stem/head rows,
the total, and the deviation from the published size target when a named
preset is being reported, flagging any deviation beyond the tolerance.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .model import PARAM_TARGETS, PARAM_TOLERANCE, Model


def build_report_rows(model: Model) -> list[dict]:
    """One dict per architectural section, in network order."""
    config = model.config
    breakdown = model.stage_breakdown()
    grids = config.stage_grids
    rows = [{
        "section": "stem",
        "kind": "-",
        "blocks": "conv x2",
        "grid": f"{grids[0]}x{grids[0]}",
        "channels": config.stack.stages[0].channels,
        "params": breakdown.get("stem", 0),
    }]
    for idx, stage in enumerate(config.stack.stages):
        rows.append({
            "section": f"stage{idx + 1}",
            "kind": stage.kind,
            "blocks": stage.block_summary(),
            "grid": f"{grids[idx]}x{grids[idx]}",
            "channels": stage.channels,
            "params": breakdown.get(f"stage{idx + 1}", 0),
        })
    rows.append({
        "section": "head",
        "kind": "-",
        "blocks": f"proj {config.output_channel} + fc {config.num_classes}",
        "grid": "1x1",
        "channels": config.output_channel,
        "params": breakdown.get("head", 0),
    })
    return rows


def format_build_report(model: Model, variant: str | None = None) -> str:
    """Human-readable table plus target-deviation line for named presets."""
    rows = build_report_rows(model)
    total = model.count_params()
    header = f"{'section':<8} {'kind':<4} {'blocks':<24} {'grid':<8} " \
             f"{'channels':>8} {'params':>12}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['section']:<8} {row['kind']:<4} {row['blocks']:<24} "
            f"{row['grid']:<8} {row['channels']:>8} {row['params']:>12,}"
        )
    lines.append("-" * len(header))
    lines.append(f"{'total':<47} {total:>20,}")
    if variant in PARAM_TARGETS:
        target = PARAM_TARGETS[variant]
        deviation = (total - target) / target
        lines.append(
            f"target for variant {variant}: {target:,} "
            f"(deviation {deviation:+.1%})"
        )
        if abs(deviation) > PARAM_TOLERANCE:
            lines.append(
                f"WARNING: deviation exceeds +/-{PARAM_TOLERANCE:.0%} "
                "tolerance; see the per-stage breakdown above"
            )
    return "\n".join(lines)


def build_report_csv(model: Model) -> str:
    rows = build_report_rows(model)
    lines = ["section,kind,blocks,grid,channels,params"]
    for row in rows:
        lines.append(
            f"{row['section']},{row['kind']},{row['blocks']},"
            f"{row['grid']},{row['channels']},{row['params']}"
        )
    lines.append(f"total,,,,,{model.count_params()}")
    return "\n".join(lines) + "\n"


def save_stage_param_chart(model: Model, path) -> None:
    rows = build_report_rows(model)
    labels = [r["section"] for r in rows]
    values = [r["params"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(labels, values, color="#4878a8")
    ax.set_ylabel("parameters")
    ax.set_title("parameters per section")
    for spine in ("top", "right"):
        ax.spines[spine].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_training_curves(records, path) -> None:
    """Loss components and learning rate per step, accuracy per epoch."""
    steps = [r for r in records if r.get("kind") == "step"]
    epochs = [r for r in records if r.get("kind") == "epoch"]
    fig, (ax_loss, ax_acc) = plt.subplots(2, 1, figsize=(8, 7), sharex=False)

    if steps:
        xs = [r["step"] for r in steps]
        ax_loss.plot(xs, [r["loss"] for r in steps], label="total",
                     color="#303030")
        ax_loss.plot(xs, [r["cross_entropy"] for r in steps],
                     label="cross entropy", color="#4878a8")
        ax_loss.plot(xs, [r["fbm_loss"] for r in steps],
                     label="fg/bg loss", color="#b85450")
        ax_lr = ax_loss.twinx()
        ax_lr.plot(xs, [r["lr"] for r in steps], label="lr",
                   color="#78a848", linestyle="--", linewidth=1)
        ax_lr.set_ylabel("learning rate")
        ax_loss.legend(loc="upper right")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.set_title("training loss")

    if epochs:
        xs = [r["epoch"] for r in epochs]
        ax_acc.plot(xs, [r["train_top1"] for r in epochs], marker="o",
                    color="#4878a8")
        ax_acc.set_ylim(0.0, 1.05)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("train top-1")
    ax_acc.set_title("accuracy")

    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_confusion_heatmap(confusion, class_names, path) -> None:
    confusion = np.asarray(confusion)
    n = confusion.shape[0]
    fig, ax = plt.subplots(figsize=(max(5, 0.5 * n + 3),) * 2)
    im = ax.imshow(confusion, cmap="Blues")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xticklabels(class_names, rotation=90, fontsize=7)
    ax.set_yticklabels(class_names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if n <= 12:
        threshold = confusion.max() / 2 if confusion.max() else 0
        for i in range(n):
            for j in range(n):
                color = "white" if confusion[i, j] > threshold else "black"
                ax.text(j, i, str(int(confusion[i, j])), ha="center",
                        va="center", color=color, fontsize=8)
    ax.set_title("confusion matrix")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
