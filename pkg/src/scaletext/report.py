"""TSV report serialization and the matplotlib figures rendered next to it.

Every report the CLI writes is a single TSV table (tab-separated, header
row, a `section` column distinguishing summary rows from the per-length
and per-scale breakdowns). When an output prefix is given, a PNG figure of
the same content lands alongside the TSV.
"""

from __future__ import annotations

import sys
from typing import Optional, Sequence, TextIO

from .training import AblationResult, EvalReport


def loss_curve_rows(curve: Sequence[tuple[int, float]]) -> list[list[str]]:
    rows = [["step", "loss"]]
    rows += [[str(s), f"{l:.6f}"] for s, l in curve]
    return rows


def eval_report_rows(report: EvalReport, tag: str = "unconstrained") -> list[list[str]]:
    rows = [["section", "key", "count", "correct", "value"]]

    def emit(rep: EvalReport, tag: str):
        rows.append(["summary", f"{tag}_accuracy", str(rep.total), str(rep.correct),
                     f"{rep.accuracy:.6f}"])
        rows.append(["summary", f"{tag}_mean_norm_edit_distance", str(rep.total), "",
                     f"{rep.mean_norm_edit_distance:.6f}"])
        for length, b in rep.by_length.items():
            rows.append([f"{tag}_by_length", str(length), str(b.count), str(b.correct),
                         f"{b.accuracy:.6f}"])
        for name, b in rep.by_scale.items():
            rows.append([f"{tag}_by_scale", name, str(b.count), str(b.correct),
                         f"{b.accuracy:.6f}"])

    emit(report, tag)
    if report.constrained is not None:
        emit(report.constrained, "constrained")
    return rows


def ablation_rows(result: AblationResult) -> list[list[str]]:
    rows = [["section", "variant", "split", "length", "count", "correct", "accuracy"]]
    for variant, reports in result.reports.items():
        for split, rep in reports.items():
            rows.append(["split_summary", variant, split, "", str(rep.total),
                         str(rep.correct), f"{rep.accuracy:.6f}"])
    for variant, reports in result.reports.items():
        for split, rep in reports.items():
            for length, b in rep.by_length.items():
                rows.append(["by_length", variant, split, str(length), str(b.count),
                             str(b.correct), f"{b.accuracy:.6f}"])
    return rows


def write_tsv(rows: Sequence[Sequence[str]], out: Optional[str] = None,
              stream: Optional[TextIO] = None) -> None:
    text = "".join("\t".join(row) + "\n" for row in rows)
    if out is not None:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        (stream or sys.stdout).write(text)


# ---------------------------------------------------------------------------
# Figures (Agg backend; imported lazily so headless use never needs a display)

def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_loss_curve(curve: Sequence[tuple[int, float]], path: str) -> None:
    plt = _plt()
    steps = [s for s, _ in curve]
    losses = [l for _, l in curve]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("mean sequence NLL")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_eval_report(report: EvalReport, path: str) -> None:
    plt = _plt()
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    lengths = list(report.by_length)
    axes[0].bar([str(v) for v in lengths], [report.by_length[v].accuracy for v in lengths])
    axes[0].set_xlabel("label length")
    axes[0].set_ylabel("word accuracy")
    axes[0].set_ylim(0, 1.05)
    axes[0].grid(alpha=0.3, axis="y")
    scales = list(report.by_scale)
    axes[1].bar(scales, [report.by_scale[s].accuracy for s in scales])
    axes[1].set_xlabel("character-scale bucket")
    axes[1].set_ylim(0, 1.05)
    axes[1].grid(alpha=0.3, axis="y")
    fig.suptitle(f"word accuracy {report.accuracy:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_ablation(result: AblationResult, path: str) -> None:
    plt = _plt()
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for variant, reports in result.reports.items():
        rep = reports["balanced"]
        lengths = sorted(rep.by_length)
        axes[0].plot(lengths, [rep.by_length[v].accuracy for v in lengths],
                     marker="o", label=variant)
    axes[0].set_xlabel("label length (balanced split)")
    axes[0].set_ylabel("word accuracy")
    axes[0].set_ylim(0, 1.05)
    axes[0].grid(alpha=0.3)
    axes[0].legend()

    splits = list(next(iter(result.reports.values())))
    width = 0.8 / len(result.reports)
    for i, (variant, reports) in enumerate(result.reports.items()):
        xs = [j + i * width for j in range(len(splits))]
        axes[1].bar(xs, [reports[s].accuracy for s in splits], width=width, label=variant)
    axes[1].set_xticks([j + width * (len(result.reports) - 1) / 2 for j in range(len(splits))])
    axes[1].set_xticklabels(splits)
    axes[1].set_ylim(0, 1.05)
    axes[1].grid(alpha=0.3, axis="y")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
