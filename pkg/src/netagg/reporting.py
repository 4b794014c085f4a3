"""Accuracy report tables: CSV, aligned text, and bar-chart figures."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError

__all__ = ["ReportTable", "save_report_figure", "save_training_curves"]


@dataclass
class ReportTable:
    """Rows of model descriptors vs per-dataset accuracies in [0, 1]."""

    columns: list[str]  # e.g. ["synth-a", "synth-b", "union"]
    rows: list[tuple[str, list[float]]] = field(default_factory=list)

    def add_row(self, descriptor: str, accuracies: list[float]) -> None:
        if len(accuracies) != len(self.columns):
            raise DataError(f"row {descriptor!r}: {len(accuracies)} cells for {len(self.columns)} columns")
        if any(not 0.0 <= a <= 1.0 for a in accuracies):
            raise DataError(f"row {descriptor!r}: accuracy outside [0, 1]")
        self.rows.append((descriptor, list(accuracies)))

    def cell(self, descriptor: str, column: str) -> float:
        for name, accs in self.rows:
            if name == descriptor:
                return accs[self.columns.index(column)]
        raise KeyError(descriptor)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["model", *self.columns])
            for name, accs in self.rows:
                w.writerow([name, *[f"{a:.6f}" for a in accs]])

    def to_text(self) -> str:
        width = max(len("model"), *(len(n) for n, _ in self.rows)) if self.rows else len("model")
        cols = [max(len(c), 8) for c in self.columns]
        lines = ["  ".join(["model".ljust(width), *[c.rjust(w) for c, w in zip(self.columns, cols)]])]
        lines.append("-" * len(lines[0]))
        for name, accs in self.rows:
            cells = [f"{a * 100:7.2f}%".rjust(w) for a, w in zip(accs, cols)]
            lines.append("  ".join([name.ljust(width), *cells]))
        return "\n".join(lines) + "\n"


def save_report_figure(table: ReportTable, path) -> None:
    """Grouped bar chart of the report table."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    fig, ax = plt.subplots(figsize=(max(6, 1.6 * len(table.rows)), 4))
    x = np.arange(len(table.rows))
    n_cols = len(table.columns)
    width = 0.8 / max(n_cols, 1)
    for j, col in enumerate(table.columns):
        vals = [accs[j] * 100 for _, accs in table.rows]
        ax.bar(x + (j - (n_cols - 1) / 2) * width, vals, width, label=col)
    ax.set_xticks(x)
    ax.set_xticklabels([name for name, _ in table.rows], rotation=20, ha="right")
    ax.set_ylabel("test accuracy [%]")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curves(history, out_dir) -> None:
    """Accuracy and loss curves across epochs, one figure each."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    if not history:
        return
    epochs = [r.epoch for r in history]
    models = sorted(history[0].accuracy)

    fig, ax = plt.subplots(figsize=(7, 4))
    for m in models:
        for split, style in (("train", "-"), ("val", "--")):
            ax.plot(epochs, [r.accuracy[m][split] * 100 for r in history], style, label=f"{m} {split}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy [%]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "accuracy_curves.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    for m in models:
        ax.plot(epochs, [r.loss_task[m] for r in history], label=f"task {m}")
    ax.plot(epochs, [r.loss_agg for r in history], label="aggregation")
    ax.plot(epochs, [r.loss_total for r in history], "k-", label="total")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "loss_curves.png", dpi=120)
    plt.close(fig)
