"""Rendering of cross-validation results: metrics JSON, a plain-text results
table, per-fold ROC point files and static SVG ROC plots."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from .training import MetricsReport

__all__ = ["COLUMNS", "format_cell", "format_table", "write_roc_csv", "plot_roc_svg", "emit_report"]

log = logging.getLogger(__name__)

# (metrics key, column heading, show spread)
COLUMNS = (
    ("acc", "Acc.", True),
    ("auc_roc", "AUC-ROC", True),
    ("ba", "BA", True),
    ("cn_to_mci", "CN to MCI", False),
    ("mci_to_ad", "MCI to AD", False),
)

RNN_NAMES = {"lstm": "LSTM", "gru": "GRU", "vanilla": "RNN"}


def format_cell(mean, std=None) -> str:
    if mean is None:
        return "n/a"
    if std is None:
        return f"{mean:.3f}"
    return f"{mean:.3f} ± {std:.3f}"


def format_table(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    """One row per named report; pooled transition columns carry no spread."""
    header = ["Model"] + [title for _, title, _ in COLUMNS]
    body = []
    for name, rep in rows:
        cells = [name]
        for key, _, spread in COLUMNS:
            std = rep.std.get(key) if spread else None
            if spread and std is None and rep.mean.get(key) is not None:
                std = 0.0
            cells.append(format_cell(rep.mean.get(key), std))
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]

    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    rule = "-" * len(line(header))
    return "\n".join([line(header), rule] + [line(r) for r in body]) + "\n"


def write_roc_csv(path, fpr, tpr, thresholds) -> None:
    data = np.column_stack([fpr, tpr, thresholds])
    np.savetxt(path, data, delimiter=",", header="fpr,tpr,threshold", comments="", fmt="%.17g")


def plot_roc_svg(path, fpr, tpr, title: str = "") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed salt and no timestamp so identical curves give identical files
    with matplotlib.rc_context({"svg.hashsalt": "hagnn", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot([0, 1], [0, 1], linestyle="--", color="0.6", linewidth=1)
        ax.step(fpr, tpr, where="post", color="C0", linewidth=1.5)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_report(report: MetricsReport, out_dir, rocs: Sequence | None = None,
                model_name: str = "HA-GNN (LSTM)") -> list[Path]:
    """Write metrics.json, table.txt and, per fold with a defined ROC,
    roc_fold{k}.csv and roc_fold{k}.svg.  ``rocs`` holds one
    (fpr, tpr, thresholds) triple or None per fold.  Returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "metrics.json"
    p.write_text(report.to_json())
    written.append(p)
    p = out / "table.txt"
    p.write_text(format_table([(model_name, report)]))
    written.append(p)
    if not rocs:
        log.warning("no ROC curves available; plots omitted")
        return written
    for k, roc in enumerate(rocs):
        if roc is None:
            log.warning("fold %d has a single-class test set; ROC omitted", k)
            continue
        fpr, tpr, thr = roc
        p = out / f"roc_fold{k}.csv"
        write_roc_csv(p, fpr, tpr, thr)
        written.append(p)
        p = out / f"roc_fold{k}.svg"
        plot_roc_svg(p, fpr, tpr, title=f"fold {k}")
        written.append(p)
    return written
