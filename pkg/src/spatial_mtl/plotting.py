"""Bar charts of model metrics, each written next to a CSV of the plotted numbers."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport  # noqa: E402
from .scenegen.io import atomic_write  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 120,
}
# fixed PNG metadata keeps files byte-stable across runs
_PNG_META = {"Software": None}


def _grouped_bars(ax, groups: list[str], series: dict[str, list[float]]) -> None:
    x = np.arange(len(groups))
    width = 0.8 / max(len(series), 1)
    for k, (label, vals) in enumerate(series.items()):
        ax.bar(x + (k - (len(series) - 1) / 2) * width, vals, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(groups, rotation=30, ha="right")
    ax.set_ylim(0, 100)
    ax.set_ylabel("%")


def _save(fig, path: Path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def plot_outputs(reports: Sequence[tuple[str, MetricsReport]], out_dir) -> list[Path]:
    """Overall accuracy/F1 chart and, when any category is populated, a per-category chart.

    Returns the written paths (PNG and CSV pairs).
    """
    if not reports:
        raise ValueError("nothing to plot")
    out = Path(out_dir)
    written = []
    names = [n for n, _ in reports]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3))
        _grouped_bars(ax, names, {"accuracy": [100 * r.accuracy for _, r in reports],
                                  "F1": [100 * r.f1 for _, r in reports]})
        ax.set_title("Accuracy and F1 per model")
        ax.legend()
        _save(fig, out / "overall.png")
        rows = [["model", "accuracy", "f1", "n"]] + [[n, r.accuracy, r.f1, r.n] for n, r in reports]
        atomic_write(out / "overall.csv", _csv(rows))
        written += [out / "overall.png", out / "overall.csv"]

        cats = []
        for _, r in reports:
            cats += [c for c in r.per_category if c not in cats]
        if cats:
            fig, ax = plt.subplots(figsize=(0.9 * len(cats) * max(1, len(names) / 3) + 2, 3))
            _grouped_bars(ax, cats, {n: [100 * r.per_category.get(c, np.nan) for c in cats] for n, r in reports})
            ax.set_title("Accuracy per meta-category")
            ax.legend(fontsize=7, ncol=min(len(names), 4))
            _save(fig, out / "per_category.png")
            rows = [["model", "meta_category", "accuracy", "n"]]
            for n, r in reports:
                rows += [[n, c, r.per_category[c], r.category_counts[c]] for c in cats if c in r.per_category]
            atomic_write(out / "per_category.csv", _csv(rows))
            written += [out / "per_category.png", out / "per_category.csv"]
    return written
