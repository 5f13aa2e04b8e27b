"""Accuracy/F1 breakdowns and the per-category model comparison table."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

from .records import gold_label
from .taxonomy import META_CATEGORIES, RelationTaxonomy, default_taxonomy

OVERALL = "Overall"


@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    n: int
    per_category: dict[str, float] = field(default_factory=dict)
    per_relation: dict[str, float] = field(default_factory=dict)
    category_counts: dict[str, int] = field(default_factory=dict)
    relation_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "f1": self.f1, "n": self.n,
                "per_category": dict(self.per_category), "per_relation": dict(self.per_relation),
                "category_counts": dict(self.category_counts), "relation_counts": dict(self.relation_counts)}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["accuracy"], d["f1"], d["n"], dict(d["per_category"]), dict(d["per_relation"]),
                   dict(d["category_counts"]), dict(d["relation_counts"]))


def binary_f1(predicted: Sequence[int], gold: Sequence[int]) -> float:
    """F1 of the positive class; 0.0 when there are no positives at all."""
    tp = sum(1 for p, g in zip(predicted, gold) if p == 1 and g == 1)
    fp = sum(1 for p, g in zip(predicted, gold) if p == 1 and g == 0)
    fn = sum(1 for p, g in zip(predicted, gold) if p == 0 and g == 1)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def compute_metrics(records: Sequence[dict], taxonomy: RelationTaxonomy | None = None) -> MetricsReport:
    if not records:
        raise ValueError("no records")
    tax = taxonomy or default_taxonomy()
    hits_c: dict[str, int] = {}
    hits_r: dict[str, int] = {}
    n_c: dict[str, int] = {}
    n_r: dict[str, int] = {}
    for r in records:
        cat = tax(r["relation"])
        n_c[cat] = n_c.get(cat, 0) + 1
        n_r[r["relation"]] = n_r.get(r["relation"], 0) + 1
        hits_c[cat] = hits_c.get(cat, 0) + bool(r["correct"])
        hits_r[r["relation"]] = hits_r.get(r["relation"], 0) + bool(r["correct"])
    n = len(records)
    correct = sum(bool(r["correct"]) for r in records)
    f1 = binary_f1([r["predicted"] for r in records], [gold_label(r) for r in records])
    cats = [c for c in META_CATEGORIES if c in n_c]
    rels = sorted(n_r)
    return MetricsReport(
        accuracy=correct / n, f1=f1, n=n,
        per_category={c: hits_c[c] / n_c[c] for c in cats},
        per_relation={r: hits_r[r] / n_r[r] for r in rels},
        category_counts={c: n_c[c] for c in cats},
        relation_counts={r: n_r[r] for r in rels},
    )


def format_improvement(points: float) -> str:
    text = f"{points:+.2f}"
    return "0.00" if text in ("+0.00", "-0.00") else text


@dataclass
class ComparisonTable:
    columns: list[str]
    target: str
    rows: list[dict]      # {"category", "values": {name: pct | None}, "best": [names], "improvement": pts | None}

    def to_json(self) -> str:
        return json.dumps({"columns": self.columns, "target": self.target, "rows": self.rows}, indent=2) + "\n"

    def render(self) -> str:
        header = ["Category", *self.columns, "Improvement"]
        lines = []
        for row in self.rows:
            cells = [row["category"]]
            for name in self.columns:
                v = row["values"][name]
                cells.append("-" if v is None else f"{v:.2f}" + ("*" if name in row["best"] else ""))
            imp = row["improvement"]
            cells.append("-" if imp is None else format_improvement(imp))
            lines.append(cells)
        widths = [max(len(r[k]) for r in [header, *lines]) for k in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) if k == 0 else c.rjust(w) for k, (c, w) in enumerate(zip(r, widths)))
        rule = "-" * len(fmt(header))
        return "\n".join([fmt(header), rule, *(fmt(r) for r in lines)]) + "\n"


def emit_comparison_table(reports: Sequence[tuple[str, MetricsReport]], target: str | None = None) -> ComparisonTable:
    """Per-category accuracy (percent) of every report plus the target's gain.

    The improvement column is ``target`` minus the best of the other
    reports, in percentage points. Cells equal to the row maximum at two
    decimals are all marked best. Categories missing from a report show as
    absent and are left out of that row's comparison.
    """
    if len(reports) < 2:
        raise ValueError("a comparison needs at least two reports")
    names = [n for n, _ in reports]
    if len(set(names)) != len(names):
        raise ValueError(f"report names must be unique, got {names}")
    target = names[-1] if target is None else target
    if target not in names:
        raise ValueError(f"target {target!r} is not among {names}")
    cats = [c for c in META_CATEGORIES if any(c in r.per_category for _, r in reports)]
    rows = []
    for cat in [*cats, OVERALL]:
        values = {}
        for name, rep in reports:
            acc = rep.accuracy if cat == OVERALL else rep.per_category.get(cat)
            values[name] = None if acc is None else 100.0 * acc
        present = {k: round(v, 2) for k, v in values.items() if v is not None}
        best = sorted((k for k, v in present.items() if v == max(present.values())), key=names.index) if present else []
        others = [present[k] for k in present if k != target]
        improvement = None
        if target in present and others:
            improvement = round(present[target] - max(others), 2) + 0.0
        rows.append({"category": cat, "values": values, "best": best, "improvement": improvement})
    return ComparisonTable(names, target, rows)
