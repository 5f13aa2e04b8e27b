"""Relation-aware, accuracy-weighted voting over several models' predictions.

Each model's weight for a relation is its validation accuracy on that
relation divided by the summed accuracy of all models on it. At test time
every model adds its weight to the class it predicts and the heavier class
wins.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .records import gold_label
from .scenegen.io import SchemaError, atomic_write
from .taxonomy import RelationTaxonomy, UnknownRelationError, default_taxonomy

logger = logging.getLogger(__name__)

# vote masses this close count as equal; averaged weights differ in the last ulp
TIE_TOLERANCE = 1e-12


class AlignmentError(ValueError):
    """Models were evaluated on different instance sets."""


@dataclass(frozen=True)
class WeightCell:
    meta_category: str
    relation: str
    accuracies: tuple[float, ...]
    weights: tuple[float, ...]

    @property
    def zero_accuracy(self) -> bool:
        return not any(self.accuracies)


@dataclass
class EnsembleWeights:
    model_ids: list[str]
    cells: dict[str, WeightCell] = field(default_factory=dict)   # keyed by relation

    @property
    def n_models(self) -> int:
        return len(self.model_ids)

    def cell(self, relation: str) -> WeightCell | None:
        return self.cells.get(relation)

    def zero_cells(self) -> list[str]:
        """Relations whose accuracies were all zero and fell back to uniform weights."""
        return [r for r, c in self.cells.items() if c.zero_accuracy]

    def to_json(self) -> str:
        cells = [{"meta_category": c.meta_category, "relation": c.relation,
                  "accuracies": list(c.accuracies), "weights": list(c.weights)}
                 for c in sorted(self.cells.values(), key=lambda c: (c.meta_category, c.relation))]
        return json.dumps({"model_ids": list(self.model_ids), "cells": cells}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str, taxonomy: RelationTaxonomy | None = None) -> "EnsembleWeights":
        tax = taxonomy or default_taxonomy()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"weight table is not valid JSON ({exc.msg})") from None
        if not isinstance(doc, dict) or set(doc) != {"model_ids", "cells"}:
            raise SchemaError("weight table needs exactly the keys model_ids and cells")
        ids = doc["model_ids"]
        out = cls(list(ids))
        for k, c in enumerate(doc["cells"]):
            if set(c) != {"meta_category", "relation", "accuracies", "weights"}:
                raise SchemaError(f"cell {k}: unexpected field set {sorted(c)}")
            if len(c["accuracies"]) != len(ids) or len(c["weights"]) != len(ids):
                raise SchemaError(f"cell {k}: expected {len(ids)} accuracies and weights")
            if c["relation"] not in tax or tax(c["relation"]) != c["meta_category"]:
                raise SchemaError(f"cell {k}: relation {c['relation']!r} / {c['meta_category']!r} not in taxonomy")
            out.cells[c["relation"]] = WeightCell(c["meta_category"], c["relation"],
                                                  tuple(float(a) for a in c["accuracies"]),
                                                  tuple(float(w) for w in c["weights"]))
        return out

    def save(self, path) -> None:
        atomic_write(path, self.to_json())

    @classmethod
    def load(cls, path, taxonomy: RelationTaxonomy | None = None) -> "EnsembleWeights":
        return cls.from_json(Path(path).read_text(encoding="utf-8"), taxonomy)


def normalize(accuracies: Sequence[float]) -> tuple[float, ...]:
    """Accuracy-proportional weights; uniform when every accuracy is zero."""
    total = float(sum(accuracies))
    n = len(accuracies)
    if total <= 0:
        return tuple(1.0 / n for _ in accuracies)
    return tuple(float(a) / total for a in accuracies)


def _align(predictions: Mapping[str, Sequence[dict]]) -> tuple[list[str], list[str], dict]:
    model_ids = list(predictions)
    if not model_ids:
        raise ValueError("need predictions from at least one model")
    by_model = {}
    for m in model_ids:
        recs = {}
        for r in predictions[m]:
            if r["id"] in recs:
                raise AlignmentError(f"model {m!r} has duplicate instance {r['id']!r}")
            recs[r["id"]] = r
        by_model[m] = recs
    ids = list(by_model[model_ids[0]])
    ref = set(ids)
    for m in model_ids[1:]:
        if set(by_model[m]) != ref:
            diff = sorted(ref.symmetric_difference(by_model[m]))[:3]
            raise AlignmentError(f"model {m!r} covers a different instance set (e.g. {diff})")
    for i in ids:
        first = by_model[model_ids[0]][i]
        for m in model_ids[1:]:
            other = by_model[m][i]
            if other["relation"] != first["relation"] or gold_label(other) != gold_label(first):
                raise AlignmentError(f"instance {i!r}: models disagree on relation or gold label")
    return model_ids, ids, by_model


def fit_weights(predictions: Mapping[str, Sequence[dict]],
                taxonomy: RelationTaxonomy | None = None) -> EnsembleWeights:
    """Per-relation validation accuracy of each model, normalised across models.

    ``predictions`` maps model id to that model's records on the shared
    validation split. Relations absent from validation get no cell.
    """
    tax = taxonomy or default_taxonomy()
    model_ids, ids, by_model = _align(predictions)
    correct: dict[str, list[list[bool]]] = {}
    for i in ids:
        rel = by_model[model_ids[0]][i]["relation"]
        if rel not in tax:
            raise UnknownRelationError(rel)
        correct.setdefault(rel, []).append([by_model[m][i]["correct"] for m in model_ids])
    out = EnsembleWeights(model_ids)
    for rel in sorted(correct):
        hits = np.asarray(correct[rel], dtype=np.float64)
        acc = tuple(float(a) for a in hits.mean(axis=0))
        cell = WeightCell(tax(rel), rel, acc, normalize(acc))
        if cell.zero_accuracy:
            logger.warning("relation %r: every model scored 0 on validation, using uniform weights", rel)
        out.cells[rel] = cell
    return out


@dataclass(frozen=True)
class VoteScore:
    scores: tuple[float, float]   # (false, true)
    chosen: int
    tie_broken: bool
    source: str                   # "relation", "category" or "uniform"


def resolve_weights(relation: str, weights: EnsembleWeights,
                    taxonomy: RelationTaxonomy | None = None) -> tuple[tuple[float, ...], str]:
    """Weights for ``relation``, falling back to its category average, then uniform."""
    tax = taxonomy or default_taxonomy()
    category = tax(relation)  # raises for relations outside the taxonomy
    cell = weights.cell(relation)
    if cell is not None:
        return cell.weights, "relation"
    siblings = [c.weights for c in weights.cells.values() if c.meta_category == category]
    if siblings:
        logger.info("relation %r unseen in validation; using %s category average", relation, category)
        return tuple(float(w) for w in np.mean(np.asarray(siblings), axis=0)), "category"
    logger.info("relation %r and category %s unseen in validation; using uniform weights", relation, category)
    n = weights.n_models
    return tuple(1.0 / n for _ in range(n)), "uniform"


def vote(relation: str, predictions: Sequence[int], weights: EnsembleWeights,
         taxonomy: RelationTaxonomy | None = None) -> VoteScore:
    if len(predictions) != weights.n_models or not predictions:
        raise ValueError(f"expected {weights.n_models} predictions, got {len(predictions)}")
    w, source = resolve_weights(relation, weights, taxonomy)
    s = [0.0, 0.0]
    for wi, p in zip(w, predictions):
        s[int(p)] += wi
    if abs(s[0] - s[1]) > TIE_TOLERANCE:
        return VoteScore((s[0], s[1]), int(s[1] > s[0]), False, source)
    # tie: follow the single most trusted model, else say false
    top = max(w)
    leaders = [i for i, wi in enumerate(w) if top - wi <= TIE_TOLERANCE]
    chosen = int(predictions[leaders[0]]) if len(leaders) == 1 else 0
    return VoteScore((s[0], s[1]), chosen, True, source)


def ensemble_predict(predictions: Mapping[str, Sequence[dict]], weights: EnsembleWeights,
                     taxonomy: RelationTaxonomy | None = None, model_id: str = "ensemble") -> list[dict]:
    """One voted record per instance, in the first model's order."""
    tax = taxonomy or default_taxonomy()
    if list(predictions) != list(weights.model_ids):
        raise AlignmentError(f"prediction models {list(predictions)} do not match weight models {weights.model_ids}")
    model_ids, ids, by_model = _align(predictions)
    out = []
    for i in ids:
        first = by_model[model_ids[0]][i]
        score = vote(first["relation"], [by_model[m][i]["predicted"] for m in model_ids], weights, tax)
        out.append({"id": i, "model_id": model_id, "predicted": score.chosen, "relation": first["relation"],
                    "meta_category": tax(first["relation"]), "correct": score.chosen == gold_label(first)})
    return out
