"""Prediction records: one JSON object per line, closed field set."""

from __future__ import annotations

import json
from pathlib import Path

from .scenegen.io import SchemaError, atomic_write, dump_jsonl
from .taxonomy import default_taxonomy

PREDICTION_FIELDS = ("id", "model_id", "predicted", "relation", "meta_category", "correct")


def validate_prediction(rec: dict, line: int = 0) -> dict:
    if not isinstance(rec, dict):
        raise SchemaError(f"line {line}: expected a JSON object")
    unknown = set(rec) - set(PREDICTION_FIELDS)
    if unknown:
        raise SchemaError(f"line {line}: unknown fields {sorted(unknown)}")
    missing = [f for f in PREDICTION_FIELDS if f not in rec]
    if missing:
        raise SchemaError(f"line {line}: missing fields {missing}")
    if not isinstance(rec["id"], str) or not isinstance(rec["model_id"], str):
        raise SchemaError(f"line {line}: id and model_id must be strings")
    if rec["predicted"] not in (0, 1) or isinstance(rec["predicted"], bool):
        raise SchemaError(f"line {line}: predicted must be 0 or 1")
    if not isinstance(rec["correct"], bool):
        raise SchemaError(f"line {line}: correct must be a boolean")
    tax = default_taxonomy()
    if rec["relation"] not in tax:
        raise SchemaError(f"line {line}: relation {rec['relation']!r} not in taxonomy")
    if rec["meta_category"] != tax(rec["relation"]):
        raise SchemaError(f"line {line}: meta_category {rec['meta_category']!r} does not match relation")
    return rec


def gold_label(rec: dict) -> int:
    """The reference label implied by a record's prediction and correctness."""
    return rec["predicted"] if rec["correct"] else 1 - rec["predicted"]


def write_predictions(path, records) -> None:
    for i, r in enumerate(records, 1):
        validate_prediction(r, i)
    atomic_write(path, dump_jsonl([{k: r[k] for k in PREDICTION_FIELDS} for r in records]))


def read_predictions(path) -> list[dict]:
    out = []
    with open(Path(path), encoding="utf-8") as fh:
        for i, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {i}: invalid JSON ({exc.msg})") from None
            out.append(validate_prediction(rec, i))
    return out
