"""Command-line entry point: data generation through to the comparison report.

Every subcommand takes ``--config FILE`` (one JSON object whose keys are the
long flag names with dashes replaced by underscores). Flags given on the
command line win over the file; ``SPATIAL_MTL_SEED`` wins over the file's
seed but not over ``--seed``. Failures print one JSON line on stderr and
exit 2 (usage), 3 (data or schema) or 4 (numerical).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .autodiff import LossWeights
from .camera import CameraIntrinsics
from .ensemble import AlignmentError, EnsembleWeights, ensemble_predict, fit_weights
from .featex import EdgeParams, backproject, canny_edges, to_gray
from .metrics import compute_metrics, emit_comparison_table
from .model import Checkpoint, DivergenceError, ModelConfig, SpatialViLT, prepare_arrays, train
from .model.training import coordinate_stats, predict
from .plotting import plot_outputs
from .records import read_predictions, write_predictions
from .scenegen import GenerationError, SceneConfig, build_dataset, caption_vocabulary
from .scenegen.io import (
    SchemaError, atomic_write, dump_jsonl, read_png, read_sample_records, read_smap, read_split, write_dataset,
    write_smap,
)
from .taxonomy import UnknownRelationError

log = logging.getLogger("spatial_mtl")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
SEED_ENV = "SPATIAL_MTL_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


DEFAULTS = {
    "gen-data": {"n": 2000, "seed": 0, "out": None, "split": [0.7, 0.1, 0.2], "min_objects": 2,
                 "max_objects": 4, "image_size": 64},
    "featex": {"data": None, "inverse_depth": False, "sigma": 1.0, "low": 0.1, "high": 0.3,
               "unit_intrinsics": False},
    "train": {"data": None, "out": None, "variant": "spatial", "epochs": 15, "lr": 1e-4, "patience": 3,
              "batch_size": 16, "seed": 0, "embed_dim": 64, "num_layers": 2, "num_heads": 4, "mlp_ratio": 2,
              "decoder_channels": 16, "lambda_depth": 0.5, "lambda_coords": 0.5, "lambda_edges": 0.5,
              "latent_matching": False, "clip_norm": 1.0},
    "predict": {"checkpoint": None, "data": None, "split": "test", "model_id": None, "out": None},
    "ensemble-fit": {"predictions": None, "out": None},
    "ensemble-predict": {"weights": None, "predictions": None, "out": None, "model_id": "ensemble"},
    "report": {"predictions": None, "out": None, "target": None},
}
REQUIRED = {
    "gen-data": ["out"], "featex": ["data"], "train": ["data", "out"],
    "predict": ["checkpoint", "data", "out"], "ensemble-fit": ["predictions", "out"],
    "ensemble-predict": ["weights", "predictions", "out"], "report": ["predictions"],
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spatial-mtl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON file of flag values")
        return s

    s = cmd("gen-data", "render a seeded synthetic dataset split 70/10/20")
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--split", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    s.add_argument("--min-objects", type=int)
    s.add_argument("--max-objects", type=int)
    s.add_argument("--image-size", type=int)

    s = cmd("featex", "add back-projected coordinates and Canny edges to a dataset in place")
    s.add_argument("--data")
    s.add_argument("--inverse-depth", action="store_const", const=True,
                   help="depth files hold inverse depth; take the reciprocal first")
    s.add_argument("--sigma", type=float)
    s.add_argument("--low", type=float)
    s.add_argument("--high", type=float)
    s.add_argument("--unit-intrinsics", action="store_const", const=True, help="fx = fy = 1")

    s = cmd("train", "train one model variant and save its best checkpoint")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--variant", choices=["baseline", "spatial", "masked_spatial"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--patience", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    for k in ("embed-dim", "num-layers", "num-heads", "mlp-ratio", "decoder-channels"):
        s.add_argument(f"--{k}", type=int)
    for k in ("lambda-depth", "lambda-coords", "lambda-edges", "clip-norm"):
        s.add_argument(f"--{k}", type=float)
    s.add_argument("--latent-matching", action="store_const", const=True)

    s = cmd("predict", "write one prediction record per instance of a split")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--split", choices=["train", "val", "test"])
    s.add_argument("--model-id")
    s.add_argument("--out")

    s = cmd("ensemble-fit", "fit per-relation voting weights from validation predictions")
    s.add_argument("--predictions", nargs="+")
    s.add_argument("--out")

    s = cmd("ensemble-predict", "weighted vote over several models' test predictions")
    s.add_argument("--weights")
    s.add_argument("--predictions", nargs="+")
    s.add_argument("--out")
    s.add_argument("--model-id")

    s = cmd("report", "metrics, comparison table and charts for prediction files")
    s.add_argument("--predictions", nargs="+")
    s.add_argument("--out")
    s.add_argument("--target", help="model whose gain over the best other model is reported")
    return p


def effective_config(args: argparse.Namespace) -> dict:
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON ({exc.msg})") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold one JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        cfg.update(loaded)
    if "seed" in cfg and os.environ.get(SEED_ENV) is not None:
        try:
            cfg["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer") from None
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    missing = [k for k in REQUIRED[cmd] if cfg.get(k) in (None, [])]
    if missing:
        raise UsageError(f"{cmd} needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def _echo_config(out_dir, cmd: str, cfg: dict) -> None:
    atomic_write(Path(out_dir) / f"{cmd}.config.json", json.dumps({"command": cmd, **cfg}, indent=2, sort_keys=True) + "\n")


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> None:
    size = cfg["image_size"]
    scene_cfg = SceneConfig(width=size, height=size, min_objects=cfg["min_objects"], max_objects=cfg["max_objects"])
    splits = build_dataset(cfg["n"], cfg["seed"], tuple(cfg["split"]), scene_cfg)
    write_dataset(splits, cfg["out"])
    _echo_config(cfg["out"], "gen-data", cfg)
    print("split\tsize")
    for name, items in splits.items():
        print(f"{name}\t{len(items)}")


def cmd_featex(cfg: dict) -> None:
    data = Path(cfg["data"])
    params = EdgeParams(cfg["sigma"], cfg["low"], cfg["high"])
    split_dirs = [data] if (data / "samples.jsonl").exists() else [d for d in sorted(data.iterdir())
                                                                   if (d / "samples.jsonl").exists()]
    if not split_dirs:
        raise FileNotFoundError(f"no samples.jsonl under {data}")
    print("split\tsamples\tedge_pixels")
    for split_dir in split_dirs:
        records = read_sample_records(split_dir / "samples.jsonl")
        edge_total = 0
        for rec in records:
            image = read_png(split_dir / rec["image_path"])
            h, w = image.shape[:2]
            intr = CameraIntrinsics.unit(w, h) if cfg["unit_intrinsics"] else CameraIntrinsics.default(w, h)
            edges = canny_edges(to_gray(image), params)
            edge_total += int(edges.sum())
            rec["edges_path"] = f"maps/{rec['id']}_canny.smap"
            write_smap(split_dir / rec["edges_path"], edges.astype(np.float32))
            if rec.get("depth_path"):
                depth = read_smap(split_dir / rec["depth_path"])
                coords = backproject(depth, intr, inverse_depth=cfg["inverse_depth"])
                rec["coords_path"] = f"maps/{rec['id']}_coords.smap"
                write_smap(split_dir / rec["coords_path"], coords)
        atomic_write(split_dir / "samples.jsonl", dump_jsonl(records))
        print(f"{split_dir.name}\t{len(records)}\t{edge_total}")
    _echo_config(data, "featex", cfg)


def cmd_train(cfg: dict) -> None:
    data = Path(cfg["data"])
    train_samples, val_samples = read_split(data / "train"), read_split(data / "val")
    if not train_samples or not val_samples:
        raise ValueError("training needs non-empty train and val splits")
    mcfg = ModelConfig(
        vocab=tuple(caption_vocabulary()), image_size=train_samples[0].image.shape[0],
        embed_dim=cfg["embed_dim"], num_layers=cfg["num_layers"], num_heads=cfg["num_heads"],
        mlp_ratio=cfg["mlp_ratio"], decoder_channels=cfg["decoder_channels"], variant=cfg["variant"],
        loss_weights=LossWeights(cfg["lambda_depth"], cfg["lambda_coords"], cfg["lambda_edges"]),
        latent_matching=cfg["latent_matching"], seed=cfg["seed"],
    )
    tr, va = prepare_arrays(train_samples, mcfg), prepare_arrays(val_samples, mcfg)
    stats = coordinate_stats(tr) if tr.has_targets else ([0.0] * 3, [1.0] * 3)
    model = SpatialViLT(mcfg, stats)
    result = train(model, tr, va, epochs=cfg["epochs"], lr=cfg["lr"], patience=cfg["patience"],
                   batch_size=cfg["batch_size"], seed=cfg["seed"], clip_norm=cfg["clip_norm"])
    out = Path(cfg["out"])
    result.checkpoint.save(out / "model.ckpt")
    atomic_write(out / "epochs.jsonl", dump_jsonl(result.checkpoint.metrics))
    _echo_config(out, "train", cfg)
    print("epoch\ttrain_total\tval_accuracy")
    for m in result.checkpoint.metrics:
        print(f"{m['epoch']}\t{m['train_total']:.6f}\t{m['val_accuracy']:.4f}")
    print(f"best_epoch\t{result.best_epoch}")


def cmd_predict(cfg: dict) -> None:
    ckpt = Checkpoint.load(cfg["checkpoint"])
    model = ckpt.to_model()
    samples = read_split(Path(cfg["data"]) / cfg["split"])
    known = set(ckpt.config.vocab)
    for s in samples:
        unknown = [w for w in s.caption if w not in known]
        if unknown:
            raise SchemaError(f"sample {s.id}: words {unknown} are not in the checkpoint vocabulary")
    model_id = cfg["model_id"] or Path(cfg["checkpoint"]).parent.name
    records = predict(model, prepare_arrays(samples, ckpt.config), model_id)
    write_predictions(cfg["out"], records)
    acc = sum(r["correct"] for r in records) / len(records) if records else float("nan")
    print(f"model_id\tsplit\tn\taccuracy\n{model_id}\t{cfg['split']}\t{len(records)}\t{acc:.4f}")


def _grouped(paths) -> dict[str, list[dict]]:
    grouped: dict[str, list[dict]] = {}
    for path in paths:
        for rec in read_predictions(path):
            grouped.setdefault(rec["model_id"], []).append(rec)
    if not grouped:
        raise ValueError("no records")
    return grouped


def cmd_ensemble_fit(cfg: dict) -> None:
    weights = fit_weights(_grouped(cfg["predictions"]))
    weights.save(cfg["out"])
    print("meta_category\trelation\t" + "\t".join(weights.model_ids))
    for c in sorted(weights.cells.values(), key=lambda c: (c.meta_category, c.relation)):
        print(f"{c.meta_category}\t{c.relation}\t" + "\t".join(f"{w:.4f}" for w in c.weights))
    for rel in weights.zero_cells():
        print(f"# zero-accuracy cell, uniform weights: {rel}")


def cmd_ensemble_predict(cfg: dict) -> None:
    weights = EnsembleWeights.load(cfg["weights"])
    grouped = _grouped(cfg["predictions"])
    missing = [m for m in weights.model_ids if m not in grouped]
    if missing:
        raise AlignmentError(f"no predictions for weighted models {missing}")
    records = ensemble_predict({m: grouped[m] for m in weights.model_ids}, weights, model_id=cfg["model_id"])
    write_predictions(cfg["out"], records)
    acc = sum(r["correct"] for r in records) / len(records)
    print(f"model_id\tn\taccuracy\n{cfg['model_id']}\t{len(records)}\t{acc:.4f}")


def cmd_report(cfg: dict) -> None:
    grouped = _grouped(cfg["predictions"])
    reports = [(name, compute_metrics(recs)) for name, recs in grouped.items()]
    lines = ["model\tn\taccuracy\tf1"] + [f"{n}\t{r.n}\t{r.accuracy:.4f}\t{r.f1:.4f}" for n, r in reports]
    text = "\n".join(lines) + "\n"
    table = None
    if len(reports) >= 2:
        table = emit_comparison_table(reports, cfg["target"])
        text += "\n" + table.render()
    print(text, end="")
    if cfg["out"]:
        out = Path(cfg["out"])
        atomic_write(out / "report.txt", text)
        doc = {"models": {n: r.to_dict() for n, r in reports},
               "comparison": None if table is None else json.loads(table.to_json())}
        atomic_write(out / "report.json", json.dumps(doc, indent=2) + "\n")
        plot_outputs(reports, out / "figures")
        _echo_config(out, "report", cfg)


COMMANDS = {
    "gen-data": cmd_gen_data, "featex": cmd_featex, "train": cmd_train, "predict": cmd_predict,
    "ensemble-fit": cmd_ensemble_fit, "ensemble-predict": cmd_ensemble_predict, "report": cmd_report,
}

DATA_ERRORS = (SchemaError, AlignmentError, UnknownRelationError, GenerationError, FileNotFoundError,
               ValueError, KeyError, OSError)


def _fail(code: int, exc: BaseException) -> int:
    msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
    print(json.dumps({"error": type(exc).__name__, "exit": code, "message": msg}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = effective_config(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # one BLAS thread keeps floating-point reductions in a fixed order
        with threadpool_limits(limits=1):
            COMMANDS[args.command](cfg)
    except (DivergenceError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except DATA_ERRORS as exc:
        return _fail(EXIT_DATA, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
