"""Batch assembly, the multitask training loop, inference and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..featex import downsample_map, normalize_depth
from ..scenegen.dataset import Sample
from ..scenegen.io import atomic_write
from ..taxonomy import default_taxonomy
from .network import ModelConfig, SpatialViLT, Targets, compute_total_loss

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class ArrayDataset:
    """Model-ready arrays for one split; targets already at decoder resolution."""

    ids: list[str]
    images: np.ndarray      # (n, h, w, 3) float32
    tokens: np.ndarray      # (n, max_text_len) int64
    labels: np.ndarray      # (n,) int64
    relations: list[str]
    depth: np.ndarray | None = None    # (n, t, t)
    coords: np.ndarray | None = None   # (n, 3, t, t) raw metres
    edges: np.ndarray | None = None    # (n, t, t)
    mask: np.ndarray | None = None     # (n, t, t)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def has_targets(self) -> bool:
        return self.depth is not None

    def targets(self, idx: np.ndarray, coord_stats) -> Targets | None:
        if not self.has_targets:
            return None
        mean = np.asarray(coord_stats[0], dtype=np.float32)[None, :, None, None]
        std = np.asarray(coord_stats[1], dtype=np.float32)[None, :, None, None]
        return Targets(self.depth[idx], ((self.coords[idx] - mean) / std).astype(np.float32),
                       self.edges[idx], self.mask[idx])


def prepare_arrays(samples: Sequence[Sample], config: ModelConfig) -> ArrayDataset:
    tok = SpatialViLT.tokenizer_for(config)
    t = config.target_map_size
    n = len(samples)
    with_maps = n > 0 and all(s.maps is not None for s in samples)
    images = np.stack([s.image for s in samples]).astype(np.float32) if n else np.zeros((0, config.image_size, config.image_size, 3), np.float32)
    ds = ArrayDataset(
        ids=[s.id for s in samples],
        images=images,
        tokens=tok.batch([s.caption for s in samples]) if n else np.zeros((0, config.max_text_len), np.int64),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        relations=[s.relation for s in samples],
    )
    if with_maps:
        depth, coords, edges, mask = [], [], [], []
        for s in samples:
            m = s.maps
            depth.append(downsample_map(normalize_depth(m.depth.astype(np.float32)), t, t, "mean"))
            coords.append(np.transpose(downsample_map(m.coords, t, t, "mean"), (2, 0, 1)))
            edges.append(downsample_map(m.edges, t, t, "max"))
            if len(m.masks) >= 2:
                union = np.logical_or(m.masks[s.subject] > 0, m.masks[s.object] > 0)
            elif len(m.masks) == 1:
                union = m.masks[0] > 0
            else:
                union = np.ones(m.depth.shape, dtype=bool)
            mask.append(downsample_map(union.astype(np.uint8), t, t, "max"))
        ds.depth = np.stack(depth).astype(np.float32)
        ds.coords = np.stack(coords).astype(np.float32)
        ds.edges = np.stack(edges).astype(np.float32)
        ds.mask = np.stack(mask).astype(np.float32)
    return ds


def coordinate_stats(ds: ArrayDataset) -> tuple[list[float], list[float]]:
    """Per-channel mean and standard deviation of the coordinate targets."""
    c = ds.coords.astype(np.float64)
    mean = c.mean(axis=(0, 2, 3))
    std = c.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return [float(v) for v in mean], [float(v) for v in std]


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"SVLTCKPT"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    coord_stats: tuple[list[float], list[float]]
    epoch: int = 0
    optimizer: dict | None = None      # {"step": int, "m": {name: arr}, "v": {name: arr}}
    rng_state: dict | None = None
    metrics: list[dict] = field(default_factory=list)

    @classmethod
    def from_model(cls, model: SpatialViLT, epoch: int = 0, optimizer: ad.Adam | None = None,
                   rng: np.random.Generator | None = None, metrics=None) -> "Checkpoint":
        opt = None
        if optimizer is not None:
            names = list(model.params)
            opt = {"step": optimizer.state.step,
                   "m": {k: m.copy() for k, m in zip(names, optimizer.state.m)},
                   "v": {k: v.copy() for k, v in zip(names, optimizer.state.v)}}
        return cls(model.config, {k: p.data.copy() for k, p in model.params.items()},
                   (list(model.coord_stats[0]), list(model.coord_stats[1])), epoch, opt,
                   rng.bit_generator.state if rng is not None else None, list(metrics or []))

    def to_model(self) -> SpatialViLT:
        model = SpatialViLT(self.config, self.coord_stats)
        if set(self.params) != set(model.params):
            raise ValueError("checkpoint parameters do not match the model built from its config")
        for k, arr in self.params.items():
            if arr.shape != model.params[k].shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} != {model.params[k].shape}")
            model.params[k].data = arr.astype(np.float32).copy()
        return model

    def to_bytes(self) -> bytes:
        blocks: list[tuple[str, np.ndarray]] = list(self.params.items())
        if self.optimizer is not None:
            blocks += [(f"adam.m/{k}", a) for k, a in self.optimizer["m"].items()]
            blocks += [(f"adam.v/{k}", a) for k, a in self.optimizer["v"].items()]
        manifest, offset = [], 0
        for name, arr in blocks:
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 4
        header = {
            "format": 1,
            "config": self.config.to_dict(),
            "coord_stats": [list(self.coord_stats[0]), list(self.coord_stats[1])],
            "epoch": self.epoch,
            "seed": self.config.seed,
            "optimizer_step": None if self.optimizer is None else self.optimizer["step"],
            "rng_state": self.rng_state,
            "metrics": self.metrics,
            "manifest": manifest,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in blocks)
        return CHECKPOINT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        (hlen,) = struct.unpack("<I", blob[8:12])
        header = json.loads(blob[12:12 + hlen])
        base = 12 + hlen
        arrays = {}
        for ent in header["manifest"]:
            count = int(np.prod(ent["shape"])) if ent["shape"] else 1
            start = base + ent["offset"]
            arrays[ent["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(ent["shape"]).astype(np.float32)
        params = {k: a for k, a in arrays.items() if not k.startswith("adam.")}
        opt = None
        if header["optimizer_step"] is not None:
            opt = {"step": header["optimizer_step"],
                   "m": {k[len("adam.m/"):]: a for k, a in arrays.items() if k.startswith("adam.m/")},
                   "v": {k[len("adam.v/"):]: a for k, a in arrays.items() if k.startswith("adam.v/")}}
        cs = header["coord_stats"]
        return cls(ModelConfig.from_dict(header["config"]), params, (cs[0], cs[1]), header["epoch"],
                   opt, header["rng_state"], header["metrics"])

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# -- training -------------------------------------------------------------------

def evaluate_logits(model: SpatialViLT, ds: ArrayDataset, batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        out.append(model.forward(ds.images[sl], ds.tokens[sl]).logits.data)
    return np.concatenate(out) if out else np.zeros((0, 2), np.float32)


def accuracy(model: SpatialViLT, ds: ArrayDataset) -> float:
    if len(ds) == 0:
        return float("nan")
    pred = evaluate_logits(model, ds).argmax(axis=1)
    return float((pred == ds.labels).mean())


@dataclass
class TrainResult:
    model: SpatialViLT
    checkpoint: Checkpoint
    metrics: list[dict]
    best_epoch: int


def train(model: SpatialViLT, train_set: ArrayDataset, val_set: ArrayDataset, epochs: int = 15,
          lr: float = 1e-4, patience: int = 3, batch_size: int = 16, seed: int | None = None,
          clip_norm: float | None = 1.0) -> TrainResult:
    """Minimise the multitask loss with Adam; early-stop on validation accuracy.

    Returns the model restored to its best epoch (ties keep the earlier
    epoch). ``epochs=0`` returns the untouched model and no metrics.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training needs non-empty train and validation splits")
    cfg = model.config
    if cfg.variant != "baseline" and not train_set.has_targets:
        raise ValueError(f"variant {cfg.variant!r} needs spatial targets in the training set")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = model.parameters()
    opt = ad.Adam(params, lr)
    metrics: list[dict] = []
    best = Checkpoint.from_model(model, 0, opt, rng)
    best_acc, best_epoch = -1.0, 0
    n = len(train_set)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        sums = np.zeros(5)
        batches = 0
        for bi, start in enumerate(range(0, n, batch_size)):
            idx = np.sort(perm[start:start + batch_size])
            with ad.Tape() as tape:
                out = model.forward(train_set.images[idx], train_set.tokens[idx])
                targets = train_set.targets(idx, model.coord_stats)
                loss, parts = compute_total_loss(out, targets, train_set.labels[idx], cfg.loss_weights,
                                                 cfg.variant, model)
                if not math.isfinite(parts.total):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi} "
                                          f"(samples {[train_set.ids[i] for i in idx[:4]]}...)")
                model.zero_grad()
                tape.backward(loss)
            if clip_norm is not None:
                _clip_gradients(params, clip_norm)
            opt.step()
            sums += (parts.classification, parts.depth, parts.coords, parts.edges, parts.total)
            batches += 1
        val_acc = accuracy(model, val_set)
        avg = sums / batches
        record = {"epoch": epoch, "train_classification": avg[0], "train_depth": avg[1],
                  "train_coords": avg[2], "train_edges": avg[3], "train_total": avg[4],
                  "val_accuracy": val_acc, "seconds": round(time.perf_counter() - t0, 3)}
        metrics.append(record)
        logger.info("epoch %d  loss %.4f  val_acc %.4f", epoch, avg[4], val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best = Checkpoint.from_model(model, epoch, opt, rng)
        elif epoch - best_epoch >= patience:
            logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    # wall-clock timings are not part of the reproducible record
    stable = [{k: v for k, v in m.items() if k != "seconds"} for m in metrics]
    best.metrics = stable
    restored = best.to_model()
    model.params = restored.params
    return TrainResult(model, best, metrics, best_epoch)


def _clip_gradients(params: list[ad.Tensor], max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = np.float32(max_norm / total)
        for p in params:
            if p.grad is not None:
                p.grad *= scale


# -- prediction -------------------------------------------------------------------

def predict(model: SpatialViLT, ds: ArrayDataset, model_id: str) -> list[dict]:
    """One PredictionRecord per instance, in dataset order."""
    tax = default_taxonomy()
    pred = evaluate_logits(model, ds).argmax(axis=1)
    return [
        {"id": ds.ids[i], "model_id": model_id, "predicted": int(pred[i]), "relation": ds.relations[i],
         "meta_category": tax(ds.relations[i]), "correct": bool(pred[i] == ds.labels[i])}
        for i in range(len(ds))
    ]
