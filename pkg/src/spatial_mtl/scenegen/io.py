"""On-disk dataset layout.

One directory per split holding ``samples.jsonl`` plus PNG images and SMAP
map files. SMAP is ``b"SMAP"``, little-endian u16 height and u16 width, then
little-endian float32 values in row-major (h, w[, c]) order; the channel
count is implied by the payload length.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from ..taxonomy import default_taxonomy
from .dataset import SPLITS, Sample
from .scene import SpatialMaps

SMAP_MAGIC = b"SMAP"

SAMPLE_FIELDS = ("id", "caption", "label", "relation", "meta_category", "image_path",
                 "depth_path", "coords_path", "edges_path", "mask_paths")
MAP_FIELDS = ("depth_path", "coords_path", "edges_path", "mask_paths")


class SchemaError(ValueError):
    """A record does not match the documented field set."""


def atomic_write(path: str | Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_smap(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim not in (2, 3):
        raise ValueError(f"SMAP stores (h, w) or (h, w, c) arrays, got {arr.shape}")
    h, w = arr.shape[:2]
    if h > 0xFFFF or w > 0xFFFF:
        raise ValueError(f"map {h}x{w} exceeds the u16 header")
    return SMAP_MAGIC + struct.pack("<HH", h, w) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_smap(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != SMAP_MAGIC:
        raise SchemaError("not a SMAP file (bad magic)")
    h, w = struct.unpack("<HH", blob[4:8])
    payload = len(blob) - 8
    cell = h * w * 4
    if cell == 0 or payload % cell:
        raise SchemaError(f"SMAP payload of {payload} bytes does not fit a {h}x{w} map")
    c = payload // cell
    arr = np.frombuffer(blob, dtype="<f4", offset=8).astype(np.float32)
    return arr.reshape(h, w) if c == 1 else arr.reshape(h, w, c)


def write_smap(path, arr) -> None:
    atomic_write(path, encode_smap(arr))


def read_smap(path) -> np.ndarray:
    return decode_smap(Path(path).read_bytes())


def encode_png(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return buf.getvalue()


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("RGB"), dtype=np.float32) / 255).astype(np.float32)


def dump_jsonl(records) -> str:
    return "".join(json.dumps(r, separators=(", ", ": ")) + "\n" for r in records)


def validate_sample_record(rec: dict, line: int = 0) -> dict:
    unknown = set(rec) - set(SAMPLE_FIELDS)
    if unknown:
        raise SchemaError(f"line {line}: unknown fields {sorted(unknown)}")
    missing = [f for f in SAMPLE_FIELDS if f not in MAP_FIELDS and f not in rec]
    if missing:
        raise SchemaError(f"line {line}: missing fields {missing}")
    if rec["label"] not in (0, 1):
        raise SchemaError(f"line {line}: label must be 0 or 1")
    tax = default_taxonomy()
    if rec["relation"] not in tax:
        raise SchemaError(f"line {line}: relation {rec['relation']!r} not in taxonomy")
    if rec["meta_category"] != tax(rec["relation"]):
        raise SchemaError(f"line {line}: meta_category {rec['meta_category']!r} does not match relation")
    return rec


def read_sample_records(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for i, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {i}: invalid JSON ({exc.msg})") from None
            records.append(validate_sample_record(rec, i))
    return records


def sample_record(sample: Sample, with_maps: bool = True) -> dict:
    rec = {"id": sample.id, "caption": sample.caption_text, "label": int(sample.label),
           "relation": sample.relation, "meta_category": sample.meta_category,
           "image_path": f"images/{sample.id}.png"}
    if with_maps:
        rec.update({
            "depth_path": f"maps/{sample.id}_depth.smap",
            "coords_path": f"maps/{sample.id}_coords.smap",
            "edges_path": f"maps/{sample.id}_edges.smap",
            "mask_paths": [f"maps/{sample.id}_mask{k}.smap" for k in range(2)],
        })
    return rec


def write_split(samples: list[Sample], split_dir) -> None:
    split_dir = Path(split_dir)
    records = []
    for s in samples:
        rec = sample_record(s, with_maps=s.maps is not None)
        atomic_write(split_dir / rec["image_path"], encode_png(s.image))
        if s.maps is not None:
            write_smap(split_dir / rec["depth_path"], s.maps.depth)
            write_smap(split_dir / rec["coords_path"], s.maps.coords)
            write_smap(split_dir / rec["edges_path"], s.maps.edges)
            for path, mask in zip(rec["mask_paths"], s.caption_masks()):
                write_smap(split_dir / path, mask)
        records.append(rec)
    atomic_write(split_dir / "samples.jsonl", dump_jsonl(records))


def write_dataset(splits: dict[str, list[Sample]], out_dir) -> None:
    for name in SPLITS:
        write_split(splits.get(name, []), Path(out_dir) / name)


def sample_from_record(rec: dict, split_dir) -> Sample:
    split_dir = Path(split_dir)
    image = read_png(split_dir / rec["image_path"])
    caption = tuple(rec["caption"].split())
    maps = None
    if rec.get("depth_path"):
        depth = read_smap(split_dir / rec["depth_path"])
        coords = read_smap(split_dir / rec["coords_path"]) if rec.get("coords_path") else None
        edges = read_smap(split_dir / rec["edges_path"]).astype(np.uint8) if rec.get("edges_path") else None
        masks = [read_smap(split_dir / p).astype(np.uint8) for p in rec.get("mask_paths") or []]
        h, w = depth.shape
        maps = SpatialMaps(depth, coords, edges, np.stack(masks) if masks else np.zeros((0, h, w), np.uint8))
    n_masks = 0 if maps is None else len(maps.masks)
    subject, obj = (0, 1) if n_masks >= 2 else (0, 0)
    return Sample(rec["id"], image, caption, int(rec["label"]), rec["relation"], subject, obj, maps)


def read_split(split_dir) -> list[Sample]:
    split_dir = Path(split_dir)
    return [sample_from_record(r, split_dir) for r in read_sample_records(split_dir / "samples.jsonl")]


def read_dataset(data_dir) -> dict[str, list[Sample]]:
    return {name: read_split(Path(data_dir) / name) for name in SPLITS}
