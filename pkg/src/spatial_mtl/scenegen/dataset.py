"""Captioned samples and seeded, relation-stratified dataset splits."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..taxonomy import META_CATEGORIES, default_taxonomy
from .relations import SUPPORTED_RELATIONS, evaluate_relation, supported_by_category
from .scene import GenerationError, Scene, SceneConfig, SpatialMaps, generate_scene, render

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MIN_VISIBLE_PIXELS = 6


@dataclass
class Sample:
    id: str
    image: np.ndarray              # (h, w, 3) float32 in [0, 1]
    caption: tuple[str, ...]
    label: int                     # 1 = caption true
    relation: str
    subject: int                   # index into maps.masks
    object: int
    maps: SpatialMaps | None

    @property
    def meta_category(self) -> str:
        return default_taxonomy()(self.relation)

    @property
    def caption_text(self) -> str:
        return " ".join(self.caption)

    def caption_masks(self) -> np.ndarray:
        """Masks of the two objects the caption names, shape (2, h, w)."""
        return self.maps.masks[[self.subject, self.object]]


def caption_tokens(subject: str, relation: str, obj: str) -> tuple[str, ...]:
    return ("the", subject, "is", *relation.split(), "the", obj)


def caption_vocabulary(categories=None) -> list[str]:
    """Every word a synthetic caption can contain, in a fixed order."""
    from .scene import CATEGORIES
    words = ["the", "is"]
    for name in (categories or CATEGORIES):
        if name not in words:
            words.append(name)
    for rel in SUPPORTED_RELATIONS:
        for w in rel.split():
            if w not in words:
                words.append(w)
    return words


def make_caption(scene: Scene, subject: int, obj: int, relation: str, negate: bool = False,
                 rng: np.random.Generator | None = None, pool=None) -> tuple[tuple[str, ...], int]:
    """Caption ``the <subject> is <relation> the <object>`` and its truth label.

    With ``negate`` a different relation whose truth value differs is
    substituted, so the label flips. Without an explicit ``pool`` the
    substitute comes from the same meta-category half of the time.
    """
    s_name, o_name = scene.objects[subject].name, scene.objects[obj].name
    truth, _ = evaluate_relation(scene, subject, obj, relation)
    if not negate:
        return caption_tokens(s_name, relation, o_name), int(truth)
    rng = rng if rng is not None else np.random.default_rng(0)
    candidates = []
    for r in (pool if pool is not None else SUPPORTED_RELATIONS):
        if r == relation:
            continue
        t, amb = evaluate_relation(scene, subject, obj, r)
        if t != truth and not amb:
            candidates.append(r)
    if not candidates:
        raise ValueError(f"no relation contradicts {relation!r} for this pair")
    if pool is None:
        tax = default_taxonomy()
        same = [r for r in candidates if tax(r) == tax(relation)]
        other = [r for r in candidates if tax(r) != tax(relation)]
        prefer, fallback = (same, other) if rng.random() < 0.5 else (other, same)
        candidates = prefer or fallback
    sub = candidates[int(rng.integers(len(candidates)))]
    return caption_tokens(s_name, sub, o_name), int(not truth)


def _pair_table(scene: Scene, visible: np.ndarray):
    """All unambiguous (subject, object, relation, truth) facts with visible referents."""
    n = len(scene.objects)
    facts = []
    for s in range(n):
        for o in range(n):
            if s == o:
                continue
            for rel in SUPPORTED_RELATIONS:
                truth, amb = evaluate_relation(scene, s, o, rel)
                if amb:
                    continue
                enclosed = evaluate_relation(scene, s, o, "inside")[0] or evaluate_relation(scene, o, s, "inside")[0]
                # an enclosed object is hidden by design; otherwise both must show
                if not enclosed and (visible[s] < MIN_VISIBLE_PIXELS or visible[o] < MIN_VISIBLE_PIXELS):
                    continue
                facts.append((s, o, rel, truth))
    return facts


def generate_sample(index: int, seed: int, label: int, meta_category: str,
                    config: SceneConfig = SceneConfig()) -> Sample:
    rng = np.random.default_rng([seed, index])
    tax = default_taxonomy()
    pool = supported_by_category()[meta_category]
    cam = config.camera
    for _ in range(config.max_retries):
        scene = generate_scene(rng, config)
        image, maps = render(scene, cam)
        visible = maps.masks.reshape(len(scene.objects), -1).sum(axis=1)
        facts = _pair_table(scene, visible)
        truths = {(s, o, r): t for s, o, r, t in facts}
        if label == 1:
            choices = [(s, o, r) for s, o, r, t in facts if t and r in pool]
            if not choices:
                continue
            s, o, r = choices[int(rng.integers(len(choices)))]
            caption, lab = make_caption(scene, s, o, r)
        else:
            def contradicted(s, o):
                return any(truths.get((s, o, p)) is False for p in pool)
            sources = [(s, o, r) for s, o, r, t in facts if t and contradicted(s, o)]
            same = [x for x in sources if tax(x[2]) == meta_category]
            other = [x for x in sources if tax(x[2]) != meta_category]
            prefer, fallback = (same, other) if rng.random() < 0.5 else (other, same)
            choices = prefer or fallback
            if not choices:
                continue
            s, o, r = choices[int(rng.integers(len(choices)))]
            allowed = [p for p in pool if truths.get((s, o, p)) is False]
            caption, lab = make_caption(scene, s, o, r, negate=True, rng=rng, pool=allowed)
        relation = " ".join(caption[3:-2])
        return Sample(f"s{index:06d}", image, caption, lab, relation, s, o, maps)
    raise GenerationError(f"sample {index}: no {meta_category} caption with label {label} "
                          f"after {config.max_retries} scenes")


def split_sizes(n: int, split=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    return n_train, n_val, n - n_train - n_val


def stratified_assignment(keys: list, sizes: tuple[int, ...]) -> list[int]:
    """Assign items to splits so each key group is spread proportionally.

    Items are walked in key order; each goes to the split whose quota is
    furthest behind its pro-rata target, which hits ``sizes`` exactly.
    """
    n = len(keys)
    order = sorted(range(n), key=lambda i: (keys[i], i))
    counts = [0] * len(sizes)
    out = [0] * n
    for j, idx in enumerate(order):
        best, best_deficit = None, None
        for k, target in enumerate(sizes):
            if counts[k] >= target:
                continue
            deficit = target * (j + 1) / n - counts[k]
            if best is None or deficit > best_deficit:
                best, best_deficit = k, deficit
        out[idx] = best
        counts[best] += 1
    return out


def build_dataset(n: int, seed: int, split=(0.7, 0.1, 0.2),
                  config: SceneConfig = SceneConfig()) -> dict[str, list[Sample]]:
    """``n`` samples, label-balanced and cycling through all meta-categories."""
    if n < 10:
        raise ValueError(f"n={n} is too small for a stratified 3-way split (need >= 10)")
    if len(split) != 3 or abs(sum(split) - 1) > 1e-9 or min(split) < 0:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {split}")
    samples = []
    for i in range(n):
        label = i % 2
        category = META_CATEGORIES[(i // 2) % len(META_CATEGORIES)]
        samples.append(generate_sample(i, seed, label, category, config))
    sizes = split_sizes(n, split)
    # label outermost: each split's label count lands within one of its pro-rata share
    assignment = stratified_assignment([(s.label, s.meta_category) for s in samples], sizes)
    out = {name: [] for name in SPLITS}
    for sample, k in zip(samples, assignment):
        out[SPLITS[k]].append(sample)
    return out
