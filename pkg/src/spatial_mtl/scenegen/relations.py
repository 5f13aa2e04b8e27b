"""Analytic spatial-relation predicates in the camera frame.

x points right, y down, z away from the camera. Every predicate reports a
truth value and whether the pair sits in an ambiguity band near the
predicate's threshold; ambiguous pairs are never used as captions.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from ..taxonomy import default_taxonomy
from .scene import Scene, SceneObject, contains, surface_distance

COS_45 = math.cos(math.radians(45))
COS_15 = math.cos(math.radians(15))

NEAR_FACTOR = 1.5
FAR_FACTOR = 3.0
PROJECTIVE_MARGIN = 0.15  # fraction of the mean diagonal


class UnsupportedRelationError(ValueError):
    pass


def _scale(a: SceneObject, b: SceneObject) -> float:
    return 0.5 * (a.diagonal + b.diagonal)


def _facing_xz(o: SceneObject) -> np.ndarray:
    f = np.asarray(o.facing, dtype=np.float64)
    return f / np.linalg.norm(f)


def _toward_cos(s: SceneObject, o: SceneObject) -> float:
    d = o.c - s.c
    d[1] = 0.0
    n = np.linalg.norm(d)
    if n == 0:
        return 0.0
    return float(_facing_xz(s) @ (d / n))


def _axis_order(axis: int, sign: float):
    def pred(s: SceneObject, o: SceneObject, eps: float):
        m = PROJECTIVE_MARGIN * _scale(s, o)
        margin = sign * (o.c[axis] - s.c[axis]) - m
        return margin > 0, abs(margin) < m
    return pred


def _near(s, o, eps):
    d, k = float(np.linalg.norm(s.c - o.c)), _scale(s, o)
    return d < NEAR_FACTOR * k, NEAR_FACTOR * k <= d <= FAR_FACTOR * k


def _far(s, o, eps):
    d, k = float(np.linalg.norm(s.c - o.c)), _scale(s, o)
    return d > FAR_FACTOR * k, NEAR_FACTOR * k <= d <= FAR_FACTOR * k


def _touching(s, o, eps):
    d = surface_distance(s, o)
    return d <= eps, eps / 2 < d < 2 * eps


def _inside(s, o, eps):
    return contains(o, s), False


def _contains(s, o, eps):
    return contains(s, o), False


def _side_by_side(s, o, eps):
    lo_s, hi_s = s.c - s.half, s.c + s.half
    lo_o, hi_o = o.c - o.half, o.c + o.half
    overlap = np.minimum(hi_s, hi_o) - np.maximum(lo_s, lo_o)  # >0 means intervals overlap
    x_gap = -overlap[0]
    margin = min(overlap[1], overlap[2], x_gap, _scale(s, o) - x_gap)
    return margin > 0, abs(margin) < 0.05


def _toward(s, o, eps):
    c = _toward_cos(s, o)
    return c >= COS_45, abs(c - COS_45) < 0.1


def _away(s, o, eps):
    c = _toward_cos(s, o)
    return c <= -COS_45, abs(c + COS_45) < 0.1


def _facing(s, o, eps):
    m = min(_toward_cos(s, o), _toward_cos(o, s)) - COS_45
    return m >= 0, abs(m) < 0.1


def _parallel(s, o, eps):
    m = abs(float(_facing_xz(s) @ _facing_xz(o))) - COS_15
    return m >= 0, abs(m) < 0.03


def _next_to(s, o, eps):
    k = _scale(s, o)
    d = float(np.linalg.norm(s.c - o.c))
    m = min(2 * k - d, 0.25 * k - abs(s.c[1] - o.c[1]))
    return m > 0, abs(m) < 0.1 * k


def _opposite(s, o, eps):
    k = _scale(s, o)
    lateral = min(abs(s.c[0]), abs(o.c[0]))
    spread = lateral if s.c[0] * o.c[0] < 0 else -lateral
    m = min(spread - 0.25 * k, 0.5 * k - abs(s.c[2] - o.c[2]))
    return m > 0, abs(m) < 0.1 * k


Predicate = Callable[[SceneObject, SceneObject, float], tuple[bool, bool]]

PREDICATES: dict[str, Predicate] = {
    "left of": _axis_order(0, 1.0),
    "right of": _axis_order(0, -1.0),
    "above": _axis_order(1, 1.0),
    "below": _axis_order(1, -1.0),
    "in front of": _axis_order(2, 1.0),
    "behind": _axis_order(2, -1.0),
    "near": _near,
    "far from": _far,
    "touching": _touching,
    "inside": _inside,
    "contains": _contains,
    "at the side of": _side_by_side,
    "toward": _toward,
    "away from": _away,
    "facing": _facing,
    "parallel to": _parallel,
    "next to": _next_to,
    "opposite to": _opposite,
}

SUPPORTED_RELATIONS: tuple[str, ...] = tuple(PREDICATES)


def supported_by_category() -> dict[str, list[str]]:
    tax = default_taxonomy()
    out: dict[str, list[str]] = {}
    for rel in SUPPORTED_RELATIONS:
        out.setdefault(tax(rel), []).append(rel)
    return out


def _check(scene: Scene, subject: int, obj: int, relation: str):
    if relation not in PREDICATES:
        raise UnsupportedRelationError(f"unsupported relation {relation!r}")
    if subject == obj:
        raise ValueError("subject and object must differ")
    n = len(scene.objects)
    if not (0 <= subject < n and 0 <= obj < n):
        raise IndexError(f"object index out of range for a scene of {n} objects")


def evaluate_relation(scene: Scene, subject: int, obj: int, relation: str,
                      touch_epsilon: float = 0.05) -> tuple[bool, bool]:
    """(truth, ambiguous) for ``relation(subject, object)``."""
    _check(scene, subject, obj, relation)
    truth, ambiguous = PREDICATES[relation](scene.objects[subject], scene.objects[obj], touch_epsilon)
    return bool(truth), bool(ambiguous)


def compute_relation(scene: Scene, subject: int, obj: int, relation: str, touch_epsilon: float = 0.05) -> bool:
    return evaluate_relation(scene, subject, obj, relation, touch_epsilon)[0]
