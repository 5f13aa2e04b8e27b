"""Procedural scenes of boxes and spheres, rendered by per-pixel ray casting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..camera import CameraIntrinsics
from ..featex import backproject


class GenerationError(RuntimeError):
    """Scene constraints could not be satisfied within the retry budget."""


@dataclass(frozen=True)
class CategorySpec:
    shape: str  # "box" or "sphere"
    size_min: tuple[float, float, float]
    size_max: tuple[float, float, float]
    albedo: tuple[float, float, float]


CATEGORIES: dict[str, CategorySpec] = {
    "cube": CategorySpec("box", (0.8, 0.8, 0.8), (1.1, 1.1, 1.1), (0.85, 0.20, 0.20)),
    "sphere": CategorySpec("sphere", (0.7, 0.7, 0.7), (1.0, 1.0, 1.0), (0.20, 0.35, 0.90)),
    "block": CategorySpec("box", (1.2, 0.5, 0.6), (1.5, 0.7, 0.8), (0.20, 0.75, 0.30)),
    "ball": CategorySpec("sphere", (0.3, 0.3, 0.3), (0.45, 0.45, 0.45), (0.95, 0.85, 0.15)),
    "slab": CategorySpec("box", (1.0, 0.2, 0.8), (1.3, 0.3, 1.0), (0.70, 0.30, 0.85)),
}


@dataclass(frozen=True)
class SceneObject:
    name: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    albedo: tuple[float, float, float]
    shape: str = "box"
    facing: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.center[2] > 0:
            raise ValueError(f"{self.name}: z must be positive, got {self.center[2]}")
        if min(self.size) <= 0:
            raise ValueError(f"{self.name}: sizes must be positive, got {self.size}")
        if self.shape not in ("box", "sphere"):
            raise ValueError(f"unknown shape {self.shape!r}")

    @property
    def half(self) -> np.ndarray:
        return np.asarray(self.size, dtype=np.float64) / 2

    @property
    def c(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64)

    @property
    def radius(self) -> float:
        return self.size[0] / 2

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size))

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return self.c + signs * self.half


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    background_depth: float = 9.0
    background_color: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def names(self) -> list[str]:
        return [o.name for o in self.objects]


@dataclass(frozen=True)
class SceneConfig:
    categories: tuple[str, ...] = tuple(CATEGORIES)
    width: int = 64
    height: int = 64
    min_objects: int = 2
    max_objects: int = 4
    min_separation: float = 0.0
    z_range: tuple[float, float] = (3.5, 7.0)
    background_depth: float = 9.0
    touch_epsilon: float = 0.05
    p_touching: float = 0.3
    p_inside: float = 0.15
    max_retries: int = 200
    intrinsics: CameraIntrinsics | None = None

    def __post_init__(self):
        if len(self.categories) < 2:
            raise ValueError("need at least two object categories")
        unknown = set(self.categories) - set(CATEGORIES)
        if unknown:
            raise ValueError(f"unknown categories {sorted(unknown)}")
        if self.width < 32 or self.height < 32:
            raise ValueError(f"image must be at least 32x32, got {self.width}x{self.height}")
        if not 2 <= self.min_objects <= self.max_objects <= len(self.categories):
            raise ValueError("object count range must lie in [2, number of categories]")

    @property
    def camera(self) -> CameraIntrinsics:
        return self.intrinsics or CameraIntrinsics.default(self.width, self.height)


@dataclass
class SpatialMaps:
    depth: np.ndarray    # (h, w) float32 metres along the optical axis
    coords: np.ndarray   # (h, w, 3) float32 camera-frame points
    edges: np.ndarray    # (h, w) uint8
    masks: np.ndarray    # (k, h, w) uint8, one per object
    owner: np.ndarray = field(repr=False, default=None)  # (h, w) int, -1 for background


# -- geometry -----------------------------------------------------------------

def _box_box(a: SceneObject, b: SceneObject) -> float:
    d = np.abs(a.c - b.c)
    gaps = d - (a.half + b.half)
    if (gaps > 0).any():
        return float(np.linalg.norm(np.maximum(gaps, 0)))
    if (d + b.half <= a.half).all():
        return float((a.half - d - b.half).min())
    if (d + a.half <= b.half).all():
        return float((b.half - d - a.half).min())
    return 0.0


def _sphere_sphere(a: SceneObject, b: SceneObject) -> float:
    d = float(np.linalg.norm(a.c - b.c))
    ra, rb = a.radius, b.radius
    if d >= ra + rb:
        return d - ra - rb
    if d + min(ra, rb) <= max(ra, rb):
        return max(ra, rb) - d - min(ra, rb)
    return 0.0


def _sphere_box(s: SceneObject, b: SceneObject) -> float:
    d = np.abs(s.c - b.c)
    r = s.radius
    outside = float(np.linalg.norm(np.maximum(d - b.half, 0)))
    if outside > r:
        return outside - r
    if (d + r <= b.half).all():
        return float((b.half - d).min() - r)
    far = float(np.linalg.norm(d + b.half))
    if far <= r:
        return r - far
    return 0.0


def surface_distance(a: SceneObject, b: SceneObject) -> float:
    """Distance between the two objects' surfaces (0 when they intersect)."""
    if a.shape == "box" and b.shape == "box":
        return _box_box(a, b)
    if a.shape == "sphere" and b.shape == "sphere":
        return _sphere_sphere(a, b)
    return _sphere_box(a, b) if a.shape == "sphere" else _sphere_box(b, a)


def contains(outer: SceneObject, inner: SceneObject) -> bool:
    """True when ``inner`` lies entirely within ``outer``'s volume."""
    d = np.abs(inner.c - outer.c)
    if outer.shape == "box":
        if inner.shape == "box":
            return bool((d + inner.half <= outer.half).all())
        return bool((d + inner.radius <= outer.half).all())
    if inner.shape == "sphere":
        return float(np.linalg.norm(d)) + inner.radius <= outer.radius
    return float(np.linalg.norm(d + inner.half)) <= outer.radius


def on_screen(obj: SceneObject, cam: CameraIntrinsics) -> bool:
    """All bounding-box corners in front of the camera and inside the image."""
    pts = obj.corners()
    if (pts[:, 2] <= 0).any():
        return False
    u = cam.fx * pts[:, 0] / pts[:, 2] + cam.cx
    v = cam.fy * pts[:, 1] / pts[:, 2] + cam.cy
    return bool((u >= 0).all() and (u <= cam.width - 1).all() and (v >= 0).all() and (v <= cam.height - 1).all())


# -- generation ---------------------------------------------------------------

def _sample_object(rng: np.random.Generator, name: str, center) -> SceneObject:
    kind = CATEGORIES[name]
    lo, hi = np.asarray(kind.size_min), np.asarray(kind.size_max)
    if kind.shape == "sphere":
        size = (float(rng.uniform(lo[0], hi[0])),) * 3
    else:
        size = tuple(float(s) for s in rng.uniform(lo, hi))
    albedo = tuple(float(np.clip(a + rng.uniform(-0.05, 0.05), 0, 1)) for a in kind.albedo)
    theta = rng.uniform(0, 2 * math.pi)
    facing = (math.cos(theta), 0.0, math.sin(theta))
    return SceneObject(name, tuple(float(c) for c in center), size, albedo, kind.shape, facing)


def _with_center(obj: SceneObject, center) -> SceneObject:
    return SceneObject(obj.name, tuple(float(c) for c in center), obj.size, obj.albedo, obj.shape, obj.facing)


def _free_center(rng, obj: SceneObject, cfg: SceneConfig) -> np.ndarray | None:
    cam = cfg.camera
    half = obj.half
    z = rng.uniform(*cfg.z_range)
    zf = z - half[2]
    if zf <= 0 or z + half[2] >= cfg.background_depth:
        return None
    xlo, xhi = (0 - cam.cx) * zf / cam.fx + half[0], (cam.width - 1 - cam.cx) * zf / cam.fx - half[0]
    ylo, yhi = (0 - cam.cy) * zf / cam.fy + half[1], (cam.height - 1 - cam.cy) * zf / cam.fy - half[1]
    if xlo >= xhi or ylo >= yhi:
        return None
    return np.array([rng.uniform(xlo, xhi), rng.uniform(ylo, yhi), z])


def _touching_center(rng, obj: SceneObject, anchor: SceneObject, eps: float) -> np.ndarray:
    axis = int(rng.choice([0, 1, 2]))
    # along y only stack on top (y points down)
    sign = -1.0 if axis == 1 else float(rng.choice([-1.0, 1.0]))
    gap = rng.uniform(0, eps / 2)
    c = anchor.c.copy()
    extent = anchor.half[axis] + obj.half[axis]
    c[axis] += sign * (extent + gap)
    if anchor.shape == "box" and obj.shape == "box":
        for ax in range(3):
            if ax != axis:
                slack = 0.5 * min(anchor.half[ax], obj.half[ax])
                c[ax] += rng.uniform(-slack, slack)
    return c


def _inside_center(rng, obj: SceneObject, container: SceneObject, margin: float) -> np.ndarray | None:
    if container.shape != "box":
        return None
    room = container.half - obj.half - margin
    if (room <= 0).any():
        return None
    return container.c + rng.uniform(-room, room)


def generate_scene(seed, config: SceneConfig = SceneConfig()) -> Scene:
    """Deterministic scene for ``seed`` (an int or a numpy Generator).

    Objects either float freely (clear of every other surface by at least
    2x the touching tolerance), rest against an earlier object (gap at most
    half the tolerance) or sit inside an earlier box.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cfg = config
    cam = cfg.camera
    eps = cfg.touch_epsilon
    for _ in range(cfg.max_retries):
        count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        names = [cfg.categories[i] for i in rng.permutation(len(cfg.categories))[:count]]
        placed: list[SceneObject] = []
        inside_of: dict[int, int] = {}
        for name in names:
            proto = _sample_object(rng, name, (0.0, 0.0, 5.0))
            ok = False
            for _ in range(50):
                mode = rng.random()
                partner = None
                if placed and mode < cfg.p_inside:
                    partner = int(rng.integers(len(placed)))
                    center = _inside_center(rng, proto, placed[partner], 2 * eps)
                    kind = "inside"
                elif placed and mode < cfg.p_inside + cfg.p_touching:
                    partner = int(rng.integers(len(placed)))
                    center = _touching_center(rng, proto, placed[partner], eps)
                    kind = "touch"
                else:
                    center = _free_center(rng, proto, cfg)
                    kind = "free"
                if center is None:
                    continue
                cand = _with_center(proto, center)
                if not on_screen(cand, cam) or cand.c[2] + cand.half[2] >= cfg.background_depth:
                    continue
                if partner is not None and partner in inside_of:
                    continue
                if kind == "inside" and any(v == partner for v in inside_of.values()):
                    continue
                valid = True
                for j, other in enumerate(placed):
                    if np.linalg.norm(cand.c - other.c) < cfg.min_separation:
                        valid = False
                        break
                    dist = surface_distance(cand, other)
                    if j == partner and kind == "inside":
                        valid = contains(other, cand) and dist >= 2 * eps
                    elif j == partner and kind == "touch":
                        valid = dist <= eps / 2 and not contains(other, cand) and not contains(cand, other)
                    else:
                        valid = dist >= 2 * eps
                    if not valid:
                        break
                if not valid:
                    continue
                if kind == "inside":
                    inside_of[len(placed)] = partner
                placed.append(cand)
                ok = True
                break
            if not ok:
                break
        else:
            return Scene(tuple(placed), cfg.background_depth)
    raise GenerationError(f"could not place objects after {cfg.max_retries} attempts")


# -- rendering ----------------------------------------------------------------

def _ray_dirs(cam: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    u = np.arange(cam.width, dtype=np.float64)[None, :]
    v = np.arange(cam.height, dtype=np.float64)[:, None]
    dx = np.broadcast_to((u - cam.cx) / cam.fx, (cam.height, cam.width))
    dy = np.broadcast_to((v - cam.cy) / cam.fy, (cam.height, cam.width))
    return dx, dy


def _hit_depth(obj: SceneObject, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Planar depth of the first hit along each ray (inf on a miss)."""
    c = obj.c
    if obj.shape == "box":
        lo, hi = c - obj.half, c + obj.half
        tmin = np.full(dx.shape, -np.inf)
        tmax = np.full(dx.shape, np.inf)
        for d, a, b in ((dx, lo[0], hi[0]), (dy, lo[1], hi[1])):
            with np.errstate(divide="ignore", invalid="ignore"):
                t1, t2 = a / d, b / d
            # a ray parallel to the slab is either always or never inside it
            zero = d == 0
            inside = (a <= 0) & (b >= 0)
            t1 = np.where(zero, np.where(inside, -np.inf, np.inf), t1)
            t2 = np.where(zero, np.inf, t2)
            tmin = np.maximum(tmin, np.minimum(t1, t2))
            tmax = np.minimum(tmax, np.maximum(t1, t2))
        tmin = np.maximum(tmin, lo[2])
        tmax = np.minimum(tmax, hi[2])
        hit = (tmin <= tmax) & (tmin > 0)
        return np.where(hit, tmin, np.inf)
    r = obj.radius
    a = dx * dx + dy * dy + 1.0
    bh = dx * c[0] + dy * c[1] + c[2]
    disc = bh * bh - a * (c @ c - r * r)
    with np.errstate(invalid="ignore"):
        t = (bh - np.sqrt(disc)) / a
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def render(scene: Scene, intrinsics: CameraIntrinsics) -> tuple[np.ndarray, SpatialMaps]:
    """Z-buffer render: RGB image in [0, 1] (8-bit quantised) plus exact maps.

    The half of each object on its facing side is drawn at full albedo and
    the rear half darker, which makes orientation visible in the image.
    """
    cam = intrinsics
    h, w = cam.height, cam.width
    dx, dy = _ray_dirs(cam)
    k = len(scene.objects)
    depth = np.full((h, w), float(scene.background_depth))
    owner = np.full((h, w), -1, dtype=np.int64)
    for i, obj in enumerate(scene.objects):
        t = _hit_depth(obj, dx, dy)
        nearer = t < depth
        depth = np.where(nearer, t, depth)
        owner = np.where(nearer, i, owner)

    image = np.empty((h, w, 3))
    image[:] = scene.background_color
    for i, obj in enumerate(scene.objects):
        sel = owner == i
        if not sel.any():
            continue
        z = depth[sel]
        pts = np.stack([dx[sel] * z, dy[sel] * z, z], axis=-1)
        front = (pts - obj.c) @ np.asarray(obj.facing) > 0
        shade = np.where(front, 1.0, 0.55)[:, None]
        image[sel] = shade * np.asarray(obj.albedo)
    image = (np.round(np.clip(image, 0, 1) * 255) / 255).astype(np.float32)

    depth32 = depth.astype(np.float32)
    masks = np.stack([(owner == i) for i in range(k)]).astype(np.uint8) if k else np.zeros((0, h, w), np.uint8)
    maps = SpatialMaps(depth32, backproject(depth32, cam), silhouette_edges(owner), masks, owner)
    return image, maps


def silhouette_edges(owner: np.ndarray) -> np.ndarray:
    """Object pixels with a 4-neighbour owned by something else."""
    p = np.pad(owner, 1, mode="edge")
    h, w = owner.shape
    differs = np.zeros(owner.shape, dtype=bool)
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        differs |= p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w] != owner
    return (differs & (owner >= 0)).astype(np.uint8)
