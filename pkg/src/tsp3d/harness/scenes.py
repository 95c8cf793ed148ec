"""Synthetic grounding scenes: a floor plane with coloured axis-aligned boxes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import GenerationError, InvalidInput
from ..head import Box3D
from ..text import CATEGORIES, COLORS

COLOR_RGB = {
    "red": (0.85, 0.1, 0.1),
    "green": (0.1, 0.7, 0.2),
    "blue": (0.1, 0.2, 0.85),
    "yellow": (0.9, 0.85, 0.1),
    "purple": (0.55, 0.15, 0.7),
    "orange": (0.95, 0.5, 0.05),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
    "gray": (0.4, 0.4, 0.4),
    "brown": (0.45, 0.25, 0.1),
}
FLOOR_RGB = (0.7, 0.65, 0.55)

# (min size, max size) per category, metres; heights stay below 0.6 m so the
# centre of every object shares its coarsest cell with the floor
CATEGORY_SIZES = {
    "chair": ((0.35, 0.35, 0.4), (0.5, 0.5, 0.55)),
    "table": ((0.6, 0.45, 0.35), (0.9, 0.6, 0.5)),
    "box": ((0.2, 0.2, 0.2), (0.35, 0.35, 0.35)),
    "cabinet": ((0.4, 0.3, 0.45), (0.6, 0.4, 0.58)),
    "lamp": ((0.15, 0.15, 0.4), (0.22, 0.22, 0.58)),
    "sofa": ((0.8, 0.4, 0.3), (1.0, 0.5, 0.45)),
    "bin": ((0.2, 0.2, 0.25), (0.3, 0.3, 0.4)),
    "shelf": ((0.6, 0.2, 0.4), (0.9, 0.3, 0.58)),
    "desk": ((0.7, 0.45, 0.4), (0.9, 0.55, 0.55)),
    "stool": ((0.25, 0.25, 0.25), (0.35, 0.35, 0.4)),
}

RELATIONS = ("left of", "right of", "behind", "in front of", "nearest")
RELATION_MARGIN = 0.1


@dataclass(frozen=True)
class SceneObject:
    box: Box3D
    category: str
    color: str

    @property
    def category_id(self):
        return CATEGORIES.index(self.category)

    @property
    def color_id(self):
        return COLORS.index(self.color)


@dataclass
class GroundingSample:
    points: np.ndarray
    objects: list
    description: list
    target_idx: int
    relevant_idxs: list = field(default_factory=list)
    sample_id: str = ""

    def __post_init__(self):
        if not 0 <= self.target_idx < len(self.objects):
            raise InvalidInput(f"target_idx {self.target_idx} out of range")
        for i in self.relevant_idxs:
            if not 0 <= i < len(self.objects):
                raise InvalidInput(f"relevant index {i} out of range")

    @property
    def boxes(self):
        return [o.box for o in self.objects]

    @property
    def target(self):
        return self.objects[self.target_idx].box


@dataclass(frozen=True)
class SceneSpec:
    min_objects: int = 2
    max_objects: int = 6
    extent: float = 3.0
    points_per_object: int = 600
    floor_density: float = 1000.0  # points per square metre
    color_noise: float = 0.03
    size_scale: float = 1.0  # multiplies every category's size range

    def validate(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise GenerationError(f"bad object count range {self.min_objects}..{self.max_objects}")
        if not 0 < self.extent <= 4.0:
            raise GenerationError(f"extent must be in (0, 4] m, got {self.extent}")
        if self.max_objects > len(CATEGORIES) * len(COLORS):
            raise GenerationError("more objects than distinct attribute pairs")
        if not 0 < self.size_scale <= 1.0:
            raise GenerationError(f"size_scale must be in (0, 1], got {self.size_scale}")


def relation_holds(relation, target, anchor, others):
    """Axis semantics: x grows to the right, y grows away from the viewer."""
    t, a = np.asarray(target.center), np.asarray(anchor.center)
    if relation == "left of":
        return t[0] < a[0] - RELATION_MARGIN
    if relation == "right of":
        return t[0] > a[0] + RELATION_MARGIN
    if relation == "behind":
        return t[1] > a[1] + RELATION_MARGIN
    if relation == "in front of":
        return t[1] < a[1] - RELATION_MARGIN
    if relation == "nearest":
        d = np.linalg.norm(t[:2] - a[:2])
        return all(np.linalg.norm(np.asarray(o.center)[:2] - a[:2]) > d + RELATION_MARGIN for o in others)
    raise InvalidInput(f"unknown relation {relation!r}")


def describe(target, anchor, relation):
    return ["the", target.color, target.category, *relation.split(), "the", anchor.color, anchor.category]


def resolve_description(objects, description):
    """Every object index matching the description: the uniqueness oracle."""
    words = list(description)
    if len(words) < 5 or words[0] != "the":
        return []
    color, category = words[1], words[2]
    try:
        split = len(words) - 3
        relation = " ".join(words[3:split])
        a_color, a_category = words[split + 1], words[split + 2]
    except IndexError:
        return []
    anchors = [i for i, o in enumerate(objects) if o.color == a_color and o.category == a_category]
    hits = []
    for i, o in enumerate(objects):
        if o.color != color or o.category != category:
            continue
        for j in anchors:
            if j == i:
                continue
            others = [objects[k].box for k in range(len(objects)) if k not in (i, j)]
            if relation_holds(relation, o.box, objects[j].box, others):
                hits.append(i)
                break
    return hits


def _sample_surface(rng, box, n):
    lo, hi = box.min, box.max
    size = hi - lo
    areas = np.array([size[1] * size[2], size[1] * size[2], size[0] * size[2],
                      size[0] * size[2], size[0] * size[1], size[0] * size[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * size
    axis = face // 2
    side = face % 2
    pts[np.arange(n), axis] = np.where(side == 1, hi[axis], lo[axis])
    return pts


def _place(rng, spec, n):
    boxes = []
    cats = []
    for _ in range(n):
        for _attempt in range(100):
            cat = CATEGORIES[rng.integers(len(CATEGORIES))]
            lo, hi = (np.asarray(v) * spec.size_scale for v in CATEGORY_SIZES[cat])
            size = lo + rng.random(3) * (hi - lo)
            margin = 0.1
            if np.any(size[:2] + 2 * margin >= spec.extent):
                continue
            xy = margin + size[:2] / 2 + rng.random(2) * (spec.extent - size[:2] - 2 * margin)
            center = np.array([xy[0], xy[1], size[2] / 2 + 0.005])
            box = Box3D(center, size)
            gap = 0.05
            if all(np.any(box.min[:2] > b.max[:2] + gap) or np.any(b.min[:2] > box.max[:2] + gap)
                   for b in boxes):
                boxes.append(box)
                cats.append(cat)
                break
        else:
            raise GenerationError(f"could not place {n} non-overlapping boxes in {spec.extent} m")
    return boxes, cats


def generate_scene(seed, spec=SceneSpec()):
    """Deterministic scene + description for ``seed``."""
    spec.validate()
    rng = np.random.default_rng([seed, 0x75933D])
    for _ in range(100):
        n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        boxes, cats = _place(rng, spec, n)
        used = set()
        objects = []
        for box, cat in zip(boxes, cats):
            choices = [c for c in COLORS if (cat, c) not in used]
            color = choices[rng.integers(len(choices))]
            used.add((cat, color))
            objects.append(SceneObject(box, cat, color))
        if n < 2:
            continue
        t_idx = int(rng.integers(n))
        a_choices = [i for i in range(n) if i != t_idx]
        a_idx = a_choices[rng.integers(len(a_choices))]
        others = [objects[k].box for k in range(n) if k not in (t_idx, a_idx)]
        valid = [r for r in RELATIONS if relation_holds(r, objects[t_idx].box, objects[a_idx].box, others)]
        if not valid:
            continue
        relation = valid[rng.integers(len(valid))]
        description = describe(objects[t_idx], objects[a_idx], relation)
        if resolve_description(objects, description) != [t_idx]:
            continue
        points = _render(rng, spec, objects)
        return GroundingSample(points, objects, description, t_idx, [a_idx], sample_id=f"scene_{seed}")
    raise GenerationError(f"no unambiguous description found for seed {seed}")


def _render(rng, spec, objects):
    n_floor = int(spec.floor_density * spec.extent ** 2)
    floor = np.column_stack([rng.random(n_floor) * spec.extent, rng.random(n_floor) * spec.extent,
                             rng.random(n_floor) * 0.005])
    floor_rgb = np.clip(np.asarray(FLOOR_RGB) + rng.normal(0, spec.color_noise, (n_floor, 3)), 0, 1)
    parts = [np.hstack([floor, floor_rgb])]
    for obj in objects:
        area = 2 * (obj.box.size[0] * obj.box.size[1] + obj.box.size[0] * obj.box.size[2]
                    + obj.box.size[1] * obj.box.size[2])
        n = max(int(spec.points_per_object * area), 50)
        pts = _sample_surface(rng, obj.box, n)
        rgb = np.clip(np.asarray(COLOR_RGB[obj.color]) + rng.normal(0, spec.color_noise, (n, 3)), 0, 1)
        parts.append(np.hstack([pts, rgb]))
    return np.vstack(parts)


def generate_dataset(seed, count, spec=SceneSpec()):
    return [generate_scene(seed * 100003 + i, spec) for i in range(count)]


# a scene small enough for exhaustive finite differences
TINY_SPEC = SceneSpec(min_objects=2, max_objects=2, extent=0.6, points_per_object=400,
                      floor_density=400.0, size_scale=0.35)
