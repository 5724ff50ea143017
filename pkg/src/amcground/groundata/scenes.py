"""Synthetic grounded scenes: shapes on a canvas, prompts with spatial references."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import AmbiguityError, GenerationError, ValidationError

IMAGE_SIZE = 64
MIN_AREA_FRACTION = 0.08
SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 90, 230),
    "yellow": (235, 215, 40),
}
RELATIONS = ("top left", "top right", "bottom left", "bottom right", "left", "right", "top", "bottom")
_PLACEMENT_TRIES = 200
_GAP = 2


@dataclass(frozen=True)
class BoxAnnotation:
    x: int
    y: int
    w: int
    h: int
    label: str
    attribute: str
    kind: str = "object"
    category: str = ""

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box must have positive size, got {self.w}x{self.h}")
        if self.kind not in ("object", "region"):
            raise ValidationError(f"kind must be object or region, got {self.kind!r}")
        if not self.category:
            object.__setattr__(self, "category", self.label if self.kind == "object" else "region")

    @property
    def box(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)


@dataclass
class SceneSpec:
    shapes: list[BoxAnnotation]
    background: tuple[int, int, int]
    seed: int
    size: int = IMAGE_SIZE
    difficulty: str = "easy"
    image: np.ndarray | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def check_box(box, width: int, height: int) -> None:
    x, y, w, h = (int(v) for v in box)
    if w <= 0 or h <= 0:
        raise ValidationError(f"box {box} has non-positive size")
    if x < 0 or y < 0 or x + w > width or y + h > height:
        raise ValidationError(f"box {box} exceeds image bounds {width}x{height}")


def box_to_mask(box, width: int, height: int) -> np.ndarray:
    """Binary ``[height, width]`` mask of the half-open rectangle ``[x, x+w) x [y, y+h)``."""
    check_box(box, width, height)
    x, y, w, h = (int(v) for v in box)
    mask = np.zeros((height, width), dtype=np.uint8)
    mask[y:y + h, x:x + w] = 1
    return mask


def filter_boxes(annotations, image_area: float, min_fraction: float = MIN_AREA_FRACTION):
    """Drop boxes smaller than ``min_fraction`` of the image area."""
    limit = min_fraction * image_area
    return [a for a in annotations if a.w * a.h >= limit]


def union_box(a: BoxAnnotation, b: BoxAnnotation) -> tuple[int, int, int, int]:
    x0, y0 = min(a.x, b.x), min(a.y, b.y)
    x1, y1 = max(a.x + a.w, b.x + b.w), max(a.y + a.h, b.y + b.h)
    return (x0, y0, x1 - x0, y1 - y0)


def _overlaps(a: BoxAnnotation, b: BoxAnnotation, gap: int) -> bool:
    return not (
        a.x + a.w + gap <= b.x or b.x + b.w + gap <= a.x
        or a.y + a.h + gap <= b.y or b.y + b.h + gap <= a.y
    )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render(scene: SceneSpec) -> np.ndarray:
    """``[size, size, 3]`` uint8 raster of the scene."""
    n = scene.size
    img = np.empty((n, n, 3), dtype=np.uint8)
    img[:] = scene.background
    rows, cols = np.mgrid[0:n, 0:n]
    for s in scene.shapes:
        if s.label == "square":
            inside = (rows >= s.y) & (rows < s.y + s.h) & (cols >= s.x) & (cols < s.x + s.w)
        elif s.label == "circle":
            cx, cy = s.center
            r = min(s.w, s.h) / 2.0
            inside = (cols + 0.5 - cx) ** 2 + (rows + 0.5 - cy) ** 2 <= r * r
        else:
            # apex at the top centre, base on the bottom edge
            frac = (rows + 0.5 - s.y) / s.h
            half = frac * s.w / 2.0
            cx = s.x + s.w / 2.0
            inside = (frac >= 0) & (frac <= 1) & (np.abs(cols + 0.5 - cx) <= half)
        img[inside] = COLORS[s.attribute]
    return img


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _min_side(size: int) -> int:
    side = 1
    while side * side < MIN_AREA_FRACTION * size * size:
        side += 1
    return side


def generate_scene(seed: int, difficulty: str = "easy", size: int = IMAGE_SIZE,
                   max_side: int = 26) -> SceneSpec:
    """Place 1-4 non-overlapping shapes; deterministic in ``(seed, difficulty)``.

    Hard scenes have at least two shapes of the same class, so a spatial word
    is needed to tell them apart.
    """
    if difficulty not in ("easy", "hard"):
        raise ValidationError(f"difficulty must be easy or hard, got {difficulty!r}")
    rng = np.random.default_rng(seed)
    lo = _min_side(size)
    hi = max(lo, min(max_side, size // 2))
    if difficulty == "easy":
        count = int(rng.integers(1, 5))
        classes = [SHAPES[i] for i in rng.integers(0, len(SHAPES), count)]
        colors = [list(COLORS)[i] for i in rng.integers(0, len(COLORS), count)]
    else:
        count = int(rng.integers(2, 5))
        shared = SHAPES[int(rng.integers(0, len(SHAPES)))]
        classes = [shared, shared] + [SHAPES[i] for i in rng.integers(0, len(SHAPES), count - 2)]
        colors = [list(COLORS)[i] for i in rng.integers(0, len(COLORS), count)]
        if rng.random() < 0.5:
            colors[1] = colors[0]
    background = tuple(int(v) for v in np.full(3, rng.integers(20, 90)))

    placed: list[BoxAnnotation] = []
    for label, color in zip(classes, colors):
        side = int(rng.integers(lo, hi + 1))
        for _ in range(_PLACEMENT_TRIES):
            x = int(rng.integers(0, size - side + 1))
            y = int(rng.integers(0, size - side + 1))
            cand = BoxAnnotation(x, y, side, side, label, color)
            if not any(_overlaps(cand, other, _GAP) for other in placed):
                placed.append(cand)
                break
        else:
            raise GenerationError(f"could not place {len(classes)} shapes (seed {seed})")

    scene = SceneSpec(placed, background, seed, size, difficulty)
    for target in placed:
        try:
            make_prompt(target, scene)
        except AmbiguityError as exc:
            raise GenerationError(f"scene {seed} has an indescribable shape: {exc}") from None
    scene.image = render(scene)
    return scene


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------

def _extreme(group: list[BoxAnnotation], relation: str) -> BoxAnnotation:
    # coordinate ties are broken by lower x, then lower y
    keys = {
        "left": lambda s: (s.center[0], s.x, s.y),
        "right": lambda s: (-s.center[0], s.x, s.y),
        "top": lambda s: (s.center[1], s.x, s.y),
        "bottom": lambda s: (-s.center[1], s.x, s.y),
    }
    return min(group, key=keys[relation])


def _in_corner(s: BoxAnnotation, corner: str, size: int) -> bool:
    cx, cy = s.center
    vert, horiz = corner.split()
    third = size / 3.0
    ok_v = cy < third if vert == "top" else cy > size - third
    ok_h = cx < third if horiz == "left" else cx > size - third
    return ok_v and ok_h


def holds(relation: str | None, s: BoxAnnotation, scene: SceneSpec) -> bool:
    """Whether ``s`` satisfies ``relation`` among the shapes sharing its label."""
    if relation is None:
        return True
    group = [o for o in scene.shapes if o.label == s.label]
    if " " in relation:
        vert, horiz = relation.split()
        return _in_corner(s, relation, scene.size) and (
            _extreme(group, vert) == s or _extreme(group, horiz) == s
        )
    return _extreme(group, relation) == s


def phrase(attribute: str, label: str, relation: str | None) -> str:
    obj = f"{attribute} {label}"
    if relation is None:
        return f"a {obj}"
    if " " in relation:
        return f"a {obj} in the {relation}"
    if relation in ("left", "right"):
        return f"a {obj} on the {relation}"
    return f"the {relation} {obj}"


def parse_phrase(caption: str) -> tuple[str, str, str | None]:
    """Inverse of :func:`phrase`: ``(attribute, label, relation)``."""
    words = caption.split()
    if len(words) == 3 and words[0] == "a":
        return words[1], words[2], None
    if len(words) == 6 and words[0] == "a" and words[3:5] == ["on", "the"] and words[5] in ("left", "right"):
        return words[1], words[2], words[5]
    if len(words) == 7 and words[0] == "a" and words[3:5] == ["in", "the"]:
        rel = f"{words[5]} {words[6]}"
        if rel in RELATIONS[:4]:
            return words[1], words[2], rel
    if len(words) == 4 and words[0] == "the" and words[1] in ("top", "bottom"):
        return words[2], words[3], words[1]
    raise ValidationError(f"not an object phrase: {caption!r}")


def resolve(caption: str, scene: SceneSpec) -> list[int]:
    """Indices of every scene shape the caption describes (exhaustive match)."""
    attribute, label, relation = parse_phrase(caption)
    return [
        i for i, s in enumerate(scene.shapes)
        if s.label == label and s.attribute == attribute and holds(relation, s, scene)
    ]


def make_prompt(ann: BoxAnnotation, scene: SceneSpec) -> str:
    """Caption for one shape: ``a {attribute} {label}``, plus a spatial reference
    when other shapes share the label. Corner references take precedence,
    then left/right, then top/bottom."""
    if ann not in scene.shapes:
        raise ValidationError("annotation does not belong to the scene")
    group = [s for s in scene.shapes if s.label == ann.label]
    if len(group) == 1:
        return phrase(ann.attribute, ann.label, None)
    idx = scene.shapes.index(ann)
    for relation in RELATIONS:
        if not holds(relation, ann, scene):
            continue
        caption = phrase(ann.attribute, ann.label, relation)
        if resolve(caption, scene) == [idx]:
            return caption
    caption = phrase(ann.attribute, ann.label, None)
    if resolve(caption, scene) == [idx]:
        return caption
    raise AmbiguityError(
        f"no spatial reference distinguishes the {ann.attribute} {ann.label} at {ann.box}"
    )


def region_phrase(a: BoxAnnotation, b: BoxAnnotation) -> str:
    return f"a {a.attribute} {a.label} and a {b.attribute} {b.label}"


def make_region(scene: SceneSpec, first: int, second: int) -> BoxAnnotation:
    """Union box over two shapes with a conjunction caption's labels."""
    if len(scene.shapes) < 2:
        raise ValidationError("region annotations need at least two shapes")
    if first == second:
        raise ValidationError("region annotation needs two distinct shapes")
    a, b = scene.shapes[first], scene.shapes[second]
    x, y, w, h = union_box(a, b)
    return BoxAnnotation(x, y, w, h, label=f"{a.label}+{b.label}",
                         attribute=f"{a.attribute}+{b.attribute}", kind="region")
