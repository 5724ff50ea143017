"""Grounded triplets and their on-disk format (PPM images, PGM masks, JSONL index)."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import GenerationError, ParseError, ValidationError
from . import netpbm
from .scenes import (
    BoxAnnotation,
    SceneSpec,
    box_to_mask,
    filter_boxes,
    generate_scene,
    make_prompt,
    make_region,
    region_phrase,
)
from .vocab import tokenize

log = logging.getLogger(__name__)

INDEX_FIELDS = ("id", "image_path", "mask_path", "caption", "box", "label",
                "attribute", "kind", "category", "split")
_MAX_SCENE_ATTEMPTS = 50


@dataclass
class GroundedTriplet:
    id: str
    image: np.ndarray  # [3, H, W] float in [0, 1], multiples of 1/255
    caption: str
    mask: np.ndarray  # [H, W] uint8 in {0, 1}
    box: tuple[int, int, int, int]
    label: str
    attribute: str
    kind: str = "object"
    category: str = ""
    split: str = "train"
    y: int = 1

    def token_ids(self, max_len: int = 12) -> np.ndarray:
        return tokenize(self.caption, max_len)

    def validate(self) -> None:
        if self.mask.sum() < 1:
            raise ValidationError(f"{self.id}: mask is empty")
        x, y, w, h = self.box
        if int(self.mask.sum()) != w * h:
            raise ValidationError(f"{self.id}: mask area {int(self.mask.sum())} != box area {w * h}")
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise ValidationError(f"{self.id}: image {self.image.shape} vs mask {self.mask.shape}")


def image_from_raster(rgb: np.ndarray) -> np.ndarray:
    return rgb.transpose(2, 0, 1).astype(np.float64) / 255.0


def raster_from_image(image: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0).astype(np.uint8)


def triplet_from_annotation(scene: SceneSpec, ann: BoxAnnotation, caption: str,
                            sample_id: str, split: str) -> GroundedTriplet:
    mask = box_to_mask(ann.box, scene.size, scene.size)
    return GroundedTriplet(sample_id, image_from_raster(scene.image), caption, mask, ann.box,
                           ann.label, ann.attribute, ann.kind, ann.category, split)


def make_region_triplet(scene: SceneSpec, rng: np.random.Generator | None = None,
                        sample_id: str = "", split: str = "train") -> GroundedTriplet:
    """Union box over two shapes with a conjunction caption (``kind='region'``)."""
    if len(scene.shapes) < 2:
        raise ValidationError("region triplets need a scene with at least two shapes")
    rng = rng or np.random.default_rng(scene.seed)
    i, j = (int(v) for v in rng.choice(len(scene.shapes), size=2, replace=False))
    ann = make_region(scene, i, j)
    caption = region_phrase(scene.shapes[i], scene.shapes[j])
    return triplet_from_annotation(scene, ann, caption, sample_id or f"{scene.seed}-r", split)


def _pick_target(scene: SceneSpec, rng: np.random.Generator, spatial_ratio: float) -> BoxAnnotation:
    shared = [s for s in scene.shapes if sum(o.label == s.label for o in scene.shapes) > 1]
    plain = [s for s in scene.shapes if s not in shared]
    if shared and (not plain or rng.random() < spatial_ratio):
        pool = shared
    else:
        pool = plain
    return pool[int(rng.integers(0, len(pool)))]


def generate_triplet(seed: int, index: int, difficulty: str = "hard", split: str = "train",
                     spatial_ratio: float | None = None, region_ratio: float = 0.0) -> GroundedTriplet:
    """Sample ``index`` of the dataset with base ``seed``.

    Its scene depends only on ``(seed, index)``; the id is ``"{seed}-{index}"``.
    """
    if spatial_ratio is None:
        spatial_ratio = 1.0 if difficulty == "hard" else 0.5
    for attempt in range(_MAX_SCENE_ATTEMPTS):
        scene_seed = int(np.random.SeedSequence([seed, index, attempt]).generate_state(1)[0])
        try:
            scene = generate_scene(scene_seed, difficulty)
        except GenerationError:
            continue
        rng = np.random.default_rng([scene_seed, 1])
        sample_id = f"{seed}-{index}"
        if region_ratio > 0 and len(scene.shapes) >= 2 and rng.random() < region_ratio:
            return make_region_triplet(scene, rng, sample_id, split)
        area = scene.size * scene.size
        pool = filter_boxes(scene.shapes, area)
        if len(pool) != len(scene.shapes):
            continue
        target = _pick_target(scene, rng, spatial_ratio)
        return triplet_from_annotation(scene, target, make_prompt(target, scene), sample_id, split)
    raise GenerationError(f"no valid scene for sample {index} of seed {seed}")


def generate_dataset(seed: int, count: int, difficulty: str = "hard", split: str = "train",
                     spatial_ratio: float | None = None, region_ratio: float = 0.0) -> list[GroundedTriplet]:
    return [
        generate_triplet(seed, i, difficulty, split, spatial_ratio, region_ratio)
        for i in range(count)
    ]


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_dataset(path, triplets: Iterable[GroundedTriplet]) -> Path:
    """Write ``images/*.ppm``, ``masks/*.pgm`` and ``index.jsonl`` under ``path``."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for t in triplets:
        image_rel = f"images/{t.id}.ppm"
        mask_rel = f"masks/{t.id}.pgm"
        netpbm.write_ppm(root / image_rel, raster_from_image(t.image))
        netpbm.write_pgm(root / mask_rel, t.mask.astype(np.uint8) * 255)
        record = {
            "id": t.id, "image_path": image_rel, "mask_path": mask_rel, "caption": t.caption,
            "box": [int(v) for v in t.box], "label": t.label, "attribute": t.attribute,
            "kind": t.kind, "category": t.category, "split": t.split,
        }
        lines.append(json.dumps(record, sort_keys=True))
    with open(root / "index.jsonl", "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))
    return root


def _parse_record(line: str, lineno: int) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", f"line {lineno}") from None
    if not isinstance(record, dict):
        raise ParseError("index entry is not an object", f"line {lineno}")
    missing = [f for f in INDEX_FIELDS if f not in record]
    if missing:
        raise ParseError(f"missing fields {missing}", f"line {lineno}")
    unknown = sorted(set(record) - set(INDEX_FIELDS))
    if unknown:
        log.warning("index line %d: ignoring unknown fields %s", lineno, unknown)
    box = record["box"]
    if not (isinstance(box, list) and len(box) == 4 and all(isinstance(v, int) for v in box)):
        raise ParseError("box must be four integers [x, y, w, h]", f"line {lineno}")
    if record["kind"] not in ("object", "region"):
        raise ParseError(f"unknown kind {record['kind']!r}", f"line {lineno}")
    return record


def load_dataset(path, split: str | None = None) -> list[GroundedTriplet]:
    root = Path(path)
    index = root / "index.jsonl"
    if not index.exists():
        raise ParseError(f"{index} not found", "index")
    triplets = []
    with open(index, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = _parse_record(line, lineno)
            if split is not None and rec["split"] != split:
                continue
            rgb = netpbm.read_ppm(root / rec["image_path"])
            gray, maxval = netpbm.read_pgm(root / rec["mask_path"])
            if not np.isin(gray, (0, maxval)).all():
                raise ParseError(f"mask {rec['mask_path']} is not binary", f"line {lineno}")
            t = GroundedTriplet(
                rec["id"], image_from_raster(rgb), rec["caption"], (gray > 0).astype(np.uint8),
                tuple(rec["box"]), rec["label"], rec["attribute"], rec["kind"], rec["category"],
                rec["split"],
            )
            try:
                t.validate()
            except ValidationError as exc:
                raise ParseError(str(exc), f"line {lineno}") from None
            triplets.append(t)
    return triplets


def detect_split_overlap(ids_a: Iterable, ids_b: Iterable) -> list:
    """Sorted ids present in both splits."""
    return sorted(set(ids_a) & set(ids_b))


def stack_images(triplets: Sequence[GroundedTriplet]) -> np.ndarray:
    return np.stack([t.image for t in triplets])


def stack_token_ids(triplets: Sequence[GroundedTriplet], max_len: int = 12) -> np.ndarray:
    return np.stack([t.token_ids(max_len) for t in triplets])

