"""Grounding metrics: pointing game and Recall@k over box proposals."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ParseError, ValidationError

Box = tuple  # (x, y, w, h) in pixels


class Proposal(NamedTuple):
    box: tuple
    score: float = 0.0


class PointingSample(NamedTuple):
    heatmap: np.ndarray
    boxes: Sequence[Box]
    category: str = ""
    sample_id: str = ""


@dataclass
class EvalReport:
    overall: float
    per_category: dict[str, float]
    counts: dict[str, int]
    hits: dict[str, int]
    skipped: int = 0
    recall: dict[int, float] | None = None
    total: int = 0

    def to_json(self) -> dict:
        recall = None if self.recall is None else {str(k): v for k, v in sorted(self.recall.items())}
        return {
            "overall": self.overall,
            "per_category": dict(sorted(self.per_category.items())),
            "counts": dict(sorted(self.counts.items())),
            "skipped": self.skipped,
            "recall": recall,
        }


def argmax_point(heatmap) -> tuple[int, int]:
    """``(row, col)`` of the maximum; ties go to the smallest row-major index."""
    heatmap = np.asarray(heatmap)
    if heatmap.ndim != 2 or heatmap.size == 0:
        raise ValidationError(f"heatmap must be a non-empty 2-D array, got shape {heatmap.shape}")
    flat = int(np.argmax(heatmap))
    return divmod(flat, heatmap.shape[1])


def point_in_box(row: int, col: int, box: Box) -> bool:
    """Inclusive pixel bounds: columns ``x .. x+w-1``, rows ``y .. y+h-1``."""
    x, y, w, h = box
    return x <= col <= x + w - 1 and y <= row <= y + h - 1


def pointing_game(samples: Iterable) -> EvalReport:
    """Fraction of heatmaps whose maximum falls inside any ground-truth box."""
    hits: dict[str, int] = defaultdict(int)
    counts: dict[str, int] = defaultdict(int)
    for sample in samples:
        sample = PointingSample(*sample)
        if len(sample.boxes) == 0:
            raise ValidationError(f"sample {sample.sample_id or '?'} has no target boxes")
        row, col = argmax_point(sample.heatmap)
        counts[sample.category] += 1
        if any(point_in_box(row, col, b) for b in sample.boxes):
            hits[sample.category] += 1
    return _report(dict(hits), dict(counts))


def _report(hits: dict, counts: dict, skipped: int = 0) -> EvalReport:
    total = sum(counts.values())
    positives = sum(hits.values())
    overall = float(Fraction(positives, total)) if total else 0.0
    per_cat = {c: float(Fraction(hits.get(c, 0), n)) for c, n in counts.items()}
    return EvalReport(overall, per_cat, dict(counts), {c: hits.get(c, 0) for c in counts},
                      skipped, None, total)


def center_pointing(ranked: Sequence[Proposal], boxes: Sequence[Box]) -> bool:
    """Detector-style pointing: the centre of the top proposal lies in a target box."""
    if not ranked:
        raise ValidationError("no proposals to point with")
    x, y, w, h = ranked[0].box
    row, col = int(y + h // 2), int(x + w // 2)
    return any(point_in_box(row, col, b) for b in boxes)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two pixel rectangles."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if min(aw, ah, bw, bh) <= 0:
        raise ValidationError("boxes must have positive width and height")
    iw = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union


def box_score(heatmap: np.ndarray, box: Box, rule: str = "mean") -> float:
    x, y, w, h = (int(v) for v in box)
    region = heatmap[y:y + h, x:x + w]
    if region.size == 0:
        raise ValidationError(f"proposal {box} lies outside the heatmap")
    if rule == "mean":
        return float(region.mean())
    if rule == "max":
        return float(region.max())
    raise ValidationError(f"unknown proposal scoring rule {rule!r}")


def score_proposals(heatmap, proposals: Sequence, rule: str = "mean") -> list[Proposal]:
    """Rank proposals by heatmap mass inside each box; stable for ties."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if len(proposals) == 0:
        raise ValidationError("empty proposal list")
    h, w = heatmap.shape
    scored = []
    for p in proposals:
        box = p.box if isinstance(p, Proposal) else tuple(p)
        bx, by, bw, bh = box
        if bw <= 0 or bh <= 0 or bx < 0 or by < 0 or bx + bw > w or by + bh > h:
            raise ValidationError(f"proposal {box} is outside the {w}x{h} image")
        scored.append(Proposal(tuple(int(v) for v in box), box_score(heatmap, box, rule)))
    order = sorted(range(len(scored)), key=lambda i: -scored[i].score)
    return [scored[i] for i in order]


def recall_at_k(ranked: Sequence[Proposal], gt_box: Box, k: int, threshold: float = 0.5) -> int:
    """1 when one of the top-``k`` proposals overlaps ``gt_box`` with IoU >= threshold."""
    if k < 1:
        raise ValidationError("k must be at least 1")
    return int(any(iou(p.box, gt_box) >= threshold for p in ranked[:k]))


def recall_report(ranked_lists: Sequence[Sequence[Proposal]], gt_boxes: Sequence[Box],
                  ks: Iterable[int] = (1, 5, 10)) -> dict[int, float]:
    n = len(ranked_lists)
    if n == 0:
        return {k: 0.0 for k in ks}
    return {
        k: float(Fraction(sum(recall_at_k(r, g, k) for r, g in zip(ranked_lists, gt_boxes)), n))
        for k in ks
    }


def load_proposals(path) -> dict[str, list[Proposal]]:
    """Read ``{sample_id, boxes: [[x, y, w, h], ...], scores?: [...]}`` JSONL."""
    out: dict[str, list[Proposal]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", f"line {lineno}") from None
            if "sample_id" not in rec or "boxes" not in rec:
                raise ParseError("proposal entry needs sample_id and boxes", f"line {lineno}")
            boxes = rec["boxes"]
            scores = rec.get("scores") or [0.0] * len(boxes)
            if len(scores) != len(boxes) or any(len(b) != 4 for b in boxes):
                raise ParseError("malformed boxes/scores", f"line {lineno}")
            out[str(rec["sample_id"])] = [
                Proposal(tuple(int(v) for v in b), float(s)) for b, s in zip(boxes, scores)
            ]
    return out


def write_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class PointingAccumulator:
    """Streaming pointing-game counts, reduced in sample order."""

    hits: dict = field(default_factory=lambda: defaultdict(int))
    counts: dict = field(default_factory=lambda: defaultdict(int))
    skipped: int = 0

    def add(self, heatmap, boxes, category: str) -> bool:
        row, col = argmax_point(heatmap)
        hit = any(point_in_box(row, col, b) for b in boxes)
        self.counts[category] += 1
        self.hits[category] += int(hit)
        return hit

    def report(self) -> EvalReport:
        return _report(dict(self.hits), dict(self.counts), self.skipped)
