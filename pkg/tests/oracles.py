"""Independent reference implementations used to cross-check the library.

Nothing here imports amcground; each function is a plain loop over pixels or
samples so that it shares no code path with the implementation under test.
"""
from fractions import Fraction


def pixels(box):
    x, y, w, h = box
    return {(r, c) for r in range(y, y + h) for c in range(x, x + w)}


def iou(a, b):
    pa, pb = pixels(a), pixels(b)
    return len(pa & pb) / len(pa | pb)


def argmax(heatmap):
    best, where = None, None
    for r, row in enumerate(heatmap):
        for c, v in enumerate(row):
            if best is None or v > best:
                best, where = v, (r, c)
    return where


def pointing(samples):
    """``samples``: iterable of (heatmap, boxes, category). Returns (overall, per_category)."""
    hits, counts = {}, {}
    for heatmap, boxes, category in samples:
        point = argmax(heatmap)
        hit = any(point in pixels(b) for b in boxes)
        counts[category] = counts.get(category, 0) + 1
        hits[category] = hits.get(category, 0) + (1 if hit else 0)
    total = sum(counts.values())
    overall = float(Fraction(sum(hits.values()), total))
    return overall, {k: float(Fraction(hits[k], counts[k])) for k in counts}


def mean_in_box(heatmap, box):
    vals = [heatmap[r][c] for r, c in sorted(pixels(box))]
    return sum(vals) / len(vals)


def recall(proposal_boxes_by_score, gt, k, threshold=0.5):
    top = proposal_boxes_by_score[:k]
    for b in top:
        if iou(b, gt) >= threshold:
            return 1
    return 0


def hinge_mean(a, m, delta):
    """Loss on nested lists with exact-as-possible float arithmetic."""
    cells = [(v, w) for ra, rm in zip(a, m) for v, w in zip(ra, rm)]
    n_in = sum(w for _, w in cells)
    n_out = sum(1 - w for _, w in cells)
    inside = sum(v * w for v, w in cells) / n_in
    outside = sum(v * (1 - w) for v, w in cells) / n_out if n_out else 0.0
    return max(0.0, outside - inside + delta)


def hinge_max(a, m, delta):
    cells = [(v, w) for ra, rm in zip(a, m) for v, w in zip(ra, rm)]
    inside = max(v * w for v, w in cells)
    outside = max(v * (1 - w) for v, w in cells) if any(w < 1 for _, w in cells) else 0.0
    return max(0.0, outside - inside + delta)
