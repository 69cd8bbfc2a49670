"""Polygon-level detection evaluation: IoU matching, precision/recall/H-mean,
and per-gap adjacency reporting."""

import logging
from dataclasses import dataclass, field

from shapely.geometry import Polygon as ShapelyPolygon

log = logging.getLogger(__name__)


@dataclass
class MatchRecord:
    image: str
    n_det: int
    n_gt: int
    tp: int


@dataclass
class EvalResult:
    precision: float
    recall: float
    hmean: float
    n_tp: int
    n_det: int
    n_gt: int
    per_image: list = field(default_factory=list)


def _as_shapely(p):
    shp = ShapelyPolygon(p.vertices if hasattr(p, "vertices") else p)
    if not shp.is_valid:
        shp = shp.buffer(0)
    return shp


def polygon_iou(a, b):
    """area(a n b) / area(a u b); degenerate inputs score 0 with a warning."""
    sa, sb = _as_shapely(a), _as_shapely(b)
    if sa.is_empty or sb.is_empty or sa.area == 0 or sb.area == 0:
        log.warning("degenerate polygon in IoU computation")
        return 0.0
    inter = sa.intersection(sb).area
    union = sa.union(sb).area
    return inter / union if union > 0 else 0.0


def hmean(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def match_image(dets, gts, iou_thresh=0.5):
    """Greedy one-to-one matching by descending IoU; returns TP count."""
    pairs = []
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            iou = polygon_iou(d, g)
            if iou >= iou_thresh:
                pairs.append((-iou, i, j))
    pairs.sort()
    used_d, used_g = set(), set()
    tp = 0
    for _, i, j in pairs:
        if i in used_d or j in used_g:
            continue
        used_d.add(i)
        used_g.add(j)
        tp += 1
    return tp


def match_and_score(dets_per_image, gts_per_image, iou_thresh=0.5, names=None):
    """Aggregate P/R/H over per-image detection and ground-truth polygon lists."""
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detection and ground-truth lists must align")
    names = names or [str(i) for i in range(len(dets_per_image))]
    per_image, n_tp, n_det, n_gt = [], 0, 0, 0
    for name, dets, gts in zip(names, dets_per_image, gts_per_image):
        tp = match_image(dets, gts, iou_thresh)
        per_image.append(MatchRecord(name, len(dets), len(gts), tp))
        n_tp += tp
        n_det += len(dets)
        n_gt += len(gts)
    p = n_tp / n_det if n_det else 0.0
    r = n_tp / n_gt if n_gt else 0.0
    return EvalResult(p, r, hmean(p, r), n_tp, n_det, n_gt, per_image)


def count_accuracy(result):
    """Fraction of images whose detection count equals the ground-truth count."""
    if not result.per_image:
        return 0.0
    good = sum(1 for rec in result.per_image if rec.n_det == rec.n_gt)
    return good / len(result.per_image)


def adjacency_report(results_by_gap):
    """Per-gap instance-count accuracy and H-mean from a {gap: EvalResult} map.

    Returns (rows, formatted table string)."""
    rows = []
    for gap in sorted(results_by_gap):
        res = results_by_gap[gap]
        rows.append({
            "gap_px": gap,
            "count_accuracy": count_accuracy(res),
            "precision": res.precision,
            "recall": res.recall,
            "hmean": res.hmean,
        })
    lines = ["gap_px  count_acc  P       R       H"]
    for r in rows:
        lines.append(
            f"{r['gap_px']:<7.2f} {r['count_accuracy']:<10.4f} "
            f"{r['precision']:<7.4f} {r['recall']:<7.4f} {r['hmean']:<7.4f}"
        )
    return rows, "\n".join(lines)
