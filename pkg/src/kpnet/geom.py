"""Polygon geometry, centerline/keypoint derivation, and label rasterization.

All coordinates are (x, y) in image pixel space; grids are indexed [y, x]
with pixel centers at integer coordinates.
"""

from dataclasses import dataclass

import numpy as np
from shapely.geometry import LineString, Point
from shapely.geometry import Polygon as _ShapelyPolygon

from .errors import GeometryError

# side classification kicks in only for clearly elongated shapes
_ELONGATION_MIN = 1.5
_BOUNDARY_SAMPLES = 360


@dataclass(frozen=True)
class Polygon:
    """Simple closed polygon with >= 3 vertices and nonzero area."""

    vertices: tuple

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise GeometryError("polygon needs at least 3 vertices")
        object.__setattr__(
            self, "vertices", tuple((float(x), float(y)) for x, y in self.vertices)
        )
        shp = _ShapelyPolygon(self.vertices)
        if not shp.is_valid:
            raise GeometryError("polygon is not simple")
        if shp.area == 0.0:
            raise GeometryError("polygon has zero area")

    def as_array(self):
        return np.asarray(self.vertices, dtype=np.float64)

    @property
    def shapely(self):
        return _ShapelyPolygon(self.vertices)

    @property
    def area(self):
        return self.shapely.area

    def covers_point(self, x, y, tol=1e-9):
        return self.shapely.buffer(tol).covers(Point(x, y))

    def contains_point(self, x, y):
        return self.shapely.contains(Point(x, y))

    def scaled(self, factor):
        return Polygon(tuple((x * factor, y * factor) for x, y in self.vertices))


@dataclass(frozen=True)
class TextInstance:
    """A polygon annotation with its centerline, center keypoint and radius."""

    polygon: Polygon
    centerline: tuple
    center: tuple
    radius: float
    id: int

    @classmethod
    def from_polygon(cls, polygon, instance_id, n_samples=9):
        centerline = compute_centerline(polygon, n_samples)
        center, radius = center_keypoint(polygon, n_samples)
        if not polygon.contains_point(*center):
            raise GeometryError("instance center is not strictly inside its polygon")
        return cls(polygon, tuple(map(tuple, centerline)), tuple(center), radius, instance_id)

    def scaled(self, factor):
        return TextInstance(
            self.polygon.scaled(factor),
            tuple((x * factor, y * factor) for x, y in self.centerline),
            (self.center[0] * factor, self.center[1] * factor),
            self.radius * factor,
            self.id,
        )


@dataclass
class LabelSet:
    """Rasterized training targets for one image."""

    center_map: np.ndarray
    instance_masks: list
    instance_ids: list
    instance_center_maps: list


def _resample_ring(points, m):
    """Resample a closed ring to m points uniform in arclength (ccw)."""
    pts = np.asarray(points, dtype=np.float64)
    if _signed_area(pts) < 0:
        pts = pts[::-1]
    closed = np.vstack([pts, pts[:1]])
    seg = np.diff(closed, axis=0)
    seglen = np.hypot(seg[:, 0], seg[:, 1])
    keep = seglen > 1e-12
    seg, seglen, pts = seg[keep], seglen[keep], pts[keep]
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    perimeter = cum[-1]
    t = np.linspace(0.0, perimeter, m, endpoint=False)
    idx = np.clip(np.searchsorted(cum, t, side="right") - 1, 0, len(seglen) - 1)
    frac = (t - cum[idx]) / seglen[idx]
    return pts[idx] + seg[idx] * frac[:, None], perimeter


def _resample_chain(points, n):
    """Resample an open chain to n points uniform in arclength, endpoints kept."""
    pts = np.asarray(points, dtype=np.float64)
    seg = np.diff(pts, axis=0)
    seglen = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    total = cum[-1]
    if total <= 0:
        return np.repeat(pts[:1], n, axis=0)
    t = np.linspace(0.0, total, n)
    idx = np.clip(np.searchsorted(cum, t, side="right") - 1, 0, len(seglen) - 1)
    safe = np.where(seglen[idx] > 0, seglen[idx], 1.0)
    frac = (t - cum[idx]) / safe
    return pts[idx] + seg[idx] * frac[:, None]


def _signed_area(pts):
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def _principal_axis(pts):
    """Centroid, unit principal direction and elongation of a point cloud."""
    c = pts.mean(axis=0)
    d = pts - c
    cov = d.T @ d / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    lo, hi = max(evals[0], 1e-12), max(evals[1], 1e-12)
    elongation = float(np.sqrt(hi / lo))
    if abs(hi - lo) < 1e-9 * hi:
        u = np.array([1.0, 0.0])  # declared tie-break: horizontal
    else:
        u = evecs[:, 1]
        if u[0] < 0 or (u[0] == 0 and u[1] < 0):
            u = -u
    return c, u, elongation


def _axis_midline(polygon, n_samples, pts):
    """Midline of perpendicular boundary chords along the principal axis."""
    c, u, _ = _principal_axis(pts)
    v = np.array([-u[1], u[0]])
    proj = (pts - c) @ u
    lo, hi = proj.min(), proj.max()
    shp = polygon.shapely
    span = 4.0 * max(abs(lo), abs(hi), 1.0)
    out = []
    for t in np.linspace(lo, hi, n_samples):
        base = c + t * u
        line = LineString([base - span * v, base + span * v])
        inter = line.intersection(shp)
        if inter.is_empty:
            out.append(base)
            continue
        coords = []
        geoms = getattr(inter, "geoms", [inter])
        for g in geoms:
            coords.extend(np.asarray(g.coords))
        s = (np.asarray(coords) - base) @ v
        out.append(base + 0.5 * (s.min() + s.max()) * v)
    return np.asarray(out)


def _turning_scores(ring, perimeter, area):
    """Per-sample turning angle accumulated over a sliding arclength window.

    The window tracks roughly twice the band width (~4 * area / perimeter) so
    an end region scores both of its corners without rewarding long
    high-curvature sides of thick curved bands."""
    m = len(ring)
    d = np.roll(ring, -1, axis=0) - ring
    d /= np.maximum(np.hypot(d[:, 0], d[:, 1]), 1e-12)[:, None]
    prev = np.roll(d, 1, axis=0)
    cross = prev[:, 0] * d[:, 1] - prev[:, 1] * d[:, 0]
    dot = (prev * d).sum(axis=1)
    turn = np.abs(np.arctan2(cross, dot))
    window = np.clip(4.0 * area / perimeter, perimeter / 20.0, perimeter / 6.0)
    half = max(1, int(round(window / 2.0 / (perimeter / m))))
    padded = np.concatenate([turn[-half:], turn, turn[:half]])
    kernel = np.ones(2 * half + 1)
    return np.convolve(padded, kernel, mode="valid"), turn, half


def compute_centerline(polygon, n_samples=9):
    """Mid-curve of an elongated polygon by pairing its two long boundary sides.

    Splits the boundary at the two highest-turning end regions and pairs the
    resulting chains by normalized arclength.  Falls back to a principal-axis
    midline when the shape is not clearly elongated or side pairing fails.
    """
    if n_samples < 2:
        raise GeometryError("n_samples must be >= 2")
    if polygon.area < 1.0:
        raise GeometryError("degenerate polygon")
    ring, perimeter = _resample_ring(polygon.as_array(), _BOUNDARY_SAMPLES)
    _, _, elongation = _principal_axis(ring)
    if elongation >= _ELONGATION_MIN:
        mid = _chain_midline(ring, perimeter, polygon.area, n_samples)
        if mid is not None and all(polygon.covers_point(x, y, tol=1e-6) for x, y in mid):
            return _oriented(mid)
    return _oriented(_axis_midline(polygon, n_samples, ring))


def _oriented(mid):
    pts = [tuple(p) for p in mid]
    if pts[0] > pts[-1]:  # deterministic direction, lexicographic
        pts.reverse()
    return pts


def _plateau_center(scores, candidates):
    """Center index of the contiguous near-maximal run around the argmax;
    symmetric ends (e.g. rectangle short edges) otherwise bias the split."""
    vals = scores[candidates]
    best = vals.max()
    flat = vals >= best - 1e-9 * max(abs(best), 1.0)
    k = int(np.argmax(vals))
    lo = k
    while lo - 1 >= 0 and flat[lo - 1]:
        lo -= 1
    hi = k
    while hi + 1 < len(vals) and flat[hi + 1]:
        hi += 1
    return int(candidates[(lo + hi) // 2])


def _cyclic_plateau_center(scores):
    m = len(scores)
    k = int(np.argmax(scores))
    shift = m // 2 - k
    c = _plateau_center(np.roll(scores, shift), np.arange(m))
    return (c - shift) % m


def _refine_split(turn, i, half):
    """Snap a coarse end position to the arclength midpoint of the two
    dominant corner peaks inside its window; a straight end between unequal
    arcs otherwise biases the split toward the sharper side."""
    m = len(turn)
    offsets = np.arange(-half, half + 1)
    window = turn[(i + offsets) % m]
    first = int(np.argmax(window))
    apart = np.abs(offsets - offsets[first]) >= 3
    if not apart.any():
        return i
    masked = np.where(apart, window, -np.inf)
    second = int(np.argmax(masked))
    if window[second] < 0.3 * window[first]:
        return i
    return int(i + round((offsets[first] + offsets[second]) / 2.0)) % m


def _chain_midline(ring, perimeter, area, n_samples):
    m = len(ring)
    scores, turn, half = _turning_scores(ring, perimeter, area)
    i = _refine_split(turn, _cyclic_plateau_center(scores), half)
    lo, hi = m // 3, 2 * m // 3
    j_candidates = (i + np.arange(lo, hi + 1)) % m
    j = _refine_split(turn, _plateau_center(scores, j_candidates), half)
    a_idx = np.arange(i, i + (j - i) % m + 1) % m
    b_idx = np.arange(j, j + (i - j) % m + 1) % m
    chain_a = ring[a_idx]
    chain_b = ring[b_idx][::-1]  # align both chains i -> j
    if len(chain_a) < 2 or len(chain_b) < 2:
        return None
    a = _resample_chain(chain_a, n_samples)
    b = _resample_chain(chain_b, n_samples)
    return 0.5 * (a + b)


def center_keypoint(polygon, n_samples=9):
    """Center point (middle of the centerline) and its distance to the boundary."""
    if n_samples % 2 == 0:
        n_samples += 1
    centerline = compute_centerline(polygon, n_samples)
    center = centerline[n_samples // 2]
    radius = polygon.shapely.exterior.distance(Point(center))
    return tuple(center), float(radius)


def render_center_map(instances, h, w):
    """Gaussian center heatmap; sigma = radius/3, support clipped at radius,
    overlapping instances combined by per-pixel maximum."""
    out = np.zeros((h, w), dtype=np.float64)
    for inst in instances:
        out = np.maximum(out, _gaussian_bump(inst.center, inst.radius, h, w))
    return out


def _gaussian_bump(center, radius, h, w):
    cx, cy = center
    if not (0 <= cx < w and 0 <= cy < h):
        raise GeometryError("keypoint out of bounds")
    out = np.zeros((h, w), dtype=np.float64)
    x0, x1 = max(0, int(np.floor(cx - radius)) - 1), min(w, int(np.ceil(cx + radius)) + 2)
    y0, y1 = max(0, int(np.floor(cy - radius)) - 1), min(h, int(np.ceil(cy + radius)) + 2)
    xs = np.arange(x0, x1, dtype=np.float64)
    ys = np.arange(y0, y1, dtype=np.float64)
    d2 = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2
    sigma = max(radius / 3.0, 1e-9)
    g = np.exp(-d2 / (2.0 * sigma * sigma))
    g[d2 > radius * radius] = 0.0
    out[y0:y1, x0:x1] = g
    return out


def rasterize_mask(polygon, h, w):
    """Binary mask: pixel set iff its (integer) center is inside the polygon
    by the even-odd rule; deterministic for boundary-grazing pixels."""
    verts = polygon.as_array()
    px, py = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    inside = np.zeros((h, w), dtype=bool)
    n = len(verts)
    for k in range(n):
        x1, y1 = verts[k]
        x2, y2 = verts[(k + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        if not crosses.any():
            continue
        xint = (x2 - x1) * (py - y1) / (y2 - y1 + (y2 == y1)) + x1
        inside ^= crosses & (px < xint)
    return inside


def make_label_set(instances, h, w):
    """Rasterize all training targets for one image at grid size h x w."""
    per_gauss = [_gaussian_bump(i.center, i.radius, h, w) for i in instances]
    center = np.zeros((h, w), dtype=np.float64)
    for g in per_gauss:
        center = np.maximum(center, g)
    masks = [rasterize_mask(i.polygon, h, w) for i in instances]
    return LabelSet(center, masks, [i.id for i in instances], per_gauss)
