"""Synthetic adjacent-instance scene generation and dataset IO.

Scenes contain word-like textured polygons (rotated striped rectangles and
curved arc bands) on a noisy background; a controllable fraction of instances
is placed in adjacent pairs at a fixed boundary gap.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image
from shapely.ops import unary_union

from .errors import DataError, GeometryError
from .geom import Polygon, TextInstance, rasterize_mask

log = logging.getLogger(__name__)

_MARGIN = 3.0
_PLACE_ATTEMPTS = 100


@dataclass
class SceneSpec:
    h: int = 128
    w: int = 128
    n_instances: int = 3
    gap_px: float = 2.0
    shape_mix: tuple = (0.7, 0.3)  # fractions of (straight, curved)
    seed: int = 0


@dataclass
class Sample:
    image: np.ndarray  # 3 x h x w float32 in [0, 1]
    instances: list


def _rot(ang):
    c, s = np.cos(ang), np.sin(ang)
    return np.array([[c, -s], [s, c]])


def _rect_poly(length, height, ang, center):
    corners = np.array([
        [-length / 2, -height / 2], [length / 2, -height / 2],
        [length / 2, height / 2], [-length / 2, height / 2],
    ])
    return Polygon(tuple(map(tuple, corners @ _rot(ang).T + center)))


def _band_poly(center, r_mid, thickness, a0, span, n_arc=28):
    angs = np.linspace(a0, a0 + span, n_arc)
    outer = np.stack([np.cos(angs), np.sin(angs)], axis=1) * (r_mid + thickness / 2)
    inner = np.stack([np.cos(angs), np.sin(angs)], axis=1) * (r_mid - thickness / 2)
    ring = np.vstack([outer, inner[::-1]]) + center
    return Polygon(tuple(map(tuple, ring)))


def _straight_group(rng, gap, paired):
    length = rng.uniform(34, 52)
    height = rng.uniform(9, 14)
    ang = rng.uniform(0, np.pi)
    polys = [("rect", length, height, ang, np.zeros(2))]
    if paired:
        height2 = rng.uniform(9, 14)
        normal = _rot(ang) @ np.array([0.0, 1.0])
        offset = normal * (height / 2 + gap + height2 / 2)
        polys.append(("rect", rng.uniform(0.8, 1.0) * length, height2, ang, offset))
    return polys


def _curved_group(rng, gap, paired):
    r_mid = rng.uniform(17, 24)
    t = rng.uniform(8, 12)
    a0 = rng.uniform(0, 2 * np.pi)
    span = rng.uniform(1.5, 2.2)
    polys = [("band", r_mid, t, a0, span, np.zeros(2))]
    if paired:
        t2 = rng.uniform(8, 12)
        r2 = r_mid + t / 2 + gap + t2 / 2
        polys.append(("band", r2, t2, a0, span, np.zeros(2)))
    return polys


def _realize(kind_spec, translation):
    if kind_spec[0] == "rect":
        _, length, height, ang, off = kind_spec
        return _rect_poly(length, height, ang, off + translation)
    _, r_mid, t, a0, span, off = kind_spec
    return _band_poly(off + translation, r_mid, t, a0, span)


def _stripe_texture(image, mask, u_coords, rng):
    """Per-character stripe fill: bright foreground with darker stripe breaks."""
    color = rng.uniform(0.65, 0.95, size=3)
    period = rng.uniform(5.0, 8.0)
    phase = rng.uniform(0, period)
    stripe = ((u_coords + phase) % period) < 0.65 * period
    level = np.where(stripe, 1.0, 0.72)
    ys, xs = np.nonzero(mask)
    image[:, ys, xs] = color[:, None] * level[None, ys, xs]


def generate_scene(spec):
    """Render one synthetic scene; deterministic per spec.seed."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.h, spec.w
    image = np.clip(
        rng.uniform(0.12, 0.22) + rng.normal(0.0, 0.035, size=(3, h, w)), 0.0, 1.0
    ).astype(np.float64)

    n = spec.n_instances
    # smallest even count >= ceil(n/2), capped at the largest even count <= n
    n_paired = min(2 * (n // 2), 2 * (((n + 1) // 2 + 1) // 2))
    groups = [2] * (n_paired // 2) + [1] * (n - n_paired)
    placed_polys = []
    placed_union = None
    min_sep = max(6.0, 2.0 * spec.gap_px + 4.0)

    for group_size in groups:
        curved = rng.uniform() < spec.shape_mix[1]
        maker = _curved_group if curved else _straight_group
        local = maker(rng, spec.gap_px, paired=(group_size == 2))
        ok = False
        for _ in range(_PLACE_ATTEMPTS):
            translation = np.array([rng.uniform(0, w), rng.uniform(0, h)])
            polys = [_realize(ls, translation) for ls in local]
            shps = [p.shapely for p in polys]
            minx = min(s.bounds[0] for s in shps)
            miny = min(s.bounds[1] for s in shps)
            maxx = max(s.bounds[2] for s in shps)
            maxy = max(s.bounds[3] for s in shps)
            if minx < _MARGIN or miny < _MARGIN or maxx > w - 1 - _MARGIN or maxy > h - 1 - _MARGIN:
                continue
            group_shape = unary_union(shps)
            if placed_union is not None and group_shape.distance(placed_union) < min_sep:
                continue
            placed_polys.extend(zip(polys, local, [translation] * len(polys)))
            placed_union = group_shape if placed_union is None else unary_union(
                [placed_union, group_shape])
            ok = True
            break
        if not ok:
            raise DataError("canvas too small")

    instances = []
    for idx, (poly, local_spec, translation) in enumerate(placed_polys):
        mask = rasterize_mask(poly, h, w)
        u = _axis_coords(local_spec, translation, h, w)
        _stripe_texture(image, mask, u, rng)
        instances.append(TextInstance.from_polygon(poly, idx))
    return Sample(image.astype(np.float32), instances)


def _axis_coords(local_spec, translation, h, w):
    """Along-instance coordinate per pixel, used for stripe texturing."""
    px, py = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    if local_spec[0] == "rect":
        _, _, _, ang, off = local_spec
        c = off + translation
        d = _rot(ang) @ np.array([1.0, 0.0])
        return (px - c[0]) * d[0] + (py - c[1]) * d[1]
    _, r_mid, _, _, _, off = local_spec
    c = off + translation
    return np.arctan2(py - c[1], px - c[0]) * r_mid


# ---------------------------------------------------------------------------
# dataset IO

def save_sample(out_dir, name, sample):
    """Write <name>.png plus the annotation JSON for one sample."""
    img = (np.clip(sample.image, 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(img.transpose(1, 2, 0)).save(out_dir / f"{name}.png")
    ann = {
        "image": f"{name}.png",
        "height": int(sample.image.shape[1]),
        "width": int(sample.image.shape[2]),
        "instances": [
            {"id": inst.id, "polygon": [[float(x), float(y)] for x, y in inst.polygon.vertices]}
            for inst in sample.instances
        ],
    }
    with open(out_dir / f"{name}.json", "w") as f:
        json.dump(ann, f, indent=1)


def write_dataset(out_dir, samples):
    """Write a list of (name, Sample), plus the manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for name, sample in samples:
        save_sample(out_dir, name, sample)
        names.append(name)
    (out_dir / "manifest.txt").write_text("".join(f"{n}\n" for n in names))
    return names


@dataclass
class SampleRef:
    """Lazily loaded dataset entry; annotations parsed and validated eagerly."""

    name: str
    image_path: object
    height: int
    width: int
    instances: list

    def load_image(self):
        img = np.asarray(Image.open(self.image_path).convert("RGB"), dtype=np.float32)
        return img.transpose(2, 0, 1) / 255.0

    def load(self):
        return Sample(self.load_image(), self.instances)


def load_dataset(path):
    """Load all valid samples under `path`; invalid polygons reject the whole
    sample with a logged reason."""
    if not path.is_dir():
        raise DataError(f"not a dataset directory: {path}")
    manifest = path / "manifest.txt"
    if manifest.exists():
        names = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
    else:
        names = sorted(p.stem for p in path.glob("*.json"))
    refs = []
    for name in names:
        ann_path = path / f"{name}.json"
        try:
            with open(ann_path) as f:
                ann = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"malformed annotation file {ann_path}: {e}") from e
        try:
            instances = [
                TextInstance.from_polygon(
                    Polygon(tuple(map(tuple, rec["polygon"]))), int(rec["id"])
                )
                for rec in ann["instances"]
            ]
        except (GeometryError, KeyError, TypeError, ValueError) as e:
            log.warning("rejecting sample %s: %s", name, e)
            continue
        refs.append(
            SampleRef(name, path / ann["image"], int(ann["height"]), int(ann["width"]), instances)
        )
    return refs
