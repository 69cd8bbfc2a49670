"""Training and inference pipeline: keypoint sampling from ground-truth
heatmaps, the combined training step, post-processing-free inference, contour
extraction, and data augmentation."""

import math
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch
from scipy import ndimage

from . import losses as L
from .errors import GeometryError, KPNetError, LossError
from .geom import Polygon, TextInstance, make_label_set
from .kernels import (
    Keypoint,
    dynamic_convolve,
    extract_keypoints,
    filter_duplicate_keypoints,
    gather_kernels,
    similarity,
)

_EIGHT_CONN = np.ones((3, 3), dtype=int)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 100
    epochs: int = 100
    batch_size: int = 8
    sampling_mode: str = "random_gaussian"  # or "topk"
    topk: int = 50
    seed: int = 0
    augment: bool = False
    loss: L.LossConfig = field(default_factory=L.LossConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise KPNetError("lr must be positive")
        if self.topk < 1:
            raise KPNetError("topk must be >= 1")
        if self.sampling_mode not in ("random_gaussian", "topk"):
            raise KPNetError(f"unknown sampling mode {self.sampling_mode!r}")


@dataclass
class InferConfig:
    t_center: float = 0.2
    t_instance: float = 0.5
    min_area: int = 16

    def __post_init__(self):
        if not (0 < self.t_center < 1 and 0 < self.t_instance < 1):
            raise KPNetError("thresholds must be in (0, 1)")


@dataclass
class Detection:
    polygon: Polygon
    score: float
    instance_map_index: int


def learning_rate(lr0, epoch, decay=0.9, every=100):
    return lr0 * decay ** (epoch // every)


def build_labels(sample):
    """Half-resolution training targets for one sample."""
    _, h, w = sample.image.shape
    half = [inst.scaled(0.5) for inst in sample.instances]
    return make_label_set(half, h // 2, w // 2)


def sample_training_keypoints(label, mode="random_gaussian", topk=50, rng=None):
    """Keypoints for kernel training, drawn from each instance's ground-truth
    Gaussian map: one Gaussian-weighted draw per instance, or its top-k pixels."""
    rng = rng or np.random.default_rng(0)
    out = []
    for gmap, inst_id in zip(label.instance_center_maps, label.instance_ids):
        flat = gmap.reshape(-1)
        support = np.nonzero(flat > 0)[0]
        if support.size == 0:
            import logging
            logging.getLogger(__name__).warning(
                "instance %d has empty Gaussian support; skipped", inst_id)
            continue
        w = gmap.shape[1]
        if mode == "random_gaussian":
            probs = flat[support] / flat[support].sum()
            pick = [support[rng.choice(support.size, p=probs)]]
        elif mode == "topk":
            order = support[np.argsort(-flat[support], kind="stable")]
            pick = order[:topk]
        else:
            raise KPNetError(f"unknown sampling mode {mode!r}")
        for idx in pick:
            y, x = divmod(int(idx), w)
            out.append((Keypoint(x, y, float(flat[idx])), inst_id))
    return out


def _image_tensor(image, device=None):
    t = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float32, device=device)
    return t


def _check_finite(name, value):
    if not torch.isfinite(value.detach()).all():
        raise LossError(f"non-finite loss component: {name}")
    return value


def compute_losses(model, batch, cfg, rng):
    """Forward pass plus all loss terms for a batch of (Sample, LabelSet)
    pairs.

    Keypoints are sampled from ground-truth Gaussian maps, kernels gathered
    from the predicted embedding, and the center / segmentation / orthogonality
    losses combined with the configured weight.  Returns (total, parts) with
    parts a dict of per-term tensors.
    """
    images = torch.stack([_image_tensor(s.image) for s, _ in batch])
    dtype = next(model.parameters()).dtype
    out = model(images.to(dtype))
    lcfg = cfg.loss

    center_targets = torch.as_tensor(
        np.stack([lab.center_map for _, lab in batch]).astype(np.float32),
        dtype=out.center_map.dtype)
    l_gc = L.composite_loss_batch(out.center_map[:, 0], center_targets,
                                  alpha=0, config=lcfg).mean()
    l_gc = _check_finite("center", l_gc)

    # one flat composite-loss call over every proposal in the batch: each
    # per-image autograd graph costs more than the arithmetic it wraps
    seg_maps, seg_targets, seg_counts, oll_terms = [], [], [], []
    for b, (_, lab) in enumerate(batch):
        picked = sample_training_keypoints(lab, cfg.sampling_mode, cfg.topk, rng)
        if not picked:
            continue
        kps = [kp for kp, _ in picked]
        ids = [iid for _, iid in picked]
        kernels = gather_kernels(out.embedding_maps[b], kps)
        maps = dynamic_convolve(kernels, out.embedding_maps[b])
        mask_by_id = {iid: m for iid, m in zip(lab.instance_ids, lab.instance_masks)}
        seg_maps.append(maps)
        seg_targets.append(np.stack([mask_by_id[iid] for iid in ids]))
        seg_counts.append(maps.shape[0])
        sim = similarity(kernels)
        target = L.make_target_matrix(ids, dtype=sim.squashed.dtype)
        oll_terms.append(L.orthogonal_learning_loss(sim, target, lcfg))

    zero = out.center_map.sum() * 0.0
    if seg_maps:
        flat_maps = torch.cat(seg_maps)
        flat_targets = torch.as_tensor(
            np.concatenate(seg_targets).astype(np.float32), dtype=flat_maps.dtype)
        per_proposal = L.composite_loss_batch(flat_maps, flat_targets,
                                              alpha=1, config=lcfg)
        l_s = torch.stack([chunk.mean()
                           for chunk in per_proposal.split(seg_counts)]).mean()
    else:
        l_s = zero
    l_s = _check_finite("segmentation", l_s)
    l_oll = _check_finite("orthogonality", torch.stack(oll_terms).mean() if oll_terms else zero)

    total = L.total_loss(l_gc, l_s, l_oll, lcfg)
    return total, {"L_gc": l_gc, "L_s": l_s, "L_OLL": l_oll}


def train_step(model, optimizer, batch, cfg, rng):
    """One optimization step (Adam) on a batch of (Sample, LabelSet) pairs."""
    model.train()
    total, parts = compute_losses(model, batch, cfg, rng)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    out = {k: float(v.detach()) for k, v in parts.items()}
    out["total"] = float(total.detach())
    return out


def fcn_train_step(model, optimizer, batch, cfg):
    """Baseline step: a single shared mask channel against the union of all
    instance masks."""
    model.train()
    images = torch.stack([_image_tensor(s.image) for s, _ in batch])
    pred = model(images)
    terms = []
    for b, (_, lab) in enumerate(batch):
        union = np.zeros_like(lab.center_map, dtype=bool)
        for m in lab.instance_masks:
            union |= m
        terms.append(L.composite_loss(
            pred[b, 0], torch.as_tensor(union, dtype=pred.dtype), alpha=1, config=cfg.loss))
    total = _check_finite("segmentation", torch.stack(terms).mean())
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    val = float(total.detach())
    return {"L_gc": 0.0, "L_s": val, "L_OLL": 0.0, "total": val}


def _augmented_pair(pair, seed, epoch, index):
    """Deterministic per-sample augmentation; falls back to the original pair
    when the transform drops every instance."""
    from .data import Sample

    sample, _ = pair
    image, instances = augment(sample.image, sample.instances,
                               seed=hash((seed, epoch, index)) & 0x7FFFFFFF)
    if not instances:
        return pair
    aug = Sample(np.asarray(image, dtype=np.float32), instances)
    return aug, build_labels(aug)


def train(model, dataset, cfg, on_epoch=None):
    """Train on a list of data.SampleRef / Sample; returns per-epoch records."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    pairs = []
    for entry in dataset:
        sample = entry.load() if hasattr(entry, "load") else entry
        pairs.append((sample, build_labels(sample)))
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                 betas=(0.9, 0.999), eps=1e-8)
    is_fcn = getattr(model.cfg, "head", "kpn") == "fcn"
    records = []
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg.lr, epoch, cfg.lr_decay, cfg.lr_decay_every)
        for g in optimizer.param_groups:
            g["lr"] = lr
        order = rng.permutation(len(pairs))
        sums, n_steps = {}, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
            if cfg.augment:
                batch = [_augmented_pair(pair, cfg.seed, epoch, int(i))
                         for pair, i in zip(batch, order[start:start + cfg.batch_size])]
            if is_fcn:
                step = fcn_train_step(model, optimizer, batch, cfg)
            else:
                step = train_step(model, optimizer, batch, cfg, rng)
            for k, v in step.items():
                sums[k] = sums.get(k, 0.0) + v
            n_steps += 1
        rec = {"epoch": epoch, "lr": lr}
        rec.update({k: v / max(n_steps, 1) for k, v in sums.items()})
        records.append(rec)
        if on_epoch:
            on_epoch(rec)
    return records


# ---------------------------------------------------------------------------
# inference

def extract_contour(mask):
    """Outer boundary polygon of the largest 8-connected component via border
    following, simplified at 1 px tolerance.  Degenerate (single-pixel or
    collinear) components become their pixel bounding box."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise GeometryError("empty mask")
    labels, n = ndimage.label(mask, structure=_EIGHT_CONN)
    if n > 1:
        sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
        mask = labels == (1 + int(np.argmax(sizes)))
    contours, _ = cv2.findContours(mask.astype(np.uint8),
                                   cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_SIMPLE)
    cnt = max(contours, key=cv2.contourArea)[:, 0, :].astype(np.float64)
    shp = None
    if len(cnt) >= 3:
        from shapely.geometry import Polygon as ShapelyPolygon
        shp = ShapelyPolygon(cnt)
        if not shp.is_valid or shp.area < 0.5:
            shp = None
    if shp is None:
        ys, xs = np.nonzero(mask)
        return Polygon((
            (xs.min() - 0.5, ys.min() - 0.5), (xs.max() + 0.5, ys.min() - 0.5),
            (xs.max() + 0.5, ys.max() + 0.5), (xs.min() - 0.5, ys.max() + 0.5),
        ))
    simplified = shp.simplify(1.0)
    if simplified.is_empty or not simplified.is_valid or simplified.area <= 0:
        simplified = shp
    coords = list(simplified.exterior.coords)[:-1]
    return Polygon(tuple(coords))


def _component_for_keypoint(binary, kp):
    labels, n = ndimage.label(binary, structure=_EIGHT_CONN)
    if n == 0:
        return None
    comp = labels[kp.y, kp.x]
    if comp == 0:
        ys, xs = np.nonzero(binary)
        d2 = (ys - kp.y) ** 2 + (xs - kp.x) ** 2
        comp = labels[ys[np.argmin(d2)], xs[np.argmin(d2)]]
    return labels == comp


def _contour_polygon(mask, scale=2.0):
    """Trace `mask`'s contour and map it to full-resolution coordinates.

    The traced contour runs through pixel centers, so after scaling it is
    padded by half a scaled pixel to cover the pixels' footprint rather than
    their centers; without the pad every detection systematically
    under-covers its region by one full-resolution pixel per side.
    """
    poly = extract_contour(mask).scaled(scale)
    shp = poly.shapely.buffer(scale / 2.0, join_style=2)
    if shp.geom_type != "Polygon":
        shp = max(shp.geoms, key=lambda g: g.area)
    return Polygon(tuple((float(x), float(y)) for x, y in shp.exterior.coords[:-1]))


def infer(image, model, cfg):
    """Image -> detections: threshold the center map, gather one kernel per
    connected component, convolve, and trace each instance map's contour."""
    model.eval()
    with torch.no_grad():
        out = model(_image_tensor(image).unsqueeze(0))
        center = out.center_map[0, 0].cpu().numpy()
        keypoints = extract_keypoints(center, cfg.t_center)
        if not keypoints:
            return []
        kernels = gather_kernels(out.embedding_maps[0], keypoints)
        kernels = filter_duplicate_keypoints(kernels)
        maps = dynamic_convolve(kernels, out.embedding_maps[0]).cpu().numpy()
    detections = []
    for i, kp in enumerate(kernels.keypoints):
        binary = maps[i] >= cfg.t_instance
        comp = _component_for_keypoint(binary, kp)
        if comp is None:
            continue
        try:
            poly = _contour_polygon(comp)
        except GeometryError:
            continue
        if poly.area < cfg.min_area:
            continue
        detections.append(Detection(poly, kp.score, i))
    return detections


def fcn_infer(image, model, cfg):
    """Baseline inference: threshold the shared mask and split instances by
    connected components."""
    model.eval()
    with torch.no_grad():
        prob = model(_image_tensor(image).unsqueeze(0))[0, 0].cpu().numpy()
    labels, n = ndimage.label(prob >= cfg.t_instance, structure=_EIGHT_CONN)
    detections = []
    for comp in range(1, n + 1):
        mask = labels == comp
        try:
            poly = _contour_polygon(mask)
        except GeometryError:
            continue
        if poly.area < cfg.min_area:
            continue
        detections.append(Detection(poly, float(prob[mask].max()), comp - 1))
    detections.sort(key=lambda d: -d.score)
    return detections


def run_inference(image, model, cfg):
    if getattr(model.cfg, "head", "kpn") == "fcn":
        return fcn_infer(image, model, cfg)
    return infer(image, model, cfg)


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentParams:
    angle_deg: float = 0.0
    flip: bool = False
    crop: tuple = None  # (x0, y0, cw, ch) applied after rotation
    brightness: float = 0.0
    contrast: float = 1.0

    @classmethod
    def identity(cls):
        return cls()


def _transform_points(pts, params, h, w):
    pts = np.asarray(pts, dtype=np.float64)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    if params.angle_deg:
        a = math.radians(params.angle_deg)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        pts = (pts - (cx, cy)) @ rot.T + (cx, cy)
    out_w = w
    if params.crop is not None:
        x0, y0, cw, ch = params.crop
        pts = pts - (x0, y0)
        out_w = cw
    if params.flip:
        pts = np.column_stack([(out_w - 1) - pts[:, 0], pts[:, 1]])
    return pts


def apply_augment(image, instances, params):
    """Pure transform core: rotation about the canvas center, crop, horizontal
    flip, brightness/contrast jitter; polygons transformed consistently."""
    img = np.asarray(image, dtype=np.float32)
    _, h, w = img.shape
    if params.angle_deg:
        rotated = np.stack([
            _rotate_channel(c, params.angle_deg) for c in img
        ])
    else:
        rotated = img
    if params.crop is not None:
        x0, y0, cw, ch = params.crop
        rotated = rotated[:, y0:y0 + ch, x0:x0 + cw]
    if params.flip:
        rotated = rotated[:, :, ::-1].copy()
    out = rotated
    if params.contrast != 1.0 or params.brightness != 0.0:
        out = np.clip((out - 0.5) * params.contrast + 0.5 + params.brightness, 0.0, 1.0)
    new_instances = []
    oh, ow = out.shape[1:]
    for inst in instances:
        pts = _transform_points(inst.polygon.as_array(), params, h, w)
        if pts[:, 0].min() < 0 or pts[:, 1].min() < 0 or \
           pts[:, 0].max() > ow - 1 or pts[:, 1].max() > oh - 1:
            continue
        try:
            new_instances.append(
                TextInstance.from_polygon(Polygon(tuple(map(tuple, pts))), inst.id))
        except GeometryError:
            continue
    return out, new_instances


def _rotate_channel(channel, angle_deg):
    h, w = channel.shape
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    # positive angle rotates polygon coordinates by +angle (y-down CCW);
    # warpAffine with the matching matrix keeps image and polygons aligned
    m = cv2.getRotationMatrix2D(center, -angle_deg, 1.0)
    return cv2.warpAffine(channel, m, (w, h), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_REPLICATE)


def draw_augment_params(rng, h, w, instances):
    """Random draw of augmentation parameters; crop retried until at least one
    instance survives (up to 10 attempts, then no crop)."""
    params = AugmentParams(
        angle_deg=float(rng.uniform(-30.0, 30.0)),
        flip=bool(rng.uniform() < 0.5),
        brightness=float(rng.uniform(-0.2, 0.2)),
        contrast=float(rng.uniform(0.8, 1.2)),
    )
    for _ in range(10):
        size = rng.uniform(0.5, 1.0) * min(h, w)
        cw = int(size) // 2 * 2
        ch = cw
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        candidate = AugmentParams(params.angle_deg, params.flip, (x0, y0, cw, ch),
                                  params.brightness, params.contrast)
        probe = [
            _transform_points(inst.polygon.as_array(), candidate, h, w)
            for inst in instances
        ]
        if any(p[:, 0].min() >= 0 and p[:, 1].min() >= 0 and
               p[:, 0].max() <= cw - 1 and p[:, 1].max() <= ch - 1 for p in probe):
            return candidate
    return params


def augment(image, instances, seed):
    """Seeded random augmentation of one sample."""
    rng = np.random.default_rng(seed)
    _, h, w = np.asarray(image).shape
    params = draw_augment_params(rng, h, w, instances)
    return apply_augment(image, instances, params)
