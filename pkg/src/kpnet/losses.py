"""Training objectives: dice / focal / OHEM-CE / balanced-BCE and their
composite, the orthogonal kernel loss, and the weighted total."""

from dataclasses import dataclass

import torch

from .errors import LossError


@dataclass
class LossConfig:
    lambda_oll: float = 0.1
    ohem_neg_ratio: float = 3.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1e-6
    prob_clip: float = 1e-6

    def __post_init__(self):
        if self.lambda_oll < 0:
            raise LossError("lambda_oll must be >= 0")
        if self.ohem_neg_ratio != 3.0:
            raise LossError("ohem_neg_ratio is fixed at 3.0")
        if not 0.0 < self.prob_clip < 0.5:
            raise LossError("prob_clip must be in (0, 0.5)")


_DEFAULT = LossConfig()


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise LossError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def _bce_terms(pred, target, clip):
    p = pred.clamp(clip, 1.0 - clip)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))


def dice_loss(pred, target, eps=_DEFAULT.dice_eps):
    _check_shapes(pred, target)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + eps) / (pred.sum() + target.sum() + eps)


def focal_loss(pred, target, gamma=_DEFAULT.focal_gamma, alpha=_DEFAULT.focal_alpha,
               clip=_DEFAULT.prob_clip):
    _check_shapes(pred, target)
    p = pred.clamp(clip, 1.0 - clip)
    pos = -alpha * target * (1.0 - p) ** gamma * torch.log(p)
    neg = -(1.0 - alpha) * (1.0 - target) * p ** gamma * torch.log(1.0 - p)
    return (pos + neg).mean()


def ohem_ce_loss(pred, target, neg_ratio=_DEFAULT.ohem_neg_ratio, clip=_DEFAULT.prob_clip,
                 fallback_negatives=100):
    """BCE over all positives plus the hardest negatives at 3:1; background-only
    inputs fall back to the `fallback_negatives` hardest negatives."""
    _check_shapes(pred, target)
    terms = _bce_terms(pred, target, clip).reshape(-1)
    pos_mask = (target > 0.5).reshape(-1)
    n_pos = int(pos_mask.sum())
    neg_terms = terms[~pos_mask]
    n_neg_keep = int(neg_ratio * n_pos) if n_pos > 0 else fallback_negatives
    n_neg_keep = min(n_neg_keep, neg_terms.numel())
    selected = [terms[pos_mask]]
    if n_neg_keep > 0:
        selected.append(torch.topk(neg_terms, n_neg_keep).values)
    selected = torch.cat(selected)
    if selected.numel() == 0:
        return pred.sum() * 0.0
    return selected.mean()


def balanced_bce_loss(pred, target, clip=_DEFAULT.prob_clip):
    """BCE with per-class weights n_other/(n_pos+n_neg); single-class targets
    fall back to plain BCE."""
    _check_shapes(pred, target)
    terms = _bce_terms(pred, target, clip)
    pos_mask = target > 0.5
    n_pos = int(pos_mask.sum())
    n_neg = terms.numel() - n_pos
    if n_pos == 0 or n_neg == 0:
        return terms.mean()
    total = float(n_pos + n_neg)
    weights = torch.where(
        pos_mask,
        torch.as_tensor(n_neg / total, dtype=terms.dtype, device=terms.device),
        torch.as_tensor(n_pos / total, dtype=terms.dtype, device=terms.device),
    )
    return (weights * terms).mean()


def composite_loss(pred, target, alpha, config=_DEFAULT):
    """alpha * dice + focal + OHEM-CE + balanced BCE; alpha=0 is the center-map
    instantiation, alpha=1 the per-instance segmentation one."""
    if alpha not in (0, 1):
        raise LossError("alpha must be 0 or 1")
    out = (
        focal_loss(pred, target, config.focal_gamma, config.focal_alpha, config.prob_clip)
        + ohem_ce_loss(pred, target, config.ohem_neg_ratio, config.prob_clip)
        + balanced_bce_loss(pred, target, config.prob_clip)
    )
    if alpha:
        out = out + dice_loss(pred, target, config.dice_eps)
    return out


def composite_loss_batch(preds, targets, alpha, config=_DEFAULT):
    """Row-wise composite loss over a stack of prediction/target maps.

    Equivalent to `composite_loss` applied to each row, but evaluated with a
    handful of tensor ops instead of one graph per row — the per-proposal
    segmentation term during training is the hot path."""
    if alpha not in (0, 1):
        raise LossError("alpha must be 0 or 1")
    _check_shapes(preds, targets)
    n = preds.shape[0]
    p = preds.reshape(n, -1)
    t = targets.reshape(n, -1)
    m = p.shape[1]
    clip = config.prob_clip
    pc = p.clamp(clip, 1.0 - clip)
    logp, log1p = torch.log(pc), torch.log(1.0 - pc)
    terms = -(t * logp + (1.0 - t) * log1p)
    pos = t > 0.5
    n_pos = pos.sum(dim=1)
    n_neg = m - n_pos

    g, a = config.focal_gamma, config.focal_alpha
    focal = (-a * t * (1.0 - pc) ** g * logp
             - (1.0 - a) * (1.0 - t) * pc ** g * log1p).mean(dim=1)

    w_pos = (n_neg.to(p.dtype) / m)[:, None]
    w_neg = (n_pos.to(p.dtype) / m)[:, None]
    weights = torch.where(pos, w_pos.expand(n, m), w_neg.expand(n, m))
    bbce = (weights * terms).mean(dim=1)
    single_class = (n_pos == 0) | (n_neg == 0)
    bbce = torch.where(single_class, terms.mean(dim=1), bbce)

    keep = torch.where(n_pos > 0, (config.ohem_neg_ratio * n_pos).long(),
                       torch.full_like(n_pos, 100))
    keep = torch.minimum(keep, n_neg)
    ranked = terms.detach().masked_fill(pos, float("-inf"))
    order = ranked.argsort(dim=1, descending=True)
    rank = torch.arange(m, device=p.device).expand(n, m)
    neg_sel = torch.zeros_like(pos)
    neg_sel.scatter_(1, order, rank < keep[:, None])
    sel = pos | neg_sel
    ohem = (terms * sel).sum(dim=1) / sel.sum(dim=1).clamp(min=1)

    out = focal + ohem + bbce
    if alpha:
        eps = config.dice_eps
        inter = (p * t).sum(dim=1)
        out = out + 1.0 - (2.0 * inter + eps) / (p.sum(dim=1) + t.sum(dim=1) + eps)
    return out


def make_target_matrix(instance_ids, dtype=torch.float64, device=None):
    """Block-identity target: 1 where two proposals come from the same
    instance; reduces to the identity with one proposal per instance."""
    ids = torch.as_tensor(list(instance_ids), device=device)
    if ids.numel() == 0:
        raise LossError("no proposals for target matrix")
    return (ids[:, None] == ids[None, :]).to(dtype)


def orthogonal_learning_loss(sim, target, config=_DEFAULT):
    """Dice + BCE between the squashed similarity matrix and its target."""
    squashed = sim.squashed if hasattr(sim, "squashed") else sim
    if squashed.numel() == 0:
        raise LossError("empty similarity matrix")
    _check_shapes(squashed, target)
    return (
        dice_loss(squashed, target, config.dice_eps)
        + _bce_terms(squashed, target, config.prob_clip).mean()
    )


def total_loss(l_center, l_seg, l_oll, config=_DEFAULT):
    out = l_center + l_seg + config.lambda_oll * l_oll
    val = out.detach() if torch.is_tensor(out) else torch.as_tensor(out)
    if not torch.isfinite(val):
        raise LossError("non-finite loss")
    return out
