"""Kernel proposals: keypoint extraction from center heatmaps, kernel
gathering from the embedding volume, dynamic 1x1 convolution into per-instance
probability maps, and the kernel similarity matrix."""

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .errors import KPNetError

_EIGHT_CONN = np.ones((3, 3), dtype=int)
DUPLICATE_SIMILARITY = 0.9  # on squashed (sigmoid) similarity


@dataclass(frozen=True)
class Keypoint:
    x: int
    y: int
    score: float


@dataclass
class KernelSet:
    kernels: torch.Tensor  # N x C
    keypoints: list

    def __len__(self):
        return len(self.keypoints)


@dataclass
class SimilarityMatrix:
    raw: torch.Tensor       # N x N, K K^T
    squashed: torch.Tensor  # sigmoid(raw)


def extract_keypoints(center_map, threshold):
    """Binarize at `threshold`, label 8-connected components, return the peak
    pixel of each component, sorted by descending score."""
    if not 0.0 < threshold < 1.0:
        raise KPNetError("center threshold must be in (0, 1)")
    cm = np.asarray(center_map.detach().cpu() if torch.is_tensor(center_map) else center_map)
    cm = cm.squeeze()
    labels, n = ndimage.label(cm >= threshold, structure=_EIGHT_CONN)
    points = []
    for comp in range(1, n + 1):
        masked = np.where(labels == comp, cm, -np.inf)
        flat = int(np.argmax(masked))  # row-major first occurrence breaks ties
        y, x = divmod(flat, cm.shape[1])
        points.append(Keypoint(int(x), int(y), float(cm[y, x])))
    points.sort(key=lambda p: (-p.score, p.y, p.x))
    return points


def gather_kernels(embedding, keypoints):
    """Rows of the kernel matrix are embedding vectors at keypoint positions;
    differentiable with respect to the embedding volume."""
    if embedding.dim() == 4:
        embedding = embedding.squeeze(0)
    c, h, w = embedding.shape
    for p in keypoints:
        if not (0 <= p.x < w and 0 <= p.y < h):
            raise KPNetError(f"keypoint ({p.x}, {p.y}) out of bounds for {w}x{h}")
    if not keypoints:
        return KernelSet(embedding.new_zeros((0, c)), [])
    ys = torch.tensor([p.y for p in keypoints], device=embedding.device)
    xs = torch.tensor([p.x for p in keypoints], device=embedding.device)
    return KernelSet(embedding[:, ys, xs].transpose(0, 1), list(keypoints))


def dynamic_convolve(kernels, embedding):
    """Per-instance maps O[i] = sigmoid(k_i . E) pixelwise (1x1 dynamic conv)."""
    if embedding.dim() == 4:
        embedding = embedding.squeeze(0)
    k = kernels.kernels if isinstance(kernels, KernelSet) else kernels
    if k.shape[-1] != embedding.shape[0]:
        raise KPNetError("kernel width must equal embedding channel count")
    return torch.sigmoid(torch.einsum("nc,chw->nhw", k, embedding))


def similarity(kernels):
    """Similarity matrix K K^T of the kernel proposals plus its sigmoid squash."""
    k = kernels.kernels if isinstance(kernels, KernelSet) else kernels
    if k.shape[0] == 0:
        raise KPNetError("no kernels")
    raw = k @ k.transpose(0, 1)
    raw = 0.5 * (raw + raw.transpose(0, 1))  # exact symmetry
    return SimilarityMatrix(raw, torch.sigmoid(raw))


def filter_duplicate_keypoints(kernel_set, sim=None, threshold=DUPLICATE_SIMILARITY):
    """Greedy duplicate suppression: among pairs with squashed similarity above
    `threshold`, keep the kernel whose keypoint score is higher."""
    n = len(kernel_set)
    if n <= 1:
        return kernel_set
    if sim is None:
        sim = similarity(kernel_set)
    sq = sim.squashed.detach().cpu().numpy()
    order = sorted(range(n), key=lambda i: (-kernel_set.keypoints[i].score, i))
    kept = []
    for i in order:
        if all(sq[i, j] <= threshold for j in kept):
            kept.append(i)
    kept.sort()
    return KernelSet(kernel_set.kernels[kept], [kernel_set.keypoints[i] for i in kept])
