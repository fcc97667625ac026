"""k-means clustering of proposals over (box, pooled feature, visibility) descriptors."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import BoundingBox

log = logging.getLogger(__name__)


def box_block(box: BoundingBox, image_size: tuple[float, float]) -> np.ndarray:
    """Normalized (cx, cy, log w, log h) of a box inside a (width, height) image."""
    img_w, img_h = image_size
    cx, cy = box.center
    return np.array([cx / img_w, cy / img_h, np.log(box.width / img_w), np.log(box.height / img_h)])


def build_descriptor(proposal, pooled: np.ndarray, image_size: tuple[float, float]) -> np.ndarray:
    """Unscaled descriptor of one proposal: [box block ; pooled feature ; flattened mask].

    Block scaling happens batch-wide in `build_descriptors`.
    """
    pooled = np.asarray(pooled, dtype=np.float64)
    if not np.all(np.isfinite(pooled)):
        raise ValueError("pooled feature is not finite")
    return np.concatenate([
        box_block(proposal.box, image_size),
        pooled,
        np.asarray(proposal.visibility, dtype=np.float64).ravel(),
    ])


def scale_blocks(raw: np.ndarray, block_sizes: tuple[int, ...]) -> np.ndarray:
    """Center each block and rescale it so its total variance over the batch is 1.

    Blocks with zero variance are only centered.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[1] != sum(block_sizes):
        raise ValueError(f"descriptor width {raw.shape[1]} != sum of blocks {sum(block_sizes)}")
    out = raw - raw.mean(axis=0)
    start = 0
    for size in block_sizes:
        block = out[:, start:start + size]
        total_var = block.var(axis=0).sum()
        if total_var > 0:
            out[:, start:start + size] = block / np.sqrt(total_var)
        start += size
    return out


def build_descriptors(boxes: np.ndarray, pooled: np.ndarray, masks: np.ndarray,
                      image_size: tuple[float, float]) -> np.ndarray:
    """Batch descriptors with each block scaled to unit total variance.

    boxes: (N, 4) x1, y1, x2, y2; pooled: (N, C); masks: (N, H, W).
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    img_w, img_h = image_size
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    box_feats = np.stack([
        (boxes[:, 0] + 0.5 * w) / img_w,
        (boxes[:, 1] + 0.5 * h) / img_h,
        np.log(w / img_w),
        np.log(h / img_h),
    ], axis=1)
    pooled = np.asarray(pooled, dtype=np.float64)
    flat_masks = np.asarray(masks, dtype=np.float64).reshape(len(boxes), -1)
    raw = np.concatenate([box_feats, pooled, flat_masks], axis=1)
    return scale_blocks(raw, (4, pooled.shape[1], flat_masks.shape[1]))


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray
    n_iter: int = 0
    distortions: tuple[float, ...] = ()

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    counts: np.ndarray

    @property
    def k(self) -> int:
        return len(self.counts)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    @classmethod
    def from_labels(cls, labels, k: int) -> "ClusterAssignment":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError("cluster label out of range")
        return cls(labels=labels, counts=np.bincount(labels, minlength=k))


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # direct differences rather than the |x|^2 - 2xc + |c|^2 expansion: exact zeros and exact ties
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _nearest(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = _sq_dists(x, centroids)
    # argmin returns the first minimum, i.e. the lowest cluster index on ties
    labels = d.argmin(axis=1)
    return labels, d[np.arange(len(x)), labels]


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    closest = _sq_dists(x, x[idx]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a chosen center
            remaining = np.setdiff1d(np.arange(n), idx)
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(n, p=closest / total))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[[nxt]]).ravel())
    return x[idx].copy()


def kmeans_fit(descriptors, k: int, max_iters: int = 50, seed: int = 0) -> ClusterModel:
    """Lloyd's algorithm from a k-means++ start; stops when assignments stop changing."""
    x = np.asarray(descriptors, dtype=np.float64)
    n = len(x)
    if k < 1 or k > n:
        raise ValueError(f"k={k} is invalid for {n} descriptors")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(x, k, rng)
    labels, d = _nearest(x, centroids)
    distortions = [float(d.sum())]
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        new_centroids = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centroids[j] = x[members].mean(axis=0)
            # an empty cluster keeps its previous centroid
        centroids = new_centroids
        new_labels, d = _nearest(x, centroids)
        distortions.append(float(d.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return ClusterModel(centroids=centroids, n_iter=n_iter, distortions=tuple(distortions))


def assign(model: ClusterModel, descriptors) -> ClusterAssignment:
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.centroids.shape[1]:
        raise ValueError(f"descriptor shape {x.shape} does not match centroids {model.centroids.shape}")
    labels, _ = _nearest(x, model.centroids)
    return ClusterAssignment.from_labels(labels, model.k)
