"""Boxes, IoU, visibility grids and visibility-masked spatial pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEFAULT_ROI_SIZE = (7, 7)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in image-plane pixels, (x1, y1) top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates: {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box: {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def to_xywh(self) -> list[float]:
        return [self.x1, self.y1, self.width, self.height]

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BoundingBox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of x1, y1, x2, y2 boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def rasterize_visibility(
    box: BoundingBox,
    visible_box: Optional[BoundingBox],
    h: int = DEFAULT_ROI_SIZE[0],
    w: int = DEFAULT_ROI_SIZE[1],
) -> np.ndarray:
    """Binary h x w grid over `box`; a cell is 1 when its center lies in `visible_box`.

    Missing annotations and empty rasterizations both yield the all-ones grid.
    """
    if h < 1 or w < 1:
        raise ValueError("grid size must be at least 1x1")
    if visible_box is None:
        return np.ones((h, w), dtype=np.uint8)
    # cell centers of a uniform grid laid over the box
    cx = box.x1 + (np.arange(w) + 0.5) * box.width / w
    cy = box.y1 + (np.arange(h) + 0.5) * box.height / h
    in_x = (cx >= visible_box.x1) & (cx <= visible_box.x2)
    in_y = (cy >= visible_box.y1) & (cy <= visible_box.y2)
    grid = (in_y[:, None] & in_x[None, :]).astype(np.uint8)
    if not grid.any():
        return np.ones((h, w), dtype=np.uint8)
    return grid


def spatial_pool(roi: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-channel mean of a (C, H, W) RoI tensor over the cells where mask == 1."""
    roi = np.asarray(roi)
    mask = np.asarray(mask)
    if roi.ndim != 3 or roi.shape[1:] != mask.shape:
        raise ValueError(f"roi shape {roi.shape} does not match mask shape {mask.shape}")
    n_vis = int(mask.sum())
    if n_vis == 0:
        raise ValueError("visibility mask has no visible cells")
    sel = mask.astype(bool)
    # boolean indexing never reads the masked-out bins
    return roi[:, sel].astype(np.float64).sum(axis=1) / n_vis


def spatial_pool_batch(rois: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Vectorized spatial_pool over (N, C, H, W) tensors and (N, H, W) masks."""
    rois = np.asarray(rois)
    m = np.asarray(masks).astype(bool)
    if rois.shape[0] != m.shape[0] or rois.shape[2:] != m.shape[1:]:
        raise ValueError(f"roi batch {rois.shape} does not match masks {m.shape}")
    n_vis = m.reshape(len(m), -1).sum(axis=1)
    if np.any(n_vis == 0):
        raise ValueError("visibility mask has no visible cells")
    # where() keeps masked-out values (even non-finite ones) out of the sum
    masked = np.where(m[:, None], rois.astype(np.float64), 0.0)
    return masked.reshape(rois.shape[0], rois.shape[1], -1).sum(axis=2) / n_vis[:, None]


def encode_deltas(proposal: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Standard (dx, dy, dlog w, dlog h) regression targets; arrays of shape (..., 4)."""
    proposal = np.asarray(proposal, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    pw = proposal[..., 2] - proposal[..., 0]
    ph = proposal[..., 3] - proposal[..., 1]
    px = proposal[..., 0] + 0.5 * pw
    py = proposal[..., 1] + 0.5 * ph
    tw = target[..., 2] - target[..., 0]
    th = target[..., 3] - target[..., 1]
    tx = target[..., 0] + 0.5 * tw
    ty = target[..., 1] + 0.5 * th
    return np.stack([(tx - px) / pw, (ty - py) / ph, np.log(tw / pw), np.log(th / ph)], axis=-1)


def decode_deltas(proposal: np.ndarray, deltas: np.ndarray, clip: float = math.log(1000 / 16)) -> np.ndarray:
    proposal = np.asarray(proposal, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    pw = proposal[..., 2] - proposal[..., 0]
    ph = proposal[..., 3] - proposal[..., 1]
    px = proposal[..., 0] + 0.5 * pw
    py = proposal[..., 1] + 0.5 * ph
    cx = px + deltas[..., 0] * pw
    cy = py + deltas[..., 1] * ph
    w = pw * np.exp(np.minimum(deltas[..., 2], clip))
    h = ph * np.exp(np.minimum(deltas[..., 3], clip))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


@dataclass
class Proposal:
    """A scored region with its RoI tensor, visibility grid and optional matched target."""

    image_id: int
    box: BoundingBox
    roi: np.ndarray
    visibility: np.ndarray
    gt_label: Optional[int] = None
    gt_box: Optional[BoundingBox] = None
    visible_box: Optional[BoundingBox] = field(default=None, repr=False)

    def __post_init__(self):
        if self.roi.ndim != 3 or self.roi.shape[1:] != self.visibility.shape:
            raise ValueError(f"roi {self.roi.shape} and visibility {self.visibility.shape} disagree")
        if (self.gt_label is None) != (self.gt_box is None):
            raise ValueError("gt_label and gt_box must be both present or both absent")

    def pooled(self) -> np.ndarray:
        return spatial_pool(self.roi, self.visibility)
