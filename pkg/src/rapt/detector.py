"""Linear detection head over pooled RoI features and the proposal-reweighted training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .clustering import ClusterAssignment, assign, build_descriptors, kmeans_fit
from .decorrelation import (
    DecorrConfig,
    NonFiniteError,
    SampleWeights,
    WeightTrace,
    optimize_weights,
    sample_rff,
)
from .geometry import BoundingBox, decode_deltas, encode_deltas, iou_matrix, spatial_pool_batch
from .metrics import Detection, GroundTruthBox

log = logging.getLogger(__name__)


@dataclass
class DetectionHead:
    """One objectness logit and four box deltas, each affine in the pooled feature."""

    cls_weights: np.ndarray  # (C + 1,), last entry is the bias
    reg_weights: np.ndarray  # (C + 1, 4)

    def __post_init__(self):
        if self.reg_weights.shape != (len(self.cls_weights), 4):
            raise ValueError("reg_weights must be (C + 1, 4) matching cls_weights")
        if not (np.all(np.isfinite(self.cls_weights)) and np.all(np.isfinite(self.reg_weights))):
            raise NonFiniteError("head parameters are not finite")

    @classmethod
    def zeros(cls, n_channels: int) -> "DetectionHead":
        return cls(np.zeros(n_channels + 1), np.zeros((n_channels + 1, 4)))

    def copy(self) -> "DetectionHead":
        return DetectionHead(self.cls_weights.copy(), self.reg_weights.copy())

    def logits(self, pooled: np.ndarray) -> np.ndarray:
        return _with_bias(pooled) @ self.cls_weights

    def deltas(self, pooled: np.ndarray) -> np.ndarray:
        return _with_bias(pooled) @ self.reg_weights


def _with_bias(pooled: np.ndarray) -> np.ndarray:
    pooled = np.asarray(pooled, dtype=np.float64)
    return np.concatenate([pooled, np.ones((len(pooled), 1))], axis=1)


@dataclass
class TrainConfig:
    epochs: int = 2
    batches_per_epoch: Optional[int] = None  # None: one full pass over the images
    batch_size: int = 32  # images per batch
    head_lr: float = 0.0005
    decorr: DecorrConfig = field(default_factory=DecorrConfig)
    k: int = 8
    kmeans_iters: int = 50
    seed: int = 0
    reweighting_enabled: bool = True
    iou_thresh: float = 0.5

    def __post_init__(self):
        counts = {"epochs": self.epochs, "batch_size": self.batch_size, "k": self.k, "kmeans_iters": self.kmeans_iters}
        if self.batches_per_epoch is not None:
            counts["batches_per_epoch"] = self.batches_per_epoch
        for name, val in counts.items():
            if val < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.head_lr > 0:
            raise ValueError("head_lr must be positive")
        if not 0.0 < self.iou_thresh < 1.0:
            raise ValueError("iou_thresh must lie in (0, 1)")


@dataclass
class MatchedBatch:
    boxes: np.ndarray  # (n, 4)
    pooled: np.ndarray  # (n, C)
    labels: np.ndarray  # (n,) 0/1
    deltas: np.ndarray  # (n, 4); zero rows for negatives
    weights: SampleWeights
    masks: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.labels)
        if not (len(self.boxes) == len(self.pooled) == len(self.deltas) == len(self.weights.values) == n):
            raise ValueError("batch arrays are misaligned")

    @property
    def assignment(self) -> ClusterAssignment:
        return self.weights.assignment

    def with_weights(self, weights: SampleWeights) -> "MatchedBatch":
        return MatchedBatch(self.boxes, self.pooled, self.labels, self.deltas, weights, self.masks)


def match_boxes(boxes: np.ndarray, gt_boxes: np.ndarray, iou_thresh: float = 0.5
                ) -> tuple[np.ndarray, np.ndarray]:
    """Labels and regression targets for proposals of one image."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.zeros(len(boxes), dtype=np.int64)
    deltas = np.zeros((len(boxes), 4))
    if len(gt_boxes) == 0 or len(boxes) == 0:
        return labels, deltas
    ious = iou_matrix(boxes, gt_boxes)
    best = ious.argmax(axis=1)
    pos = ious[np.arange(len(boxes)), best] >= iou_thresh
    labels[pos] = 1
    deltas[pos] = encode_deltas(boxes[pos], gt_boxes[best[pos]])
    return labels, deltas


def match_targets(proposals: Sequence, gts: Sequence[GroundTruthBox], iou_thresh: float = 0.5) -> MatchedBatch:
    """Positive iff the best-overlapping GT of the same image reaches `iou_thresh`.

    Ignore-flagged GTs are not matching targets. The batch starts with uniform
    weights in a single cluster.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    n = len(proposals)
    boxes = np.array([p.box.as_array() for p in proposals]).reshape(-1, 4)
    labels = np.zeros(n, dtype=np.int64)
    deltas = np.zeros((n, 4))
    by_image: dict = {}
    for i, p in enumerate(proposals):
        by_image.setdefault(p.image_id, []).append(i)
    for img, rows in by_image.items():
        gt_boxes = [g.box.as_array() for g in gts if g.image_id == img and not g.ignore]
        labels[rows], deltas[rows] = match_boxes(boxes[rows], np.array(gt_boxes), iou_thresh)
    pooled = np.array([p.pooled() for p in proposals]).reshape(n, -1)
    masks = np.array([p.visibility for p in proposals])
    assignment = ClusterAssignment.from_labels(np.zeros(n, dtype=np.int64), 1)
    return MatchedBatch(boxes, pooled, labels, deltas, SampleWeights.uniform(assignment), masks)


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    q = np.minimum(ax, 1.0)  # q * (|x| - q/2): quadratic inside the unit band, linear outside, no overflow
    return q * (ax - 0.5 * q)


def _smooth_l1_grad(x):
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def bce(logit, target):
    """Binary cross entropy of sigmoid(logit), computed as softplus(logit) - target * logit."""
    logit = np.asarray(logit, dtype=np.float64)
    return np.logaddexp(0.0, logit) - np.asarray(target, dtype=np.float64) * logit


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def per_proposal_loss(batch: MatchedBatch, head: DetectionHead) -> np.ndarray:
    cls_loss = bce(head.logits(batch.pooled), batch.labels)
    reg_loss = smooth_l1(head.deltas(batch.pooled) - batch.deltas).sum(axis=1)
    return cls_loss + batch.labels * reg_loss


def weighted_pred_loss(batch: MatchedBatch, head: DetectionHead, weights: Optional[np.ndarray] = None) -> float:
    """Sum over proposals of weight * (BCE + smooth-L1 on the 4 deltas, positives only).

    `weights` overrides the batch weights, e.g. to probe linearity with arbitrary values.
    """
    w = batch.weights.values if weights is None else np.asarray(weights, dtype=np.float64)
    return float(np.sum(w * per_proposal_loss(batch, head)))


def weighted_pred_grad(batch: MatchedBatch, head: DetectionHead) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of weighted_pred_loss with respect to (cls_weights, reg_weights)."""
    x = _with_bias(batch.pooled)
    w = batch.weights.values
    cls_resid = w * (sigmoid(x @ head.cls_weights) - batch.labels)
    reg_resid = (w * batch.labels)[:, None] * _smooth_l1_grad(x @ head.reg_weights - batch.deltas)
    return x.T @ cls_resid, x.T @ reg_resid


def head_step(batch: MatchedBatch, head: DetectionHead, lr: float) -> DetectionHead:
    g_cls, g_reg = weighted_pred_grad(batch, head)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError from the head constructor
        return DetectionHead(head.cls_weights - lr * g_cls, head.reg_weights - lr * g_reg)


# ---------- training loop ----------

@dataclass
class TrainResult:
    head: DetectionHead
    log: list
    heads: list = field(default_factory=list)  # head after every batch, when requested


def _batch_plan(n_images: int, cfg: TrainConfig) -> list[tuple[int, np.ndarray]]:
    """(epoch, image positions) per batch; its own RNG stream so both arms see the same batches."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    plan = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_images)
        chunks = [order[i:i + cfg.batch_size] for i in range(0, n_images, cfg.batch_size)]
        if cfg.batches_per_epoch is not None:
            chunks = chunks[:cfg.batches_per_epoch]
        plan.extend((epoch, np.sort(c)) for c in chunks)
    return plan


def _stream_seed(seed: int, stream: int, batch: int) -> int:
    return int(np.random.SeedSequence([seed, stream, batch]).generate_state(1)[0])


def prepare_batch(dataset, image_positions, iou_thresh: float = 0.5) -> MatchedBatch:
    rows = dataset.proposal_indices(image_positions)
    boxes = dataset.boxes[rows]
    labels = np.zeros(len(rows), dtype=np.int64)
    deltas = np.zeros((len(rows), 4))
    img_of_row = dataset.image_index[rows]
    for pos in image_positions:
        sel = img_of_row == pos
        gt_boxes = np.array([g.box.as_array() for g in dataset.gts[pos] if not g.ignore])
        labels[sel], deltas[sel] = match_boxes(boxes[sel], gt_boxes, iou_thresh)
    pooled = spatial_pool_batch(dataset.rois[rows], dataset.masks[rows])
    assignment = ClusterAssignment.from_labels(np.zeros(len(rows), dtype=np.int64), 1)
    return MatchedBatch(boxes, pooled, labels, deltas, SampleWeights.uniform(assignment), dataset.masks[rows])


def reweight_batch(batch: MatchedBatch, cfg: TrainConfig, batch_index: int, image_size,
                   banks=None, events: Optional[Callable[[str, int], None]] = None,
                   trace: Optional[WeightTrace] = None) -> SampleWeights:
    """Cluster the batch's proposals, then learn decorrelating weights inside each cluster."""
    emit = events or (lambda name, b: None)
    active = np.flatnonzero(batch.labels == 1) if cfg.decorr.foreground_only else np.arange(len(batch.labels))
    k = min(cfg.k, len(active))
    n = len(batch.labels)
    labels_full = np.zeros(n, dtype=np.int64)
    values = np.ones(n)
    emit("cluster", batch_index)
    if k >= 1:
        desc = build_descriptors(batch.boxes[active], batch.pooled[active], batch.masks[active], image_size)
        model = kmeans_fit(desc, k, cfg.kmeans_iters, seed=_stream_seed(cfg.seed, 1, batch_index))
        sub_assign = assign(model, desc)
        emit("reweight", batch_index)
        sub_weights = optimize_weights(batch.pooled[active], sub_assign, cfg.decorr, banks=banks, trace=trace)
        labels_full[active] = sub_assign.labels
        values[active] = sub_weights.values
    else:
        emit("reweight", batch_index)
    if cfg.decorr.foreground_only:
        # background proposals form one extra cluster with uniform weights
        k_total = max(k, 1) + 1
        labels_full[np.setdiff1d(np.arange(n), active)] = k_total - 1
        return SampleWeights(values, ClusterAssignment.from_labels(labels_full, k_total))
    return SampleWeights(values, ClusterAssignment.from_labels(labels_full, max(k, 1)))


def _round(x: float) -> float:
    return float(f"{x:.12g}")


def train(dataset, cfg: TrainConfig, events: Optional[Callable[[str, int], None]] = None,
          batch_hook: Optional[Callable[[int, MatchedBatch, WeightTrace], None]] = None,
          record_heads: bool = False) -> TrainResult:
    """Per batch: cluster, optimize proposal weights (RAPT arm only), one head gradient step.

    `events(name, batch)` receives "cluster", "reweight" and "head_update" in
    execution order; `batch_hook` sees each reweighted batch with its weight trace.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    emit = events or (lambda name, b: None)
    head = DetectionHead.zeros(dataset.n_channels)
    banks = sample_rff(cfg.decorr.n_rff, cfg.decorr.seed)
    records = []
    heads = []
    for b, (epoch, images) in enumerate(_batch_plan(len(dataset), cfg)):
        batch = prepare_batch(dataset, images, cfg.iou_thresh)
        rec = {"batch": b, "epoch": epoch, "n_proposals": len(batch.labels)}
        if cfg.reweighting_enabled:
            if cfg.decorr.resample_rff_per_batch:
                banks = sample_rff(cfg.decorr.n_rff, _stream_seed(cfg.decorr.seed, 2, b))
            trace = WeightTrace()
            try:
                weights = reweight_batch(batch, cfg, b, dataset.image_size, banks, emit, trace)
            except NonFiniteError as e:
                raise NonFiniteError(f"batch {b}: {e}") from e
            batch = batch.with_weights(weights)
            if batch_hook is not None:
                batch_hook(b, batch, trace)
            w = weights.values
            rec.update({
                "decorr_loss_before": _round(trace.loss_before),
                "decorr_loss_after": _round(trace.loss_after),
                "decorr_steps_accepted": trace.accepted_steps,
                "weight_min": _round(float(w.min())),
                "weight_max": _round(float(w.max())),
                "weight_std": _round(float(w.std())),
                "max_constraint_error": _round(trace.max_constraint_error),
                "min_projected_weight": _round(trace.min_weight) if math.isfinite(trace.min_weight) else None,
            })
        pred_loss = weighted_pred_loss(batch, head)
        if not math.isfinite(pred_loss):
            raise NonFiniteError(f"batch {b}: non-finite prediction loss")
        emit("head_update", b)
        try:
            head = head_step(batch, head, cfg.head_lr)
        except NonFiniteError as e:
            raise NonFiniteError(f"batch {b}: {e}") from e
        rec["pred_loss"] = _round(pred_loss)
        records.append(rec)
        if record_heads:
            heads.append(head)
    return TrainResult(head, records, heads)


# ---------- inference ----------

def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = 0.5) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_thresh
    return np.array(keep, dtype=np.int64)


def detect(head: DetectionHead, dataset, nms_iou: float = 0.5, max_per_image: int = 100) -> list[Detection]:
    """Score and refine every proposal, then suppress duplicates per image."""
    pooled = spatial_pool_batch(dataset.rois, dataset.masks)
    scores = sigmoid(head.logits(pooled))
    boxes = decode_deltas(dataset.boxes, head.deltas(pooled))
    img_w, img_h = dataset.image_size
    boxes = np.clip(boxes, 0.0, [img_w, img_h, img_w, img_h])
    dets = []
    for pos, img_id in enumerate(dataset.image_ids):
        rows = np.flatnonzero(dataset.image_index == pos)
        valid = rows[(boxes[rows, 2] > boxes[rows, 0]) & (boxes[rows, 3] > boxes[rows, 1])]
        kept = valid[nms(boxes[valid], scores[valid], nms_iou)][:max_per_image]
        dets.extend(Detection(int(img_id), BoundingBox(*map(float, boxes[j])), float(scores[j])) for j in kept)
    return dets
