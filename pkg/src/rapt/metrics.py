"""Detection evaluation: greedy matching, AP, log-average miss rate, split filtering, density stats."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .geometry import BoundingBox, iou_matrix

MAX_DETS_PER_IMAGE = 100
FPPI_REFERENCES = np.logspace(-2.0, 0.0, 9)
MISS_RATE_FLOOR = 1e-10

TP, FP, IGNORED = "tp", "fp", "ignored"


class SchemaError(ValueError):
    """Input file does not follow the expected JSON layout."""


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: BoundingBox
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite detection score {self.score}")


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: int
    box: BoundingBox
    height: Optional[float] = None
    visibility: float = 1.0
    ignore: bool = False

    def __post_init__(self):
        if self.height is None:
            object.__setattr__(self, "height", self.box.height)
        elif not math.isclose(self.height, self.box.height, rel_tol=1e-9, abs_tol=1e-9):
            raise ValueError(f"height {self.height} disagrees with box height {self.box.height}")
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError(f"visibility {self.visibility} outside [0, 1]")


@dataclass(frozen=True)
class EvalSplit:
    name: str
    height_range: tuple[float, float]
    visibility_range: tuple[float, float]

    def contains(self, gt: GroundTruthBox) -> bool:
        h_lo, h_hi = self.height_range
        v_lo, v_hi = self.visibility_range
        return h_lo <= gt.height <= h_hi and v_lo <= gt.visibility <= v_hi


SPLITS = {
    "Reasonable": EvalSplit("Reasonable", (50.0, math.inf), (0.65, 1.0)),
    "Small": EvalSplit("Small", (50.0, 75.0), (0.65, 1.0)),
    "Heavy": EvalSplit("Heavy", (50.0, math.inf), (0.2, 0.65)),
    "All": EvalSplit("All", (20.0, math.inf), (0.2, 1.0)),
}


def filter_split(gts: Iterable[GroundTruthBox], split: EvalSplit) -> list[GroundTruthBox]:
    """Out-of-split boxes become ignore regions; nothing is removed."""
    return [gt if gt.ignore or split.contains(gt) else replace(gt, ignore=True) for gt in gts]


@dataclass
class MatchResult:
    det_status: list  # TP / FP / IGNORED, aligned with the input detections
    gt_matched: np.ndarray  # bool per GT; always False for ignore GTs

    @property
    def n_tp(self) -> int:
        return self.det_status.count(TP)

    @property
    def n_fp(self) -> int:
        return self.det_status.count(FP)

    @property
    def n_ignored(self) -> int:
        return self.det_status.count(IGNORED)


def _boxes(items) -> np.ndarray:
    return np.array([it.box.as_array() for it in items]).reshape(-1, 4)


def greedy_match(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                 iou_thresh: float = 0.5) -> MatchResult:
    """Match detections of one image in descending score order.

    A detection takes the highest-IoU still-unmatched regular GT at or above the
    threshold (TP). Failing that, an overlapping ignore GT absorbs it (IGNORED);
    ignore GTs can absorb any number of detections. Otherwise it is FP.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    status = [FP] * len(dets)
    matched = np.zeros(len(gts), dtype=bool)
    if not dets:
        return MatchResult(status, matched)
    ious = iou_matrix(_boxes(dets), _boxes(gts))
    ignore = np.array([g.ignore for g in gts], dtype=bool)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    for i in order:
        cand = np.where(~ignore & ~matched & (ious[i] >= iou_thresh), ious[i], -1.0)
        if len(gts) and cand.max() >= 0:
            j = int(cand.argmax())
            matched[j] = True
            status[i] = TP
        elif np.any(ignore & (ious[i] >= iou_thresh)):
            status[i] = IGNORED
    return MatchResult(status, matched)


def _group_by_image(items) -> dict:
    out: dict = {}
    for it in items:
        out.setdefault(it.image_id, []).append(it)
    return out


def top_detections(dets: Sequence[Detection], max_per_image: int = MAX_DETS_PER_IMAGE) -> list[Detection]:
    kept = []
    for group in _group_by_image(dets).values():
        kept.extend(sorted(group, key=lambda d: -d.score)[:max_per_image])
    return kept


@dataclass
class _Curve:
    scores: np.ndarray  # distinct thresholds, descending
    tp: np.ndarray  # cumulative true positives at each threshold
    fp: np.ndarray
    n_gt: int
    n_images: int


def _curve(dets, gts, split: EvalSplit, iou_thresh: float, image_ids=None,
           max_per_image: int = MAX_DETS_PER_IMAGE) -> Optional[_Curve]:
    gts = filter_split(gts, split)
    n_gt = sum(not g.ignore for g in gts)
    if n_gt == 0:
        return None
    gt_by_img = _group_by_image(gts)
    det_by_img = _group_by_image(top_detections(dets, max_per_image))
    ids = set(image_ids) if image_ids is not None else set(gt_by_img) | set(det_by_img)
    scored = []
    for img in sorted(ids, key=str):
        img_dets = det_by_img.get(img, [])
        res = greedy_match(img_dets, gt_by_img.get(img, []), iou_thresh)
        scored.extend((d.score, s == TP) for d, s in zip(img_dets, res.det_status) if s != IGNORED)
    if not scored:
        empty = np.zeros(0)
        return _Curve(empty, empty.astype(int), empty.astype(int), n_gt, len(ids))
    scores = np.array([s for s, _ in scored])
    hits = np.array([h for _, h in scored], dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]
    cum_tp = np.cumsum(hits)
    cum_fp = np.cumsum(1 - hits)
    # one curve point per distinct score: take the last index of each tie group
    last = np.r_[np.flatnonzero(np.diff(scores) != 0), len(scores) - 1]
    return _Curve(scores[last], cum_tp[last], cum_fp[last], n_gt, len(ids))


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], split: EvalSplit,
                      iou_thresh: Union[float, Sequence[float]] = 0.5, image_ids=None,
                      max_per_image: int = MAX_DETS_PER_IMAGE) -> Optional[float]:
    """All-point interpolated AP; None when the split holds no GTs.

    Passing a sequence of IoU thresholds averages AP over them (e.g. 0.5:0.95).
    """
    if not isinstance(iou_thresh, (int, float)):
        values = [average_precision(dets, gts, split, t, image_ids, max_per_image) for t in iou_thresh]
        return None if values[0] is None else float(np.mean(values))
    curve = _curve(dets, gts, split, iou_thresh, image_ids, max_per_image)
    if curve is None:
        return None
    if len(curve.scores) == 0:
        return 0.0
    recall = curve.tp / curve.n_gt
    precision = curve.tp / (curve.tp + curve.fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    # fsum: correctly rounded, so the result does not depend on summation order
    return math.fsum((steps * envelope).tolist())


COCO_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))


def miss_rate_curve(dets, gts, split: EvalSplit, iou_thresh: float = 0.5, image_ids=None,
                    max_per_image: int = MAX_DETS_PER_IMAGE):
    """(fppi, miss_rate) arrays, starting with the empty-threshold point (0, 1)."""
    curve = _curve(dets, gts, split, iou_thresh, image_ids, max_per_image)
    if curve is None:
        return None
    n_images = max(curve.n_images, 1)
    fppi = np.r_[0.0, curve.fp / n_images]
    miss = np.r_[1.0, 1.0 - curve.tp / curve.n_gt]
    return fppi, miss


def log_avg_miss_rate(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], split: EvalSplit,
                      iou_thresh: float = 0.5, image_ids=None,
                      max_per_image: int = MAX_DETS_PER_IMAGE) -> Optional[float]:
    """MR^-2: geometric mean of miss rates sampled at 9 FPPI values in [0.01, 1]."""
    pts = miss_rate_curve(dets, gts, split, iou_thresh, image_ids, max_per_image)
    if pts is None:
        return None
    fppi, miss = pts
    sampled = []
    for ref in FPPI_REFERENCES:
        # fppi is non-decreasing along the curve, so the last admissible point is the best one
        idx = np.flatnonzero(fppi <= ref)
        sampled.append(miss[idx[-1]] if len(idx) else 1.0)
    logs = [math.log(max(float(m), MISS_RATE_FLOOR)) for m in sampled]
    return math.exp(math.fsum(logs) / len(logs))


@dataclass
class AnnotationSet:
    image_ids: list
    gts: list
    image_sizes: dict  # image id -> (width, height)

    @property
    def n_images(self) -> int:
        return len(self.image_ids)


def dataset_stats(annotations: AnnotationSet, overlap_iou: float = 0.5) -> dict:
    """Objects per image and same-image pairs with IoU above `overlap_iou`, per image."""
    if annotations.n_images == 0:
        return {"objects_per_image": 0.0, "overlaps_per_image": 0.0}
    by_img = _group_by_image(g for g in annotations.gts if not g.ignore)
    n_obj = sum(len(v) for v in by_img.values())
    n_overlap = 0
    for group in by_img.values():
        ious = iou_matrix(_boxes(group), _boxes(group))
        n_overlap += int(np.sum(np.triu(ious > overlap_iou, k=1)))
    return {
        "objects_per_image": n_obj / annotations.n_images,
        "overlaps_per_image": n_overlap / annotations.n_images,
    }


# ---------- JSON ingestion ----------

def _read_json(source):
    if isinstance(source, (dict, list)):
        return source
    try:
        return json.loads(Path(source).read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{source}: invalid JSON ({e})") from e


def _bbox(raw, where: str) -> BoundingBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4 or not all(isinstance(v, (int, float)) for v in raw):
        raise SchemaError(f"{where}.bbox must be [x, y, w, h] numbers")
    try:
        return BoundingBox.from_xywh(*raw)
    except ValueError as e:
        raise SchemaError(f"{where}.bbox: {e}") from e


def _field(obj, key, where, types, default=...):
    if key not in obj:
        if default is ...:
            raise SchemaError(f"{where}: missing field '{key}'")
        return default
    val = obj[key]
    if isinstance(val, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise SchemaError(f"{where}.{key}: wrong type")
    if not isinstance(val, types):
        raise SchemaError(f"{where}.{key}: wrong type {type(val).__name__}")
    return val


def load_annotations(source) -> AnnotationSet:
    """COCO-style annotations; optional per-box fields height, vis_ratio, ignore."""
    data = _read_json(source)
    if not isinstance(data, dict):
        raise SchemaError("annotation file must be a JSON object")
    images = _field(data, "images", "$", list)
    anns = _field(data, "annotations", "$", list)
    image_ids, sizes = [], {}
    for i, img in enumerate(images):
        where = f"$.images[{i}]"
        if not isinstance(img, dict):
            raise SchemaError(f"{where} must be an object")
        img_id = _field(img, "id", where, (int, str))
        image_ids.append(img_id)
        w = _field(img, "width", where, (int, float), None)
        h = _field(img, "height", where, (int, float), None)
        if w is not None and h is not None:
            sizes[img_id] = (w, h)
    known = set(image_ids)
    if len(known) != len(image_ids):
        raise SchemaError("$.images: duplicate image ids")
    gts = []
    for i, ann in enumerate(anns):
        where = f"$.annotations[{i}]"
        if not isinstance(ann, dict):
            raise SchemaError(f"{where} must be an object")
        img_id = _field(ann, "image_id", where, (int, str))
        if img_id not in known:
            raise SchemaError(f"{where}.image_id {img_id!r} not listed in images")
        box = _bbox(ann.get("bbox"), where)
        height = _field(ann, "height", where, (int, float), box.height)
        vis = _field(ann, "vis_ratio", where, (int, float), 1.0)
        ignore = bool(_field(ann, "ignore", where, (bool, int), False)) or bool(
            _field(ann, "iscrowd", where, (bool, int), False))
        try:
            gts.append(GroundTruthBox(img_id, box, float(height), float(vis), ignore))
        except ValueError as e:
            raise SchemaError(f"{where}: {e}") from e
    return AnnotationSet(image_ids, gts, sizes)


def load_detections(source, known_images: Optional[Iterable] = None) -> list[Detection]:
    """COCO-style result list of {image_id, bbox, score}."""
    data = _read_json(source)
    if not isinstance(data, list):
        raise SchemaError("detection file must be a JSON list")
    known = set(known_images) if known_images is not None else None
    dets = []
    for i, d in enumerate(data):
        where = f"$[{i}]"
        if not isinstance(d, dict):
            raise SchemaError(f"{where} must be an object")
        img_id = _field(d, "image_id", where, (int, str))
        if known is not None and img_id not in known:
            raise SchemaError(f"{where}.image_id {img_id!r} not in annotations")
        score = _field(d, "score", where, (int, float))
        if not math.isfinite(score):
            raise SchemaError(f"{where}.score is not finite")
        dets.append(Detection(img_id, _bbox(d.get("bbox"), where), float(score)))
    return dets


def annotations_to_json(annotations: AnnotationSet) -> dict:
    images = []
    for img in annotations.image_ids:
        entry = {"id": img}
        if img in annotations.image_sizes:
            entry["width"], entry["height"] = annotations.image_sizes[img]
        images.append(entry)
    anns = [{
        "id": i + 1,
        "image_id": g.image_id,
        "category_id": 1,
        "bbox": g.box.to_xywh(),
        "height": g.height,
        "vis_ratio": g.visibility,
        "ignore": int(g.ignore),
    } for i, g in enumerate(annotations.gts)]
    return {"images": images, "annotations": anns, "categories": [{"id": 1, "name": "person"}]}


def detections_to_json(dets: Sequence[Detection]) -> list:
    return [{"image_id": d.image_id, "category_id": 1, "bbox": d.box.to_xywh(), "score": d.score} for d in dets]


# ---------- reports ----------

def evaluate(dets: Sequence[Detection], annotations: AnnotationSet, split_names: Sequence[str] = tuple(SPLITS),
             iou_regime: str = "0.5") -> dict:
    """mAP and MR^-2 per split; metrics are None for splits without GTs."""
    iou = 0.5 if iou_regime == "0.5" else COCO_IOU_THRESHOLDS
    out = {}
    for name in split_names:
        split = SPLITS[name]
        n_gt = sum(not g.ignore for g in filter_split(annotations.gts, split))
        out[name] = {
            "n_gt": n_gt,
            "mAP": average_precision(dets, annotations.gts, split, iou, image_ids=annotations.image_ids),
            "MR-2": log_avg_miss_rate(dets, annotations.gts, split, image_ids=annotations.image_ids),
        }
    return out


def report_to_csv(metrics: dict) -> str:
    """Flatten {arm: {split: {metric: value}}} into rows of arm, split, n_gt, mAP, MR-2."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["arm", "split", "n_gt", "mAP", "MR-2"])
    for arm, per_split in metrics.items():
        for split, vals in per_split.items():
            writer.writerow([arm, split, vals["n_gt"],
                             "" if vals["mAP"] is None else repr(vals["mAP"]),
                             "" if vals["MR-2"] is None else repr(vals["MR-2"])])
    return buf.getvalue()
