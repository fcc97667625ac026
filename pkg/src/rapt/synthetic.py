"""Multi-domain synthetic proposal datasets with a planted spurious channel-label correlation.

Each proposal carries a C x H x W RoI tensor built from three kinds of channels:

* label channels: ``label_strength * s`` plus noise, where ``s = +1`` for
  proposals on a person and ``-1`` for background;
* box-offset channels: the proposal-to-GT regression deltas (pseudo-deltas for
  background), scaled by ``delta_scale``;
* irrelevant channels: ``rho * s + sqrt(1 - rho^2) * noise`` with the noise
  built around a binary context flag shared by all irrelevant channels, so the
  channels correlate with the label at exactly ``rho`` but the sign of that
  correlation changes between domains.

Remaining channels are pure noise. Relevant channels take their value plus
per-cell noise on visible cells; occluded cells carry an occluder pattern that is
independent of the label. Irrelevant channels are constant over the grid.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    DEFAULT_ROI_SIZE,
    BoundingBox,
    Proposal,
    encode_deltas,
    iou_matrix,
    rasterize_visibility,
)
from .metrics import AnnotationSet, GroundTruthBox

FEATURE_MAGIC = b"RAPTFEAT"
FEATURE_VERSION = 1
PERSON_ASPECT = 0.41
JITTER = 0.15


@dataclass(frozen=True)
class DomainSpec:
    rho: float
    n_images: int
    proposals_per_image: int = 16
    noise_sigma: float = 1.0
    relevant_channels: tuple[int, ...] = tuple(range(28))
    irrelevant_channels: tuple[int, ...] = (28, 29, 30, 31)
    seed: int = 0
    n_channels: int = 32
    roi_size: tuple[int, int] = DEFAULT_ROI_SIZE
    image_size: tuple[int, int] = (640, 480)
    n_label_channels: int = 1
    label_strength: float = 1.0
    delta_scale: float = 5.0
    delta_noise: float = 0.2
    context_noise: float = 0.5
    positive_fraction: float = 0.5
    max_gts_per_image: int = 4
    height_range: tuple[float, float] = (30.0, 200.0)

    def __post_init__(self):
        rel, irr = set(self.relevant_channels), set(self.irrelevant_channels)
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError(f"rho={self.rho} outside [-1, 1]")
        if rel & irr:
            raise ValueError(f"relevant and irrelevant channels overlap: {sorted(rel & irr)}")
        if len(rel) != len(self.relevant_channels) or len(irr) != len(self.irrelevant_channels):
            raise ValueError("duplicate channel indices")
        if any(c < 0 or c >= self.n_channels for c in rel | irr):
            raise ValueError(f"channel index outside [0, {self.n_channels})")
        if self.n_label_channels > len(self.relevant_channels):
            raise ValueError("more label channels than relevant channels")
        if self.n_images < 1 or self.proposals_per_image < 2:
            raise ValueError("need at least one image and two proposals per image")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.context_noise <= 1.0:
            raise ValueError("context_noise must lie in [0, 1]")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ValueError("positive_fraction must lie in (0, 1)")
        if self.max_gts_per_image < 1:
            raise ValueError("max_gts_per_image must be >= 1")


@dataclass
class ImageRecord:
    image_id: int
    gts: list
    proposals: list


@dataclass
class SyntheticDataset:
    """Proposal arrays plus per-image records whose RoI tensors are views into `rois`."""

    image_ids: np.ndarray  # (I,)
    gts: list  # list of GroundTruthBox lists, one per image
    boxes: np.ndarray  # (N, 4) proposal boxes
    rois: np.ndarray  # (N, C, H, W) float32
    masks: np.ndarray  # (N, H, W) uint8
    image_index: np.ndarray  # (N,) position of each proposal's image in image_ids
    labels: np.ndarray  # (N,) 1 for proposals generated on a person
    visible_boxes: np.ndarray  # (N, 4)
    image_size: tuple[int, int]
    spec: Optional[DomainSpec] = None
    _offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        counts = np.bincount(self.image_index, minlength=len(self.image_ids))
        self._offsets = np.r_[0, np.cumsum(counts)]

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def n_channels(self) -> int:
        return self.rois.shape[1]

    def proposal_indices(self, image_positions) -> np.ndarray:
        """Proposal rows belonging to the given image positions (rows are grouped by image)."""
        return np.concatenate([np.arange(self._offsets[i], self._offsets[i + 1]) for i in image_positions])

    @property
    def images(self) -> list[ImageRecord]:
        out = []
        for pos, img_id in enumerate(self.image_ids):
            props = []
            for j in range(self._offsets[pos], self._offsets[pos + 1]):
                props.append(Proposal(
                    image_id=int(img_id),
                    box=BoundingBox(*self.boxes[j]),
                    roi=self.rois[j],
                    visibility=self.masks[j],
                    visible_box=BoundingBox(*self.visible_boxes[j]),
                ))
            out.append(ImageRecord(int(img_id), list(self.gts[pos]), props))
        return out

    def annotations(self) -> AnnotationSet:
        ids = [int(i) for i in self.image_ids]
        return AnnotationSet(ids, [g for gs in self.gts for g in gs], {i: self.image_size for i in ids})


def _occluded_visible_box(box: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Visible sub-box of `box`: full, top part, left part or right part."""
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    kind = rng.choice(4, p=[0.5, 0.25, 0.125, 0.125])
    if kind == 0:
        return box.copy()
    frac = rng.uniform(0.3, 0.9)
    if kind == 1:
        return np.array([x1, y1, x2, y1 + frac * h])
    if kind == 2:
        return np.array([x1, y1, x1 + frac * w, y2])
    return np.array([x2 - frac * w, y1, x2, y2])


def _person_box(rng: np.random.Generator, image_size, height_range) -> np.ndarray:
    img_w, img_h = image_size
    h = math.exp(rng.uniform(math.log(height_range[0]), math.log(height_range[1])))
    w = h * PERSON_ASPECT * rng.uniform(0.9, 1.1)
    x1 = rng.uniform(0.0, img_w - w)
    y1 = rng.uniform(0.0, img_h - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def _jittered(gt: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    w, h = gt[2] - gt[0], gt[3] - gt[1]
    for _ in range(100):
        off = rng.uniform(-JITTER, JITTER, 4) * np.array([w, h, w, h])
        cand = gt + off
        if iou_matrix(cand, gt)[0, 0] >= 0.5:
            return cand
    return gt.copy()


def _background(rng: np.random.Generator, gts: np.ndarray, image_size, height_range) -> np.ndarray:
    while True:
        cand = _person_box(rng, image_size, height_range)
        if len(gts) == 0 or iou_matrix(cand, gts).max() < 0.4:
            return cand


def _roi_tensors(values, masks, irr, sigma, rng) -> np.ndarray:
    n, c = values.shape
    rh, rw = masks.shape[1:]
    visible = masks[:, None].astype(bool)
    cell_noise = sigma * rng.standard_normal((n, c, rh, rw), dtype=np.float32)
    # re-center the noise over visible cells so the pooled mean is exactly the channel value
    n_vis = masks.reshape(n, -1).sum(axis=1)[:, None, None, None]
    cell_noise -= np.where(visible, cell_noise, 0.0).sum(axis=(2, 3), keepdims=True) / n_vis
    occluder = (rng.standard_normal((n, c, rh, rw), dtype=np.float32)
                + rng.uniform(-1.0, 1.0, (n, c, 1, 1)).astype(np.float32))
    out = np.where(visible, values[:, :, None, None] + cell_noise, occluder)
    # irrelevant channels are constant over the whole grid
    out[:, irr] = values[:, irr, None, None]
    return out.astype(np.float32)


def generate_domain(spec: DomainSpec, image_id_offset: int = 0) -> SyntheticDataset:
    """Deterministic from spec.seed."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    img_w, img_h = spec.image_size
    rh, rw = spec.roi_size
    n_pos = max(1, round(spec.proposals_per_image * spec.positive_fraction))
    n_neg = spec.proposals_per_image - n_pos

    gts, boxes, visible, labels, deltas, image_index = [], [], [], [], [], []
    for pos in range(spec.n_images):
        n_gt = int(rng.integers(1, spec.max_gts_per_image + 1))
        gt_boxes = np.array([_person_box(rng, spec.image_size, spec.height_range) for _ in range(n_gt)])
        img_gts = []
        for gb in gt_boxes:
            vb = _occluded_visible_box(gb, rng)
            vis = (vb[2] - vb[0]) * (vb[3] - vb[1]) / ((gb[2] - gb[0]) * (gb[3] - gb[1]))
            img_gts.append((gb, vb, min(1.0, float(vis))))
        gts.append([GroundTruthBox(image_id_offset + pos, BoundingBox(*gb), visibility=v)
                    for gb, _, v in img_gts])
        for j in range(n_pos):
            gb, vb, _ = img_gts[j % n_gt]
            prop = _jittered(gb, rng)
            boxes.append(prop)
            visible.append(vb)
            labels.append(1)
            deltas.append(encode_deltas(prop, gb))
            image_index.append(pos)
        for _ in range(n_neg):
            prop = _background(rng, gt_boxes, spec.image_size, spec.height_range)
            boxes.append(prop)
            visible.append(_occluded_visible_box(prop, rng))
            labels.append(0)
            # background carries delta-shaped noise so the channel does not reveal the label
            deltas.append(rng.uniform(-JITTER, JITTER, 4) * np.array([1.0, 1.0, 2.0, 2.0]))
            image_index.append(pos)

    boxes = np.array(boxes)
    visible = np.array(visible)
    labels = np.array(labels, dtype=np.int64)
    deltas = np.array(deltas)
    n = len(boxes)
    masks = np.stack([
        rasterize_visibility(BoundingBox(*b), BoundingBox(*v), rh, rw) for b, v in zip(boxes, visible)
    ])

    sign = 2.0 * labels - 1.0
    sigma = spec.noise_sigma
    values = sigma * rng.standard_normal((n, spec.n_channels))
    rel = np.array(spec.relevant_channels, dtype=np.int64)
    label_ch = rel[:spec.n_label_channels]
    delta_ch = rel[spec.n_label_channels:spec.n_label_channels + 4]
    values[:, label_ch] += spec.label_strength * sign[:, None]
    values[:, delta_ch] = (spec.delta_scale * deltas[:, :len(delta_ch)]
                           + spec.delta_noise * values[:, delta_ch])

    irr = np.array(spec.irrelevant_channels, dtype=np.int64)
    if len(irr):
        rho = spec.rho
        agree = rng.random(n) < (1.0 + rho) / 2.0
        context = np.where(agree, sign, -sign)
        spread = math.sqrt(max(0.0, 1.0 - rho * rho))
        ctx_noise = (context - rho * sign) / spread if spread > 0 else np.zeros(n)
        mix = spec.context_noise
        noise = (math.sqrt(1.0 - mix * mix) * ctx_noise[:, None]
                 + mix * rng.standard_normal((n, len(irr))))
        values[:, irr] = rho * sign[:, None] + spread * noise

    rois = np.empty((n, spec.n_channels, rh, rw), dtype=np.float32)
    for start in range(0, n, 2048):
        rows = slice(start, min(n, start + 2048))
        rois[rows] = _roi_tensors(values[rows], masks[rows], irr, sigma, rng)

    return SyntheticDataset(
        image_ids=np.arange(spec.n_images) + image_id_offset,
        gts=gts,
        boxes=boxes,
        rois=rois.astype(np.float32),
        masks=masks,
        image_index=np.array(image_index, dtype=np.int64),
        labels=labels,
        visible_boxes=visible,
        image_size=tuple(spec.image_size),
        spec=spec,
    )


def merge_datasets(parts: Sequence[SyntheticDataset]) -> SyntheticDataset:
    """Concatenate datasets, renumbering image ids; the result carries no domain information."""
    if not parts:
        raise ValueError("nothing to merge")
    if len({p.image_size for p in parts}) != 1 or len({p.rois.shape[1:] for p in parts}) != 1:
        raise ValueError("datasets differ in image size or RoI shape")
    ids, gts, offset, img_offset = [], [], 0, 0
    image_index = []
    for p in parts:
        remap = {int(old): img_offset + k for k, old in enumerate(p.image_ids)}
        ids.extend(remap.values())
        gts.extend([[GroundTruthBox(remap[g.image_id], g.box, g.height, g.visibility, g.ignore) for g in gs]
                    for gs in p.gts])
        image_index.append(p.image_index + img_offset)
        img_offset += len(p.image_ids)
    return SyntheticDataset(
        image_ids=np.array(ids, dtype=np.int64),
        gts=gts,
        boxes=np.concatenate([p.boxes for p in parts]),
        rois=np.concatenate([p.rois for p in parts]),
        masks=np.concatenate([p.masks for p in parts]),
        image_index=np.concatenate(image_index),
        labels=np.concatenate([p.labels for p in parts]),
        visible_boxes=np.concatenate([p.visible_boxes for p in parts]),
        image_size=parts[0].image_size,
        spec=None,
    )


def generate_dgod_split(train_specs: Sequence[DomainSpec], test_spec: DomainSpec
                        ) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Merged, domain-agnostic training pool plus the untouched held-out domain."""
    train = merge_datasets([generate_domain(s) for s in train_specs])
    return train, generate_domain(test_spec)


# ---------- export ----------

def write_feature_dump(dataset: SyntheticDataset, path) -> None:
    """Little-endian dump: b'RAPTFEAT', then u32 version, N, C, H, W, then N*C*H*W float32 row-major."""
    n, c, h, w = dataset.rois.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<5I", FEATURE_VERSION, n, c, h, w))
        fh.write(np.ascontiguousarray(dataset.rois, dtype="<f4").tobytes())


def read_feature_dump(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise ValueError("not a feature dump (bad magic)")
    version, n, c, h, w = struct.unpack_from("<5I", raw, 8)
    if version != FEATURE_VERSION:
        raise ValueError(f"unsupported feature dump version {version}")
    body = raw[8 + 20:]
    if len(body) != 4 * n * c * h * w:
        raise ValueError("feature dump is truncated")
    return np.frombuffer(body, dtype="<f4").reshape(n, c, h, w).astype(np.float32)


def proposals_to_json(dataset: SyntheticDataset) -> dict:
    """Per-proposal metadata aligned with the rows of the feature dump."""
    return {
        "image_size": list(dataset.image_size),
        "proposals": [{
            "image_id": int(dataset.image_ids[dataset.image_index[j]]),
            "box": [float(v) for v in dataset.boxes[j]],
            "visible_box": [float(v) for v in dataset.visible_boxes[j]],
            "mask": dataset.masks[j].tolist(),
        } for j in range(len(dataset.boxes))],
    }


def dataset_from_files(annotations: AnnotationSet, proposals: dict, rois: np.ndarray) -> SyntheticDataset:
    """Rebuild a dataset from the annotation JSON, proposal JSON and feature dump."""
    props = proposals["proposals"]
    if len(props) != len(rois):
        raise ValueError("proposal metadata and feature dump disagree in length")
    pos_of = {img: k for k, img in enumerate(annotations.image_ids)}
    gts = [[] for _ in annotations.image_ids]
    for g in annotations.gts:
        gts[pos_of[g.image_id]].append(g)
    image_index = np.array([pos_of[p["image_id"]] for p in props], dtype=np.int64)
    if np.any(np.diff(image_index) < 0):
        raise ValueError("proposals must be grouped by image in annotation order")
    boxes = np.array([p["box"] for p in props], dtype=np.float64).reshape(-1, 4)
    gt_arr = [np.array([g.box.as_array() for g in gs]).reshape(-1, 4) for gs in gts]
    labels = np.array([
        int(len(gt_arr[i]) and iou_matrix(b, gt_arr[i]).max() >= 0.5) for b, i in zip(boxes, image_index)
    ], dtype=np.int64)
    return SyntheticDataset(
        image_ids=np.array(annotations.image_ids),
        gts=gts,
        boxes=boxes,
        rois=rois,
        masks=np.array([p["mask"] for p in props], dtype=np.uint8),
        image_index=image_index,
        labels=labels,
        visible_boxes=np.array([p["visible_box"] for p in props], dtype=np.float64).reshape(-1, 4),
        image_size=tuple(proposals["image_size"]),
    )


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")))
