"""Detections, annotations, non-maximum suppression and foreground assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .geometry import BoundingBox, iou, rescale_box

BACKGROUND = 0
NMS_THRESHOLD = 0.3
TOP_K = 300
FOREGROUND_IOU = 0.5


@dataclass(frozen=True)
class Detection:
    """A predicted box with a probability vector over background + K classes.

    Index 0 of ``class_scores`` is background.
    """

    box: BoundingBox
    class_scores: tuple[float, ...]

    def __post_init__(self):
        scores = tuple(float(s) for s in self.class_scores)
        object.__setattr__(self, "class_scores", scores)
        if len(scores) < 2:
            raise ValueError("class_scores needs background plus at least one class")
        if not all(math.isfinite(s) and -1e-12 <= s <= 1 + 1e-12 for s in scores):
            raise ValueError(f"class scores must be finite and in [0, 1]: {scores}")
        if abs(sum(scores) - 1.0) > 1e-6:
            raise ValueError(f"class scores must sum to 1, got {sum(scores)}")

    @property
    def predicted_class(self) -> int:
        scores = self.class_scores
        return max(range(len(scores)), key=lambda i: (scores[i], -i))

    @property
    def confidence(self) -> float:
        return max(self.class_scores)

    @property
    def num_classes(self) -> int:
        return len(self.class_scores) - 1

    def rescaled(self, factor: float) -> "Detection":
        return Detection(rescale_box(self.box, factor), self.class_scores)


@dataclass(frozen=True)
class Annotation:
    box: BoundingBox
    class_label: int

    def __post_init__(self):
        if self.class_label < 1:
            raise ValueError(f"annotation class labels start at 1, got {self.class_label}")

    def rescaled(self, factor: float) -> "Annotation":
        return Annotation(rescale_box(self.box, factor), self.class_label)


@dataclass(frozen=True)
class Assignment:
    detection_index: int
    annotation_index: Optional[int]  # None marks background
    overlap: float

    @property
    def is_foreground(self) -> bool:
        return self.annotation_index is not None


def nms_indices(dets: Sequence[Detection], threshold: float = NMS_THRESHOLD,
                top_k: int = TOP_K) -> list[int]:
    """Greedy per-class NMS; returns surviving indices by descending confidence."""
    if not 0 < threshold <= 1:
        raise ValueError(f"NMS threshold must be in (0, 1], got {threshold}")
    if top_k < 1:
        raise ValueError(f"top_k must be positive, got {top_k}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept_by_class: dict[int, list[int]] = {}
    keep = []
    for i in order:
        cls = dets[i].predicted_class
        kept = kept_by_class.setdefault(cls, [])
        box = dets[i].box
        if any(iou(box, dets[j].box) > threshold for j in kept):
            continue
        kept.append(i)
        keep.append(i)
    return keep[:top_k]


def nms(dets: Sequence[Detection], threshold: float = NMS_THRESHOLD,
        top_k: int = TOP_K) -> list[Detection]:
    return [dets[i] for i in nms_indices(dets, threshold, top_k)]


def assign_foreground(dets: Sequence[Detection], gts: Sequence[Annotation],
                      iou_cutoff: float = FOREGROUND_IOU) -> list[Assignment]:
    """Pair each detection with its best-overlapping annotation if IoU > cutoff.

    Several detections may claim the same annotation. Ties in overlap go to
    the lower annotation index.
    """
    out = []
    for d_idx, det in enumerate(dets):
        best, best_idx = 0.0, None
        for g_idx, gt in enumerate(gts):
            ov = iou(det.box, gt.box)
            if best_idx is None or ov > best:
                best, best_idx = ov, g_idx
        if best_idx is not None and best > iou_cutoff:
            out.append(Assignment(d_idx, best_idx, best))
        else:
            out.append(Assignment(d_idx, None, best))
    return out
