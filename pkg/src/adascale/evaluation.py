"""VOC-style detection evaluation: matching, AP/mAP, PR curves, TP/FP counts."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .detcore import Annotation, Detection
from .geometry import iou

MATCH_IOU = 0.5
COUNT_THRESHOLD = 0.5
HIST_BINS = 10


def match_detections(dets: Sequence[Detection], gts: Sequence[Annotation],
                     iou_threshold: float = MATCH_IOU) -> list[bool]:
    """Greedy one-to-one matching; returns TP flags aligned with ``dets``.

    Detections are visited by descending confidence and each claims the
    unclaimed same-class annotation of highest IoU (ties to the lower
    annotation index), provided that IoU reaches ``iou_threshold``.
    Confidence ties are broken by box and class scores rather than by
    position, so reordering tied detections cannot change the TP/FP totals.
    """
    flags = [False] * len(dets)
    claimed = [False] * len(gts)
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].confidence, dets[i].box.as_tuple(), dets[i].class_scores, i))
    for i in order:
        det = dets[i]
        cls = det.predicted_class
        best, best_j = iou_threshold, None
        for j, gt in enumerate(gts):
            if claimed[j] or gt.class_label != cls:
                continue
            ov = iou(det.box, gt.box)
            if ov >= best and (best_j is None or ov > best):
                best, best_j = ov, j
        if best_j is not None:
            claimed[best_j] = True
            flags[i] = True
    return flags


def _sorted_flags(flags: Sequence[bool], confidences: Sequence[float]) -> np.ndarray:
    order = sorted(range(len(flags)), key=lambda i: (-confidences[i], i))
    return np.array([bool(flags[i]) for i in order], dtype=bool)


def precision_recall(flags: Sequence[bool], confidences: Sequence[float],
                     n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative recall and precision after each detection, by descending confidence."""
    if n_gt < 1:
        raise ValueError("precision/recall needs at least one ground truth")
    tp_sorted = _sorted_flags(flags, confidences)
    tp = np.cumsum(tp_sorted)
    fp = np.cumsum(~tp_sorted)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def average_precision(flags: Sequence[bool], confidences: Sequence[float], n_gt: int) -> float:
    """All-point interpolated AP (area under the precision envelope)."""
    if len(flags) != len(confidences):
        raise ValueError("flags and confidences differ in length")
    if len(flags) == 0:
        return 0.0
    recall, precision = precision_recall(flags, confidences, n_gt)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return math.fsum(float(v) for v in (mrec[steps + 1] - mrec[steps]) * mpre[steps + 1])


def tp_fp_counts(flags: Sequence[bool], confidences: Sequence[float],
                 threshold: float = COUNT_THRESHOLD) -> tuple[int, int]:
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    tp = fp = 0
    for flag, conf in zip(flags, confidences):
        if conf >= threshold:
            if flag:
                tp += 1
            else:
                fp += 1
    return tp, fp


def scale_histogram(scales: Iterable[float], lo: float, hi: float,
                    bins: int = HIST_BINS) -> tuple[list[float], list[int]]:
    values = np.asarray(list(scales), dtype=float)
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return [float(e) for e in edges], [int(c) for c in counts]


@dataclass
class FrameResult:
    """Detections (native coordinates) and annotations for one evaluated frame."""

    snippet_id: str
    frame_index: int
    scale: int
    detections: Sequence[Detection]
    annotations: Sequence[Annotation]
    workload: float = 0.0


@dataclass
class EvalReport:
    policy: str
    per_class_ap: dict[int, float]
    mean_ap: float
    pr_curves: dict[int, list[tuple[float, float]]]
    n_gt: dict[int, int]
    per_class_tp: dict[int, int]
    per_class_fp: dict[int, int]
    tp: int
    fp: int
    count_threshold: float
    total_workload: float
    scale_trace: list[tuple[str, int, int]]
    histogram_edges: list[float]
    histogram_counts: list[int]
    extras: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.scale_trace)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "mAP": self.mean_ap,
            "per_class": [
                {"class": c, "AP": self.per_class_ap.get(c), "n_gt": self.n_gt.get(c, 0),
                 "TP": self.per_class_tp.get(c, 0), "FP": self.per_class_fp.get(c, 0)}
                for c in sorted(set(self.n_gt) | set(self.per_class_tp))
            ],
            "tp": self.tp,
            "fp": self.fp,
            "count_threshold": self.count_threshold,
            "total_workload": self.total_workload,
            "n_frames": self.n_frames,
            "scale_trace": [
                {"snippet_id": s, "frame_index": f, "scale": m} for s, f, m in self.scale_trace
            ],
            "histogram": {"edges": self.histogram_edges, "counts": self.histogram_counts},
            "pr_curves": {str(c): [[r, p] for r, p in pts] for c, pts in sorted(self.pr_curves.items())},
        }

    def write_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_class_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "AP", "TP", "FP"])
            for c in sorted(set(self.n_gt) | set(self.per_class_tp)):
                ap = self.per_class_ap.get(c)
                w.writerow([c, "" if ap is None else repr(ap),
                            self.per_class_tp.get(c, 0), self.per_class_fp.get(c, 0)])

    def write_pr_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "rank", "recall", "precision"])
            for c, pts in sorted(self.pr_curves.items()):
                for k, (r, p) in enumerate(pts):
                    w.writerow([c, k, repr(r), repr(p)])

    def write_histogram_csv(self, path: Path) -> None:
        write_histogram_csv(path, self.histogram_edges, self.histogram_counts)


def write_histogram_csv(path: Path, edges: Sequence[float], counts: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, n in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(lo), repr(hi), n])


def evaluate(results: Sequence[FrameResult], policy: str = "", scale_range: Optional[tuple[int, int]] = None,
             iou_threshold: float = MATCH_IOU, count_threshold: float = COUNT_THRESHOLD,
             bins: int = HIST_BINS) -> EvalReport:
    """Aggregate per-frame results into per-class AP, mAP and TP/FP counts."""
    per_class: dict[int, tuple[list[bool], list[float]]] = {}
    n_gt: dict[int, int] = {}
    for fr in results:
        for gt in fr.annotations:
            n_gt[gt.class_label] = n_gt.get(gt.class_label, 0) + 1
        flags = match_detections(fr.detections, fr.annotations, iou_threshold)
        for det, flag in zip(fr.detections, flags):
            fl, cf = per_class.setdefault(det.predicted_class, ([], []))
            fl.append(flag)
            cf.append(det.confidence)

    aps, curves, tps, fps = {}, {}, {}, {}
    for c in sorted(set(n_gt) | set(per_class)):
        flags, confs = per_class.get(c, ([], []))
        tps[c], fps[c] = tp_fp_counts(flags, confs, count_threshold)
        if n_gt.get(c, 0) == 0:
            continue
        aps[c] = average_precision(flags, confs, n_gt[c])
        if flags:
            rec, prec = precision_recall(flags, confs, n_gt[c])
            curves[c] = [(float(r), float(p)) for r, p in zip(rec, prec)]
        else:
            curves[c] = []
    mean_ap = float(np.mean([aps[c] for c in sorted(aps)])) if aps else 0.0

    trace = [(fr.snippet_id, fr.frame_index, fr.scale) for fr in results]
    if scale_range is None:
        scales = [fr.scale for fr in results] or [0]
        scale_range = (min(scales), max(scales))
    edges, counts = scale_histogram((fr.scale for fr in results), scale_range[0], scale_range[1], bins)
    return EvalReport(
        policy=policy,
        per_class_ap=aps,
        mean_ap=mean_ap,
        pr_curves=curves,
        n_gt=n_gt,
        per_class_tp=tps,
        per_class_fp=fps,
        tp=sum(tps.values()),
        fp=sum(fps.values()),
        count_threshold=count_threshold,
        total_workload=float(sum(fr.workload for fr in results)),
        scale_trace=trace,
        histogram_edges=edges,
        histogram_counts=counts,
    )
