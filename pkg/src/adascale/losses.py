"""Detector loss, the foreground-matched scale metric and optimal-scale choice.

Each box loss is cross-entropy on the assigned class plus, for foreground
boxes, ``lambda_reg`` times smooth-L1 on centre-offset / log-size residuals.
To compare scales that produce different numbers of foreground boxes, the
metric at every scale sums only the ``n_min`` lowest foreground losses,
where ``n_min`` is the smallest foreground count over the scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .detcore import BACKGROUND, Annotation, Assignment, Detection
from .geometry import BoundingBox

PROB_FLOOR = 1e-12
_SIZE_FLOOR = 1e-9


@dataclass(frozen=True)
class LossConfig:
    lambda_reg: float = 1.0
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if not self.lambda_reg >= 0:
            raise ValueError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if not self.smooth_l1_beta > 0:
            raise ValueError("smooth_l1_beta must be positive")


@dataclass(frozen=True)
class PerBoxLoss:
    detection_index: int
    total: float
    cls_part: float
    reg_part: float
    is_foreground: bool


def smooth_l1(x: float, beta: float = 1.0) -> float:
    ax = abs(x)
    if ax < beta:
        return 0.5 * ax * ax / beta
    return ax - 0.5 * beta


def box_residuals(pred: BoundingBox, target: BoundingBox) -> tuple[float, float, float, float]:
    """Centre offsets normalised by target size and log size ratios."""
    tw = max(target.width, _SIZE_FLOOR)
    th = max(target.height, _SIZE_FLOOR)
    pw = max(pred.width, _SIZE_FLOOR)
    ph = max(pred.height, _SIZE_FLOOR)
    pcx, pcy = pred.center
    tcx, tcy = target.center
    return ((pcx - tcx) / tw, (pcy - tcy) / th, math.log(pw / tw), math.log(ph / th))


def box_loss(det: Detection, assignment: Assignment, gts: Sequence[Annotation],
             cfg: LossConfig = LossConfig()) -> PerBoxLoss:
    if not all(math.isfinite(p) for p in det.class_scores):
        raise ValueError("non-finite class scores")
    if assignment.is_foreground:
        gt = gts[assignment.annotation_index]
        u = gt.class_label
        if u >= len(det.class_scores):
            raise ValueError(f"class {u} outside the detection's score vector")
        reg = sum(smooth_l1(r, cfg.smooth_l1_beta) for r in box_residuals(det.box, gt.box))
    else:
        u = BACKGROUND
        reg = 0.0
    cls = -math.log(max(det.class_scores[u], PROB_FLOOR))
    # -log(1.0) is -0.0
    cls = max(cls, 0.0)
    return PerBoxLoss(assignment.detection_index, cls + cfg.lambda_reg * reg, cls, reg,
                      assignment.is_foreground)


@dataclass
class ScaleMetricReport:
    scales: tuple[int, ...]
    foreground_counts: dict[int, int]
    n_min: int
    selected: dict[int, tuple[int, ...]]
    metric: dict[int, float]
    m_opt: int
    degenerate: bool = False
    foreground_losses: dict[int, tuple[float, ...]] = field(default_factory=dict)


def optimal_scale(report: ScaleMetricReport) -> int:
    """Scale with the lowest metric; ties go to the smaller scale."""
    if report.degenerate or not report.metric:
        return max(report.scales)
    return min(report.metric, key=lambda m: (report.metric[m], m))


def compute_scale_metric(
    per_scale_results: Mapping[int, tuple[Sequence[Detection], Sequence[Assignment]]],
    gts: Sequence[Annotation],
    cfg: LossConfig = LossConfig(),
) -> ScaleMetricReport:
    """Evaluate the foreground-matched loss metric for one image at every scale.

    ``gts`` must be expressed in the same coordinate frame as each scale's
    detections; callers typically pass a mapping whose values were computed
    against per-scale rescaled annotations, so ``gts`` may also be a mapping
    from scale to annotations.
    """
    if not per_scale_results:
        raise ValueError("at least one scale is required")
    scales = tuple(sorted(per_scale_results, reverse=True))
    fg_losses: dict[int, list[tuple[float, int]]] = {}
    for m in scales:
        dets, assignments = per_scale_results[m]
        scale_gts = gts[m] if isinstance(gts, Mapping) else gts
        losses = []
        for a in assignments:
            if a.is_foreground:
                pb = box_loss(dets[a.detection_index], a, scale_gts, cfg)
                losses.append((pb.total, a.detection_index))
        losses.sort()
        fg_losses[m] = losses
    counts = {m: len(fg_losses[m]) for m in scales}
    populated = [m for m in scales if counts[m] > 0]
    if not populated:
        return ScaleMetricReport(scales, counts, 0, {}, {}, max(scales), degenerate=True,
                                 foreground_losses={m: () for m in scales})
    n_min = min(counts[m] for m in populated)
    selected = {m: tuple(idx for _, idx in fg_losses[m][:n_min]) for m in populated}
    metric = {m: math.fsum(loss for loss, _ in fg_losses[m][:n_min]) for m in populated}
    report = ScaleMetricReport(
        scales, counts, n_min, selected, metric, 0,
        foreground_losses={m: tuple(loss for loss, _ in fg_losses[m]) for m in scales},
    )
    report.m_opt = optimal_scale(report)
    return report
