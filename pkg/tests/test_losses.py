import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adascale.detcore import Annotation, Assignment, Detection, assign_foreground
from adascale.geometry import BoundingBox
from adascale.losses import (LossConfig, ScaleMetricReport, box_loss, compute_scale_metric,
                             optimal_scale, smooth_l1)
from oracles import box_loss_ref, scale_metric_ref

GT = Annotation(BoundingBox(0, 0, 10, 10), 1)


def fg(i=0):
    return Assignment(i, 0, 1.0)


def bg(i=0):
    return Assignment(i, None, 0.0)


def test_background_losses():
    d = Detection(BoundingBox(0, 0, 1, 1), (1.0, 0.0))
    assert box_loss(d, bg(), []).total == 0.0
    d = Detection(BoundingBox(0, 0, 1, 1), (0.5, 0.5))
    pb = box_loss(d, bg(), [])
    assert pb.total == pytest.approx(math.log(2), abs=1e-12)
    assert pb.reg_part == 0.0 and not pb.is_foreground


def test_foreground_hand_example():
    # centre shifted by half a width: dx residual 0.5, others 0
    d = Detection(BoundingBox(5, 0, 15, 10), (0.0, 1.0))
    pb = box_loss(d, fg(), [GT])
    assert pb.cls_part == 0.0
    assert pb.total == pytest.approx(0.125, abs=1e-15)


def test_probability_floor_keeps_loss_finite():
    d = Detection(BoundingBox(0, 0, 10, 10), (1.0, 0.0))
    assert box_loss(d, fg(), [GT]).cls_part == pytest.approx(-math.log(1e-12))


def test_smooth_l1_branches():
    assert smooth_l1(0.5) == 0.125
    assert smooth_l1(-2.0) == 1.5
    assert smooth_l1(1.0) == 0.5


@given(st.floats(0.01, 0.99), st.floats(-5, 5), st.floats(-5, 5), st.floats(0.2, 30), st.floats(0.2, 30),
       st.booleans())
def test_box_loss_matches_reference_and_is_nonnegative(p, x, y, w, h, foreground):
    d = Detection(BoundingBox(x, y, x + w, y + h), (1 - p, p))
    a = fg() if foreground else bg()
    pb = box_loss(d, a, [GT])
    ref = box_loss_ref(d.box.as_tuple(), GT.box.as_tuple(), d.class_scores, 1 if foreground else 0)
    assert pb.total == pytest.approx(ref, rel=1e-12, abs=1e-12)
    assert pb.total >= 0


def test_zero_loss_iff_perfect():
    perfect = Detection(GT.box, (0.0, 1.0))
    assert box_loss(perfect, fg(), [GT]).total == 0.0
    shifted = Detection(BoundingBox(0.1, 0, 10.1, 10), (0.0, 1.0))
    assert box_loss(shifted, fg(), [GT]).total > 0


def _report(losses: dict[int, list[float]]) -> ScaleMetricReport:
    """Build per-scale detections whose foreground losses are exactly ``losses``."""
    per_scale, gts = {}, {}
    for m, ls in losses.items():
        dets = [Detection(GT.box, (1 - math.exp(-v), math.exp(-v))) for v in ls]
        per_scale[m] = (dets, [Assignment(i, 0, 1.0) for i in range(len(dets))])
        gts[m] = [GT]
    return compute_scale_metric(per_scale, gts)


def test_metric_hand_example():
    rep = _report({600: [0.2, 0.5, 0.9], 240: [0.3]})
    assert rep.n_min == 1
    assert rep.metric[600] == pytest.approx(0.2, abs=1e-12)
    assert rep.metric[240] == pytest.approx(0.3, abs=1e-12)
    assert rep.m_opt == 600


def test_metric_ties_go_to_smaller_scale():
    rep = _report({600: [0.4, 0.4], 480: [0.4, 0.4], 240: [0.4, 0.4]})
    assert rep.m_opt == 240


def test_scale_without_foreground_is_excluded():
    rep = _report({600: [0.5, 0.6], 240: []})
    assert rep.n_min == 2 and 240 not in rep.metric and rep.m_opt == 600


def test_all_empty_is_degenerate():
    rep = _report({600: [], 480: []})
    assert rep.degenerate and rep.m_opt == 600


def test_optimal_scale_rules():
    mk = lambda metric: ScaleMetricReport(tuple(metric), {}, 1, {}, metric, 0)
    assert optimal_scale(mk({600: 0.2, 240: 0.3})) == 600
    assert optimal_scale(mk({600: 0.3, 240: 0.3})) == 240
    assert optimal_scale(mk({480: 0.9})) == 480


def test_background_boxes_do_not_count():
    dets = [Detection(GT.box, (0.0, 1.0)), Detection(BoundingBox(50, 50, 60, 60), (0.5, 0.5))]
    rep = compute_scale_metric({600: (dets, assign_foreground(dets, [GT]))}, [GT])
    assert rep.foreground_counts[600] == 1


@given(st.integers(0, 2**32 - 1))
def test_metric_matches_enumerator(seed):
    rng = np.random.default_rng(seed)
    scales = sorted(rng.choice([600, 480, 360, 240, 128], size=rng.integers(1, 6), replace=False).tolist())
    losses = {m: list(rng.uniform(0.01, 3.0, size=rng.integers(0, 11))) for m in scales}
    rep = _report(losses)
    actual = {m: list(v) for m, v in rep.foreground_losses.items()}
    n_min, metric, m_opt = scale_metric_ref(actual)
    assert rep.n_min == n_min and rep.metric == metric and rep.m_opt == m_opt
    for m, sel in rep.selected.items():
        assert len(sel) == n_min


@given(st.integers(0, 2**32 - 1))
def test_metric_permutation_invariant_and_extra_large_loss_ignored(seed):
    rng = np.random.default_rng(seed)
    losses = {600: list(rng.uniform(0.1, 2, 4)), 360: list(rng.uniform(0.1, 2, 6))}
    rep = _report(losses)
    shuffled = _report({m: list(rng.permutation(v)) for m, v in losses.items()})
    assert shuffled.metric == rep.metric and shuffled.m_opt == rep.m_opt
    # 360 holds more boxes than n_min, so a worse extra box cannot enter its selection
    grown = _report({600: losses[600], 360: losses[360] + [10.0]})
    assert grown.n_min == rep.n_min and grown.metric == rep.metric


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_reg=-1)
