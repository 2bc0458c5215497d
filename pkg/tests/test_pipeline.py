import numpy as np
import pytest

from adascale.detcore import Annotation
from adascale.geometry import BoundingBox, ImageSize
from adascale.pipeline import (ExperimentSettings, LabeledFrame, PolicyConfig, compare_policies,
                               frame_scale_report, generate_scale_labels, read_labels, replay_trace,
                               run_policy, train_regressor, write_labels)
from adascale.regressor import TrainerState
from adascale.scalecodec import S_REG, ScaleSet, encode_scale_target
from adascale.simdet import (CorpusConfig, CorpusFormatError, DetectorProfile, Frame, SyntheticDetector,
                             VideoSnippet, generate_corpus, split_snippets)

PROFILE = DetectorProfile()
DET = SyntheticDetector(PROFILE)
SS = ScaleSet(S_REG)
NATIVE = ImageSize(1280, 720)


def square_snippet(sides, sid="g", native=NATIVE):
    frames = []
    for k, s in enumerate(sides):
        anns = () if s is None else (Annotation(BoundingBox.from_center(native.width / 2, native.height / 2, s, s), 1),)
        frames.append(Frame(sid, k, native, anns))
    return VideoSnippet(sid, native, frames)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(CorpusConfig(n_snippets=30, n_frames=8), 1)


@pytest.fixture(scope="module")
def trained(small_corpus):
    labels = generate_scale_labels(small_corpus, DET, SS, seed=0)
    model, trace = train_regressor(labels, TrainerState(seed=0))
    return model, labels, trace


@pytest.fixture(scope="module")
def grown_model():
    corpus = generate_corpus(CorpusConfig(n_snippets=100), 0)
    model, _ = train_regressor(generate_scale_labels(corpus, DET, SS, seed=0))
    return model


# --- labels ----------------------------------------------------------------

def test_huge_object_prefers_a_smaller_scale():
    frame = square_snippet([650]).frames[0]
    report, feats = frame_scale_report(DET, frame, SS)
    assert not report.degenerate
    assert report.m_opt < SS.m_max
    assert set(feats) == set(S_REG)


def test_empty_frame_is_degenerate_at_largest_scale():
    frame = square_snippet([None]).frames[0]
    report, _ = frame_scale_report(DET, frame, SS)
    assert report.degenerate and report.m_opt == SS.m_max


def test_labels_are_deterministic_and_consistent(small_corpus):
    a = generate_scale_labels(small_corpus[:4], PROFILE, SS, seed=5)
    b = generate_scale_labels(small_corpus[:4], PROFILE, SS, seed=5)
    assert [(x.input_scale, x.optimal_scale, x.target) for x in a] == \
           [(y.input_scale, y.optimal_scale, y.target) for y in b]
    assert all(np.array_equal(x.features, y.features) for x, y in zip(a, b))
    for lab in a:
        assert lab.input_scale in SS and lab.optimal_scale in SS
        assert lab.target == encode_scale_target(lab.input_scale, lab.optimal_scale, SS)
        assert lab.features.shape == (PROFILE.feature_channels, PROFILE.feature_grid, PROFILE.feature_grid)


def test_label_input_scales_cover_the_set(small_corpus):
    labs = generate_scale_labels(small_corpus, DET, SS, seed=2)
    assert {lab.input_scale for lab in labs} == set(S_REG)


def test_labels_round_trip(tmp_path, small_corpus):
    labs = generate_scale_labels(small_corpus[:2], DET, SS, seed=0)
    path = tmp_path / "labels.jsonl"
    write_labels(labs, path, SS)
    back, scales = read_labels(path)
    assert scales.scales == SS.scales
    for x, y in zip(labs, back):
        assert (x.snippet_id, x.frame_index, x.input_scale, x.optimal_scale, x.target, x.degenerate) == \
               (y.snippet_id, y.frame_index, y.input_scale, y.optimal_scale, y.target, y.degenerate)
        assert np.array_equal(x.features, y.features)


def test_label_file_errors(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"label_scales": [600, 128]}\n{"snippet_id": "a"\n')
    with pytest.raises(CorpusFormatError):
        read_labels(bad)
    headless = tmp_path / "headless.jsonl"
    rec = LabeledFrame("a", 0, 600, np.zeros((1, 2, 2)), 600, 0.0).to_record()
    headless.write_text(__import__("json").dumps(rec) + "\n")
    with pytest.raises(CorpusFormatError):
        read_labels(headless)


def test_empty_inputs_raise():
    with pytest.raises(ValueError):
        generate_scale_labels([], DET, SS)
    with pytest.raises(ValueError):
        train_regressor([])


# --- policies --------------------------------------------------------------

def test_fixed_workload_on_square_frames():
    native = ImageSize(800, 800)
    snip = square_snippet([100, 120, None, 90], native=native)
    for m in S_REG:
        rep = run_policy([snip], DET, PolicyConfig("fixed", SS, fixed_scale=m))
        assert rep.total_workload == 4 * m * m
        assert [s for _, _, s in rep.scale_trace] == [m] * 4


def test_single_frame_adascale_runs_at_largest_scale(trained):
    model = trained[0]
    rep = run_policy([square_snippet([200])], DET, PolicyConfig("adascale", SS, model=model))
    assert [s for _, _, s in rep.scale_trace] == [SS.m_max]
    assert len(rep.extras["features"]) == len(rep.extras["outputs"]) == 1


def test_adascale_restarts_each_snippet(trained, small_corpus):
    model = trained[0]
    rep = run_policy(small_corpus[:5], DET, PolicyConfig("adascale", SS, model=model))
    firsts = [s for _, k, s in rep.scale_trace if k == 0]
    assert firsts == [SS.m_max] * 5


def test_adascale_shrinks_scale_as_object_grows(grown_model):
    sides = [min(40 * 1.12 ** k, 700) for k in range(30)]
    rep = run_policy([square_snippet(sides)], DET, PolicyConfig("adascale", SS, model=grown_model))
    trace = np.array([s for _, _, s in rep.scale_trace], dtype=float)
    # noisy per frame, but the decision must follow object size down
    assert trace[-5:].mean() < trace[5:10].mean() < trace[0]
    assert trace[-1] <= 240
    assert np.corrcoef(np.arange(len(trace)), trace)[0, 1] < -0.8


def test_replay_matches_logged_trace(trained, small_corpus):
    model = trained[0]
    rep = run_policy(small_corpus, DET, PolicyConfig("adascale", SS, model=model))
    replayed = replay_trace(small_corpus, model, rep.extras["features"], SS, DET)
    assert replayed == [s for _, _, s in rep.scale_trace]


class RecordingDetector:
    def __init__(self, inner):
        self.inner, self.calls = inner, {}

    def detect(self, frame, at_scale):
        out = self.inner.detect(frame, at_scale)
        self.calls.setdefault((frame.snippet_id, frame.frame_index, at_scale), []).append(out)
        return out

    def resize(self, native, at_scale):
        return self.inner.resize(native, at_scale)


def test_policies_see_identical_detections_at_equal_scales(small_corpus, trained):
    """A frame at a given scale yields the same output no matter which policy asked."""
    rec = RecordingDetector(SyntheticDetector(PROFILE))
    policies = [PolicyConfig("adascale", SS, model=trained[0]), PolicyConfig("random", SS),
                PolicyConfig("multiscale", SS)] + [PolicyConfig("fixed", SS, fixed_scale=m) for m in S_REG]
    for pol in policies:
        run_policy(small_corpus, rec, pol, seed=9)
    shared = [outs for outs in rec.calls.values() if len(outs) > 2]
    assert shared
    for outs in shared:
        dets0, feats0 = outs[0]
        for dets, feats in outs[1:]:
            assert dets == dets0 and np.array_equal(feats, feats0)


def test_random_workload_matches_uniform_mean():
    corpus = generate_corpus(CorpusConfig(n_snippets=100, n_frames=20, objects=0), 4)
    n = sum(len(s.frames) for s in corpus)
    assert n >= 1000
    rep = run_policy(corpus, DET, PolicyConfig("random", SS), seed=3)
    per_scale = np.mean([DET.resize(NATIVE, m)[0].pixels for m in S_REG])
    assert abs(rep.total_workload / n - per_scale) <= 0.05 * per_scale
    assert {s for _, _, s in rep.scale_trace} == set(S_REG)


def test_random_policy_is_seeded(small_corpus):
    a = run_policy(small_corpus, DET, PolicyConfig("random", SS), seed=1).scale_trace
    b = run_policy(small_corpus, DET, PolicyConfig("random", SS), seed=1).scale_trace
    c = run_policy(small_corpus, DET, PolicyConfig("random", SS), seed=2).scale_trace
    assert a == b and a != c


def test_multiscale_workload_is_sum_of_scales(small_corpus):
    rep = run_policy(small_corpus[:3], DET, PolicyConfig("multiscale", SS))
    n = sum(len(s.frames) for s in small_corpus[:3])
    assert rep.total_workload == n * sum(DET.resize(NATIVE, m)[0].pixels for m in S_REG)


def test_policy_parsing():
    assert PolicyConfig.parse("fixed:600").name == "fixed:600"
    assert PolicyConfig.parse("adascale:600/360").scales.scales == (600, 360)
    assert PolicyConfig.parse("random").scales.scales == SS.scales
    for bad in ("fixed", "bogus", "adascale:600/600/x"):
        with pytest.raises(ValueError):
            PolicyConfig.parse(bad)
    with pytest.raises(ValueError):
        PolicyConfig("adascale", SS, initial_scale=128)


def test_policy_errors(small_corpus):
    with pytest.raises(ValueError):
        run_policy(small_corpus, DET, PolicyConfig("adascale", SS))
    with pytest.raises(ValueError):
        run_policy([], DET, PolicyConfig("fixed", SS, fixed_scale=600))
    with pytest.raises(ValueError):
        compare_policies([], PROFILE, ["fixed:600", "random"], [0])
    with pytest.raises(ValueError):
        compare_policies(small_corpus, PROFILE, ["fixed:600"], [0])


# --- comparison ------------------------------------------------------------

def test_compare_baseline_against_itself(small_corpus):
    cmp = compare_policies(small_corpus, PROFILE, ["fixed:600", "fixed:600"], [0, 1])
    a, b = cmp.rows
    assert a.maps == b.maps and a.workloads == b.workloads
    row = cmp.table()[1]
    assert row["workload_ratio"] == 1.0 and row["tp_norm"] == 1.0 and row["fp_norm"] == 1.0


def test_compare_trains_on_train_split_only(small_corpus):
    """The validation split alone decides the evaluated frames."""
    _, val = split_snippets(small_corpus, 0.8)
    cmp = compare_policies(small_corpus, PROFILE, ["fixed:600", "adascale"], [0],
                           ExperimentSettings(trainer=TrainerState(epochs=0.5)))
    n_val = sum(len(s.frames) for s in val)
    assert all(r.reports[0].n_frames == n_val for r in cmp.rows)


def test_multiscale_not_worse_than_best_fixed():
    corpus = generate_corpus(CorpusConfig(n_snippets=60, n_frames=10), 2)
    policies = ["multiscale"] + [f"fixed:{m}" for m in S_REG]
    cmp = compare_policies(corpus, PROFILE, policies, list(range(5)))
    best_fixed = max(cmp.row(f"fixed:{m}").map_mean for m in S_REG)
    assert 100 * cmp.rows[0].map_mean >= 100 * best_fixed - 0.5
