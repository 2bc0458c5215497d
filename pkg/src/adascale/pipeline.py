"""Label generation, regressor training and per-policy video evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .detcore import NMS_THRESHOLD, TOP_K, Detection, assign_foreground, nms
from .evaluation import EvalReport, FrameResult, evaluate
from .losses import LossConfig, compute_scale_metric
from .regressor import RegressorConfig, RegressorModel, TrainerState, forward, init_model, train
from .scalecodec import S_REG, ScaleSet, decode_scale, encode_scale_target
from .simdet import (CorpusFormatError, Detector, DetectorProfile, Frame, SyntheticDetector,
                     VideoSnippet, split_snippets)

POLICY_KINDS = ("fixed", "random", "adascale", "multiscale")


@dataclass
class PolicyConfig:
    kind: str
    scales: ScaleSet = field(default_factory=lambda: ScaleSet(S_REG))
    fixed_scale: Optional[int] = None
    model: Optional[RegressorModel] = None
    initial_scale: Optional[int] = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not isinstance(self.scales, ScaleSet):
            self.scales = ScaleSet(self.scales)
        if self.kind == "fixed":
            if self.fixed_scale is None:
                raise ValueError("fixed policy needs a scale")
            if not self.scales.m_min <= self.fixed_scale <= self.scales.m_max:
                raise ValueError(f"fixed scale {self.fixed_scale} outside [{self.scales.m_min}, {self.scales.m_max}]")
        if self.kind == "adascale":
            if self.initial_scale is None:
                self.initial_scale = self.scales.m_max
            if self.initial_scale != self.scales.m_max:
                raise ValueError("adascale starts every snippet at the largest scale of its set")

    @property
    def name(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.fixed_scale}"
        return f"{self.kind}:{'/'.join(str(s) for s in self.scales)}"

    @classmethod
    def parse(cls, token: str, default_scales: ScaleSet = ScaleSet(S_REG)) -> "PolicyConfig":
        """``fixed:600``, ``random``, ``adascale:600/360``, ``multiscale`` ..."""
        kind, _, arg = token.strip().partition(":")
        if kind == "fixed":
            if not arg:
                raise ValueError("fixed policy needs a scale, e.g. fixed:600")
            m = int(arg)
            scales = default_scales if default_scales.m_min <= m <= default_scales.m_max else ScaleSet([m])
            return cls("fixed", scales, fixed_scale=m)
        scales = ScaleSet.parse(arg) if arg else default_scales
        return cls(kind, scales)


@dataclass
class LabeledFrame:
    snippet_id: str
    frame_index: int
    input_scale: int
    features: np.ndarray
    optimal_scale: int
    target: float
    degenerate: bool = False

    def to_record(self) -> dict:
        return {
            "snippet_id": self.snippet_id,
            "frame_index": self.frame_index,
            "input_scale": self.input_scale,
            "optimal_scale": self.optimal_scale,
            "target": self.target,
            "degenerate": self.degenerate,
            "feature_shape": list(self.features.shape),
            "features": [float(v) for v in self.features.ravel()],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LabeledFrame":
        shape = tuple(int(s) for s in rec["feature_shape"])
        feats = np.asarray(rec["features"], dtype=np.float64)
        if feats.size != int(np.prod(shape)):
            raise ValueError("feature count does not match feature_shape")
        return cls(str(rec["snippet_id"]), int(rec["frame_index"]), int(rec["input_scale"]),
                   feats.reshape(shape), int(rec["optimal_scale"]), float(rec["target"]),
                   bool(rec.get("degenerate", False)))


def write_labels(labels: Sequence[LabeledFrame], path, scales: ScaleSet) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"label_scales": list(scales.scales)}) + "\n")
        for lab in labels:
            fh.write(json.dumps(lab.to_record(), sort_keys=True) + "\n")


def read_labels(path) -> tuple[list[LabeledFrame], ScaleSet]:
    labels, scales = [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if lineno == 1 and "label_scales" in rec:
                    scales = ScaleSet(rec["label_scales"])
                    continue
                labels.append(LabeledFrame.from_record(rec))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
    if scales is None:
        raise CorpusFormatError(f"{path}: missing label_scales header")
    if not labels:
        raise CorpusFormatError(f"{path}: no labelled frames")
    return labels, scales


def _as_detector(detector: Union[Detector, DetectorProfile]) -> Detector:
    if isinstance(detector, DetectorProfile):
        return SyntheticDetector(detector)
    return detector


def frame_scale_report(detector: Detector, frame: Frame, scales: ScaleSet,
                       loss_cfg: LossConfig = LossConfig()):
    """Detect at every scale and evaluate the foreground-matched metric.

    Returns the metric report and the per-scale feature maps.
    """
    per_scale, gts, feats = {}, {}, {}
    for m in scales:
        dets, f = detector.detect(frame, m)
        _, factor = detector.resize(frame.native, m)
        scaled = [a.rescaled(factor) for a in frame.annotations]
        per_scale[m] = (dets, assign_foreground(dets, scaled))
        gts[m] = scaled
        feats[m] = f
    return compute_scale_metric(per_scale, gts, loss_cfg), feats


def generate_scale_labels(snippets: Sequence[VideoSnippet], detector: Union[Detector, DetectorProfile],
                          label_scales: ScaleSet = ScaleSet(S_REG), seed: int = 0,
                          loss_cfg: LossConfig = LossConfig()) -> list[LabeledFrame]:
    """Optimal-scale label and regressor input for every frame.

    The regressor's input scale is drawn uniformly from ``label_scales``
    independently of the optimal scale, so the regressor sees every kind of
    up- and down-scaling decision.
    """
    if not snippets:
        raise ValueError("empty corpus")
    detector = _as_detector(detector)
    rng = np.random.default_rng(seed)
    labels = []
    for snip in snippets:
        for frame in snip.frames:
            report, feats = frame_scale_report(detector, frame, label_scales, loss_cfg)
            m_i = label_scales.scales[int(rng.integers(len(label_scales)))]
            labels.append(LabeledFrame(
                frame.snippet_id, frame.frame_index, m_i, feats[m_i], report.m_opt,
                encode_scale_target(m_i, report.m_opt, label_scales), report.degenerate))
    return labels


def train_regressor(labels: Sequence[LabeledFrame], trainer: Optional[TrainerState] = None,
                    config: Optional[RegressorConfig] = None, init_seed: Optional[int] = None
                    ) -> tuple[RegressorModel, list[float]]:
    if not labels:
        raise ValueError("no labelled frames to train on")
    trainer = trainer or TrainerState()
    if config is None:
        config = RegressorConfig(channels=labels[0].features.shape[0])
    model = init_model(config, trainer.seed if init_seed is None else init_seed)
    return train(model, [(lab.features, lab.target) for lab in labels], trainer)


def _frame_result(frame: Frame, dets: Sequence[Detection], factor: float, scale: int, work: float) -> FrameResult:
    native_dets = [d.rescaled(1.0 / factor) for d in dets]
    return FrameResult(frame.snippet_id, frame.frame_index, scale, native_dets, frame.annotations, work)


def run_policy(snippets: Sequence[VideoSnippet], detector: Union[Detector, DetectorProfile],
               policy: PolicyConfig, seed: int = 0, count_threshold: float = 0.5) -> EvalReport:
    """Process every frame under one scale policy and evaluate in native coordinates.

    For adascale the report's ``extras`` holds the per-frame features and
    regressor outputs so the scale trace can be replayed.
    """
    if not snippets:
        raise ValueError("empty corpus")
    if policy.kind == "adascale" and policy.model is None:
        raise ValueError("adascale policy needs a trained regressor")
    detector = _as_detector(detector)
    rng = np.random.default_rng(seed)
    ss = policy.scales
    results: list[FrameResult] = []
    features, outputs = [], []

    for snip in snippets:
        target = policy.initial_scale
        for frame in snip.frames:
            if policy.kind == "multiscale":
                merged, work = [], 0.0
                for m in ss:
                    dets, _ = detector.detect(frame, m)
                    resized, factor = detector.resize(frame.native, m)
                    merged.extend(d.rescaled(1.0 / factor) for d in dets)
                    work += resized.pixels
                merged = nms(merged, NMS_THRESHOLD, TOP_K)
                results.append(FrameResult(frame.snippet_id, frame.frame_index, ss.m_max,
                                           merged, frame.annotations, work))
                continue
            if policy.kind == "fixed":
                m = policy.fixed_scale
            elif policy.kind == "random":
                m = ss.scales[int(rng.integers(len(ss)))]
            else:
                m = target
            dets, feats = detector.detect(frame, m)
            resized, factor = detector.resize(frame.native, m)
            results.append(_frame_result(frame, dets, factor, m, float(resized.pixels)))
            if policy.kind == "adascale":
                t = forward(policy.model, feats)
                base_size = min(resized.width, resized.height)
                target = decode_scale(t, base_size, ss)
                features.append(feats)
                outputs.append(t)

    report = evaluate(results, policy.name, (ss.m_min, ss.m_max), count_threshold=count_threshold)
    if policy.kind == "adascale":
        report.extras["features"] = features
        report.extras["outputs"] = outputs
    return report


def replay_trace(snippets: Sequence[VideoSnippet], model: RegressorModel, features: Sequence[np.ndarray],
                 scales: ScaleSet, detector: Detector) -> list[int]:
    """Recompute an adascale scale trace from logged features alone."""
    trace, k = [], 0
    for snip in snippets:
        m = scales.m_max
        for frame in snip.frames:
            trace.append(m)
            resized, _ = detector.resize(frame.native, m)
            m = decode_scale(forward(model, features[k]), min(resized.width, resized.height), scales)
            k += 1
    return trace


@dataclass
class PolicyRow:
    policy: str
    maps: list[float]
    workloads: list[float]
    tps: list[int]
    fps: list[int]
    reports: list[EvalReport]
    tp_norm: float = float("nan")
    fp_norm: float = float("nan")

    @property
    def map_mean(self) -> float:
        return float(np.mean(self.maps))

    @property
    def map_std(self) -> float:
        return float(np.std(self.maps))

    @property
    def workload_mean(self) -> float:
        return float(np.mean(self.workloads))

    @property
    def workload_std(self) -> float:
        return float(np.std(self.workloads))


@dataclass
class Comparison:
    rows: list[PolicyRow]
    seeds: list[int]
    baseline: str

    def row(self, policy: str) -> PolicyRow:
        for r in self.rows:
            if r.policy == policy:
                return r
        raise KeyError(policy)

    def table(self) -> list[dict]:
        base = self.rows[0]
        out = []
        for r in self.rows:
            out.append({
                "policy": r.policy,
                "seeds": len(r.maps),
                "map_pct_mean": 100 * r.map_mean,
                "map_pct_std": 100 * r.map_std,
                "workload_mean": r.workload_mean,
                "workload_std": r.workload_std,
                "workload_ratio": r.workload_mean / base.workload_mean if base.workload_mean else float("nan"),
                "tp_mean": float(np.mean(r.tps)),
                "fp_mean": float(np.mean(r.fps)),
                "tp_norm": r.tp_norm,
                "fp_norm": r.fp_norm,
            })
        return out


@dataclass
class ExperimentSettings:
    label_scales: Optional[ScaleSet] = None
    trainer: TrainerState = field(default_factory=TrainerState)
    regressor: Optional[RegressorConfig] = None
    train_fraction: float = 0.8
    count_threshold: float = 0.5


def prepare_adascale(train_snippets: Sequence[VideoSnippet], detector: Detector, scales: ScaleSet,
                     seed: int, settings: ExperimentSettings) -> RegressorModel:
    labels = generate_scale_labels(train_snippets, detector, settings.label_scales or scales, seed)
    trainer = TrainerState(**{**settings.trainer.__dict__, "seed": seed, "epoch": 0.0, "step": 0})
    model, _ = train_regressor(labels, trainer, settings.regressor)
    return model


def compare_policies(snippets: Sequence[VideoSnippet], profile: DetectorProfile,
                     policies: Sequence[Union[str, PolicyConfig]], seeds: Sequence[int],
                     settings: Optional[ExperimentSettings] = None) -> Comparison:
    """Run each policy for each seed on the validation split; the first policy is the baseline.

    Adascale policies without a model get one trained per seed on labels
    generated from the training split with the policy's scale set.
    """
    if len(policies) < 2:
        raise ValueError("compare needs at least two policies")
    if not seeds:
        raise ValueError("compare needs at least one seed")
    settings = settings or ExperimentSettings()
    configs = [PolicyConfig.parse(p) if isinstance(p, str) else p for p in policies]
    train_split, val_split = split_snippets(snippets, settings.train_fraction)
    if not val_split:
        raise ValueError("validation split is empty; use more snippets")
    rows = [PolicyRow(c.name, [], [], [], [], []) for c in configs]
    for seed in seeds:
        detector = SyntheticDetector(profile.with_seed(seed))
        models: dict[str, RegressorModel] = {}
        for cfg, row in zip(configs, rows):
            pol = cfg
            if cfg.kind == "adascale" and cfg.model is None:
                key = str(cfg.scales)
                if key not in models:
                    models[key] = prepare_adascale(train_split, detector, cfg.scales, seed, settings)
                pol = PolicyConfig("adascale", cfg.scales, model=models[key])
            rep = run_policy(val_split, detector, pol, seed, settings.count_threshold)
            rep.extras.pop("features", None)
            row.maps.append(rep.mean_ap)
            row.workloads.append(rep.total_workload)
            row.tps.append(rep.tp)
            row.fps.append(rep.fp)
            row.reports.append(rep)
    base = rows[0]
    for r in rows:
        btp, bfp = float(np.mean(base.tps)), float(np.mean(base.fps))
        r.tp_norm = float(np.mean(r.tps)) / btp if btp else float("nan")
        r.fp_norm = float(np.mean(r.fps)) / bfp if bfp else float("nan")
    return Comparison(rows, list(seeds), base.policy)
