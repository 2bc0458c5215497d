"""Synthetic video corpora and an analytic detector that is not scale-invariant.

The detector never looks at pixels. It derives detections from the frame's
annotations and the apparent (resized) object size:

* confidence peaks inside a sweet-spot band of apparent sizes and decays
  outside it, with out-of-band objects also prone to class confusion;
* localisation jitter, relative to box size, shrinks as objects get larger;
* spurious detections arrive at a rate proportional to the resized area.

Deep features are a G x G grid with one channel per apparent-size octave,
so object size is linearly readable from them. All randomness comes from a
hash of (seed, snippet id, frame index, scale), which makes detection at one
frame and scale independent of every other call.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .detcore import Annotation, Detection, nms
from .geometry import BoundingBox, ImageSize, compute_resize, rescale_box


class CorpusFormatError(ValueError):
    """A corpus, profile or label file could not be parsed."""


@dataclass(frozen=True)
class Frame:
    snippet_id: str
    frame_index: int
    native: ImageSize
    annotations: tuple[Annotation, ...] = ()


@dataclass
class SceneObject:
    class_label: int
    first_frame: int
    centers: list[tuple[float, float]]
    sizes: list[tuple[float, float]]

    @property
    def last_frame(self) -> int:
        return self.first_frame + len(self.centers) - 1

    def visible(self, k: int) -> bool:
        return self.first_frame <= k <= self.last_frame


@dataclass
class VideoSnippet:
    snippet_id: str
    native: ImageSize
    frames: list[Frame]
    objects: list[SceneObject] = field(default_factory=list)
    regime: str = ""

    def __post_init__(self):
        if not self.frames:
            raise ValueError(f"snippet {self.snippet_id} has no frames")


@dataclass(frozen=True)
class DetectorProfile:
    """Parameters of the synthetic detector's scale response."""

    n_classes: int = 4
    sweet_lo: float = 64.0
    sweet_hi: float = 160.0
    peak_confidence: float = 0.95
    in_band_drop: float = 0.25
    falloff: float = 0.7
    confidence_jitter: float = 0.01
    min_confidence: float = 0.3
    localization_coef: float = 4.0
    fp_rate: float = 4.0
    fp_confidence_cap: float = 0.8
    fp_confidence_power: float = 3.0
    fp_min_size: float = 16.0
    confusion_rate: float = 0.6
    confusion_weights: Optional[tuple[tuple[float, ...], ...]] = None
    feature_grid: int = 16
    feature_channels: int = 8
    feature_base_size: float = 8.0
    feature_gain: float = 100.0
    texture_size: float = 48.0
    texture_level: float = 0.3
    object_vote: float = 1.0
    nms_threshold: float = 0.3
    top_k: int = 300
    max_long_side: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if not 0 < self.sweet_lo < self.sweet_hi:
            raise ValueError("need 0 < sweet_lo < sweet_hi")
        if not 0 < self.peak_confidence <= 1:
            raise ValueError("peak_confidence must be in (0, 1]")
        if not 0 <= self.in_band_drop < 1:
            raise ValueError("in_band_drop must be in [0, 1)")
        for name in ("falloff", "feature_base_size", "texture_size", "fp_min_size",
                     "fp_confidence_power"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("confidence_jitter", "localization_coef", "fp_rate", "confusion_rate",
                     "texture_level", "object_vote", "feature_gain", "min_confidence"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if self.feature_grid < 1 or self.feature_channels < 1 or self.top_k < 1:
            raise ValueError("feature_grid, feature_channels and top_k must be >= 1")
        if self.confusion_weights is not None:
            cw = tuple(tuple(float(v) for v in row) for row in self.confusion_weights)
            if len(cw) != self.n_classes or any(len(r) != self.n_classes for r in cw):
                raise ValueError("confusion_weights must be n_classes x n_classes")
            if any(v < 0 for r in cw for v in r):
                raise ValueError("confusion weights must be >= 0")
            object.__setattr__(self, "confusion_weights", cw)

    @property
    def sweet_center(self) -> float:
        return math.sqrt(self.sweet_lo * self.sweet_hi)

    @property
    def confidence_floor(self) -> float:
        # the predicted class must strictly dominate the other K entries
        return max(self.min_confidence, 1.0 / (self.n_classes + 1) + 0.01)

    def with_seed(self, seed: int) -> "DetectorProfile":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.confusion_weights is not None:
            d["confusion_weights"] = [list(r) for r in self.confusion_weights]
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "DetectorProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown profile fields: {sorted(unknown)}")
        doc = dict(doc)
        if doc.get("confusion_weights") is not None:
            doc["confusion_weights"] = tuple(tuple(r) for r in doc["confusion_weights"])
        return cls(**doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DetectorProfile":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise CorpusFormatError(f"{path}: profile must be a JSON object")
        try:
            return cls.from_dict(doc)
        except (TypeError, ValueError) as exc:
            raise CorpusFormatError(f"{path}: {exc}") from exc


def confidence_curve(profile: DetectorProfile, size: float) -> float:
    """Expected confidence for a correctly detected object of the given apparent size."""
    if size <= 0:
        return 0.0
    half = 0.5 * math.log2(profile.sweet_hi / profile.sweet_lo)
    x = abs(math.log2(size / profile.sweet_center))
    edge = profile.peak_confidence * (1.0 - profile.in_band_drop)
    if x <= half:
        return profile.peak_confidence * (1.0 - profile.in_band_drop * (x / half) ** 2)
    return edge * math.exp(-0.5 * ((x - half) / profile.falloff) ** 2)


def frame_rng(seed: int, snippet_id: str, frame_index: int, scale: int) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}|{snippet_id}|{frame_index}|{scale}".encode(),
                             digest_size=16).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _class_scores(conf: float, predicted: int, n_classes: int,
                  favoured: Optional[int] = None) -> tuple[float, ...]:
    """Probability vector with ``conf`` on ``predicted``; the rest water-filled below it."""
    k1 = n_classes + 1
    weights = [1.0] * k1
    weights[0] = 3.0
    if favoured is not None:
        weights[favoured] = 4.0
    weights[predicted] = 0.0
    cap = conf * (1.0 - 1e-9)
    out = [0.0] * k1
    out[predicted] = conf
    rest = 1.0 - conf
    free = [j for j in range(k1) if weights[j] > 0]
    while rest > 0 and free:
        total = sum(weights[j] for j in free)
        over = [j for j in free if rest * weights[j] / total > cap]
        if not over:
            for j in free:
                out[j] = rest * weights[j] / total
            rest = 0.0
            break
        for j in over:
            out[j] = cap
            rest -= cap
            free.remove(j)
    out[0] += rest  # only non-zero if the caller broke the confidence floor
    return tuple(out)


def _octave_weights(profile: DetectorProfile, size: float) -> np.ndarray:
    c = profile.feature_channels
    w = np.zeros(c)
    pos = math.log2(max(size, 1e-9) / profile.feature_base_size)
    pos = min(max(pos, 0.0), c - 1.0)
    lo = min(int(math.floor(pos)), c - 1)
    frac = pos - lo
    w[lo] += 1.0 - frac
    if frac > 0:
        w[lo + 1] += frac
    return w


def _cell_coverage(a0: float, a1: float, extent: float, g: int) -> np.ndarray:
    edges = np.linspace(0.0, extent, g + 1)
    overlap = np.clip(np.minimum(edges[1:], a1) - np.maximum(edges[:-1], a0), 0.0, None)
    return overlap / (extent / g)


def feature_map(profile: DetectorProfile, frame: Frame, at_scale: int) -> np.ndarray:
    """C x G x G deep-feature stand-in: object occupancy by apparent-size octave.

    Channel c responds to apparent size ``feature_base_size * 2**c``; a box
    adds its interpolated octave code to every cell in proportion to the
    cell area it covers. A background texture of fixed native size adds a
    checkerboard-signed code on all cells. On an even grid it cancels under
    global average pooling, but any rectified read-out of it reveals the
    current scale.
    """
    resized, factor = compute_resize(frame.native, at_scale, profile.max_long_side)
    g = profile.feature_grid
    feats = np.zeros((profile.feature_channels, g, g))
    for gt in frame.annotations:
        box = rescale_box(gt.box, factor)
        size = box.size
        if size <= 0:
            continue
        cov = np.outer(_cell_coverage(box.y_min, box.y_max, resized.height, g),
                       _cell_coverage(box.x_min, box.x_max, resized.width, g))
        feats += _octave_weights(profile, size)[:, None, None] * (profile.object_vote * cov)
    sign = 1.0 - 2.0 * (np.add.outer(np.arange(g), np.arange(g)) % 2)
    feats += _octave_weights(profile, profile.texture_size * factor)[:, None, None] * (profile.texture_level * sign)
    return profile.feature_gain * feats


def _truncated_normal(rng: np.random.Generator, n: int, limit: float = 4.0) -> np.ndarray:
    z = rng.standard_normal(n)
    return np.clip(z, -limit, limit)


def detect(profile: DetectorProfile, frame: Frame, at_scale: int) -> tuple[list[Detection], np.ndarray]:
    """Detections (post-NMS, in resized coordinates) and deep features at one scale."""
    if at_scale < 1:
        raise ValueError(f"at_scale must be >= 1, got {at_scale}")
    resized, factor = compute_resize(frame.native, at_scale, profile.max_long_side)
    rng = frame_rng(profile.seed, frame.snippet_id, frame.frame_index, at_scale)
    k = profile.n_classes
    floor = profile.confidence_floor
    raw: list[Detection] = []

    for gt in frame.annotations:
        if gt.class_label > k:
            raise ValueError(f"annotation class {gt.class_label} exceeds profile n_classes={k}")
        # fixed draw budget per object keeps the stream aligned across objects
        u_conf, u_confuse, u_class = rng.random(3)
        z = _truncated_normal(rng, 4)
        box = rescale_box(gt.box, factor)
        size = box.size
        if size <= 0:
            continue
        q = confidence_curve(profile, size)
        conf = q * (1.0 - profile.confidence_jitter * u_conf)
        if conf < floor:
            continue
        predicted, favoured = gt.class_label, None
        p_confuse = profile.confusion_rate * (1.0 - q / profile.peak_confidence)
        if k > 1 and u_confuse < p_confuse:
            predicted = _confused_class(profile, gt.class_label, u_class)
            favoured = gt.class_label
        rho = profile.localization_coef / size
        cx, cy = box.center
        w = box.width * math.exp(z[2] * rho)
        h = box.height * math.exp(z[3] * rho)
        pred_box = BoundingBox.from_center(cx + z[0] * rho * box.width, cy + z[1] * rho * box.height, w, h)
        raw.append(Detection(pred_box, _class_scores(conf, predicted, k, favoured)))

    n_fp = rng.poisson(profile.fp_rate * resized.pixels / 1e6)
    if n_fp:
        short = min(resized.width, resized.height)
        max_size = max(profile.fp_min_size, 0.5 * short)
        sizes = np.exp(rng.uniform(math.log(profile.fp_min_size), math.log(max_size), n_fp))
        aspects = np.exp(0.3 * _truncated_normal(rng, n_fp))
        cxs = rng.uniform(0, resized.width, n_fp)
        cys = rng.uniform(0, resized.height, n_fp)
        classes = rng.integers(1, k + 1, n_fp)
        confs = floor + (profile.fp_confidence_cap - floor) * rng.random(n_fp) ** profile.fp_confidence_power
        for s, a, cx, cy, c, cf in zip(sizes, aspects, cxs, cys, classes, confs):
            w, h = s * math.sqrt(a), s / math.sqrt(a)
            raw.append(Detection(BoundingBox.from_center(cx, cy, w, h),
                                 _class_scores(float(cf), int(c), k)))

    dets = nms(raw, profile.nms_threshold, profile.top_k)
    return dets, feature_map(profile, frame, at_scale)


def _confused_class(profile: DetectorProfile, true_class: int, u: float) -> int:
    k = profile.n_classes
    if profile.confusion_weights is not None:
        row = list(profile.confusion_weights[true_class - 1])
    else:
        row = [1.0] * k
    row[true_class - 1] = 0.0
    total = sum(row)
    if total <= 0:
        return true_class
    acc = 0.0
    for j, w in enumerate(row):
        acc += w / total
        if u < acc:
            return j + 1
    return max(j + 1 for j, w in enumerate(row) if w > 0)


class Detector(Protocol):
    """Anything that can detect a frame at a given scale."""

    def detect(self, frame: Frame, at_scale: int) -> tuple[list[Detection], np.ndarray]: ...

    def resize(self, native: ImageSize, at_scale: int) -> tuple[ImageSize, float]: ...


class SyntheticDetector:
    def __init__(self, profile: DetectorProfile):
        self.profile = profile

    def detect(self, frame: Frame, at_scale: int) -> tuple[list[Detection], np.ndarray]:
        return detect(self.profile, frame, at_scale)

    def resize(self, native: ImageSize, at_scale: int) -> tuple[ImageSize, float]:
        return compute_resize(native, at_scale, self.profile.max_long_side)


def workload(at_scale: int, native: ImageSize, max_long_side: int = 2000) -> float:
    """Resized pixel count, a monotone proxy for convolutional cost."""
    resized, _ = compute_resize(native, at_scale, max_long_side)
    return float(resized.pixels)


# ---------------------------------------------------------------------------
# corpus generation

REGIMES = ("large", "small", "mixed")


@dataclass(frozen=True)
class CorpusConfig:
    n_snippets: int = 300
    n_frames: int = 20
    n_classes: int = 4
    native_sizes: tuple[tuple[int, int], ...] = ((1280, 720),)
    regime_weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    large_size: tuple[float, float] = (0.3, 0.9)
    small_size: tuple[float, float] = (0.05, 0.15)
    mixed_size: tuple[float, float] = (0.05, 0.9)
    mixed_count: tuple[int, int] = (2, 3)
    objects: Optional[int] = None
    aspect_sigma: float = 0.25
    velocity_cap: float = 8.0
    growth_max: float = 0.02
    margin: float = 0.15

    def __post_init__(self):
        if self.n_snippets < 1 or self.n_frames < 1:
            raise ValueError("need at least one snippet and one frame")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if not self.native_sizes:
            raise ValueError("native_sizes is empty")
        for w, h in self.native_sizes:
            ImageSize(int(w), int(h))
        if len(self.regime_weights) != 3 or min(self.regime_weights) < 0 or sum(self.regime_weights) <= 0:
            raise ValueError("regime_weights must be three non-negative numbers with a positive sum")
        for lo, hi in (self.large_size, self.small_size, self.mixed_size):
            if not 0 < lo <= hi:
                raise ValueError("relative size ranges need 0 < lo <= hi")
        if not 1 <= self.mixed_count[0] <= self.mixed_count[1]:
            raise ValueError("mixed_count needs 1 <= lo <= hi")
        if self.objects is not None and self.objects < 0:
            raise ValueError("objects must be >= 0")
        if self.velocity_cap < 0 or self.growth_max < 0 or self.aspect_sigma < 0:
            raise ValueError("velocity_cap, growth_max and aspect_sigma must be >= 0")
        if not 0 <= self.margin < 0.5:
            raise ValueError("margin must be in [0, 0.5)")


def _reflect(x: float, v: float, lo: float, hi: float) -> tuple[float, float]:
    nx = x + v
    if nx < lo:
        nx, v = 2 * lo - nx, -v
    elif nx > hi:
        nx, v = 2 * hi - nx, -v
    return min(max(nx, lo), hi), v


def _make_object(rng: np.random.Generator, cfg: CorpusConfig, native: ImageSize,
                 size_range: tuple[float, float], first: int, length: int) -> SceneObject:
    short = native.shortest_side
    lo, hi = size_range[0] * short, size_range[1] * short
    size = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    aspect = math.exp(cfg.aspect_sigma * float(_truncated_normal(rng, 1, 2.5)[0]))
    growth = rng.uniform(-cfg.growth_max, cfg.growth_max)
    x_lo, x_hi = cfg.margin * native.width, (1 - cfg.margin) * native.width
    y_lo, y_hi = cfg.margin * native.height, (1 - cfg.margin) * native.height
    cx, cy = rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)
    angle = rng.uniform(0, 2 * math.pi)
    speed = rng.uniform(0, cfg.velocity_cap)
    vx, vy = speed * math.cos(angle), speed * math.sin(angle)
    centers, sizes = [], []
    for _ in range(length):
        centers.append((cx, cy))
        sizes.append((size * math.sqrt(aspect), size / math.sqrt(aspect)))
        # steer the velocity a little but never past the cap
        vx += rng.normal(0, 0.2 * cfg.velocity_cap + 1e-12)
        vy += rng.normal(0, 0.2 * cfg.velocity_cap + 1e-12)
        norm = math.hypot(vx, vy)
        if norm > cfg.velocity_cap:
            vx, vy = vx * cfg.velocity_cap / norm, vy * cfg.velocity_cap / norm
        cx, vx = _reflect(cx, vx, x_lo, x_hi)
        cy, vy = _reflect(cy, vy, y_lo, y_hi)
        size = min(max(size * math.exp(growth), lo), hi)
    label = int(rng.integers(1, cfg.n_classes + 1))
    return SceneObject(label, first, centers, sizes)


def annotations_at(objects: Sequence[SceneObject], k: int, native: ImageSize) -> tuple[Annotation, ...]:
    out = []
    for obj in objects:
        if not obj.visible(k):
            continue
        (cx, cy), (w, h) = obj.centers[k - obj.first_frame], obj.sizes[k - obj.first_frame]
        x0, x1 = max(0.0, cx - w / 2), min(float(native.width), cx + w / 2)
        y0, y1 = max(0.0, cy - h / 2), min(float(native.height), cy + h / 2)
        if x1 > x0 and y1 > y0:
            out.append(Annotation(BoundingBox(x0, y0, x1, y1), obj.class_label))
    return tuple(out)


def generate_corpus(config: CorpusConfig = CorpusConfig(), seed: int = 0) -> list[VideoSnippet]:
    """Deterministic synthetic video corpus.

    Each snippet follows one of three regimes: a single large object, a
    single small object, or several objects of mixed sizes.
    """
    rng = np.random.default_rng(seed)
    weights = np.asarray(config.regime_weights, dtype=float)
    weights = weights / weights.sum()
    snippets = []
    for s in range(config.n_snippets):
        sid = f"snip{s:05d}"
        w, h = config.native_sizes[int(rng.integers(len(config.native_sizes)))]
        native = ImageSize(int(w), int(h))
        regime = REGIMES[int(rng.choice(3, p=weights))]
        n = config.n_frames
        objects = []
        if config.objects is not None:
            for _ in range(config.objects):
                objects.append(_make_object(rng, config, native, config.mixed_size, 0, n))
            regime = "fixed-count"
        elif regime == "large":
            objects.append(_make_object(rng, config, native, config.large_size, 0, n))
        elif regime == "small":
            objects.append(_make_object(rng, config, native, config.small_size, 0, n))
        else:
            count = int(rng.integers(config.mixed_count[0], config.mixed_count[1] + 1))
            for i in range(count):
                if i == 0 or n < 4:
                    first, length = 0, n
                else:
                    length = int(rng.integers(n // 2, n + 1))
                    first = int(rng.integers(0, n - length + 1))
                objects.append(_make_object(rng, config, native, config.mixed_size, first, length))
        frames = [Frame(sid, k, native, annotations_at(objects, k, native)) for k in range(n)]
        snippets.append(VideoSnippet(sid, native, frames, objects, regime))
    return snippets


def split_snippets(snippets: Sequence[VideoSnippet], train_fraction: float = 0.8
                   ) -> tuple[list[VideoSnippet], list[VideoSnippet]]:
    """Deterministic train/validation split on a hash of the snippet id."""
    train, val = [], []
    for snip in snippets:
        h = int.from_bytes(hashlib.blake2b(snip.snippet_id.encode(), digest_size=8).digest(), "little")
        (train if (h % 10_000) < train_fraction * 10_000 else val).append(snip)
    return train, val


# ---------------------------------------------------------------------------
# corpus exchange format: one JSON object per frame


def frame_record(frame: Frame) -> dict:
    return {
        "snippet_id": frame.snippet_id,
        "frame_index": frame.frame_index,
        "native_width": frame.native.width,
        "native_height": frame.native.height,
        "annotations": [
            {"class": a.class_label, "x_min": a.box.x_min, "y_min": a.box.y_min,
             "x_max": a.box.x_max, "y_max": a.box.y_max}
            for a in frame.annotations
        ],
    }


def write_corpus(snippets: Sequence[VideoSnippet], path) -> None:
    with open(path, "w") as fh:
        for snip in snippets:
            for frame in snip.frames:
                fh.write(json.dumps(frame_record(frame), sort_keys=True) + "\n")


def parse_frame(rec: dict) -> Frame:
    native = ImageSize(int(rec["native_width"]), int(rec["native_height"]))
    anns = tuple(
        Annotation(BoundingBox(float(a["x_min"]), float(a["y_min"]), float(a["x_max"]), float(a["y_max"])),
                   int(a["class"]))
        for a in rec["annotations"]
    )
    return Frame(str(rec["snippet_id"]), int(rec["frame_index"]), native, anns)


def read_corpus(path) -> list[VideoSnippet]:
    """Load a JSON-Lines corpus; frames are grouped by snippet in file order."""
    groups: dict[str, list[Frame]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                frame = parse_frame(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
            groups.setdefault(frame.snippet_id, []).append(frame)
    if not groups:
        raise CorpusFormatError(f"{path}: no frames")
    snippets = []
    for sid, frames in groups.items():
        frames.sort(key=lambda f: f.frame_index)
        if len({f.frame_index for f in frames}) != len(frames):
            raise CorpusFormatError(f"{path}: duplicate frame index in snippet {sid}")
        if len({f.native for f in frames}) != 1:
            raise CorpusFormatError(f"{path}: snippet {sid} changes native size")
        snippets.append(VideoSnippet(sid, frames[0].native, frames))
    return snippets
