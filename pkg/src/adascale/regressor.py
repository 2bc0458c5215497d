"""Two-branch convolutional scale regressor with hand-written backprop.

Each branch is a ``k x k`` convolution (stride 1, padding ``k // 2``) over
the C x H x W deep feature map, followed by a rectifier and global pooling.
The pooled branch vectors are concatenated and a fully connected layer maps
them to one unbounded scalar.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_NAME = "adascale-regressor"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class RegressorConfig:
    channels: int = 8
    kernel_sizes: tuple[int, ...] = (1, 3)
    widths: tuple[int, ...] = (16, 16)
    pooling: str = "avg"

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if not self.kernel_sizes or len(self.kernel_sizes) != len(self.widths):
            raise ValueError("kernel_sizes and widths must be non-empty and of equal length")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError(f"kernel sizes must be odd and positive: {self.kernel_sizes}")
        if len(set(self.kernel_sizes)) != len(self.kernel_sizes):
            raise ValueError("kernel sizes must be distinct")
        if any(w < 1 for w in self.widths):
            raise ValueError("branch widths must be >= 1")
        if self.pooling not in ("avg", "max"):
            raise ValueError(f"pooling must be 'avg' or 'max', got {self.pooling!r}")

    @property
    def hidden(self) -> int:
        return sum(self.widths)


@dataclass
class RegressorModel:
    config: RegressorConfig
    params: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} != {sorted(expected)}")
        for name, shape in expected.items():
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite parameters")
            self.params[name] = arr

    def copy(self) -> "RegressorModel":
        return RegressorModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def to_dict(self) -> dict:
        return model_to_dict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(model_to_dict(self), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "RegressorModel":
        return model_from_dict(json.loads(Path(path).read_text()))


def param_shapes(cfg: RegressorConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for k, w in zip(cfg.kernel_sizes, cfg.widths):
        shapes[f"conv{k}.weight"] = (w, cfg.channels, k, k)
        shapes[f"conv{k}.bias"] = (w,)
    shapes["fc.weight"] = (cfg.hidden,)
    shapes["fc.bias"] = (1,)
    return shapes


def init_model(cfg: RegressorConfig = RegressorConfig(), seed: int = 0) -> RegressorModel:
    """Uniform init in [-r, r] with r = 1/sqrt(fan_in) for every layer."""
    rng = np.random.default_rng(seed)
    params = {}
    for k, w in zip(cfg.kernel_sizes, cfg.widths):
        r = 1.0 / math.sqrt(cfg.channels * k * k)
        params[f"conv{k}.weight"] = rng.uniform(-r, r, size=(w, cfg.channels, k, k))
        params[f"conv{k}.bias"] = rng.uniform(-r, r, size=(w,))
    r = 1.0 / math.sqrt(cfg.hidden)
    params["fc.weight"] = rng.uniform(-r, r, size=(cfg.hidden,))
    params["fc.bias"] = rng.uniform(-r, r, size=(1,))
    return RegressorModel(cfg, params)


def zero_model(cfg: RegressorConfig = RegressorConfig()) -> RegressorModel:
    return RegressorModel(cfg, {n: np.zeros(s) for n, s in param_shapes(cfg).items()})


def _check_input(model: RegressorModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != model.config.channels:
        raise ValueError(f"expected a ({model.config.channels}, H, W) feature map, got {x.shape}")
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ValueError("feature map has an empty spatial extent")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature map contains non-finite values")
    return x


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    if k == 1:
        return x.reshape(c, h * w).T
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))  # C,H,W,k,k
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * k * k)


def _forward(model: RegressorModel, x: np.ndarray):
    cfg, params = model.config, model.params
    caches, pooled = [], []
    for k, width in zip(cfg.kernel_sizes, cfg.widths):
        cols = _im2col(x, k)
        z = cols @ params[f"conv{k}.weight"].reshape(width, -1).T + params[f"conv{k}.bias"]
        a = np.maximum(z, 0.0)
        if cfg.pooling == "avg":
            pooled.append(a.mean(axis=0))
            caches.append((cols, z, None))
        else:
            arg = a.argmax(axis=0)
            pooled.append(a[arg, np.arange(width)])
            caches.append((cols, z, arg))
    h = np.concatenate(pooled)
    y = float(h @ params["fc.weight"] + params["fc.bias"][0])
    return y, h, caches


def forward(model: RegressorModel, x: np.ndarray) -> float:
    """Regressed relative-scale value for one C x H x W feature map."""
    return _forward(model, _check_input(model, x))[0]


def backward(model: RegressorModel, x: np.ndarray, target: float) -> tuple[dict[str, np.ndarray], float]:
    """Squared-error loss ``(g(x) - target)**2`` and its gradient for every parameter."""
    if not math.isfinite(target):
        raise ValueError(f"target must be finite, got {target}")
    x = _check_input(model, x)
    cfg, params = model.config, model.params
    y, h, caches = _forward(model, x)
    dy = 2.0 * (y - target)
    grads = {"fc.weight": dy * h, "fc.bias": np.array([dy])}
    dh = dy * params["fc.weight"]
    offset = 0
    for (k, width), (cols, z, arg) in zip(zip(cfg.kernel_sizes, cfg.widths), caches):
        dpool = dh[offset:offset + width]
        offset += width
        n = z.shape[0]
        if cfg.pooling == "avg":
            da = np.broadcast_to(dpool / n, z.shape)
        else:
            da = np.zeros_like(z)
            da[arg, np.arange(width)] = dpool
        dz = da * (z > 0)
        grads[f"conv{k}.weight"] = (dz.T @ cols).reshape(params[f"conv{k}.weight"].shape)
        grads[f"conv{k}.bias"] = dz.sum(axis=0)
    return grads, (y - target) ** 2


@dataclass
class TrainerState:
    """Plain SGD with a single step decay of the learning rate."""

    lr: float = 1e-4
    decay: float = 0.1
    decay_epoch: float = 1.3
    epochs: float = 2.0
    batch_size: int = 1
    seed: int = 0
    epoch: float = 0.0
    step: int = 0

    def __post_init__(self):
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ValueError(f"learning rate must be finite and >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")

    def learning_rate(self, epoch: float) -> float:
        return self.lr * (self.decay if epoch >= self.decay_epoch else 1.0)


def train(model: RegressorModel, dataset: Sequence[tuple[np.ndarray, float]],
          trainer: TrainerState = None) -> tuple[RegressorModel, list[float]]:
    """Fit the regressor with mini-batch SGD on the mean squared error.

    Returns a new model and the per-step mean batch loss. The input model is
    not modified.
    """
    if trainer is None:
        trainer = TrainerState()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    xs = [_check_input(model, x) for x, _ in dataset]
    ts = [float(t) for _, t in dataset]
    if not all(math.isfinite(t) for t in ts):
        raise ValueError("non-finite training target")

    model = model.copy()
    rng = np.random.default_rng(trainer.seed)
    n = len(xs)
    steps_per_epoch = math.ceil(n / trainer.batch_size)
    total_steps = max(1, round(trainer.epochs * steps_per_epoch))
    trace: list[float] = []
    order: np.ndarray = np.empty(0, dtype=int)
    step = 0
    while step < total_steps:
        pos = step % steps_per_epoch
        if pos == 0:
            order = rng.permutation(n)
        batch = order[pos * trainer.batch_size:(pos + 1) * trainer.batch_size]
        epoch = step / steps_per_epoch
        lr = trainer.learning_rate(epoch)
        acc = {name: np.zeros_like(p) for name, p in model.params.items()}
        loss = 0.0
        for i in batch:
            try:
                with np.errstate(over="raise", invalid="raise"):
                    g, l = backward(model, xs[i], ts[i])
            except (OverflowError, FloatingPointError) as exc:
                raise FloatingPointError(f"training diverged at step {step}; lower the learning rate") from exc
            loss += l
            for name in acc:
                acc[name] += g[name]
        if not math.isfinite(loss):
            raise FloatingPointError(f"training diverged at step {step}; lower the learning rate")
        scale = lr / len(batch)
        for name, p in model.params.items():
            p -= scale * acc[name]
        trace.append(loss / len(batch))
        step += 1
    trainer.step = step
    trainer.epoch = step / steps_per_epoch
    return model, trace


def mse(model: RegressorModel, dataset: Sequence[tuple[np.ndarray, float]]) -> float:
    if not dataset:
        raise ValueError("empty dataset")
    return float(np.mean([(forward(model, x) - t) ** 2 for x, t in dataset]))


def model_to_dict(model: RegressorModel) -> dict:
    cfg = model.config
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": {
            "channels": cfg.channels,
            "kernel_sizes": list(cfg.kernel_sizes),
            "widths": list(cfg.widths),
            "pooling": cfg.pooling,
        },
        "params": [
            {"name": name, "shape": list(shape),
             "values": [float(v).hex() for v in model.params[name].ravel()]}
            for name, shape in param_shapes(cfg).items()
        ],
    }


def model_from_dict(doc: dict) -> RegressorModel:
    if doc.get("format") != FORMAT_NAME:
        raise ValueError(f"not a regressor document: format={doc.get('format')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported regressor format version {doc.get('version')!r}")
    c = doc["config"]
    cfg = RegressorConfig(int(c["channels"]), tuple(c["kernel_sizes"]), tuple(c["widths"]), c["pooling"])
    params = {}
    for entry in doc["params"]:
        shape = tuple(int(s) for s in entry["shape"])
        values = np.array([float.fromhex(v) for v in entry["values"]], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"{entry['name']}: {values.size} values for shape {shape}")
        params[entry["name"]] = values.reshape(shape)
    return RegressorModel(cfg, params)
