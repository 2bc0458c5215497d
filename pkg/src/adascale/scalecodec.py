"""Relative scale targets for the regressor and their inverse.

A target encodes the ratio ``m_opt / m_i`` linearly so that the representable
ratio range ``[m_min/m_max, m_max/m_min]`` maps onto ``[-1, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from .geometry import round_half_away

S_REG = (600, 480, 360, 240, 128)
S_TRAIN = (600, 480, 360, 240)


@dataclass(frozen=True)
class ScaleSet:
    scales: tuple[int, ...]

    def __init__(self, scales: Iterable[int]):
        values = [int(s) for s in scales]
        if not values:
            raise ValueError("scale set is empty")
        if any(s <= 0 for s in values):
            raise ValueError(f"scales must be positive: {values}")
        if len(set(values)) != len(values):
            raise ValueError(f"scales must be distinct: {values}")
        object.__setattr__(self, "scales", tuple(sorted(values, reverse=True)))

    @property
    def m_min(self) -> int:
        return self.scales[-1]

    @property
    def m_max(self) -> int:
        return self.scales[0]

    def __iter__(self):
        return iter(self.scales)

    def __len__(self):
        return len(self.scales)

    def __contains__(self, m) -> bool:
        return m in self.scales

    @classmethod
    def parse(cls, text: str) -> "ScaleSet":
        return cls(int(tok) for tok in text.replace("/", ",").split(",") if tok.strip())

    def __str__(self):
        return ",".join(str(s) for s in self.scales)


def _ratio_bounds(ss: ScaleSet) -> tuple[float, float]:
    if ss.m_min == ss.m_max:
        raise ValueError("scale codec needs a scale set with m_min < m_max")
    return ss.m_min / ss.m_max, ss.m_max / ss.m_min


def encode_scale_target(m_i: float, m_opt: float, ss: ScaleSet) -> float:
    if m_i <= 0 or m_opt <= 0:
        raise ValueError("scales must be positive")
    lo, hi = _ratio_bounds(ss)
    t = 2.0 * ((m_opt / m_i - lo) / (hi - lo)) - 1.0
    return min(1.0, max(-1.0, t))


def decode_ratio(t: float, ss: ScaleSet) -> float:
    if not math.isfinite(t):
        raise ValueError(f"regressed value must be finite, got {t}")
    lo, hi = _ratio_bounds(ss)
    return ((t + 1.0) / 2.0) * (hi - lo) + lo


def decode_scale(t: float, base_size: int, ss: ScaleSet) -> int:
    """Map a regressed value back to a pixel scale relative to ``base_size``.

    ``base_size`` is the shortest side of the image the regressor just saw.
    The result is clipped to the scale-set range and rounded.
    """
    raw = decode_ratio(t, ss) * base_size
    return round_half_away(min(float(ss.m_max), max(float(ss.m_min), raw)))
