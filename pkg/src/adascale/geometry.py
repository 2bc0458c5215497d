"""Axis-aligned box arithmetic and image rescaling.

Boxes use continuous corner coordinates: area is
``(x_max - x_min) * (y_max - y_min)`` with no +1 pixel term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

MAX_LONG_SIDE = 2000


def round_half_away(x: float) -> int:
    """Round to the nearest integer, halves away from zero."""
    if x >= 0:
        return int(math.floor(x + 0.5))
    return -int(math.floor(-x + 0.5))


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"invalid box corners: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)

    @property
    def size(self) -> float:
        """Geometric mean of width and height (square-root of the area)."""
        return math.sqrt(self.area)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


@dataclass(frozen=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dimensions must be >= 1, got {self.width}x{self.height}")

    @property
    def shortest_side(self) -> int:
        return min(self.width, self.height)

    @property
    def longest_side(self) -> int:
        return max(self.width, self.height)

    @property
    def pixels(self) -> int:
        return self.width * self.height


def intersection(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Jaccard overlap of two boxes; 0 when the union is empty."""
    inter = intersection(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def compute_resize(src: ImageSize, target_scale: int,
                   max_long_side: int = MAX_LONG_SIDE) -> tuple[ImageSize, float]:
    """Resize so the shortest side equals ``target_scale``, capping the longer side.

    Returns the resized image size and the multiplicative factor applied to
    native coordinates.
    """
    if target_scale < 1:
        raise ValueError(f"target_scale must be >= 1, got {target_scale}")
    factor = min(target_scale / src.shortest_side, max_long_side / src.longest_side)
    resized = ImageSize(max(1, round_half_away(src.width * factor)),
                        max(1, round_half_away(src.height * factor)))
    return resized, factor


def rescale_box(b: BoundingBox, factor: float) -> BoundingBox:
    if factor <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    return BoundingBox(b.x_min * factor, b.y_min * factor, b.x_max * factor, b.y_max * factor)
