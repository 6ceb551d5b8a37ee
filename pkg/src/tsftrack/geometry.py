"""Box algebra, overlap / center-error primitives and Siamese crop geometry.

Coordinates are continuous pixel coordinates: pixel ``i`` covers ``[i, i+1)``
so its center sits at ``i + 0.5``. A box with corner form ``(x, y, w, h)``
therefore has center ``(x + w/2, y + h/2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Box",
    "CropSpec",
    "as_image",
    "iou",
    "center_error",
    "crop_patch",
    "exemplar_side",
    "instance_side",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in center form."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive size, got w={self.w}, h={self.h}")

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "Box":
        return cls(x + w / 2.0, y + h / 2.0, float(w), float(h))

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, float(x2 - x1), float(y2 - y1))

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2.0

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.w, self.h)

    def to_corners(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return self.w * self.h


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # corner-derived areas so identical boxes give exactly 1
    union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
    return min(1.0, max(0.0, inter / union))


def center_error(a: Box, b: Box) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def exemplar_side(box: Box) -> float:
    """Side of the square exemplar region: sqrt((w+p)(h+p)), p = (w+h)/2."""
    p = (box.w + box.h) / 2.0
    return math.sqrt((box.w + p) * (box.h + p))


def instance_side(box: Box, template_size: int = 127, instance_size: int = 255) -> float:
    return exemplar_side(box) * instance_size / template_size


@dataclass(frozen=True)
class CropSpec:
    """Square region of ``side`` frame pixels centered at (cx, cy), resampled
    to ``out_size`` x ``out_size``."""

    cx: float
    cy: float
    side: float
    out_size: int

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError(f"crop side must be positive, got {self.side}")
        if self.out_size <= 0:
            raise ValueError(f"out_size must be positive, got {self.out_size}")

    @property
    def scale(self) -> float:
        """Frame pixels per patch pixel."""
        return self.side / self.out_size

    def to_frame(self, u, v):
        """Continuous patch coordinates -> frame coordinates."""
        half = self.out_size / 2.0
        return (self.cx + (u - half) * self.scale, self.cy + (v - half) * self.scale)

    def to_patch(self, x, y):
        half = self.out_size / 2.0
        return ((x - self.cx) / self.scale + half, (y - self.cy) / self.scale + half)

    def box_to_frame(self, box: Box) -> Box:
        cx, cy = self.to_frame(box.cx, box.cy)
        return Box(cx, cy, box.w * self.scale, box.h * self.scale)

    def box_to_patch(self, box: Box) -> Box:
        cx, cy = self.to_patch(box.cx, box.cy)
        return Box(cx, cy, box.w / self.scale, box.h / self.scale)


def as_image(data) -> np.ndarray:
    """Return an HxWx3 float32 array; single-channel frames are replicated."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected HxW, HxWx1 or HxWx3 image, got shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def crop_patch(img: np.ndarray, spec: CropSpec, pad_value=None) -> np.ndarray:
    """Bilinear crop of ``spec`` from ``img`` (HxWxC).

    Samples falling outside the frame read ``pad_value`` (per-channel image
    mean by default).
    """
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    height, width, channels = img.shape
    if pad_value is None:
        pad_value = img.reshape(-1, channels).mean(axis=0)
    pad = np.broadcast_to(np.asarray(pad_value, dtype=np.float32), (channels,))

    n = spec.out_size
    centers = np.arange(n, dtype=np.float64) + 0.5
    xs, _ = spec.to_frame(centers, 0.0)
    _, ys = spec.to_frame(0.0, centers)
    # frame coordinate -> fractional pixel index
    fx = np.asarray(xs) - 0.5
    fy = np.asarray(ys) - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    ax = (fx - x0).astype(np.float32)
    ay = (fy - y0).astype(np.float32)

    padded = np.empty((height + 2, width + 2, channels), dtype=np.float32)
    padded[:] = pad
    padded[1:-1, 1:-1] = img
    # indices outside the frame collapse onto the pad ring
    def idx(i, size):
        return np.clip(i + 1, 0, size + 1)

    xi0, xi1 = idx(x0, width), idx(x0 + 1, width)
    yi0, yi1 = idx(y0, height), idx(y0 + 1, height)
    top = padded[yi0][:, xi0] * (1 - ax)[None, :, None] + padded[yi0][:, xi1] * ax[None, :, None]
    bot = padded[yi1][:, xi0] * (1 - ax)[None, :, None] + padded[yi1][:, xi1] * ax[None, :, None]
    return top * (1 - ay)[:, None, None] + bot * ay[:, None, None]
