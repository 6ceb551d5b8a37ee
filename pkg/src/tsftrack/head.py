"""Anchor-free classification/regression head with depth-wise correlation.

One head per feature depth; the two depth responses are blended with learned
scalar weights (alpha for classification, beta for regression).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import TwofoldFeatures
from .geometry import Box, CropSpec

__all__ = [
    "ResponsePair",
    "depthwise_xcorr",
    "DepthHead",
    "TwofoldHead",
    "fuse_responses",
    "PointGrid",
    "decode_boxes",
]


class ResponsePair(NamedTuple):
    cls: torch.Tensor  # (N, 2, Hr, Wr) logits
    reg: torch.Tensor  # (N, 4, Hr, Wr) left/top/right/bottom distances, patch pixels


def depthwise_xcorr(template: torch.Tensor, search: torch.Tensor) -> torch.Tensor:
    """Per-channel valid cross-correlation.

    Accepts (C, k, k) / (C, S, S) or batched (N, C, k, k) / (N, C, S, S).
    """
    unbatched = template.dim() == 3
    if unbatched:
        template, search = template[None], search[None]
    n, c, k, k2 = template.shape
    if search.shape[:2] != (n, c):
        raise ValueError(f"channel/batch mismatch: {tuple(template.shape)} vs {tuple(search.shape)}")
    if k > search.shape[-2] or k2 > search.shape[-1]:
        raise ValueError(f"template ({k}x{k2}) larger than search ({tuple(search.shape[-2:])})")
    x = search.reshape(1, n * c, search.shape[2], search.shape[3])
    kernel = template.reshape(n * c, 1, k, k2)
    out = F.conv2d(x, kernel, groups=n * c)
    out = out.reshape(n, c, out.shape[2], out.shape[3])
    return out[0] if unbatched else out


class _XCorrBranch(nn.Module):
    def __init__(self, channels: int, out_channels: int):
        super().__init__()
        self.adjust_z = nn.Sequential(nn.Conv2d(channels, channels, 1, bias=False),
                                      nn.BatchNorm2d(channels), nn.ReLU(inplace=True))
        self.adjust_x = nn.Sequential(nn.Conv2d(channels, channels, 1, bias=False),
                                      nn.BatchNorm2d(channels), nn.ReLU(inplace=True))
        self.tower = nn.Sequential(nn.Conv2d(channels, channels, 1, bias=False),
                                   nn.BatchNorm2d(channels), nn.ReLU(inplace=True),
                                   nn.Conv2d(channels, out_channels, 1))

    def forward(self, z, x):
        return self.tower(depthwise_xcorr(self.adjust_z(z), self.adjust_x(x)))


class DepthHead(nn.Module):
    """Head for one feature depth: 2-way logits and exp-positive box sides."""

    def __init__(self, channels: int, reg_init: float = 32.0):
        super().__init__()
        self.cls = _XCorrBranch(channels, 2)
        self.reg = _XCorrBranch(channels, 4)
        nn.init.constant_(self.reg.tower[-1].bias, math.log(reg_init))

    def forward(self, z: torch.Tensor, x: torch.Tensor) -> ResponsePair:
        if z.shape[1] != x.shape[1]:
            raise ValueError(f"template has {z.shape[1]} channels, search {x.shape[1]}")
        return ResponsePair(self.cls(z, x), torch.exp(self.reg(z, x)))

    branch_forward = forward


def fuse_responses(shallow: ResponsePair, deep: ResponsePair, weights) -> ResponsePair:
    """``weights`` = (alpha_s, alpha_d, beta_s, beta_d)."""
    if shallow.cls.shape != deep.cls.shape or shallow.reg.shape != deep.reg.shape:
        raise ValueError("shallow and deep responses differ in shape")
    a_s, a_d, b_s, b_d = weights[0], weights[1], weights[2], weights[3]
    return ResponsePair(a_s * shallow.cls + a_d * deep.cls, b_s * shallow.reg + b_d * deep.reg)


class TwofoldHead(nn.Module):
    def __init__(self, channels: int, reg_init: float = 32.0):
        super().__init__()
        self.shallow = DepthHead(channels, reg_init)
        self.deep = DepthHead(channels, reg_init)
        # alpha_s, alpha_d, beta_s, beta_d
        self.fusion = nn.Parameter(torch.full((4,), 0.5))

    def forward(self, z: TwofoldFeatures, x: TwofoldFeatures, depths: str = "both") -> ResponsePair:
        deep = self.deep(z.deep, x.deep)
        if depths == "deep":
            # deep-only ablation: fold the shallow weights into the deep ones
            w = self.fusion
            return ResponsePair((w[0] + w[1]) * deep.cls, (w[2] + w[3]) * deep.reg)
        shallow = self.shallow(z.shallow, x.shallow)
        return fuse_responses(shallow, deep, self.fusion)


@dataclass(frozen=True)
class PointGrid:
    """Search-patch anchor points of an Hr x Hr response map."""

    size: int
    stride: int = 8
    patch_size: int = 255

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        offs = self.patch_size / 2.0 + (np.arange(self.size) - self.size // 2) * self.stride
        xs, ys = np.meshgrid(offs, offs)
        return xs, ys


def decode_boxes(reg, grid: PointGrid, crop: CropSpec | None = None, min_side: float = 1.0) -> np.ndarray:
    """Turn a (4, Hr, Wr) side-distance map into (4, Hr, Wr) boxes (cx, cy, w, h).

    Boxes are in frame coordinates when ``crop`` is given, otherwise in
    search-patch coordinates. Sides are clamped to ``min_side`` pixels.
    """
    if isinstance(reg, torch.Tensor):
        reg = reg.detach().cpu().numpy()
    reg = np.asarray(reg, dtype=np.float64)
    xs, ys = grid.points()
    left, top, right, bottom = reg
    x1, y1, x2, y2 = xs - left, ys - top, xs + right, ys + bottom
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    w, h = x2 - x1, y2 - y1
    if crop is not None:
        cx, cy = crop.to_frame(cx, cy)
        w, h = w * crop.scale, h * crop.scale
    return np.stack([cx, cy, np.maximum(w, min_side), np.maximum(h, min_side)])


def box_at(boxes: np.ndarray, index) -> Box:
    cx, cy, w, h = boxes.reshape(4, -1)[:, index]
    return Box(float(cx), float(cy), float(w), float(h))
