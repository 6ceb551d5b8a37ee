"""Twofold structured features backbone.

A stride-reduced ResNet-50 style extractor (four bottleneck stages, strides
4/2/1/1 with dilation in stages 3-4) followed by the shallow/deep fusion:

    shallow = DS(Concat(CR(DS(CR(f1))), CR(DS(f2))))
    deep    = DS(Concat(CR(DS(f3)), CR(DS(f4))))

DS is a 1x1 convolution + batch norm onto ``fused_channels``; CR is a center
crop. The inner crop on f1 aligns it with the stage-2 resolution, the outer
crops cut template features down to ``template_spatial`` and are the
identity on the instance branch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "BackboneConfig",
    "StageFeatures",
    "TwofoldFeatures",
    "ResNetStages",
    "TwofoldFusion",
    "TwofoldBackbone",
    "center_crop",
    "BranchBatchNorm2d",
]


@dataclass
class BackboneConfig:
    variant: str = "tiny"
    stage_channels: tuple = (16, 32, 64, 128)
    stem_channels: int = 16
    blocks: tuple = (3, 4, 6, 3)
    fused_channels: int = 32
    template_spatial: int = 7
    pretrained_weights_path: str | None = None

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks = tuple(int(b) for b in self.blocks)
        if len(self.stage_channels) != 4 or len(self.blocks) != 4:
            raise ValueError("backbone needs exactly four stages")
        if any(b >= a for b, a in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError(f"stage_channels must be strictly increasing: {self.stage_channels}")
        if self.fused_channels <= 0 or self.template_spatial <= 0:
            raise ValueError("fused_channels and template_spatial must be positive")

    @classmethod
    def full(cls, **kw) -> "BackboneConfig":
        return cls(variant="full", stage_channels=(256, 512, 1024, 2048), stem_channels=64,
                   fused_channels=256, **kw)

    @classmethod
    def tiny(cls, **kw) -> "BackboneConfig":
        return cls(**kw)

    @classmethod
    def from_variant(cls, variant: str, **kw) -> "BackboneConfig":
        if variant == "full":
            return cls.full(**kw)
        if variant == "tiny":
            return cls.tiny(**kw)
        raise ValueError(f"unknown backbone variant {variant!r}")


class StageFeatures(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor


class TwofoldFeatures(NamedTuple):
    shallow: torch.Tensor
    deep: torch.Tensor


class BranchBatchNorm2d(nn.BatchNorm2d):
    """Batch norm whose affine parameters are shared by both Siamese branches
    but which keeps separate running statistics per branch.

    Template patches (mostly target) and search patches (mostly background)
    have very different activation statistics; a single running average fits
    neither at inference time. ``running_mean``/``running_var`` serve the
    template branch, ``running_mean_x``/``running_var_x`` the instance branch.
    """

    def __init__(self, num_features, **kw):
        super().__init__(num_features, **kw)
        self.register_buffer("running_mean_x", torch.zeros(num_features))
        self.register_buffer("running_var_x", torch.ones(num_features))
        self.branch = "template"

    def forward(self, x):
        if self.branch == "instance":
            mean, var = self.running_mean_x, self.running_var_x
        else:
            mean, var = self.running_mean, self.running_var
        return F.batch_norm(x, mean, var, self.weight, self.bias, self.training, self.momentum, self.eps)

    def _load_from_state_dict(self, state_dict, prefix, *args, **kwargs):
        # plain BatchNorm checkpoints: seed the instance statistics from the shared ones
        for name in ("mean", "var"):
            src, dst = prefix + f"running_{name}", prefix + f"running_{name}_x"
            if src in state_dict and dst not in state_dict:
                state_dict[dst] = state_dict[src].clone()
        super()._load_from_state_dict(state_dict, prefix, *args, **kwargs)


def center_crop(x: torch.Tensor, size: int) -> torch.Tensor:
    s = x.shape[-1]
    if size > s:
        raise ValueError(f"cannot center-crop {s} to {size}")
    start = (s - size) // 2
    return x[..., start:start + size, start:start + size]


class Bottleneck(nn.Module):
    # same parameter names as torchvision's Bottleneck so checkpoints map 1:1
    def __init__(self, inplanes, planes, out_channels, stride=1, dilation=1, downsample=None):
        super().__init__()
        padding = 0 if stride > 1 else dilation
        self.conv1 = nn.Conv2d(inplanes, planes, 1, bias=False)
        self.bn1 = BranchBatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=padding,
                               dilation=dilation, bias=False)
        self.bn2 = BranchBatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, out_channels, 1, bias=False)
        self.bn3 = BranchBatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


def _make_stage(inplanes, out_channels, blocks, stride, dilation):
    planes = out_channels // 4
    if stride == 1 and dilation == 1:
        downsample = nn.Sequential(nn.Conv2d(inplanes, out_channels, 1, bias=False),
                                   BranchBatchNorm2d(out_channels))
    else:
        dd = dilation // 2 if dilation > 1 else 1
        pad = dd if dilation > 1 else 0
        downsample = nn.Sequential(
            nn.Conv2d(inplanes, out_channels, 3, stride=stride, padding=pad, dilation=dd, bias=False),
            BranchBatchNorm2d(out_channels))
    first_dilation = dilation // 2 if dilation > 1 else 1
    layers = [Bottleneck(inplanes, planes, out_channels, stride, first_dilation, downsample)]
    for _ in range(1, blocks):
        layers.append(Bottleneck(out_channels, planes, out_channels, 1, dilation))
    return nn.Sequential(*layers)


class ResNetStages(nn.Module):
    """Stem plus four bottleneck stages (strides 4/2/1/1, dilations 1/1/2/4)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.stage_channels
        self.conv1 = nn.Conv2d(3, cfg.stem_channels, 7, stride=2, padding=0, bias=False)
        self.bn1 = BranchBatchNorm2d(cfg.stem_channels)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer1 = _make_stage(cfg.stem_channels, c[0], cfg.blocks[0], 1, 1)
        self.layer2 = _make_stage(c[0], c[1], cfg.blocks[1], 2, 1)
        self.layer3 = _make_stage(c[1], c[2], cfg.blocks[2], 1, 2)
        self.layer4 = _make_stage(c[2], c[3], cfg.blocks[3], 1, 4)

    def forward(self, x: torch.Tensor) -> StageFeatures:
        size = x.shape[-1]
        if x.shape[-2] != size or size < 15:
            raise ValueError(f"patch must be square and at least 15 px, got {tuple(x.shape[-2:])}")
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        f1 = self.layer1(x)
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        f4 = self.layer4(f3)
        return StageFeatures(f1, f2, f3, f4)


def _ds(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), BranchBatchNorm2d(cout))


class TwofoldFusion(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c, f = cfg.stage_channels, cfg.fused_channels
        self.template_spatial = cfg.template_spatial
        self.ds1 = _ds(c[0], f)
        self.ds2 = _ds(c[1], f)
        self.ds3 = _ds(c[2], f)
        self.ds4 = _ds(c[3], f)
        self.ds_shallow = _ds(2 * f, f)
        self.ds_deep = _ds(2 * f, f)

    def forward(self, stages: StageFeatures, branch: str) -> TwofoldFeatures:
        if branch not in ("template", "instance"):
            raise ValueError(f"branch must be 'template' or 'instance', got {branch!r}")
        f1, f2, f3, f4 = stages
        s = f2.shape[-1]
        if f3.shape[-1] != s or f4.shape[-1] != s or f1.shape[-1] < s:
            raise ValueError("stage features do not follow the stride plan")
        if branch == "template":
            k = self.template_spatial

            def outer(t):
                return center_crop(t, k)
        else:
            def outer(t):
                return t
        shallow = self.ds_shallow(torch.cat(
            [outer(self.ds1(center_crop(f1, s))), outer(self.ds2(f2))], dim=1))
        deep = self.ds_deep(torch.cat([outer(self.ds3(f3)), outer(self.ds4(f4))], dim=1))
        return TwofoldFeatures(shallow, deep)


class TwofoldBackbone(nn.Module):
    """Shared-weight extractor used by both the template and instance branch."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.body = ResNetStages(cfg)
        self.fusion = TwofoldFusion(cfg)

    def set_branch(self, branch: str) -> None:
        for m in self.modules():
            if isinstance(m, BranchBatchNorm2d):
                m.branch = branch

    def extract_stages(self, patch: torch.Tensor, branch: str = "template") -> StageFeatures:
        self.set_branch(branch)
        return self.body(patch)

    def forward(self, patch: torch.Tensor, branch: str) -> TwofoldFeatures:
        self.set_branch(branch)
        return self.fusion(self.body(patch), branch)

    def load_pretrained(self, path, mapping: dict[str, str] | None = None) -> list[str]:
        """Load a torchvision-style ResNet-50 state dict into ``body``.

        ``mapping`` renames source keys (prefix -> prefix) before loading;
        ``fc.*`` entries are dropped. Returns the list of body keys that were
        not found in the source.
        """
        state = torch.load(path, map_location="cpu", weights_only=True)
        if "state_dict" in state:
            state = state["state_dict"]
        renamed = {}
        for key, value in state.items():
            for src, dst in (mapping or {}).items():
                if key.startswith(src):
                    key = dst + key[len(src):]
                    break
            if key.startswith("fc."):
                continue
            renamed[key] = value
        missing, _ = self.body.load_state_dict(renamed, strict=False)
        return list(missing)
