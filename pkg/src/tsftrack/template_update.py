"""Multi-template update (MU) module.

For each depth T in {shallow, deep}:

    z_final^T = conv2(relu(conv1(concat(z_in^T, z_ac^T, z_cu^T)))) + z_in^T

with independent parameters per depth. After every frame the accumulated
template is replaced by the fused one.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import nn

from .backbone import TwofoldFeatures

__all__ = [
    "TemplateBank",
    "MUBranch",
    "MultiTemplateUpdate",
    "mu_loss",
    "advance_bank",
    "linear_update",
]


@dataclass(frozen=True)
class TemplateBank:
    z_in: TwofoldFeatures
    z_ac: TwofoldFeatures
    z_cu: TwofoldFeatures
    z_final: TwofoldFeatures | None = None

    @classmethod
    def start(cls, z_in: TwofoldFeatures) -> "TemplateBank":
        return cls(z_in=z_in, z_ac=z_in, z_cu=z_in)

    def __post_init__(self):
        members = [self.z_in, self.z_ac, self.z_cu]
        if self.z_final is not None:
            members.append(self.z_final)
        for depth in range(2):
            shapes = {tuple(m[depth].shape) for m in members}
            if len(shapes) != 1:
                raise ValueError(f"template bank members disagree in shape: {sorted(shapes)}")


class MUBranch(nn.Module):
    """CV(RE(CV(.))) on the channel concatenation of three templates."""

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(1, 3 * channels // 8)
        self.channels = channels
        self.conv1 = nn.Conv2d(3 * channels, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, channels, 1)
        self.reset_parameters()

    def reset_parameters(self):
        # zero output layer: the branch starts as the identity on z_in while
        # conv1 keeps a live gradient path
        nn.init.normal_(self.conv1.weight, std=0.01)
        nn.init.zeros_(self.conv1.bias)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, z_in, z_ac, z_cu):
        x = torch.cat([z_in, z_ac, z_cu], dim=1)
        if x.shape[1] != 3 * self.channels:
            raise ValueError(f"expected {self.channels} channels per template, got {z_in.shape[1]}")
        return self.conv2(torch.relu(self.conv1(x))) + z_in


class MultiTemplateUpdate(nn.Module):
    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        self.shallow = MUBranch(channels, hidden)
        self.deep = MUBranch(channels, hidden)

    def forward(self, bank: TemplateBank) -> TwofoldFeatures:
        return TwofoldFeatures(
            self.shallow(bank.z_in.shallow, bank.z_ac.shallow, bank.z_cu.shallow),
            self.deep(bank.z_in.deep, bank.z_ac.deep, bank.z_cu.deep),
        )

    fuse_templates = forward

    def zero_(self) -> "MultiTemplateUpdate":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


def mu_loss(predicted: TwofoldFeatures, target: TwofoldFeatures) -> torch.Tensor:
    """Euclidean distance to the ground-truth template, summed over depths.

    Batched inputs give the per-sample distance averaged over the batch.
    """
    total = 0.0
    for p, t in zip(predicted, target):
        if p.shape != t.shape:
            raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(t.shape)}")
        diff = (p - t).reshape(p.shape[0], -1) if p.dim() == 4 else (p - t).reshape(1, -1)
        total = total + torch.linalg.vector_norm(diff, dim=1).mean()
    return total


def advance_bank(bank: TemplateBank, z_final: TwofoldFeatures, z_cu_next: TwofoldFeatures) -> TemplateBank:
    return replace(bank, z_ac=z_final, z_cu=z_cu_next, z_final=None)


def linear_update(z_ac: TwofoldFeatures, z_cu: TwofoldFeatures, rate: float) -> TwofoldFeatures:
    """Running-average template, kept only as an ablation baseline."""
    return TwofoldFeatures(*[(1 - rate) * a + rate * c for a, c in zip(z_ac, z_cu)])
