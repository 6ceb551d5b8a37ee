"""Full tracker network and its checkpoint archive.

Checkpoint layout (``torch.save`` of a plain dict)::

    {"format": "tsftrack-checkpoint/1",
     "config": <ModelConfig as JSON string>,
     "tensors": {name: tensor}}

Tensor names are ``<namespace>.<module path>.<role>`` with namespaces
``backbone``, ``head`` and ``mu``; e.g. ``backbone.body.layer1.0.conv1.weight``,
``head.fusion`` (alpha_s, alpha_d, beta_s, beta_d), ``mu.deep.conv2.bias``.
"""
from __future__ import annotations

import hashlib
import io
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, TwofoldBackbone, TwofoldFeatures
from .head import PointGrid, ResponsePair, TwofoldHead
from .template_update import MultiTemplateUpdate, TemplateBank

CHECKPOINT_FORMAT = "tsftrack-checkpoint/1"

# torchvision / pysot ResNet-50 keys -> our names; used by load_pretrained
PRETRAINED_NAME_MAP = {
    "module.": "",
    "backbone.": "",
    "features.": "",
}


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    template_size: int = 127
    instance_size: int = 255
    stride: int = 8
    mu_hidden: int | None = None

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)

    @property
    def response_size(self) -> int:
        return self.instance_spatial - self.backbone.template_spatial + 1

    @property
    def instance_spatial(self) -> int:
        return _stage2_size(self.instance_size)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def _stage2_size(patch: int) -> int:
    s = (patch - 7) // 2 + 1  # stem conv
    s = (s + 2 - 3) // 2 + 1  # max pool
    return (s - 3) // 2 + 1  # stage 2


def to_tensor(patches) -> torch.Tensor:
    """HxWx3 (or NxHxWx3) float image(s) on a 0-255 scale -> N x 3 x H x W."""
    arr = np.asarray(patches, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))) / 255.0


class TSFSiam(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        c = self.cfg.backbone.fused_channels
        self.backbone = TwofoldBackbone(self.cfg.backbone)
        self.head = TwofoldHead(c, reg_init=self.cfg.template_size / 4.0)
        self.mu = MultiTemplateUpdate(c, self.cfg.mu_hidden)

    @property
    def grid(self) -> PointGrid:
        return PointGrid(self.cfg.response_size, self.cfg.stride, self.cfg.instance_size)

    def template(self, patch: torch.Tensor) -> TwofoldFeatures:
        return self.backbone(patch, "template")

    def instance(self, patch: torch.Tensor) -> TwofoldFeatures:
        return self.backbone(patch, "instance")

    def respond(self, z: TwofoldFeatures, x: TwofoldFeatures, depths: str = "both") -> ResponsePair:
        return self.head(z, x, depths)

    def forward(self, template_patch, search_patch) -> ResponsePair:
        return self.head(self.template(template_patch), self.instance(search_patch))

    def fuse_templates(self, bank: TemplateBank) -> TwofoldFeatures:
        return self.mu(bank)


def save_checkpoint(model: TSFSiam, path) -> str:
    """Write the archive and return its sha256."""
    tensors = OrderedDict((k, v.detach().clone().contiguous()) for k, v in model.state_dict().items())
    payload = {"format": CHECKPOINT_FORMAT, "config": model.cfg.to_json(), "tensors": tensors}
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> TSFSiam:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
    model = TSFSiam(ModelConfig.from_json(payload["config"]))
    model.load_state_dict(payload["tensors"])
    model.eval()
    return model


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def namespace_checksum(model: nn.Module, prefix: str = "") -> str:
    """sha256 over every parameter/buffer whose name starts with ``prefix``."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
