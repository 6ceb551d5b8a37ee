"""Online tracking loop.

Per frame: crop the search region around the last box, fuse the template
bank, correlate, pick the best cell under a cosine window and a scale/ratio
change penalty, decode and smooth its box, then refresh the current template
at the new box.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
import torch

from .backbone import TwofoldFeatures
from .geometry import Box, CropSpec, as_image, crop_patch, exemplar_side
from .head import box_at, decode_boxes
from .model import TSFSiam, to_tensor
from .template_update import TemplateBank, advance_bank

__all__ = [
    "TrackConfig",
    "TrackerState",
    "ModelCorruptionError",
    "Tracker",
    "SequenceRun",
    "VARIANTS",
    "run_sequence",
    "track_sequence",
]

# ablation name -> (update_templates, depths)
VARIANTS = {
    "full": (True, "both"),
    "tsf-only": (False, "both"),
    "mu-only": (True, "deep"),
    "baseline": (False, "deep"),
}


class ModelCorruptionError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrackConfig:
    window_influence: float = 0.40
    penalty_k: float = 0.10
    size_lr: float = 0.30
    template_size: int = 127
    instance_size: int = 255
    update_templates: bool = True
    depths: str = "both"
    # reserved: pause template updates below this score; None = never
    confidence_gate: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.window_influence <= 1.0:
            raise ValueError("window_influence must lie in [0, 1]")
        if not 0.0 <= self.size_lr <= 1.0:
            raise ValueError("size_lr must lie in [0, 1]")
        if self.penalty_k < 0:
            raise ValueError("penalty_k must be non-negative")
        if self.depths not in ("both", "deep"):
            raise ValueError(f"depths must be 'both' or 'deep', got {self.depths!r}")

    @classmethod
    def for_variant(cls, variant: str, **kw) -> "TrackConfig":
        update, depths = VARIANTS[variant]
        return cls(update_templates=update, depths=depths, **kw)


@dataclass(frozen=True)
class TrackerState:
    current_box: Box
    bank: TemplateBank
    config: TrackConfig
    frame_index: int = 0
    # flat index of the response cell chosen on the last frame
    last_cell: int | None = None


def _clamp(box: Box, height: int, width: int) -> Box:
    return Box(min(max(box.cx, 0.0), width), min(max(box.cy, 0.0), height),
               min(max(box.w, 1.0), width), min(max(box.h, 1.0), height))


def _change(r):
    return np.maximum(r, 1.0 / r)


def _context_size(w, h):
    p = (w + h) / 2.0
    return np.sqrt((w + p) * (h + p))


class Tracker:
    def __init__(self, model: TSFSiam, config: TrackConfig | None = None):
        self.model = model.eval()
        self.config = config or TrackConfig(template_size=model.cfg.template_size,
                                            instance_size=model.cfg.instance_size)
        n = model.cfg.response_size
        hanning = np.hanning(n)
        self.window = np.outer(hanning, hanning).ravel()
        self.grid = model.grid

    @torch.no_grad()
    def template_features(self, frame: np.ndarray, box: Box) -> TwofoldFeatures:
        crop = CropSpec(box.cx, box.cy, exemplar_side(box), self.config.template_size)
        return self.model.template(to_tensor(crop_patch(frame, crop)))

    def init(self, frame, box0: Box) -> TrackerState:
        frame = as_image(frame)
        if box0.w < 1 or box0.h < 1:
            raise ValueError(f"initial box too small: {box0}")
        box0 = _clamp(box0, frame.shape[0], frame.shape[1])
        z_in = self.template_features(frame, box0)
        return TrackerState(box0, TemplateBank.start(z_in), self.config, 0)

    @torch.no_grad()
    def track_frame(self, state: TrackerState, frame) -> tuple[TrackerState, Box, float]:
        cfg = state.config
        frame = as_image(frame)
        height, width = frame.shape[:2]
        box = state.current_box
        s_z = exemplar_side(box)
        scale_z = cfg.template_size / s_z
        crop = CropSpec(box.cx, box.cy, s_z * cfg.instance_size / cfg.template_size, cfg.instance_size)
        x = self.model.instance(to_tensor(crop_patch(frame, crop)))

        bank = state.bank
        z = self.model.fuse_templates(bank) if cfg.update_templates else bank.z_in
        resp = self.model.respond(z, x, cfg.depths)
        if not (torch.isfinite(resp.cls).any() and torch.isfinite(resp.reg).any()):
            raise ModelCorruptionError(f"non-finite response at frame {state.frame_index + 1}")

        score = torch.softmax(resp.cls[0], dim=0)[1].reshape(-1).numpy().astype(np.float64)
        score = np.nan_to_num(score, nan=0.0)
        patch_boxes = decode_boxes(resp.reg[0], self.grid)
        w_p, h_p = patch_boxes[2].ravel(), patch_boxes[3].ravel()

        s_c = _change(_context_size(w_p, h_p) / _context_size(box.w * scale_z, box.h * scale_z))
        r_c = _change((box.w / box.h) / (w_p / h_p))
        penalty = np.exp(-(r_c * s_c - 1.0) * cfg.penalty_k)
        pscore = penalty * score
        pscore = pscore * (1.0 - cfg.window_influence) + self.window * cfg.window_influence
        best = int(np.argmax(pscore))

        pred = crop.box_to_frame(box_at(patch_boxes, best))
        lr = penalty[best] * score[best] * cfg.size_lr
        new_box = _clamp(Box(pred.cx, pred.cy,
                             box.w * (1 - lr) + pred.w * lr,
                             box.h * (1 - lr) + pred.h * lr), height, width)

        if cfg.update_templates:
            gate_open = cfg.confidence_gate is None or score[best] >= cfg.confidence_gate
            z_ac = z if gate_open else bank.z_ac
            bank = advance_bank(bank, z_ac, self.template_features(frame, new_box))
        # without updates the bank stays frozen at its first-frame state
        new_state = TrackerState(new_box, bank, cfg, state.frame_index + 1, best)
        return new_state, new_box, float(score[best])


@dataclass
class SequenceRun:
    boxes: list
    scores: list
    frame_seconds: list
    bank_digests: list = field(default_factory=list)

    @property
    def fps(self) -> float:
        total = sum(self.frame_seconds)
        return len(self.frame_seconds) / total if total > 0 else float("inf")


def _digest(bank: TemplateBank) -> dict:
    out = {}
    for name in ("z_in", "z_ac", "z_cu"):
        h = hashlib.sha256()
        for t in getattr(bank, name):
            h.update(t.numpy().tobytes())
        out[name] = h.hexdigest()[:16]
    return out


def track_sequence(frames: Iterable, box0: Box, model: TSFSiam, config: TrackConfig | None = None,
                   debug: bool = False) -> SequenceRun:
    """One-pass run: initialise on the first frame, never re-initialise."""
    tracker = Tracker(model, config)
    it = iter(frames)
    try:
        first = next(it)
    except StopIteration:
        raise ValueError("sequence has no frames") from None
    t0 = time.perf_counter()
    state = tracker.init(first, box0)
    run = SequenceRun([state.current_box], [1.0], [time.perf_counter() - t0])
    if debug:
        run.bank_digests.append(_digest(state.bank))
    for frame in it:
        t0 = time.perf_counter()
        state, box, score = tracker.track_frame(state, frame)
        run.frame_seconds.append(time.perf_counter() - t0)
        run.boxes.append(box)
        run.scores.append(score)
        if debug:
            run.bank_digests.append(_digest(state.bank))
    # first output is the given box, unclamped
    run.boxes[0] = box0
    return run


def run_sequence(frames: Iterable, box0: Box, model: TSFSiam, config: TrackConfig | None = None):
    run = track_sequence(frames, box0, model, config)
    return list(zip(run.boxes, run.scores))
