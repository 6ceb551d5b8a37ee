"""Two-stage desk-scale training.

Stage 1 fits backbone + head on (template, search) pairs with a balanced
softmax cross-entropy plus an IoU loss on positive cells. Stage 2 freezes
everything except the multi-template update module and fits it on template
tuples harvested by running the stage-1 tracker.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import TwofoldFeatures
from .data_io import SequenceRecord, SynthSpec, generate_synthetic, synthetic_suite
from .geometry import Box, CropSpec, crop_patch, exemplar_side
from .head import PointGrid, ResponsePair
from .model import TSFSiam, to_tensor
from .template_update import TemplateBank, mu_loss
from .tracker import TrackConfig, Tracker

log = logging.getLogger(__name__)

POS, NEG, IGNORE = 1, 0, -1

__all__ = [
    "LabelGrid",
    "PairSample",
    "TrainConfig",
    "TrainingDivergedError",
    "encode_targets",
    "loss_stage1",
    "make_pairs",
    "lr_schedule",
    "train_stage1",
    "evaluate_stage1_loss",
    "MUTuple",
    "harvest_mu_tuples",
    "train_stage2",
    "mean_mu_loss",
    "write_log_csv",
]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LabelGrid:
    cls: np.ndarray  # (Hr, Wr) int8: 1 pos, 0 neg, -1 ignore
    reg: np.ndarray  # (4, Hr, Wr) left/top/right/bottom distances


def encode_targets(gt: Box, grid: PointGrid, shrink: float = 0.5) -> LabelGrid:
    """Cells inside the gt box shrunk by ``shrink`` are positive, cells outside
    the gt box negative, the ring in between ignored. Without any interior
    cell the cell nearest to the box center is forced positive."""
    xs, ys = grid.points()
    dx, dy = np.abs(xs - gt.cx), np.abs(ys - gt.cy)
    labels = np.full(xs.shape, IGNORE, dtype=np.int8)
    labels[(dx > gt.w / 2) | (dy > gt.h / 2)] = NEG
    labels[(dx <= gt.w * shrink / 2) & (dy <= gt.h * shrink / 2)] = POS
    if not (labels == POS).any():
        nearest = np.unravel_index(np.argmin(dx ** 2 + dy ** 2), xs.shape)
        labels[nearest] = POS
    reg = np.stack([xs - gt.x1, ys - gt.y1, gt.x2 - xs, gt.y2 - ys])
    # a forced cell can sit outside a tiny box
    reg = np.maximum(reg, 0.0)
    return LabelGrid(labels, reg.astype(np.float64))


def _iou_ltrb(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    pl, pt, pr, pb = pred.unbind(1)
    tl, tt, tr, tb = target.unbind(1)
    area_p = (pl + pr) * (pt + pb)
    area_t = (tl + tr) * (tt + tb)
    inter = (torch.minimum(pl, tl) + torch.minimum(pr, tr)) * (torch.minimum(pt, tt) + torch.minimum(pb, tb))
    return inter / (area_p + area_t - inter)


def loss_stage1(pred: ResponsePair, cls_target: torch.Tensor, reg_target: torch.Tensor,
                reg_weight: float = 1.0, parts: bool = False):
    """Balanced cross-entropy over pos/neg cells + ``reg_weight`` * mean(1 - IoU) over pos cells.

    ``cls_target`` is (N, Hr, Wr) with 1/0/-1, ``reg_target`` (N, 4, Hr, Wr).
    """
    if pred.cls.shape[-2:] != cls_target.shape[-2:]:
        raise ValueError(f"prediction {tuple(pred.cls.shape)} vs labels {tuple(cls_target.shape)}")
    logp = torch.log_softmax(pred.cls, dim=1)
    pos = cls_target == POS
    neg = cls_target == NEG
    if not pos.any() and not neg.any():
        raise ValueError("sample has neither positive nor negative cells")
    terms = []
    if pos.any():
        terms.append(-logp[:, 1][pos].mean())
    if neg.any():
        terms.append(-logp[:, 0][neg].mean())
    cls_loss = sum(terms) / len(terms)
    if pos.any():
        p = pred.reg.permute(0, 2, 3, 1)[pos]
        t = reg_target.permute(0, 2, 3, 1)[pos]
        reg_loss = (1.0 - _iou_ltrb(p, t)).mean()
    else:
        reg_loss = pred.reg.sum() * 0.0
    total = cls_loss + reg_weight * reg_loss
    return (total, cls_loss, reg_loss) if parts else total


@dataclass
class PairSample:
    template_patch: np.ndarray  # (127, 127, 3)
    search_patch: np.ndarray  # (255, 255, 3)
    gt_box_in_patch: Box


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 10
    batch_size: int = 32
    warmup_epochs: int = 2
    warmup_lr: float = 0.001
    lr_start: float = 0.01
    lr_end: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    reg_weight: float = 1.0
    grad_clip: float = 10.0
    seed: int = 0
    # stage 1 data
    pairs: int = 500
    pair_sequences: int = 50
    max_frame_gap: int = 10
    max_shift: float = 64.0
    scale_jitter: float = 0.25
    # stage 2
    mu_sequences: int = 20
    # stage-2 uses a log-spaced schedule from lr_start to lr_end, no warmup
    log_schedule: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if min(self.lr_start, self.lr_end) < 0:
            raise ValueError("learning rates must be non-negative")

    @classmethod
    def stage2_defaults(cls, **kw) -> "TrainConfig":
        base = dict(stage=2, epochs=20, batch_size=16, warmup_epochs=0, lr_start=0.05, lr_end=0.005,
                    log_schedule=True, weight_decay=0.0)
        base.update(kw)
        return cls(**base)


def lr_schedule(cfg: TrainConfig) -> list[float]:
    """Per-epoch learning rates: linear warmup from ``warmup_lr`` to
    ``lr_start``, then exponential (log-linear) decay to ``lr_end``."""
    n = cfg.epochs
    warm = 0 if cfg.log_schedule else min(cfg.warmup_epochs, n)
    lrs = [cfg.warmup_lr + (cfg.lr_start - cfg.warmup_lr) * e / max(warm, 1) for e in range(warm)]
    rest = n - warm
    if rest == 1:
        lrs.append(cfg.lr_start)
    elif rest > 1:
        if cfg.lr_start > 0 and cfg.lr_end > 0:
            ratio = cfg.lr_end / cfg.lr_start
            lrs += [cfg.lr_start * ratio ** (i / (rest - 1)) for i in range(rest)]
        else:
            lrs += list(np.linspace(cfg.lr_start, cfg.lr_end, rest))
    return [float(v) for v in lrs]


def make_pairs(cfg: TrainConfig, template_size: int = 127, instance_size: int = 255,
               specs: list[SynthSpec] | None = None) -> list[PairSample]:
    """Seed-pinned (template, search) pairs cut from synthetic sequences."""
    rng = np.random.default_rng(cfg.seed)
    specs = specs or synthetic_suite(cfg.pair_sequences, seed=cfg.seed + 1000, prefix="train")
    per_seq = int(math.ceil(cfg.pairs / len(specs)))
    pairs = []
    for spec in specs:
        rec = generate_synthetic(spec)
        n = len(rec)
        for _ in range(per_seq):
            if len(pairs) >= cfg.pairs:
                break
            a = int(rng.integers(n))
            b = int(np.clip(a + rng.integers(-cfg.max_frame_gap, cfg.max_frame_gap + 1), 0, n - 1))
            ga, gb = rec.gt[a], rec.gt[b]
            zcrop = CropSpec(ga.cx, ga.cy, exemplar_side(ga), template_size)
            side = exemplar_side(gb) * instance_size / template_size * math.exp(
                rng.uniform(-cfg.scale_jitter, cfg.scale_jitter))
            scale = side / instance_size
            sx, sy = rng.uniform(-cfg.max_shift, cfg.max_shift, size=2) * scale
            xcrop = CropSpec(gb.cx + sx, gb.cy + sy, side, instance_size)
            pairs.append(PairSample(
                crop_patch(rec.frame(a), zcrop).round().clip(0, 255).astype(np.uint8),
                crop_patch(rec.frame(b), xcrop).round().clip(0, 255).astype(np.uint8),
                xcrop.box_to_patch(gb)))
    return pairs


def _label_tensors(pairs: list[PairSample], grid: PointGrid):
    labels = [encode_targets(p.gt_box_in_patch, grid) for p in pairs]
    cls = torch.from_numpy(np.stack([l.cls for l in labels]).astype(np.int64))
    reg = torch.from_numpy(np.stack([l.reg for l in labels]).astype(np.float32))
    return cls, reg


def _check_finite(loss, epoch, step):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"loss became {loss.item()} at epoch {epoch}, step {step}")


def train_stage1(pairs: list[PairSample], cfg: TrainConfig, model: TSFSiam, log_rows: list | None = None) -> TSFSiam:
    """SGD with momentum over backbone + head; the MU module is left untouched."""
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    grid = model.grid
    cls_t, reg_t = _label_tensors(pairs, grid)
    z_all = np.stack([p.template_patch for p in pairs])
    x_all = np.stack([p.search_patch for p in pairs])
    params = [p for n, p in model.named_parameters() if not n.startswith("mu.")]
    opt = torch.optim.SGD(params, lr=0.0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rows = log_rows if log_rows is not None else []
    for epoch, lr in enumerate(lr_schedule(cfg)):
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        model.mu.eval()
        order = torch.randperm(len(pairs), generator=gen)
        sums = np.zeros(3)
        count = 0
        for step, start in enumerate(range(0, len(pairs), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            idx_np = idx.numpy()
            pred = model(to_tensor(z_all[idx_np]), to_tensor(x_all[idx_np]))
            total, c, r = loss_stage1(pred, cls_t[idx], reg_t[idx], cfg.reg_weight, parts=True)
            _check_finite(total, epoch, step)
            if lr > 0:
                opt.zero_grad()
                total.backward()
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
            sums += [total.item() * len(idx), c.item() * len(idx), r.item() * len(idx)]
            count += len(idx)
        row = {"stage": 1, "epoch": epoch, "lr": lr, "loss": sums[0] / max(count, 1),
               "cls_loss": sums[1] / max(count, 1), "reg_loss": sums[2] / max(count, 1)}
        rows.append(row)
        log.info("stage1 epoch %d lr %.5f loss %.4f (cls %.4f reg %.4f)", epoch, lr, row["loss"],
                 row["cls_loss"], row["reg_loss"])
    model.eval()
    return model


@torch.no_grad()
def evaluate_stage1_loss(pairs: list[PairSample], model: TSFSiam, reg_weight: float = 1.0,
                         batch_size: int = 32) -> float:
    model.eval()
    cls_t, reg_t = _label_tensors(pairs, model.grid)
    total, n = 0.0, 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        pred = model(to_tensor(np.stack([p.template_patch for p in chunk])),
                     to_tensor(np.stack([p.search_patch for p in chunk])))
        total += loss_stage1(pred, cls_t[start:start + len(chunk)], reg_t[start:start + len(chunk)],
                             reg_weight).item() * len(chunk)
        n += len(chunk)
    return total / n


@dataclass
class MUTuple:
    z_in: TwofoldFeatures
    z_ac: TwofoldFeatures
    z_cu: TwofoldFeatures
    z_gt: TwofoldFeatures


def harvest_mu_tuples(model: TSFSiam, sequences: list[SequenceRecord],
                      config: TrackConfig | None = None) -> list[MUTuple]:
    """Track each sequence with template updates on and record, for frames
    1..N-1, the bank used on that frame plus the template cut at its gt box."""
    config = config or TrackConfig(template_size=model.cfg.template_size,
                                   instance_size=model.cfg.instance_size, update_templates=True)
    tracker = Tracker(model, config)
    out = []
    for rec in sequences:
        frames = rec.frames()
        state = tracker.init(next(frames), rec.gt[0])
        for i, frame in enumerate(frames, start=1):
            gt = rec.gt[i]
            if gt is not None:
                bank = state.bank
                out.append(MUTuple(bank.z_in, bank.z_ac, bank.z_cu, tracker.template_features(frame, gt)))
            state, _, _ = tracker.track_frame(state, frame)
    return out


def _stack(tuples: list[MUTuple], name: str) -> TwofoldFeatures:
    members = [getattr(t, name) for t in tuples]
    return TwofoldFeatures(torch.cat([m.shallow for m in members]), torch.cat([m.deep for m in members]))


@torch.no_grad()
def mean_mu_loss(model: TSFSiam, tuples: list[MUTuple], identity: bool = False) -> float:
    """Mean per-tuple MU loss; ``identity`` scores the zero-branch baseline z_final = z_in."""
    if not tuples:
        raise ValueError("no tuples")
    z_in, z_ac, z_cu, z_gt = (_stack(tuples, n) for n in ("z_in", "z_ac", "z_cu", "z_gt"))
    pred = z_in if identity else model.mu(TemplateBank(z_in, z_ac, z_cu))
    return float(mu_loss(pred, z_gt))


def train_stage2(tuples: list[MUTuple], cfg: TrainConfig, model: TSFSiam, log_rows: list | None = None) -> TSFSiam:
    """SGD on the MU loss; only ``model.mu`` parameters change."""
    if not tuples:
        raise ValueError("stage 2 needs at least one template tuple")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    z_in, z_ac, z_cu, z_gt = (_stack(tuples, n) for n in ("z_in", "z_ac", "z_cu", "z_gt"))
    model.eval()
    opt = torch.optim.SGD(model.mu.parameters(), lr=0.0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rows = log_rows if log_rows is not None else []
    n = len(tuples)
    for epoch, lr in enumerate(lr_schedule(cfg)):
        for g in opt.param_groups:
            g["lr"] = lr
        order = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]

            def pick(f):
                return TwofoldFeatures(f.shallow[idx], f.deep[idx])

            pred = model.mu(TemplateBank(pick(z_in), pick(z_ac), pick(z_cu)))
            loss = mu_loss(pred, pick(z_gt))
            _check_finite(loss, epoch, step)
            if lr > 0:
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.mu.parameters(), cfg.grad_clip)
                opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        row = {"stage": 2, "epoch": epoch, "lr": lr, "loss": total / count, "cls_loss": "", "reg_loss": ""}
        rows.append(row)
        log.info("stage2 epoch %d lr %.2e mu loss %.4f", epoch, lr, row["loss"])
    return model


def write_log_csv(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["stage", "epoch", "lr", "loss", "cls_loss", "reg_loss"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
