"""Dataset ingestion, synthetic infrared sequences and result files.

Directory layouts understood by :func:`load_dataset`:

``vot_tir``
    ``<root>/<sequence>/groundtruth.txt`` plus the frames (``*.png``,
    ``*.jpg`` or ``*.bmp``) either next to it or in a ``color/`` or ``ir/``
    sub-directory. Optional per-frame ``<attribute>.tag`` files (one 0/1 per
    line) and an optional ``attributes.txt`` (one tag per line).
``gtot``
    ``<root>/<sequence>/i/`` (thermal frames), ``<root>/<sequence>/v/``
    (visible, ignored) and ``groundTruth_i.txt`` with ``x1 y1 x2 y2`` lines.
    Optional ``attributes.txt``.
``synthetic``
    What ``tsftrack synth`` writes: ``<root>/manifest.json`` listing the
    sequences, each ``<root>/<id>/img/%08d.png`` + ``groundtruth.txt``
    (VOT 4-value) + ``attributes.txt``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .geometry import Box, as_image

log = logging.getLogger(__name__)

__all__ = [
    "ParseError",
    "SequenceRecord",
    "SynthSpec",
    "parse_vot_groundtruth",
    "parse_gtot_groundtruth",
    "parse_results",
    "format_vot_groundtruth",
    "format_gtot_groundtruth",
    "load_dataset",
    "generate_synthetic",
    "write_sequence",
    "write_synthetic_dataset",
    "synthetic_suite",
    "write_results",
    "read_frame",
    "atomic_write_text",
]

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

_NUM = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?|[nN][aA][nN]"
_VOT_LINE = re.compile(rf"^\s*({_NUM})\s*(?:,\s*({_NUM})\s*){{3}}$|^\s*({_NUM})\s*(?:,\s*({_NUM})\s*){{7}}$")
_GTOT_LINE = re.compile(r"^\s*(?:[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)"
                        r"(?:(?:\s*,\s*|\s+)(?:[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)){3}\s*$")
_SPLIT = re.compile(r"\s*,\s*|\s+")


class ParseError(ValueError):
    def __init__(self, source, line_no: int, message: str):
        super().__init__(f"{source}:{line_no}: {message}")
        self.line_no = line_no


def _lines(text: str) -> list[str]:
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    return lines


def _read_text(file) -> tuple[str, str]:
    if hasattr(file, "read"):
        return file.read(), getattr(file, "name", "<stream>")
    path = Path(file)
    return path.read_text(encoding="utf-8"), str(path)


def parse_vot_groundtruth(file) -> tuple[list[Box | None], list[bool]]:
    """Parse a VOT ``groundtruth.txt``.

    4-value lines are ``x,y,w,h``; 8-value lines are polygons reduced to
    their min/max envelope. NaN or zero-area lines give an invalid frame
    (``None``).
    """
    text, source = _read_text(file)
    boxes, valid = [], []
    lines = _lines(text)
    if not lines:
        raise ParseError(source, 1, "empty ground-truth file")
    for i, line in enumerate(lines, start=1):
        if not _VOT_LINE.match(line):
            raise ParseError(source, i, f"expected 4 or 8 comma-separated numbers, got {line!r}")
        v = [float(t) for t in line.strip().split(",")]
        if len(v) == 8:
            xs, ys = v[0::2], v[1::2]
            x1, y1, w, h = min(xs), min(ys), max(xs) - min(xs), max(ys) - min(ys)
        else:
            x1, y1, w, h = v
        ok = all(math.isfinite(t) for t in (x1, y1, w, h)) and w > 0 and h > 0
        boxes.append(Box.from_xywh(x1, y1, w, h) if ok else None)
        valid.append(ok)
    return boxes, valid


def parse_gtot_groundtruth(file) -> list[Box]:
    """Parse GTOT ``x1 y1 x2 y2`` lines (whitespace or comma separated)."""
    text, source = _read_text(file)
    boxes = []
    lines = _lines(text)
    if not lines:
        raise ParseError(source, 1, "empty ground-truth file")
    for i, line in enumerate(lines, start=1):
        if not _GTOT_LINE.match(line):
            raise ParseError(source, i, f"expected 4 numbers x1 y1 x2 y2, got {line!r}")
        x1, y1, x2, y2 = (float(t) for t in _SPLIT.split(line.strip()))
        if not all(math.isfinite(t) for t in (x1, y1, x2, y2)):
            raise ParseError(source, i, f"non-finite coordinate in {line!r}")
        if x2 <= x1 or y2 <= y1:
            raise ParseError(source, i, f"corner pair is not ordered: {line!r}")
        boxes.append(Box.from_corners(x1, y1, x2, y2))
    return boxes


def _num(v: float) -> str:
    # shortest text that reads back to the same float; integers without ".0"
    r = repr(float(v))
    return r[:-2] if r.endswith(".0") else r


def format_vot_groundtruth(boxes) -> str:
    """Inverse of :func:`parse_vot_groundtruth` for 4-value files (invalid frames as NaN)."""
    lines = [",".join(_num(t) for t in b.to_xywh()) if b is not None else "nan,nan,nan,nan" for b in boxes]
    return "\n".join(lines) + "\n"


def format_gtot_groundtruth(boxes, sep: str = " ") -> str:
    """Inverse of :func:`parse_gtot_groundtruth`."""
    return "\n".join(sep.join(_num(t) for t in b.to_corners()) for b in boxes) + "\n"


def parse_results(file, fmt: str = "xywh") -> list[Box | None]:
    """Tracker result file, one box per line; ``fmt`` is ``xywh`` or ``corners``.

    Lines that do not describe a positive-area box become ``None``.
    """
    text, source = _read_text(file)
    out = []
    for i, line in enumerate(_lines(text), start=1):
        parts = [p for p in _SPLIT.split(line.strip()) if p]
        if len(parts) != 4:
            raise ParseError(source, i, f"expected 4 values, got {line!r}")
        try:
            a, b, c, d = (float(p) for p in parts)
        except ValueError:
            raise ParseError(source, i, f"non-numeric value in {line!r}") from None
        w, h = (c, d) if fmt == "xywh" else (c - a, d - b)
        if all(math.isfinite(t) for t in (a, b, w, h)) and w > 0 and h > 0:
            out.append(Box.from_xywh(a, b, w, h))
        else:
            out.append(None)
    return out


def write_results(path, boxes, scores=None, frame_seconds=None, extra=None) -> None:
    """Box file (``x,y,w,h`` per line) plus a ``<name>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["{:.4f},{:.4f},{:.4f},{:.4f}".format(*b.to_xywh()) for b in boxes]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if scores is not None or frame_seconds is not None:
        side = dict(extra or {})
        side["scores"] = [float(s) for s in (scores or [])]
        if frame_seconds is not None:
            total = float(sum(frame_seconds))
            side["frame_seconds"] = [float(t) for t in frame_seconds]
            side["fps"] = len(frame_seconds) / total if total > 0 else None
        path.with_suffix(".json").write_text(json.dumps(side, indent=1), encoding="utf-8")


def read_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint16 or arr.dtype == np.int32:
        arr = arr.astype(np.float32) * (255.0 / 65535.0)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return as_image(arr)


@dataclass
class SequenceRecord:
    id: str
    frame_paths: list
    gt: list
    attributes: frozenset = frozenset()
    valid: list | None = None
    frames_data: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.valid is None:
            self.valid = [b is not None for b in self.gt]
        n = len(self.frames_data) if self.frames_data is not None else len(self.frame_paths)
        if len(self.gt) != n or len(self.valid) != n:
            raise ValueError(f"{self.id}: {n} frames but {len(self.gt)} ground-truth entries")
        if n == 0 or not self.valid[0]:
            raise ValueError(f"{self.id}: first frame needs a valid ground-truth box")
        self.attributes = frozenset(self.attributes)

    def __len__(self):
        return len(self.gt)

    def frame(self, i: int) -> np.ndarray:
        if self.frames_data is not None:
            return as_image(self.frames_data[i])
        return read_frame(self.frame_paths[i])

    def frames(self):
        for i in range(len(self)):
            yield self.frame(i)


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _read_attributes(seq_dir: Path) -> set:
    tags = set()
    listing = seq_dir / "attributes.txt"
    if listing.exists():
        tags.update(t.strip() for t in listing.read_text().splitlines() if t.strip())
    for tag_file in seq_dir.glob("*.tag"):
        flags = [t.strip() for t in tag_file.read_text().splitlines() if t.strip()]
        if any(f not in ("0", "0.0") for f in flags):
            tags.add(tag_file.stem)
    return tags


def _vot_sequence(seq_dir: Path) -> SequenceRecord | None:
    gt_file = seq_dir / "groundtruth.txt"
    if not gt_file.exists():
        return None
    frame_dir = next((seq_dir / d for d in ("ir", "color", "img") if (seq_dir / d).is_dir()), seq_dir)
    frames = _image_files(frame_dir)
    gt, valid = parse_vot_groundtruth(gt_file)
    if len(frames) != len(gt):
        log.warning("%s: %d frames but %d ground-truth lines, skipped", seq_dir.name, len(frames), len(gt))
        return None
    return SequenceRecord(seq_dir.name, frames, gt, _read_attributes(seq_dir), valid)


def _gtot_sequence(seq_dir: Path) -> SequenceRecord | None:
    gt_file = next((seq_dir / n for n in ("groundTruth_i.txt", "groundtruth_i.txt") if (seq_dir / n).exists()),
                   None)
    if gt_file is None or not (seq_dir / "i").is_dir():
        return None
    frames = _image_files(seq_dir / "i")
    gt = parse_gtot_groundtruth(gt_file)
    if len(frames) != len(gt):
        log.warning("%s: %d thermal frames but %d ground-truth lines, skipped", seq_dir.name, len(frames), len(gt))
        return None
    return SequenceRecord(seq_dir.name, frames, gt, _read_attributes(seq_dir))


def load_dataset(root, kind: str) -> list[SequenceRecord]:
    root = Path(root)
    if kind not in ("vot_tir", "gtot", "synthetic"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if kind == "synthetic" and (root / "manifest.json").exists():
        ids = [s["id"] for s in json.loads((root / "manifest.json").read_text())["sequences"]]
        dirs = [root / i for i in ids]
    else:
        dirs = sorted(p for p in root.iterdir() if p.is_dir())
    loader = _gtot_sequence if kind == "gtot" else _vot_sequence
    records = []
    for d in dirs:
        if not d.is_dir():
            log.warning("sequence directory %s is missing", d)
            continue
        rec = loader(d)
        if rec is not None:
            records.append(rec)
    if not records:
        log.warning("no sequences found under %s", root)
    return records


@dataclass
class SynthSpec:
    """Recipe for one synthetic infrared sequence (hot blob on textured noise)."""

    frame_size: tuple = (160, 160)  # (height, width)
    length: int = 40
    waypoints: list = field(default_factory=lambda: [(80.0, 80.0), (80.0, 80.0)])  # (x, y)
    size_start: tuple = (24.0, 24.0)  # gt (w, h), i.e. 4 sigma
    size_end: tuple | None = None
    intensity_start: float = 200.0
    intensity_end: float | None = None
    background: float = 60.0
    texture: float = 12.0
    noise_sigma: float = 0.0
    distractors: int = 0
    seed: int = 0
    id: str = "synth"
    attributes: tuple = ()

    def __post_init__(self):
        self.frame_size = tuple(int(v) for v in self.frame_size)
        self.waypoints = [tuple(float(c) for c in p) for p in self.waypoints]
        self.size_start = tuple(float(v) for v in self.size_start)
        if self.size_end is not None:
            self.size_end = tuple(float(v) for v in self.size_end)
        self.attributes = tuple(self.attributes)
        if self.length < 1 or len(self.waypoints) < 1:
            raise ValueError("synthetic sequence needs length >= 1 and at least one waypoint")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def _interp_path(points, n):
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 1 or n == 1:
        return np.repeat(pts[:1], n, axis=0)
    seg = np.linspace(0, len(pts) - 1, n)
    lo = np.minimum(np.floor(seg).astype(int), len(pts) - 2)
    frac = (seg - lo)[:, None]
    return pts[lo] * (1 - frac) + pts[lo + 1] * frac


def _blob(yy, xx, cx, cy, sx, sy):
    return np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))


def generate_synthetic(spec: SynthSpec) -> SequenceRecord:
    """Render the sequence in memory; frames are uint8-valued grayscale."""
    rng = np.random.default_rng(spec.seed)
    height, width = spec.frame_size
    n = spec.length
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5

    texture = gaussian_filter(rng.standard_normal((height, width)), 3.0)
    texture /= max(texture.std(), 1e-12)
    base = spec.background + spec.texture * texture

    t = np.linspace(0.0, 1.0, n)
    size_end = spec.size_end or spec.size_start
    ws = spec.size_start[0] * (size_end[0] / spec.size_start[0]) ** t
    hs = spec.size_start[1] * (size_end[1] / spec.size_start[1]) ** t
    inten_end = spec.intensity_start if spec.intensity_end is None else spec.intensity_end
    intens = spec.intensity_start + (inten_end - spec.intensity_start) * t
    path = _interp_path(spec.waypoints, n)
    cxs = np.clip(path[:, 0], ws / 2, width - ws / 2)
    cys = np.clip(path[:, 1], hs / 2, height - hs / 2)

    # distractors: dimmer blobs drifting with constant velocity, bouncing off borders
    d_pos = rng.uniform([0, 0], [width, height], size=(spec.distractors, 2))
    d_vel = rng.normal(0, 1.5, size=(spec.distractors, 2))
    d_sig = rng.uniform(2.0, 5.0, size=spec.distractors)
    d_amp = rng.uniform(40.0, 110.0, size=spec.distractors)

    frames, gt = [], []
    for k in range(n):
        img = base.copy()
        for j in range(spec.distractors):
            img += d_amp[j] * _blob(yy, xx, d_pos[j, 0], d_pos[j, 1], d_sig[j], d_sig[j])
        img += (intens[k] - spec.background) * _blob(yy, xx, cxs[k], cys[k], ws[k] / 4, hs[k] / 4)
        if spec.noise_sigma > 0:
            img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.float32))
        gt.append(Box(float(cxs[k]), float(cys[k]), float(ws[k]), float(hs[k])))
        d_pos += d_vel
        for axis, lim in ((0, width), (1, height)):
            out = (d_pos[:, axis] < 0) | (d_pos[:, axis] > lim)
            d_vel[out, axis] *= -1
            d_pos[:, axis] = np.clip(d_pos[:, axis], 0, lim)
    return SequenceRecord(spec.id, [], gt, frozenset(spec.attributes), frames_data=frames)


def synthetic_suite(count: int, seed: int, motion: bool = True, size_change: bool = True,
                    length: int = 40, frame_size=(160, 160), prefix: str = "seq",
                    distractors: int = 2, noise_sigma: float = 4.0) -> list[SynthSpec]:
    """Randomised specs: piecewise-linear motion and/or geometric size change."""
    rng = np.random.default_rng(seed)
    h, w = frame_size
    specs = []
    for i in range(count):
        s0 = float(rng.uniform(14, 30))
        aspect = float(rng.uniform(0.7, 1.4))
        size_start = (s0 * aspect, s0 / aspect)
        tags = []
        if size_change:
            f = float(rng.choice([rng.uniform(0.55, 0.75), rng.uniform(1.4, 1.8)]))
            size_end = (size_start[0] * f, size_start[1] * f)
            tags.append("size_change")
        else:
            size_end = None
        if motion:
            pts = rng.uniform([0.25 * w, 0.25 * h], [0.75 * w, 0.75 * h], size=(3, 2))
            tags.append("motion_change")
        else:
            pts = np.array([[w / 2, h / 2]])
        specs.append(SynthSpec(
            frame_size=frame_size, length=length, waypoints=pts.tolist(),
            size_start=size_start, size_end=size_end,
            intensity_start=float(rng.uniform(170, 230)), intensity_end=float(rng.uniform(150, 240)),
            background=float(rng.uniform(40, 80)), texture=float(rng.uniform(6, 16)),
            noise_sigma=noise_sigma, distractors=distractors, seed=int(rng.integers(2**31)),
            id=f"{prefix}{i:03d}", attributes=tuple(tags)))
    return specs


def write_sequence(record: SequenceRecord, seq_dir) -> None:
    seq_dir = Path(seq_dir)
    (seq_dir / "img").mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(record.frames_data):
        Image.fromarray(np.asarray(frame, dtype=np.uint8)[:, :, 0] if np.ndim(frame) == 3
                        else np.asarray(frame, dtype=np.uint8), mode="L").save(seq_dir / "img" / f"{k + 1:08d}.png")
    lines = ["{:.4f},{:.4f},{:.4f},{:.4f}".format(*b.to_xywh()) for b in record.gt]
    (seq_dir / "groundtruth.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (seq_dir / "attributes.txt").write_text("".join(f"{t}\n" for t in sorted(record.attributes)),
                                            encoding="utf-8")


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary sibling and rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_synthetic_dataset(specs: list[SynthSpec], out_dir, extra: dict | None = None) -> dict:
    """Render and store every spec; returns the manifest written to disk.

    ``extra`` fields are merged into the manifest (the CLI adds run metadata).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in specs:
        rec = generate_synthetic(spec)
        write_sequence(rec, out_dir / spec.id)
        entries.append({"id": spec.id, "spec": asdict(spec), "spec_hash": spec.digest(),
                        "attributes": sorted(rec.attributes), "frames": len(rec)})
    manifest = dict(extra or {})
    manifest.update({"format": "tsftrack-synthetic/1", "sequences": entries})
    atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return manifest
