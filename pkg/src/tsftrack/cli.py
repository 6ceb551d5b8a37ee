"""Command-line front end.

    tsftrack synth    --out DIR [--spec FILE | --count N --seed S]
    tsftrack train    --stage {1,2} --out DIR [--from CKPT] [--config FILE] [--set k=v ...]
    tsftrack track    --checkpoint CKPT --dataset ROOT --out DIR [--variant V | --no-update | --tsf-only | --mu-only]
    tsftrack eval     --results DIR --dataset ROOT --out DIR [--plots] [--per-sequence]
    tsftrack compare  REPORT [REPORT ...] --out DIR
    tsftrack overlay  --results DIR --dataset ROOT --out DIR
    tsftrack reference [--out FILE]

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image, ImageDraw

from . import __version__
from .backbone import BackboneConfig
from .config import ConfigError, load_config, reference_markdown
from .data_io import (ParseError, SynthSpec, atomic_write_text, generate_synthetic, load_dataset, parse_results,
                      synthetic_suite, write_results, write_synthetic_dataset)
from .evaluation import compare_report, evaluate_result_files, format_table, table_to_csv
from .model import PRETRAINED_NAME_MAP, ModelConfig, TSFSiam, file_sha256, load_checkpoint, save_checkpoint
from .tracker import VARIANTS, ModelCorruptionError, TrackConfig, track_sequence
from .training import (TrainConfig, TrainingDivergedError, harvest_mu_tuples, make_pairs, train_stage1,
                       train_stage2, write_log_csv)

log = logging.getLogger("tsftrack")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"
GT_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 0)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None = None
    weight_checksum: str | None = None
    started: str = ""
    finished: str | None = None
    status: str = "running"
    outputs: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, manifest: RunManifest, merge: dict | None = None) -> None:
    data = manifest.to_dict()
    if merge:
        data.update(merge)
    atomic_write_text(Path(out_dir) / MANIFEST, json.dumps(data, indent=1, sort_keys=True, default=str) + "\n")


def _start(args, out: Path, config: dict, seed=None, checksum=None) -> RunManifest:
    out.mkdir(parents=True, exist_ok=True)
    m = RunManifest(command=" ".join(["tsftrack"] + args.argv), config=config, seed=seed,
                    weight_checksum=checksum, started=_now())
    write_manifest(out, m)
    return m


def _finish(out: Path, m: RunManifest, outputs, merge: dict | None = None) -> None:
    m.outputs = sorted(str(Path(p).relative_to(out)) for p in outputs)
    m.finished = _now()
    m.status = "complete"
    write_manifest(out, m, merge)


def _config(args) -> dict:
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or ())


def _model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(BackboneConfig.from_variant(m["variant"], pretrained_weights_path=m["pretrained_weights_path"]),
                       template_size=m["template_size"], instance_size=m["instance_size"])


def _train_config(cfg: dict, stage: int) -> TrainConfig:
    if stage == 1:
        return TrainConfig(stage=1, seed=cfg["seed"], **cfg["stage1"])
    s2 = dict(cfg["stage2"])
    s2.pop("data_seed")
    return TrainConfig.stage2_defaults(seed=cfg["seed"], **s2)


def _load_records(root, kind):
    try:
        return load_dataset(root, kind)
    except FileNotFoundError as e:
        raise DataError(str(e)) from e


def _load_model(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (KeyError, ValueError, RuntimeError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e


# ---------------------------------------------------------------- synth

def _synth_specs(args) -> tuple[list[SynthSpec], dict]:
    if args.spec:
        data = yaml.safe_load(Path(args.spec).read_text())
        if not isinstance(data, dict) or not ({"suite", "sequences"} & set(data)):
            raise UsageError(f"{args.spec}: expected a mapping with 'suite' or 'sequences'")
        if "sequences" in data:
            try:
                specs = [SynthSpec(**s) for s in data["sequences"]]
            except TypeError as e:
                raise UsageError(f"{args.spec}: {e}") from e
            return specs, data
        suite = dict(data["suite"])
    else:
        suite = {"count": args.count, "seed": args.seed}
    if args.length is not None:
        suite["length"] = args.length
    try:
        return synthetic_suite(**suite), {"suite": suite}
    except TypeError as e:
        raise UsageError(f"bad suite parameters: {e}") from e


def cmd_synth(args) -> int:
    out = Path(args.out)
    specs, source = _synth_specs(args)
    seed = source.get("suite", {}).get("seed")
    m = _start(args, out, source, seed=seed)
    merge = write_synthetic_dataset(specs, out, extra=m.to_dict())
    outputs = [out / s.id for s in specs]
    m.extra = {"spec_hashes": {s.id: s.digest() for s in specs}}
    _finish(out, m, outputs, {"format": merge["format"], "sequences": merge["sequences"]})
    log.info("wrote %d sequences to %s", len(specs), out)
    return EXIT_OK


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    seed = cfg["seed"]
    rows = []
    if args.stage == 1:
        tcfg = _train_config(cfg, 1)
        torch.manual_seed(seed)
        mcfg = _model_config(cfg)
        model = TSFSiam(mcfg)
        if mcfg.backbone.pretrained_weights_path:
            missing = model.backbone.load_pretrained(mcfg.backbone.pretrained_weights_path, PRETRAINED_NAME_MAP)
            if missing:
                log.warning("pretrained weights left %d backbone tensors untouched", len(missing))
        m = _start(args, out, cfg, seed=seed)
        pairs = make_pairs(tcfg, mcfg.template_size, mcfg.instance_size)
        train_stage1(pairs, tcfg, model, rows)
    else:
        if not args.init:
            raise UsageError("stage 2 needs the stage-1 checkpoint: pass --from <stage1>/model.pt")
        if not Path(args.init).is_file():
            raise DataError(f"stage-1 checkpoint {args.init} does not exist; run 'tsftrack train --stage 1' first")
        model = _load_model(args.init)
        tcfg = _train_config(cfg, 2)
        m = _start(args, out, cfg, seed=seed, checksum=file_sha256(args.init))
        seqs = [generate_synthetic(s) for s in
                synthetic_suite(cfg["stage2"]["mu_sequences"], seed=cfg["stage2"]["data_seed"], prefix="mu")]
        tconf = TrackConfig(window_influence=cfg["track"]["window_influence"], penalty_k=cfg["track"]["penalty_k"],
                            size_lr=cfg["track"]["size_lr"], template_size=model.cfg.template_size,
                            instance_size=model.cfg.instance_size)
        tuples = harvest_mu_tuples(model, seqs, tconf)
        log.info("harvested %d template tuples from %d sequences", len(tuples), len(seqs))
        train_stage2(tuples, tcfg, model, rows)
    ckpt = out / "model.pt"
    m.weight_checksum = save_checkpoint(model, ckpt)
    write_log_csv(rows, out / "loss.csv")
    _finish(out, m, [ckpt, out / "loss.csv"])
    print(f"checkpoint {ckpt} sha256 {m.weight_checksum}")
    return EXIT_OK


# ---------------------------------------------------------------- track

def _variant(args, cfg) -> str:
    for flag, name in (("no_update", "baseline"), ("tsf_only", "tsf-only"), ("mu_only", "mu-only")):
        if getattr(args, flag):
            return name
    return args.variant or cfg["track"]["variant"]


def cmd_track(args) -> int:
    cfg = _config(args)
    variant = _variant(args, cfg)
    if variant not in VARIANTS:
        raise ConfigError("track.variant", f"unknown variant {variant!r}")
    model = _load_model(args.checkpoint)
    tconf = TrackConfig.for_variant(variant, window_influence=cfg["track"]["window_influence"],
                                    penalty_k=cfg["track"]["penalty_k"], size_lr=cfg["track"]["size_lr"],
                                    template_size=model.cfg.template_size, instance_size=model.cfg.instance_size)
    records = _load_records(args.dataset, args.kind)
    if args.sequence:
        records = [r for r in records if r.id in set(args.sequence)]
    if not records:
        raise DataError(f"no sequences to track under {args.dataset}")
    out = Path(args.out)
    torch.manual_seed(cfg["seed"])
    m = _start(args, out, cfg, seed=cfg["seed"], checksum=file_sha256(args.checkpoint))
    m.extra = {"variant": variant, "dataset": str(args.dataset), "kind": args.kind}

    def one(rec):
        run = track_sequence(rec.frames(), rec.gt[0], model, tconf, debug=args.debug_dump)
        path = out / f"{rec.id}.txt"
        write_results(path, run.boxes, run.scores, run.frame_seconds, {"variant": variant})
        written = [path, path.with_suffix(".json")]
        if args.debug_dump:
            dbg = out / f"{rec.id}.debug.json"
            atomic_write_text(dbg, json.dumps({"variant": variant, "update_templates": tconf.update_templates,
                                               "depths": tconf.depths, "banks": run.bank_digests}, indent=1))
            written.append(dbg)
        log.info("%s: %d frames, %.1f fps", rec.id, len(run.boxes), run.fps)
        return rec.id, len(run.frame_seconds), float(sum(run.frame_seconds)), written

    workers = max(1, args.workers)
    if workers == 1:
        done = [one(r) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(one, records))
    frames = sum(d[1] for d in done)
    seconds = sum(d[2] for d in done)
    m.extra["fps"] = frames / seconds if seconds > 0 else None
    m.extra["per_sequence_fps"] = {d[0]: (d[1] / d[2] if d[2] > 0 else None) for d in done}
    _finish(out, m, [p for d in done for p in d[3]])
    print(f"tracked {len(done)} sequences, {frames} frames, {m.extra['fps']:.1f} fps")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    cfg = _config(args)
    records = _load_records(args.dataset, args.kind)
    if not records:
        raise DataError(f"no sequences under {args.dataset}")
    results = Path(args.results)
    if not results.is_dir():
        raise DataError(f"results directory {results} does not exist")
    name = args.tracker
    if name is None:
        run = results / MANIFEST
        name = json.loads(run.read_text()).get("extra", {}).get("variant") if run.exists() else None
        name = name or results.name
    out = Path(args.out)
    m = _start(args, out, cfg)
    try:
        report = evaluate_result_files(records, results, tracker=name, dataset=Path(args.dataset).name,
                                       fmt=args.result_format, per_sequence=args.per_sequence)
    except ParseError:
        raise
    except ValueError as e:
        raise DataError(str(e)) from e
    for seq in report["missing"]:
        log.warning("no result file for sequence %s", seq)
    path = out / "report.json"
    atomic_write_text(path, json.dumps(report, indent=1, sort_keys=True) + "\n")
    outputs = [path]
    if args.plots:
        from .plotting import report_plots
        outputs += report_plots(report, out)
    _finish(out, m, outputs)
    print(f"{name}: AUC {report['auc']:.4f}  precision@20 {report['precision_at_20']:.4f}  "
          f"({report['frames']} frames, {len(report['per_sequence'])} sequences)")
    return EXIT_OK


# ---------------------------------------------------------------- compare

def cmd_compare(args) -> int:
    reports = []
    for p in args.reports:
        try:
            reports.append(json.loads(Path(p).read_text()))
        except FileNotFoundError as e:
            raise DataError(f"report not found: {p}") from e
        except json.JSONDecodeError as e:
            raise DataError(f"{p}: not a JSON report ({e})") from e
    for p, r in zip(args.reports, reports):
        if "auc" not in r or "curves" not in r:
            raise DataError(f"{p}: missing auc/curves fields")
    out = Path(args.out)
    m = _start(args, out, {"reports": [str(p) for p in args.reports]})
    rows = compare_report(reports)
    csv_path, txt_path = out / "table.csv", out / "table.txt"
    atomic_write_text(csv_path, table_to_csv(rows))
    text = format_table(rows)
    atomic_write_text(txt_path, text + "\n")
    curves = out / "curves.json"
    atomic_write_text(curves, json.dumps([{"tracker": r["tracker"], "success": r["curves"]["success"],
                                           "precision": r["curves"]["precision"]} for r in reports], indent=1))
    from .plotting import compare_plots
    plots = compare_plots(reports, out)
    _finish(out, m, [csv_path, txt_path, curves, *plots])
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------- overlay

def _pixel_rect(box):
    x1, y1, x2, y2 = box.to_corners()
    # pixel i covers [i, i+1): outline the pixels the box touches
    return [int(np.floor(x1)), int(np.floor(y1)), int(np.ceil(x2)) - 1, int(np.ceil(y2)) - 1]


def draw_boxes(frame: np.ndarray, gt=None, pred=None) -> Image.Image:
    img = Image.fromarray(np.clip(frame, 0, 255).astype(np.uint8)[..., :3])
    draw = ImageDraw.Draw(img)
    if gt is not None:
        draw.rectangle(_pixel_rect(gt), outline=GT_COLOR)
    if pred is not None:
        draw.rectangle(_pixel_rect(pred), outline=PRED_COLOR)
    return img


def cmd_overlay(args) -> int:
    records = _load_records(args.dataset, args.kind)
    results = Path(args.results)
    todo = []
    for rec in records:
        if args.sequence and rec.id not in args.sequence:
            continue
        path = results / f"{rec.id}.txt"
        if not path.exists():
            continue
        pred = parse_results(path, args.result_format) if path.stat().st_size else []
        if not pred:
            log.warning("%s: empty result file, skipped", path)
            continue
        if len(pred) != len(rec):
            raise DataError(f"{path}: {len(pred)} boxes for {len(rec)} frames")
        todo.append((rec, pred))
    if not todo:
        log.warning("no results to draw in %s", results)
        return EXIT_OK
    out = Path(args.out)
    m = _start(args, out, {"results": str(results), "dataset": str(args.dataset), "every": args.every})
    legend = out / "legend.json"
    atomic_write_text(legend, json.dumps({"ground_truth": list(GT_COLOR), "prediction": list(PRED_COLOR)}) + "\n")
    outputs = [legend]
    for rec, pred in todo:
        seq_dir = out / rec.id
        seq_dir.mkdir(parents=True, exist_ok=True)
        for i in range(0, len(rec), args.every):
            path = seq_dir / f"{i + 1:08d}.png"
            draw_boxes(rec.frame(i), rec.gt[i], pred[i]).save(path)
        outputs.append(seq_dir)
    _finish(out, m, outputs)
    return EXIT_OK


# ---------------------------------------------------------------- reference

def reference_page(parser: argparse.ArgumentParser) -> str:
    parts = ["# tsftrack command reference", "",
             "Generated by `tsftrack reference`. Exit codes: 0 success, 1 usage error, 2 data error, "
             "3 numerical failure.", ""]
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, p in sub.choices.items():
        parts += [f"## tsftrack {name}", "", "```", p.format_help().rstrip(), "```", ""]
    parts += ["## Config keys", "",
              "Set in a YAML file (`--config`) as `section: {key: value}` or on the command line as "
              "`--set section.key=value`. Unknown keys exit with status 1.", "", reference_markdown(), ""]
    return "\n".join(parts)


def cmd_reference(args) -> int:
    text = reference_page(build_parser())
    if args.out:
        atomic_write_text(args.out, text)
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_config(p):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def _add_dataset(p, required=True):
    p.add_argument("--dataset", required=required, help="dataset root directory")
    p.add_argument("--kind", default="synthetic", choices=["vot_tir", "gtot", "synthetic"],
                   help="dataset layout (default: synthetic)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsftrack", description="Twofold-feature Siamese infrared tracker.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a seed-pinned synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="YAML/JSON with 'suite' (synthetic_suite kwargs) or 'sequences' (list of specs)")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length", type=int, default=None, help="frames per sequence")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="stage 1 (backbone + head) or stage 2 (template update)")
    p.add_argument("--stage", type=int, choices=[1, 2], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--from", dest="init", help="stage-1 checkpoint (stage 2 only)")
    _add_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the tracker on every sequence of a dataset")
    p.add_argument("--checkpoint", required=True)
    _add_dataset(p)
    p.add_argument("--out", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--variant", choices=sorted(VARIANTS), help="ablation variant (default from config: full)")
    g.add_argument("--no-update", action="store_true", help="same as --variant baseline")
    g.add_argument("--tsf-only", action="store_true", help="same as --variant tsf-only")
    g.add_argument("--mu-only", action="store_true", help="same as --variant mu-only")
    p.add_argument("--sequence", action="append", help="restrict to this sequence id (repeatable)")
    p.add_argument("--debug-dump", action="store_true", help="write per-frame template-bank digests")
    p.add_argument("--workers", type=int, default=1, help="sequences tracked in parallel")
    _add_config(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score result files: success/precision report")
    p.add_argument("--results", required=True)
    _add_dataset(p)
    p.add_argument("--out", required=True)
    p.add_argument("--tracker", help="name in the report (default: variant or directory name)")
    p.add_argument("--plots", action="store_true", help="also write success.png and precision.png")
    p.add_argument("--per-sequence", action="store_true", help="average per sequence instead of pooling frames")
    p.add_argument("--result-format", choices=["xywh", "corners"], default="xywh")
    _add_config(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="table and overlaid curves for several reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("overlay", help="draw ground truth and predictions on frames")
    p.add_argument("--results", required=True)
    _add_dataset(p)
    p.add_argument("--out", required=True)
    p.add_argument("--sequence", action="append")
    p.add_argument("--every", type=int, default=1, help="draw every n-th frame")
    p.add_argument("--result-format", choices=["xywh", "corners"], default="xywh")
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("reference", help="print the flag and config reference page")
    p.add_argument("--out")
    p.set_defaults(func=cmd_reference)
    return parser


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def _setup_logging(level: int) -> None:
    # configure the package logger only; records still propagate to root handlers
    pkg = logging.getLogger("tsftrack")
    pkg.setLevel(level)
    if not any(isinstance(h, _StderrHandler) for h in pkg.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        pkg.addHandler(handler)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    args.argv = argv
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    _setup_logging(level)
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"tsftrack: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, FileNotFoundError) as e:
        print(f"tsftrack: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, ModelCorruptionError, FloatingPointError) as e:
        print(f"tsftrack: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    log.debug("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
