"""Command line: generate, train, detect, eval, sweep.

Exit status 0 on success, 1 on runtime failure, 2 on bad usage. Outputs go
under ``$TWOSUBNET_TAL_OUT`` (default ``./runs``) unless ``--out`` is given.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

from .. import __version__
from ..inference import AVERAGE_MAP_THRESHOLDS, evaluate, read_detections, write_detections
from ..pipeline import detect_split, ground_truth_detections
from ..subnet2 import CaptureConfig
from ..training import PHASES, TrainConfig, run_three_step_training
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DataSource, RunManifest, align_to_dataset, train_preset
from .data import save_dataset
from .synthetic import PRESETS, generate_synthetic_dataset, preset
from .sweep import ALPHA_GRID, run_sweep, sweep_csv

log = logging.getLogger("twosubnet_tal")

OUT_ENV = "TWOSUBNET_TAL_OUT"
DETECTION_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


class UsageError(Exception):
    pass


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def resolve_out(arg: Optional[str], default: str) -> Path:
    return Path(arg) if arg else out_root() / default


def _n_value(text: str) -> Optional[int]:
    if text.lower() == "none":
        return None
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("n must be positive or 'none'")
    return v


# -- flag groups ------------------------------------------------------------

class _NAction(argparse.Action):
    """Records that --n was given, since None is itself a valid value."""

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        namespace.n_given = True


def add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data source")
    g.add_argument("--preset", choices=sorted(PRESETS), help="synthetic preset")
    g.add_argument("--data", help="dataset directory written by 'generate'")
    g.add_argument("--data-seed", type=int, help="override the synthetic preset's seed")
    g.add_argument("--noise", type=float, help="override the synthetic preset's noise level")


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and schedule")
    g.add_argument("--seed", type=int)
    g.add_argument("--alpha", type=int, help="segments per stage in self-adaptive pooling")
    g.add_argument("--n", type=_n_value, action=_NAction, help="recoded feature width, or 'none'")
    g.add_argument("--pooling", choices=["average", "max"])
    g.add_argument("--capture", choices=["compact", "reference"], help="capture-module layer plan")
    g.add_argument("--share-streams", action="store_true", default=None)
    g.add_argument("--backbone-widths", type=int, nargs="+")
    g.add_argument("--lambda-tiou", type=float)
    g.add_argument("--mu-reg", type=float)
    g.add_argument("--aux-weight", type=float)
    g.add_argument("--tiou-mode", choices=["softmax", "sigmoid"])
    g.add_argument("--keep-fraction", type=float, help="hard-example fraction for the tIoU loss")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--lr", type=float, nargs=3, metavar=("STEP1", "STEP2", "STEP3"))
    g.add_argument("--iterations", type=int, nargs=3, metavar=("STEP1", "STEP2", "STEP3"))
    g.add_argument("--step3-mix", type=float, nargs=2, metavar=("W1", "W2"))
    g.add_argument("--aux-in-step3", dest="aux_in_step3", action="store_true", default=None)
    g.add_argument("--no-aux-in-step3", dest="aux_in_step3", action="store_false")
    g.add_argument("--nms", type=float, help="NMS tIoU threshold (default 0.2)")
    g.add_argument("--loose-matching", action="store_true", default=None,
                   help="count tIoU equal to the threshold as a match")
    g.add_argument("--thresholds", type=float, nargs="+", help="actionness grouping thresholds")
    g.add_argument("--merge-gap", type=int)
    g.add_argument("--pos-thr", type=float)
    g.add_argument("--bg-ceiling", type=float)
    g.add_argument("--jitter-per-gt", type=int)
    g.add_argument("--jitter-scale", type=float)


def data_source(args) -> Optional[DataSource]:
    if args.preset and args.data:
        raise UsageError("--preset and --data are mutually exclusive")
    if args.data:
        if args.data_seed is not None or args.noise is not None:
            raise UsageError("--data-seed/--noise apply to synthetic presets only")
        return DataSource(path=args.data)
    if args.preset:
        over = {}
        if args.data_seed is not None:
            over["seed"] = args.data_seed
        if args.noise is not None:
            over["noise"] = args.noise
        return DataSource.from_preset(args.preset, **over)
    return None


def build_config(args, base: TrainConfig) -> TrainConfig:
    """Apply every explicitly given flag on top of ``base``."""
    a = args
    s2 = base.subnet2
    if a.capture == "reference":
        s2 = dataclasses.replace(s2, capture=CaptureConfig.reference())
    elif a.capture == "compact":
        s2 = dataclasses.replace(s2, capture=CaptureConfig.compact())
    s2_over = {k: v for k, v in (("alpha", a.alpha), ("pooling", a.pooling),
                                 ("share_streams", a.share_streams)) if v is not None}
    if a.n_given:
        s2_over["n"] = a.n
    s2 = dataclasses.replace(s2, **s2_over)
    if s2.alpha < 1:
        raise UsageError("--alpha must be at least 1")
    bb = base.backbone
    if a.backbone_widths:
        bb = dataclasses.replace(bb, widths=tuple(a.backbone_widths))
    w = base.weights
    w_over = {k: v for k, v in (("lambda_tiou", a.lambda_tiou), ("mu_reg", a.mu_reg),
                                ("aux_weight", a.aux_weight)) if v is not None}
    if any(v < 0 for v in w_over.values()):
        raise UsageError("loss weights must be non-negative")
    w = dataclasses.replace(w, **w_over)
    pc = base.proposals
    pc_over = {k: v for k, v in (("thresholds", a.thresholds), ("merge_gap", a.merge_gap),
                                 ("pos_thr", a.pos_thr), ("bg_ceiling", a.bg_ceiling),
                                 ("jitter_per_gt", a.jitter_per_gt),
                                 ("jitter_scale", a.jitter_scale)) if v is not None}
    pc = dataclasses.replace(pc, **pc_over)
    over = {k: v for k, v in (("seed", a.seed), ("tiou_mode", a.tiou_mode),
                              ("keep_fraction", a.keep_fraction), ("batch_size", a.batch_size),
                              ("momentum", a.momentum), ("weight_decay", a.weight_decay),
                              ("lr", a.lr), ("iterations", a.iterations),
                              ("step3_mix", a.step3_mix), ("aux_in_step3", a.aux_in_step3),
                              ("nms_threshold", a.nms)) if v is not None}
    if a.loose_matching:
        over["strict_matching"] = False
    if "batch_size" in over and (over["batch_size"] < 8 or over["batch_size"] % 8):
        raise UsageError("--batch-size must be a positive multiple of 8 (1:6:1 composition)")
    if "keep_fraction" in over and not 0 < over["keep_fraction"] <= 1:
        raise UsageError("--keep-fraction must lie in (0, 1]")
    if "iterations" in over and min(over["iterations"]) < 0:
        raise UsageError("--iterations must be non-negative")
    try:
        return dataclasses.replace(base, subnet2=s2, backbone=bb, weights=w, proposals=pc,
                                   **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _config_flags_given(args) -> List[str]:
    names = ["seed", "alpha", "pooling", "capture", "share_streams", "backbone_widths",
             "lambda_tiou", "mu_reg", "aux_weight", "tiou_mode", "keep_fraction", "batch_size",
             "momentum", "weight_decay", "lr", "iterations", "step3_mix", "aux_in_step3",
             "thresholds", "merge_gap", "pos_thr", "bg_ceiling", "jitter_per_gt",
             "jitter_scale", "loose_matching", "nms"]
    given = [n for n in names if getattr(args, n, None) is not None]
    if getattr(args, "n_given", False):
        given.append("n")
    return given


# -- commands ---------------------------------------------------------------

def cmd_generate(args) -> int:
    over = {k: v for k, v in (("seed", args.data_seed), ("noise", args.noise),
                              ("num_train", args.num_train), ("num_test", args.num_test),
                              ("workers", args.workers)) if v is not None}
    cfg = preset(args.preset, **over)
    ds = generate_synthetic_dataset(cfg)
    out = save_dataset(ds, resolve_out(args.out, f"data/{args.preset}"))
    print(f"wrote {len(ds.videos)} videos to {out} (fingerprint {ds.fingerprint()[:16]})")
    return 0


def cmd_train(args) -> int:
    if args.manifest:
        if _config_flags_given(args) or args.preset or args.data:
            raise UsageError("--manifest fixes the whole configuration; drop other config flags")
        manifest = RunManifest.read(args.manifest)
        ds = manifest.load_dataset()
        cfg = manifest.config
        label = Path(args.manifest).parent.name + "-rerun"
    else:
        source = data_source(args)
        if source is None:
            raise UsageError("train needs --preset, --data or --manifest")
        ds = source.load()
        cfg = build_config(args, align_to_dataset(train_preset(args.preset), ds))
        manifest = RunManifest(cfg, source, ds.fingerprint())
        label = f"{args.preset or Path(args.data).name}-seed{cfg.seed}"
    phases = tuple(args.phases) if args.phases else PHASES
    out = resolve_out(args.out, f"train/{label}")
    out.mkdir(parents=True, exist_ok=True)
    manifest.write(out / "manifest.json")
    model = None
    if args.resume:
        ck = load_checkpoint(args.resume, expected_hash=cfg.hash())
        model = ck.build_model()
    hist = open(out / "history.jsonl", "w", encoding="utf-8")

    def on_record(rec):
        hist.write(json.dumps(rec, sort_keys=True) + "\n")
        if rec["iteration"] % 25 == 0:
            log.info("%s it %d total %.4f", rec["phase"], rec["iteration"], rec["total"])

    def on_phase_end(phase, iters, m):
        path = save_checkpoint(out / "checkpoints" / f"{phase}.pt", m, cfg, phase, iters)
        print(f"{phase}: checkpoint {path}")

    t0 = time.time()
    try:
        res = run_three_step_training(ds, cfg, phases=phases, on_record=on_record,
                                      on_phase_end=on_phase_end, model=model)
    finally:
        hist.close()
    last = res.history[-1] if res.history else {}
    print(f"trained {len(res.history)} iterations in {time.time() - t0:.1f}s; "
          f"final total {last.get('total')}; run dir {out}")
    return 0


def _run_inputs(args):
    """Manifest + checkpoint path from --run or explicit flags."""
    manifest_path = args.manifest
    ckpt = args.checkpoint
    if args.run:
        run = Path(args.run)
        manifest_path = manifest_path or run / "manifest.json"
        if ckpt is None:
            for ph in reversed(PHASES):
                if (run / "checkpoints" / f"{ph}.pt").is_file():
                    ckpt = run / "checkpoints" / f"{ph}.pt"
                    break
            else:
                ckpt = run / "checkpoints" / "step3.pt"
    return manifest_path, ckpt


def _dataset_for(args, manifest: Optional[RunManifest]):
    source = data_source(args)
    if source is not None:
        return source.load()
    if manifest is not None:
        return manifest.load_dataset()
    raise UsageError("no dataset: give --run, --manifest, --preset or --data")


def cmd_detect(args) -> int:
    manifest_path, ckpt_path = _run_inputs(args)
    if ckpt_path is None:
        raise UsageError("detect needs --run or --checkpoint")
    manifest = RunManifest.read(manifest_path) if manifest_path else None
    ck = load_checkpoint(ckpt_path,
                         expected_hash=manifest.config.hash() if manifest is not None else None)
    ds = _dataset_for(args, manifest)
    cfg = ck.config
    if args.nms is not None:
        cfg = dataclasses.replace(cfg, nms_threshold=args.nms)
    dets = detect_split(ck.build_model(), ds, args.split, cfg)
    default = (Path(args.run) / f"detections-{args.split}.jsonl") if args.run else \
        out_root() / f"detections-{args.split}.jsonl"
    out = Path(args.out) if args.out else default
    out.parent.mkdir(parents=True, exist_ok=True)
    write_detections(out, dets)
    print(f"wrote {len(dets)} detections to {out}")
    return 0


def cmd_eval(args) -> int:
    manifest = RunManifest.read(args.manifest) if args.manifest else None
    if args.run and manifest is None:
        manifest = RunManifest.read(Path(args.run) / "manifest.json")
    ds = _dataset_for(args, manifest)
    if args.gt_as_detections:
        dets = ground_truth_detections(ds, args.split)
    else:
        path = args.detections or (Path(args.run) / f"detections-{args.split}.jsonl"
                                   if args.run else None)
        if path is None:
            raise UsageError("eval needs --detections, --run or --gt-as-detections")
        dets = read_detections(path)
    if args.average:
        thresholds = AVERAGE_MAP_THRESHOLDS
    else:
        thresholds = tuple(args.eval_thresholds or DETECTION_THRESHOLDS)
    strict = not (manifest is not None and not manifest.config.strict_matching)
    if args.loose_matching:
        strict = False
    res = evaluate(dets, ds.ground_truths(args.split), thresholds, strict,
                   classes=range(ds.num_classes))
    csv_text = res.to_csv()
    default = (Path(args.run) / f"metrics-{args.split}.csv") if args.run else \
        out_root() / f"metrics-{args.split}.csv"
    out = Path(args.out) if args.out else default
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(csv_text, encoding="utf-8")
    sys.stdout.write(csv_text)
    return 0


def cmd_sweep(args) -> int:
    source = data_source(args)
    if source is None:
        raise UsageError("sweep needs --preset or --data")
    ds = source.load()
    base = build_config(args, align_to_dataset(train_preset(args.preset), ds))
    ns = args.ns if args.ns else [base.subnet2.n]
    out = resolve_out(args.out, f"sweep/{args.preset or Path(args.data).name}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)

    def on_cell(c):
        print(f"alpha={c.alpha} n={c.n} {c.pooling}: {c.status} "
              f"skipped {c.skipped}/{c.total} mAP={c.mAP}")

    cells = run_sweep(ds, base, args.alphas, ns, args.methods, on_cell)
    out.write_text(sweep_csv(cells), encoding="utf-8")
    ok = {(c.alpha, c.pooling): c.mAP[0.5] for c in cells if c.mAP is not None}
    for m in args.methods:
        lo, hi = min(args.alphas), max(args.alphas)
        if (lo, m) in ok and (hi, m) in ok:
            rel = ">=" if ok[(hi, m)] >= ok[(lo, m)] else "<"
            print(f"ordering ({m}): mAP@0.5 alpha={hi} {rel} alpha={lo} "
                  f"({ok[(hi, m)]:.4f} vs {ok[(lo, m)]:.4f})")
    print(f"wrote {out}")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twosubnet-tal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="tiny5")
    p.add_argument("--data-seed", "--seed", dest="data_seed", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--num-train", type=int)
    p.add_argument("--num-test", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="three-step training with per-phase checkpoints")
    add_data_flags(p)
    add_config_flags(p)
    p.add_argument("--manifest", help="rerun exactly the configuration of a previous run")
    p.add_argument("--phases", nargs="+", choices=PHASES)
    p.add_argument("--resume", help="start from this checkpoint's parameters")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="detections JSONL for a split")
    add_data_flags(p)
    p.add_argument("--run", help="training run directory")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--nms", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="AP/mAP table for a detections file")
    add_data_flags(p)
    p.add_argument("--run")
    p.add_argument("--manifest")
    p.add_argument("--detections")
    p.add_argument("--split", default="test")
    p.add_argument("--gt-as-detections", action="store_true")
    p.add_argument("--eval-thresholds", type=float, nargs="+")
    p.add_argument("--average", action="store_true", help="use thresholds 0.5:0.05:0.95")
    p.add_argument("--loose-matching", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="alpha x n x pooling grid on a dataset")
    add_data_flags(p)
    add_config_flags(p)
    p.add_argument("--alphas", type=int, nargs="+", default=list(ALPHA_GRID[:4]))
    p.add_argument("--ns", type=_n_value, nargs="+")
    p.add_argument("--methods", nargs="+", choices=["average", "max"],
                   default=["average", "max"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "n_given"):
        args.n_given = False
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (KeyboardInterrupt, BrokenPipeError):
        return 1
    except Exception as exc:  # noqa: BLE001 - report and map to exit status 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
