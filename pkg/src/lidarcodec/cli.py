"""Command-line front end: encode, decode, train, bench, metrics.

Exit codes: 0 success, 1 other error, 2 round-trip failure, 3 format error,
4 model/config mismatch.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .bench import run_bench
from .codec import DEFAULT_DIRECT_LEVELS, DEFAULT_WINDOW, decode_frame, encode_frame, read_header
from .errors import CodecError
from .geometry import (FORD_INTRINSICS, MODES, QNX_INTRINSICS, load_intrinsics,
                       synthetic_intrinsics)
from .metrics import PEAK_KITTI, RDPoint, bd_br, d1_psnr, report_psnr
from .model import Model, ModelConfig, load_checkpoint
from .scanio import load_scan, synthetic_scan, write_ply

BUILTIN_INTRINSICS = {"ford": FORD_INTRINSICS, "qnx": QNX_INTRINSICS}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _intrinsics(arg):
    if arg is None:
        return None
    if arg.lower() in BUILTIN_INTRINSICS:
        return BUILTIN_INTRINSICS[arg.lower()]
    if arg.lower().startswith("synthetic"):
        _, _, n = arg.partition(":")
        return synthetic_intrinsics(int(n) if n else 32)
    return load_intrinsics(arg)


def _model(path):
    return load_checkpoint(path) if path else None


def _emit(record: dict, fmt: str | None, out=None):
    out = out or sys.stdout
    if fmt == "csv":
        w = csv.DictWriter(out, fieldnames=list(record))
        w.writeheader()
        w.writerow(record)
    else:
        out.write(json.dumps(record, indent=None if fmt is None else 2) + "\n")


def cmd_encode(args) -> int:
    pts = load_scan(args.input)
    model = _model(args.checkpoint)
    blob, st = encode_frame(pts, model, stages=args.stages, window=args.window, depth=args.depth,
                            mode=args.mode, intrinsics=_intrinsics(args.intrinsics),
                            direct_levels=args.direct_levels,
                            fully_causal=args.baseline_fully_causal)
    Path(args.output).write_bytes(blob)
    rec = {k: v for k, v in st.as_dict().items() if not isinstance(v, list)}
    _emit(rec, args.report)
    return 0


def cmd_decode(args) -> int:
    blob = Path(args.input).read_bytes()
    frame = decode_frame(blob, _model(args.checkpoint), _intrinsics(args.intrinsics))
    out = Path(args.output)
    if out.suffix == ".npy":
        np.save(out, frame.grid if args.grid else frame.points)
    else:
        write_ply(out, frame.grid if args.grid else frame.points)
    rec = {k: v for k, v in frame.stats.as_dict().items() if not isinstance(v, list)}
    rec["stages"] = frame.header.stages
    _emit(rec, args.report)
    return 0


def _frames(args):
    if args.synthetic:
        intr = _intrinsics(args.intrinsics) or synthetic_intrinsics()
        return [(f"synthetic{i}", synthetic_scan(args.seed + i, intr))
                for i in range(args.synthetic)]
    paths = []
    for p in args.input or []:
        p = Path(p)
        paths.extend(sorted(q for q in p.iterdir() if q.suffix in (".bin", ".ply"))
                     if p.is_dir() else [p])
    if not paths:
        raise CodecError("no input scans given (use --input or --synthetic N)")
    return [(p.name, load_scan(p)) for p in paths]


def cmd_train(args) -> int:
    from .train import TrainConfig, build_corpus, fine_tune_causal, train
    cfg_doc = json.loads(Path(args.model_config).read_text()) if args.model_config else {}
    mcfg = ModelConfig.from_dict(cfg_doc)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else Model.create(mcfg, args.seed)
    tcfg = TrainConfig(lr=args.lr, steps=args.steps, batch_windows=args.batch_windows,
                       stage_set=tuple(args.stage_set), seed=args.seed,
                       checkpoint_every=args.checkpoint_every, window=args.window,
                       depth=args.depth, mode=args.mode, direct_levels=args.direct_levels)
    intr = _intrinsics(args.intrinsics)
    if args.mode == "cylbeam" and intr is None:
        intr = synthetic_intrinsics()
    corpus = build_corpus([p for _, p in _frames(args)], tcfg, model.cfg.generations, intr)
    hist = train(model, corpus, tcfg, log_path=args.log, checkpoint_path=args.output)
    if args.causal_steps:
        tcfg.steps = args.causal_steps
        fine_tune_causal(model, corpus, tcfg, stages=4, log_path=args.log)
        from .model import save_checkpoint
        save_checkpoint(model, args.output)
    done = [h for h in hist if not h.aborted]
    _emit({"steps": len(hist), "aborted": len(hist) - len(done),
           "final_loss_bits": done[-1].loss_bits if done else None,
           "digest": f"{model.digest:016x}", "checkpoint": args.output}, args.report)
    return 0


def cmd_bench(args) -> int:
    report = run_bench(_frames(args), _model(args.checkpoint), modes=args.modes,
                       stage_set=args.stage_set, depths=args.depths, window=args.window,
                       intrinsics=_intrinsics(args.intrinsics),
                       fully_causal=(False, True) if args.baseline_fully_causal else (False,),
                       workers=args.workers, peak=args.peak)
    if args.output:
        report.write(args.output)
    if args.report == "csv":
        w = csv.writer(sys.stdout)
        w.writerow(["frame", "mode", "S", "L", "fully_causal", "bpp", "d1_psnr", "lossless"])
        for r in report.rows:
            w.writerow([r.frame, r.mode, r.stages, r.depth, r.fully_causal, f"{r.bpp:.4f}",
                        f"{r.d1_psnr:.3f}", r.lossless])
    else:
        sys.stdout.write(report.to_json() + "\n")
    return 0 if report.ok else 2


def _read_curve(path):
    with open(path) as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    pts = []
    for r in rows:
        try:
            pts.append(RDPoint(float(r[0]), float(r[1])))
        except ValueError:
            continue  # header line
    return pts


def cmd_metrics(args) -> int:
    rec = {}
    if args.input and args.reference:
        psnr = d1_psnr(load_scan(args.reference), load_scan(args.input), args.peak)
        rec["d1_psnr"] = report_psnr(psnr)
    if args.bd_br:
        rec["bd_br"] = bd_br(_read_curve(args.bd_br[0]), _read_curve(args.bd_br[1]))
    if args.header:
        h = read_header(Path(args.header).read_bytes())
        rec["header"] = {"depth": h.depth, "stages": h.stages, "window": h.window,
                         "mode": h.mode, "points": h.point_count,
                         "model_digest": f"{h.model_digest:016x}"}
    if not rec:
        raise CodecError("nothing to compute: give --input/--reference, --bd-br or --header")
    _emit(rec, args.report)
    return 0


def _common(p, io=True):
    if io:
        p.add_argument("--input", required=True)
        p.add_argument("--output", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--intrinsics", help="JSON file, or ford / qnx / synthetic[:beams]")
    p.add_argument("--report", choices=("csv", "json"))


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lidarcodec", description="Learned octree codec for LiDAR point clouds")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("encode", help="compress one scan")
    _common(p)
    p.add_argument("--mode", choices=MODES, default="cylbeam")
    p.add_argument("--depth", type=int, default=12)
    p.add_argument("--stages", type=int, default=1, help="stage count, 0 = autoregressive")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--direct-levels", type=int, default=DEFAULT_DIRECT_LEVELS)
    p.add_argument("--baseline-fully-causal", action="store_true")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress a bitstream")
    _common(p)
    p.add_argument("--grid", action="store_true", help="write integer grid points")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="train a model on scans")
    p.add_argument("--input", nargs="*")
    p.add_argument("--synthetic", type=int, default=0, help="train on N synthetic sweeps")
    p.add_argument("--output", required=True, help="checkpoint path")
    _common(p, io=False)
    p.add_argument("--model-config", help="JSON with model hyperparameters")
    p.add_argument("--mode", choices=MODES, default="cylbeam")
    p.add_argument("--depth", type=int, default=12)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--direct-levels", type=int, default=DEFAULT_DIRECT_LEVELS)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch-windows", type=int, default=4)
    p.add_argument("--stage-set", type=int, nargs="+", default=[1, 2, 4, 0])
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--causal-steps", type=int, default=0,
                   help="extra steps training the fully-causal symbol channel")
    p.add_argument("--log", help="JSON-lines training log")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="sweep stages, depths and modes")
    p.add_argument("--input", nargs="*")
    p.add_argument("--synthetic", type=int, default=0)
    p.add_argument("--output", help="report prefix (writes .csv and .json)")
    _common(p, io=False)
    p.add_argument("--modes", nargs="+", choices=MODES, default=["cylbeam"])
    p.add_argument("--stage-set", type=int, nargs="+", default=[1, 2, 4, 8, 16, 0])
    p.add_argument("--depths", type=int, nargs="+", default=[12])
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--baseline-fully-causal", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--peak", type=float, default=PEAK_KITTI)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("metrics", help="D1 PSNR, BD-BR, header dump")
    p.add_argument("--input", help="reconstructed cloud")
    p.add_argument("--reference", help="original cloud")
    p.add_argument("--peak", type=float, default=PEAK_KITTI)
    p.add_argument("--bd-br", nargs=2, metavar=("ANCHOR_CSV", "TEST_CSV"),
                   help="two bpp,psnr curves")
    p.add_argument("--header", help="print the header of a bitstream")
    p.add_argument("--report", choices=("csv", "json"))
    p.set_defaults(func=cmd_metrics)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
