"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 format error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DimensionError, FormatError, NumericalError
from ..evaluation import (
    evaluate, read_class_filter, read_detections, read_ground_truth, write_records, write_report,
)
from ..feature_bank import FeatureBank, WindowSpec
from ..short_term import attention_map, export_heatmap
from .config import SynthConfig, TrainConfig
from .diagnostics import gradient_suite, oracle_trials
from .model import ModelState
from .synth import Dataset, synth_generate
from .train import infer, sweep_km, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_FORMAT = 0, 2, 3, 4
ORACLE_TOL = 1e-9
GRAD_TOL = 1e-5

log = logging.getLogger("lstc")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _train_config(args, **overrides):
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    return cfg.replace(**overrides)


def _window(cfg: TrainConfig):
    return WindowSpec(cfg.radius_s, cfg.include_center)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = SynthConfig.load(args.config) if args.config else SynthConfig()
    ds = synth_generate(cfg)
    ds.save(args.out)
    print(f"wrote {len(ds.clips)} clips ({len(ds.subset('test'))} test) to {args.out}")


def cmd_train(args):
    ds = Dataset.load(args.data)
    cfg = _train_config(args, stage=args.stage)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    if cfg.stage == 1:
        result = train(ds, cfg)
        result.bank.save(args.bank)
        print(f"stage 1: {cfg.steps} steps, final loss {result.losses[-1] if result.losses else float('nan'):.6f}; "
              f"bank {args.bank} ({len(result.bank)} records)")
    else:
        if not args.init:
            raise ConfigError("stage 2 needs --init <stage-1 model>")
        bank = FeatureBank.load(args.bank, expected_dim=ds.d)
        result = train(ds, cfg, bank=bank, init=ModelState.load(args.init))
        print(f"stage 2: {cfg.steps} steps, final loss {result.losses[-1] if result.losses else float('nan'):.6f}")
    result.model.save(args.out)
    print(f"model {args.out}")


def cmd_infer(args):
    ds = Dataset.load(args.data)
    model = ModelState.load(args.model)
    bank = FeatureBank.load(args.bank, expected_dim=model.d) if args.bank else None
    cfg = _train_config(args)
    dets = infer(model, ds.subset(args.split), bank, _window(cfg))
    write_records(dets, args.out)
    print(f"wrote {len(dets)} detections to {args.out}")


def cmd_eval(args):
    gts = read_ground_truth(args.gt)
    dets = read_detections(args.det)
    classes = read_class_filter(args.classes) if args.classes else None
    deltas = _float_list(args.deltas)
    if not deltas:
        raise ConfigError("--deltas needs at least one value")
    report = evaluate(dets, gts, deltas, weighted=args.weighted, class_filter=classes)
    per_class = [p["per_class_ap"] for p in report["per_delta"]]
    header = "class  " + "  ".join(f"AP@{d:g}" for d in deltas)
    print(header)
    for cls in per_class[0]:
        print(f"{cls:>5}  " + "  ".join(f"{p[cls]:.6f}" for p in per_class))
    label = "w-mAP" if args.weighted else "mAP"
    print(f"{label} {report['map']:.6f}")
    out = Path(args.report) if args.report else Path(args.det).with_suffix(".report.json")
    write_report(report, out)
    print(f"report {out}")


def cmd_oracle(args):
    rows = oracle_trials(args.trials, args.max_l, seed=args.seed)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["L", "time_full", "time_decoupled", "max_abs_diff"])
    for length, t_full, t_dec, diff in rows:
        writer.writerow([length, f"{t_full:.6e}", f"{t_dec:.6e}", f"{diff:.3e}"])
    worst = max(r[3] for r in rows) if rows else 0.0
    if worst >= ORACLE_TOL:
        print(f"max_abs_diff {worst:.3e} exceeds {ORACLE_TOL:g}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_gradcheck(args):
    failed = False
    for report in gradient_suite(seed=args.seed, eps=args.eps):
        ok = report.passed(GRAD_TOL)
        failed |= not ok
        print(f"{'ok  ' if ok else 'FAIL'} {report.op_name:<24} max_rel_err={report.max_rel_err:.3e}")
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_sweep(args):
    if args.data:
        ds = Dataset.load(args.data)
    else:
        ds = synth_generate(SynthConfig.load(args.synth_config) if args.synth_config else SynthConfig())
    base = _train_config(args)
    stage1 = base.replace(stage=1)
    stage2 = base.replace(stage=2, steps=args.stage2_steps or base.steps)
    rows = sweep_km(ds, _int_list(args.k), _int_list(args.m), stage1, stage2)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["K", "M", "map", "final_loss"])
    for r in rows:
        writer.writerow([r["K"], r["M"], f"{r['map']:.6f}", f"{r['final_loss']:.6f}"])


def cmd_bank(args):
    bank = FeatureBank.load(args.file)
    if args.action == "inspect":
        print(f"dim {bank.dim}  videos {len(bank.videos())}  records {len(bank)}")
        print("video_id,records,rows,first_t,last_t")
        for row in bank.summary_rows():
            print(",".join(str(v) for v in row))
    else:
        for line in bank.iter_ndjson():
            print(line)


def write_pgm16(path, img):
    """Binary 16-bit PGM (P5, big-endian samples), scaled so the maximum maps to 65535."""
    top = float(img.max())
    scaled = np.zeros(img.shape) if top <= 0.0 else img / top
    data = np.rint(scaled * 65535.0).astype(">u2")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + data.tobytes())


def cmd_heatmap(args):
    ds = Dataset.load(args.data)
    model = ModelState.load(args.model)
    video, _, ts = args.clip.rpartition("@")
    try:
        clip = ds.find(video, int(ts))
    except (KeyError, ValueError):
        raise ConfigError(f"no clip {args.clip!r}; use <video_id>@<timestamp_s>") from None
    amap = attention_map(clip.fmap, clip.actor_feats(), model.short, model.attn_scale)
    try:
        grids = export_heatmap(amap, args.actor)
    except IndexError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, grid in enumerate(grids):
        write_pgm16(out / f"heatmap_{args.actor}_{t}.pgm", grid)
        np.savetxt(out / f"heatmap_{args.actor}_{t}.csv", grid, delimiter=",", fmt="%.17g")
    print(f"wrote {len(grids)} frames to {out}")


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="lstc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train stage 1 or stage 2")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--bank", required=True, help="stage 1 writes it, stage 2 reads it")
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="stage-1 model (required for stage 2)")
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--steps", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="score actors and write a detection CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--bank")
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", choices=("train", "test", "all"))
    s.add_argument("--config", help="TrainConfig JSON (window settings)")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("eval", help="frame-level mAP")
    s.add_argument("--gt", required=True)
    s.add_argument("--det", required=True)
    s.add_argument("--deltas", default="0.5")
    s.add_argument("--weighted", action="store_true")
    s.add_argument("--classes")
    s.add_argument("--report", help="JSON report path (default: <det>.report.json)")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("oracle", help="second-order full vs decoupled comparison")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--max-l", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_oracle)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("sweep", help="stage-2 mAP over a K x M grid")
    s.add_argument("--k", default="1,2,3")
    s.add_argument("--m", default="1,2,3")
    s.add_argument("--data")
    s.add_argument("--synth-config")
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--stage2-steps", type=int)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("bank", help="inspect a feature bank file")
    s.add_argument("action", choices=("inspect", "export-ndjson"))
    s.add_argument("file")
    s.set_defaults(fn=cmd_bank)

    s = sub.add_parser("heatmap", help="export a short-term attention map")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--clip", required=True, help="<video_id>@<timestamp_s>")
    s.add_argument("--actor", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_heatmap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args) or EXIT_OK
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
