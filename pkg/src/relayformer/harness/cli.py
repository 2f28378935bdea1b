"""Command-line entry point.

Exit status is 0 on success, 1 for usage errors (bad flags or arguments) and
2 for runtime failures (unreadable files, contract violations, divergence).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from relayformer.complexity import cost_report
from relayformer.config import ModelConfig, RunConfig, toy_config
from relayformer.errors import ConfigError, ContractError, DivergenceError, NonFiniteError, ShapeError
from relayformer.harness.checkpoint import load_checkpoint
from relayformer.harness.checks import model_gradcheck
from relayformer.harness.imageio import mask_to_pgm, pgm_to_mask, read_clip, read_pnm, write_pnm
from relayformer.harness.synthetic import make_dataset, read_dataset, to_model_input, write_dataset
from relayformer.harness.train import train
from relayformer.losses import f1_at_threshold, iou
from relayformer.model import RelayFormer
from relayformer.numerics import no_grad, rtns
from relayformer.tiling import compute_unit_grid, partition_clip

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return RunConfig.load(args.config)
    return RunConfig()


def _model_config(args) -> ModelConfig:
    if getattr(args, "preset", None) == "toy":
        return toy_config()
    return _run_config(args).model


def cmd_partition(args) -> int:
    clip = read_clip(args.input)
    t, h, w, _ = clip.shape
    grid = compute_unit_grid(h, w, args.unit_size, t)
    units = partition_clip(clip.astype(np.float32), grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rtns.save(out / "units.rtns", units)
    (out / "grid.json").write_text(json.dumps(grid.to_dict(), indent=2) + "\n")
    print(f"{grid.total_units} units of {args.unit_size}px ({grid.rows}x{grid.cols} x {t} frames)")
    return 0


def cmd_forward(args) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = RelayFormer(_model_config(args))
    dt = np.float32 if model.config.dtype == "f32" else np.float64
    clip = to_model_input(read_clip(args.input), dt)
    with no_grad():
        pred = model.forward(clip, one_shot=args.one_shot)
    masks = (pred.probabilities().data >= args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(masks):
        write_pnm(out / f"frame_{i:04d}.pgm", mask_to_pgm(m))
    print(f"wrote {len(masks)} mask(s) to {out}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    if args.steps is not None:
        run.steps = args.steps
    samples = read_dataset(args.data) if args.data else make_dataset(run.data, run.model.in_channels)
    result = train(run, samples, args.out, on_epoch=None if args.quiet else _print_epoch)
    print(f"{result.steps} steps; checkpoint in {result.checkpoint}, log in {result.metrics_csv}")
    return 0


def _print_epoch(row: dict) -> None:
    print(f"epoch {row['epoch']:4d}  loss {row['loss']:.5f}  f1 {row['f1']:.4f}  iou {row['iou']:.4f}  lr {row['lr']:.3g}")


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.relative_to(pred_dir).as_posix() for p in pred_dir.rglob("*") if p.suffix.lower() == ".pgm")
    if not names:
        raise ContractError(f"{pred_dir}: no PGM predictions")
    rows = []
    for name in names:
        gt_path = gt_dir / name
        if not gt_path.is_file():
            raise ContractError(f"no ground truth for {name} in {gt_dir}")
        p, m = pgm_to_mask(read_pnm(pred_dir / name)), pgm_to_mask(read_pnm(gt_path))
        rows.append((name, f1_at_threshold(p, m), iou(p, m)))
    mean_f1 = float(np.mean([r[1] for r in rows]))
    mean_iou = float(np.mean([r[2] for r in rows]))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sample", "f1", "iou"))
        for name, f, i in rows:
            w.writerow((name, repr(f), repr(i)))
        w.writerow(("mean", repr(mean_f1), repr(mean_iou)))
    print(f"{len(rows)} samples  mean f1 {mean_f1:.4f}  mean iou {mean_iou:.4f}")
    return 0


def cmd_flops(args) -> int:
    cfg = _model_config(args)
    if args.units is not None:
        h, w = cfg.unit_size, args.units * cfg.unit_size
    else:
        h, w = args.height, args.width
    report = cost_report(cfg, h, w, args.clip_len, args.one_shot)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _model_config(args) if args.config else toy_config()
    errors = model_gradcheck(cfg, seed=args.seed, max_probes=args.probes)
    worst = max(errors, key=errors.get)
    print(f"max relative error {errors[worst]:.3e} ({worst}) over {len(errors)} tensors")
    return 0 if errors[worst] < GRADCHECK_TOL else 2


def cmd_gen_data(args) -> int:
    run = _run_config(args)
    if args.num_samples is not None:
        run.data.num_samples = args.num_samples
    samples = make_dataset(run.data, run.model.in_channels)
    write_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def build_parser() -> Parser:
    p = Parser(prog="relayformer", description="Relay-token manipulation localization toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("partition", help="cut frames into units; writes units.rtns and grid.json")
    s.add_argument("input", help="PGM/PPM image or directory of numbered frames")
    s.add_argument("--unit-size", type=int, default=ModelConfig().unit_size)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("forward", help="predict masks; writes frame_NNNN.pgm masks (255 = manipulated)")
    s.add_argument("input", help="PGM/PPM image or directory of numbered frames")
    s.add_argument("--checkpoint", help="checkpoint directory (default: fresh model from --config)")
    s.add_argument("--config", help="run config JSON")
    s.add_argument("--one-shot", type=_on_off, default=True, metavar="{on,off}")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_forward)

    s = sub.add_parser("train", help="train on synthetic or stored data")
    s.add_argument("--config", help="run config JSON (default: built-in defaults)")
    s.add_argument("--data", help="dataset directory written by gen-data")
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-sample F1/IoU of predicted vs ground-truth PGM masks")
    s.add_argument("--pred", required=True, help="directory (searched recursively) of predicted masks")
    s.add_argument("--gt", required=True, help="directory of ground-truth masks at the same relative paths")
    s.add_argument("--out", required=True, help="CSV path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("flops", help="analytic MAC/FLOP and parameter report as JSON")
    s.add_argument("--config", help="run config JSON")
    s.add_argument("--preset", choices=("desk", "toy"), default="desk")
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--units", type=int, help="use a 1 x UNITS strip of units instead of --height/--width")
    s.add_argument("--clip-len", type=int, default=1)
    s.add_argument("--one-shot", type=_on_off, default=True, metavar="{on,off}")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("gradcheck", help="finite-difference check of the whole model")
    s.add_argument("--config", help="run config JSON (default: the tiny float64 model)")
    s.add_argument("--probes", type=int, help="entries probed per tensor (default: all)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("gen-data", help="write a synthetic dataset of images and masks")
    s.add_argument("--config", help="run config JSON")
    s.add_argument("--num-samples", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError, NonFiniteError, DivergenceError, OSError, ValueError) as exc:
        print(f"relayformer {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
