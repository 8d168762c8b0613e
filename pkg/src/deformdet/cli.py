"""``deformdet`` command-line tool.

Exit codes: 0 success, 1 gradcheck failure, 2 invalid config or usage,
3 file I/O error, 4 numeric divergence during training.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, config_from_dict, load_config
from .synth import AnnotationError

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {k: str(getattr(args, k)) for k in ("data", "out", "steps", "seed", "threads")
                 if getattr(args, k, None) is not None}
    return config_from_dict(overrides, cfg)


def cmd_gen_data(args) -> int:
    from .synth import CLASS_NAMES, generate_dataset, load_genspec

    spec = load_genspec(args.spec)
    counts = generate_dataset(spec, args.out, args.count)
    print(f"wrote {args.count} images to {args.out}")
    for name in CLASS_NAMES:
        print(f"{name:10s} {counts[name]}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = _train_config(args)
    trainer = train(cfg, resume=args.resume)
    out = Path(cfg.out)
    if cfg.eval_every:
        _eval_log_svg(out / "eval.log", out / "eval_curve.svg")
    print(f"trained {trainer.step_count} steps; checkpoint at {out / 'checkpoint'}")
    return EXIT_OK


def _eval_log_svg(log_path: Path, svg_path: Path) -> None:
    from .svg import write_chart

    rows = [line.split() for line in log_path.read_text().splitlines() if line.strip()]
    if not rows:
        return
    m50 = [(float(r[0]), float(r[1])) for r in rows]
    m95 = [(float(r[0]), float(r[2])) for r in rows]
    write_chart(svg_path, {"mAP@50": m50, "mAP@50:95": m95}, title="validation mAP",
                xlabel="step", ylabel="mAP")


def cmd_eval(args) -> int:
    from .evaluate import evaluate
    from .head import read_detections
    from .synth import CLASS_NAMES, load_dataset
    from .train import predict

    data = load_dataset(args.data, None if args.split == "all" else args.split)
    if args.detections:
        dets = read_detections(args.detections)
        num_classes = args.num_classes
    else:
        from .model import load_checkpoint

        model, cfg, _ = load_checkpoint(args.checkpoint)
        score = cfg.score_thresh if args.score_thresh is None else args.score_thresh
        preds = predict(model, data.images, score, cfg.nms_iou)
        dets = dict(zip(data.ids, preds))
        num_classes = model.config.num_classes
    names = dict(enumerate(CLASS_NAMES[:num_classes]))
    report = evaluate(dets, data.gt_map(), range(num_classes), args.upper, names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = report.table()
    (out / "report.txt").write_text(text)
    report.write_pr_csv(out / "pr.csv")
    if args.svg:
        from .svg import write_chart

        series = {names.get(c, str(c)): pts for c, pts in sorted(report.pr_curves.items())}
        write_chart(out / "pr.svg", series, title="precision-recall at IoU 0.5",
                    xlabel="recall", ylabel="precision", xlim=(0.0, 1.0))
    print(text, end="")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .head import write_detections
    from .model import load_checkpoint
    from .synth import image_to_tensor, read_ppm
    from .train import predict

    model, cfg, _ = load_checkpoint(args.checkpoint)
    paths = [Path(p) for p in args.image]
    images = [image_to_tensor(read_ppm(p)) for p in paths]
    score = cfg.score_thresh if args.score_thresh is None else args.score_thresh
    dets = {}
    for p, img in zip(paths, images):
        dets[p.stem] = predict(model, np.stack([img]), score, cfg.nms_iou)[0]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_detections(args.out, dets)
    print(f"{sum(len(v) for v in dets.values())} detections written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, run_gradcheck

    results = run_gradcheck(args.seed)
    print(format_results(results))
    failed = [r for r in results if not r.ok]
    if failed:
        for r in failed:
            print(f"gradcheck FAILED: {r.module} {r.group} max_rel_err={r.error:.3e}",
                  file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"gradcheck passed ({len(results)} groups, seed {args.seed})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .train import ablation_run, parse_variants

    csv_path, args.out = args.out, None
    cfg = _train_config(args)
    variants = parse_variants(Path(args.variants).read_text())
    rows = ablation_run(cfg, variants, csv_path=csv_path, write_runs=False)
    for r in rows:
        print(f"{r['variant']:12s} params={r['params']:8d} loss={r['final_loss']:.4f} "
              f"mAP50={r['mAP50']:.4f} mAP50_95={r['mAP50_95']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="deformdet",
        description="Desk-scale deformable-conv detector: data, training, evaluation.",
        epilog="exit codes: 0 ok, 1 gradcheck failure, 2 config/usage, 3 I/O, 4 divergence")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", help="render a synthetic defect dataset")
    g.add_argument("--spec", required=True, help="generator spec (key = value file)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--count", required=True, type=int, help="number of images")
    g.set_defaults(func=cmd_gen_data)

    def train_flags(sp, out_help):
        sp.add_argument("--config", help="training config (key = value file)")
        sp.add_argument("--data", help="dataset directory (overrides config)")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--steps", type=int, help="total optimiser steps (overrides config)")
        sp.add_argument("--seed", type=int, help="random seed (overrides config)")
        sp.add_argument("--threads", type=int, help="BLAS threads (default 1)")

    t = sub.add_parser("train", help="train a detector")
    train_flags(t, "run directory for logs and checkpoint (overrides config)")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a detections file")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="checkpoint directory")
    src.add_argument("--detections", help="detections file (image class score cx cy w h)")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", default="val", choices=["train", "val", "test", "all"],
                   help="dataset split to score (default val)")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--upper", type=float, default=0.95,
                   help="upper IoU threshold of the averaged range (default 0.95)")
    e.add_argument("--score-thresh", type=float, help="override the checkpoint's threshold")
    e.add_argument("--num-classes", type=int, default=6,
                   help="class count when scoring a detections file (default 6)")
    e.add_argument("--svg", action="store_true", help="also write pr.svg")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="detect defects in PPM images")
    i.add_argument("--checkpoint", required=True, help="checkpoint directory")
    i.add_argument("--image", required=True, nargs="+", help="one or more PPM files")
    i.add_argument("--out", required=True, help="detections file to write")
    i.add_argument("--score-thresh", type=float, help="override the checkpoint's threshold")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    c.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train several variants and tabulate them")
    train_flags(a, "CSV file to write")
    a.add_argument("--variants", required=True, help="variants file: 'name dc_stages neck'")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "ablate" and not args.out:
        parser.error("ablate requires --out")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    from .train import DivergenceError

    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, AnnotationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
