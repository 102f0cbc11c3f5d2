"""Command-line entry point: ``python -m app.main <command> [flags]``."""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from pydantic import ValidationError

from app.core.config import Settings, load_settings, write_settings
from app.core.errors import ConfigError, TrackerError
from app.core.gradcheck import run_gradcheck
from app.core.model import Model, load_model, save_model
from app.core.pruning import FLOPS_FIELDNAMES, flops
from app.core.storage import (
    fmt,
    load_benchmark,
    load_frames,
    read_boxes,
    read_boxes_csv,
    read_init_box,
    sequence_dirs,
    write_boxes_csv,
    write_json,
)
from app.core.tracker import model_predictor, track_sequence
from app.core.train import train, write_loss_csv
from app.core.video import write_overlays
from eval.ablation import KEEP_RATIOS, TABLES, ablate
from eval.benchmark import save_plots, track_benchmark, write_rows
from eval.metrics import evaluate_benchmark, write_report
from eval.run_meta import run_meta_dict
from eval.synthetic import generate_benchmark

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=None, help="Flat key = value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="Output folder (default: out/<command>)")
    p.add_argument("--workers", type=int, default=1, help="Per-sequence / per-batch parallelism")
    p.add_argument("--rho", type=float, default=None, help="Token keeping ratio")
    p.add_argument("--scales", default=None, help="Comma-separated template scales, e.g. 2.0,4.0")
    p.add_argument("--dynamic", choices=("on", "off"), default=None, help="Dynamic template updates")
    p.add_argument("--tau", type=float, default=None, help="Template update threshold")
    p.add_argument("--overlays", action="store_true", help="Write overlay PNGs and an mp4 (track)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    ap = argparse.ArgumentParser(prog="app.main", description="Multi-template transformer tracker")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="Train a model on sequences")
    p.add_argument("--data", default=None, help="Sequence root (uses <data>/train when present); generated when omitted")

    p = sub.add_parser("track", parents=[common], help="Track a sequence (or every sequence under a root)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="Sequence directory or benchmark split")

    p = sub.add_parser("eval", parents=[common], help="Score predicted boxes against ground truth")
    p.add_argument("--pred", required=True, help="boxes.csv, or a folder of <sequence>.csv files")
    p.add_argument("--data", required=True, help="Sequence directory or benchmark split")
    p.add_argument("--checkpoint", default=None, help="Report this checkpoint's config hash and MACs")

    p = sub.add_parser("ablate", parents=[common], help="Scale / dynamic-template / keep-ratio ablations")
    p.add_argument("--data", default=None, help="Benchmark root with train/ and test/; generated when omitted")
    p.add_argument("--tables", default=",".join(TABLES))
    p.add_argument("--ratios", default=",".join(f"{r:g}" for r in KEEP_RATIOS), help="Keep ratios for the keep_ratio table")

    sub.add_parser("flops", parents=[common], help="Analytic MAC count, pruned vs. dense")

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of every differentiable op")
    p.add_argument("--ops-only", action="store_true", help="Skip the full encoder+head+loss check")

    sub.add_parser("genbench", parents=[common], help="Write the synthetic train/test benchmark")
    return ap


def settings_from_args(args: argparse.Namespace, base: Optional[Settings] = None) -> Settings:
    """Config file (or ``base``) with the command-line knobs applied on top."""
    overrides: Dict[str, Any] = {
        "keep_ratio": args.rho,
        "scales": args.scales,
        "dynamic": None if args.dynamic is None else args.dynamic == "on",
        "tau": args.tau,
    }
    if args.config is not None or base is None:
        return load_settings(Path(args.config) if args.config else None, **overrides)
    return base.with_overrides(**overrides)


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out) if args.out else Path("out") / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _training_set(data: Optional[str], settings: Settings, seed: int) -> list:
    if data is None:
        return generate_benchmark(settings.bench_config(), seed)["train"]
    root = Path(data)
    return load_benchmark(root / "train" if (root / "train").is_dir() else root)


def cmd_train(args: argparse.Namespace) -> int:
    settings = settings_from_args(args)
    out = _out_dir(args)
    dataset = _training_set(args.data, settings, args.seed)
    result = train(dataset, settings, seed=args.seed, workers=args.workers)
    ckpt = save_model(result.model, out / "checkpoint.ctxt")
    write_loss_csv(out / "loss.csv", result.epoch_losses)
    write_settings(settings, out / "config.txt")
    write_json(
        out / "run_meta.json",
        run_meta_dict("train", settings, args.seed, args.workers, extra={"train_seconds": round(result.seconds, 3)}),
    )
    print(f"[train] Wrote: {ckpt}")
    return EXIT_OK


def _load_for_tracking(args: argparse.Namespace) -> Model:
    path = Path(args.checkpoint)
    stored = load_model(path)
    settings = settings_from_args(args, base=stored.settings)
    return stored if settings == stored.settings else load_model(path, expected=settings)


def _track_one(model: Model, directory: Path, out: Path, overlays: bool) -> Path:
    frames = load_frames(directory)
    init_box = read_init_box(directory)
    settings = model.settings
    predictor = model_predictor(model, settings.prune_config())
    result = track_sequence(frames, init_box, settings.tracker_config(), predictor)
    path = write_boxes_csv(out / "boxes.csv", result.boxes, result.scores)
    print(f"[track] {directory.name}: frames={len(frames)} updates={result.update_count}")
    if overlays:
        gt_path = directory / "gt.txt"
        gt = read_boxes(gt_path) if gt_path.exists() else None
        if gt is not None and len(gt) != len(frames):
            gt = None
        write_overlays(frames, result.boxes, out / "overlays", scores=result.scores, gt=gt)
    return path


def cmd_track(args: argparse.Namespace) -> int:
    model = _load_for_tracking(args)
    out = _out_dir(args)
    data = Path(args.data)
    # A bare frame folder with init.txt is a single sequence too.
    if (data / "gt.txt").exists() or (data / "init.txt").exists():
        path = _track_one(model, data, out, args.overlays)
        print(f"[track] Wrote: {path}")
        return EXIT_OK

    records = load_benchmark(data)
    report, rows = track_benchmark(records, model, model.settings, workers=args.workers, out_dir=out)
    write_rows(rows, out / "results.csv")
    save_plots(report, rows, out / "plots")
    if args.overlays:
        for record in records:
            boxes, scores = read_boxes_csv(out / "boxes" / f"{record.name}.csv")
            write_overlays(record.frames, boxes, out / "overlays" / record.name, scores=scores, gt=record.boxes)
    print(f"[track] Wrote: {out / 'boxes'}  AO={report.ao:.4f}")
    return EXIT_OK


def _prediction_path(pred: Path, name: str, single: bool) -> Path:
    if pred.is_file():
        if not single:
            raise FileNotFoundError(f"{pred} is a single file but the data holds several sequences")
        return pred
    for candidate in (pred / f"{name}.csv", pred / "boxes" / f"{name}.csv", pred / name / "boxes.csv", pred / "boxes.csv"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"No predictions for sequence {name} under {pred}")


def _eval_settings(args: argparse.Namespace) -> Optional[Settings]:
    """Settings the predictions were made with, when the caller names them."""
    if args.checkpoint is not None:
        return settings_from_args(args, base=load_model(Path(args.checkpoint)).settings)
    if args.config is not None:
        return settings_from_args(args)
    return None


def cmd_eval(args: argparse.Namespace) -> int:
    settings = _eval_settings(args)
    out = _out_dir(args)
    dirs = sequence_dirs(Path(args.data))
    results = {}
    for d in dirs:
        boxes, _ = read_boxes_csv(_prediction_path(Path(args.pred), d.name, len(dirs) == 1))
        results[d.name] = (boxes, read_boxes(d / "gt.txt"))
    if settings is None:
        report = evaluate_benchmark(results)
    else:
        report = evaluate_benchmark(
            results,
            config_hash=settings.config_hash(),
            flops=flops(settings.encoder_config(), settings.prune_config()).as_row(settings.config_hash()),
        )
    csv_path, _ = write_report(report, out)
    print(f"[eval] sequences={len(results)} AO={report.ao:.4f} SR50={report.sr50:.4f} SR75={report.sr75:.4f}")
    print(f"[eval] Wrote: {csv_path}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    settings = settings_from_args(args)
    tables = [t.strip() for t in str(args.tables).split(",") if t.strip()]
    ratios = [float(x) for x in str(args.ratios).split(",") if x.strip()]
    ablate(
        settings,
        _out_dir(args),
        tables=tables,
        ratios=ratios,
        seed=args.seed,
        workers=args.workers,
        data=Path(args.data) if args.data else None,
    )
    return EXIT_OK


def cmd_flops(args: argparse.Namespace) -> int:
    settings = settings_from_args(args)
    out = _out_dir(args)
    cfg = settings.encoder_config()
    dense = flops(cfg, None)
    pruned = flops(cfg, settings.prune_config())
    path = out / "flops.csv"
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=FLOPS_FIELDNAMES + ["reduction_pct"])
        w.writeheader()
        for report in (dense, pruned):
            w.writerow({**report.as_row(settings.config_hash()), "reduction_pct": fmt(report.reduction_vs(dense))})
    print(f"[flops] rho=1.0 total={dense.total} MACs")
    print(f"[flops] rho={pruned.keep_ratio:g} stages={list(pruned.stages)} total={pruned.total} MACs "
          f"({pruned.reduction_vs(dense):.1f}% fewer)")
    print(f"[flops] Wrote: {path}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    settings = settings_from_args(args)
    results = run_gradcheck(seed=args.seed, settings=settings, include_model=not args.ops_only)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if args.out:
        out = _out_dir(args)
        with (out / "gradcheck.csv").open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["name", "max_rel_err", "passed", "entries", "worst"])
            for r in results:
                w.writerow([r.name, fmt(r.max_rel_err), int(r.passed), r.entries, r.worst])
    print(f"[gradcheck] {len(results) - len(failed)}/{len(results)} passed")
    if failed:
        print(f"[gradcheck] failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_genbench(args: argparse.Namespace) -> int:
    settings = settings_from_args(args)
    out = _out_dir(args)
    generate_benchmark(settings.bench_config(), args.seed, out_dir=out)
    write_settings(settings, out / "config.txt")
    print(f"[genbench] Wrote: {out}")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
    "genbench": cmd_genbench,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        # argparse has already printed usage or help.
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    try:
        return HANDLERS[args.command](args)
    except (TrackerError, ValidationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE if isinstance(e, (ValidationError, ConfigError)) else EXIT_FAILED
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
