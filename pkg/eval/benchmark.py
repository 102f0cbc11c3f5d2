from __future__ import annotations

import argparse
import csv
import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.core.config import Settings  # noqa: E402
from app.core.errors import TrackerError  # noqa: E402
from app.core.model import Model, load_model  # noqa: E402
from app.core.pruning import flops  # noqa: E402
from app.core.storage import SequenceRecord, load_benchmark, write_boxes_csv  # noqa: E402
from app.core.tracker import TrackResult, model_predictor, track_sequence  # noqa: E402
from eval.metrics import SUCCESS_THRESHOLDS, EvalReport, evaluate_benchmark, success_curve, write_report  # noqa: E402

FIELDNAMES = [
    "sequence",
    "frames",
    "ao",
    "sr50",
    "sr75",
    "auc",
    "precision20",
    "updates",
    "mean_score",
    "track_s",
    "fps",
]


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def run_one(record: SequenceRecord, model: Model, settings: Settings) -> Tuple[TrackResult, float]:
    predictor = model_predictor(model, settings.prune_config())
    t0 = time.perf_counter()
    result = track_sequence(record.frames, record.boxes[0], settings.tracker_config(), predictor)
    return result, time.perf_counter() - t0


def track_benchmark(
    records: Sequence[SequenceRecord],
    model: Model,
    settings: Settings,
    *,
    workers: int = 1,
    out_dir: Optional[Path] = None,
    verbose: bool = True,
) -> Tuple[EvalReport, List[dict]]:
    """Track every sequence, score it, and return the report plus one CSV row per sequence.

    Sequences are independent, so ``workers > 1`` tracks them on a thread
    pool sharing the read-only model; results keep the input order.
    """
    def one(record: SequenceRecord) -> Tuple[TrackResult, float]:
        return run_one(record, model, settings)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(one, records))
    else:
        outputs = [one(r) for r in records]

    report_flops = flops(settings.encoder_config(), settings.prune_config()).as_row(settings.config_hash())
    report = evaluate_benchmark(
        {r.name: (np.stack(res.boxes), r.boxes) for r, (res, _) in zip(records, outputs)},
        config_hash=settings.config_hash(),
        flops=report_flops,
    )
    rows = []
    for record, (res, seconds) in zip(records, outputs):
        s = report.sequences[record.name]
        rows.append(
            {
                "sequence": record.name,
                "frames": len(record),
                "ao": round(s.ao, 6),
                "sr50": round(s.sr50, 6),
                "sr75": round(s.sr75, 6),
                "auc": round(s.auc, 6),
                "precision20": round(s.precision, 6),
                "updates": res.update_count,
                "mean_score": round(float(np.mean(res.scores[1:])) if len(res.scores) > 1 else 1.0, 6),
                "track_s": round(seconds, 4),
                "fps": round(_safe_div(len(record) - 1, seconds), 3),
            }
        )
        if out_dir is not None:
            write_boxes_csv(out_dir / "boxes" / f"{record.name}.csv", res.boxes, res.scores)
        if verbose:
            print(f"[eval] {record.name}: AO={s.ao:.4f} SR50={s.sr50:.4f} updates={res.update_count}")
    return report, rows


def write_rows(rows: List[dict], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=FIELDNAMES)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in FIELDNAMES})
    return path


def save_plots(report: EvalReport, rows: list[dict], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)

    # Line: success rate vs overlap threshold
    curves = [success_curve(s.trace) for s in report.sequences.values() if s.frames]
    if curves:
        mean_curve = np.mean(curves, axis=0)
        plt.figure(figsize=(7, 4))
        plt.plot(SUCCESS_THRESHOLDS, mean_curve, marker="o", label=f"AUC={report.auc:.3f}")
        plt.xlabel("Overlap threshold")
        plt.ylabel("Success rate")
        plt.title("Success plot")
        plt.ylim(0, 1.02)
        plt.legend()
        plt.grid(True, alpha=0.3)
        plt.tight_layout()
        plt.savefig(out_dir / "success_plot.png", dpi=200)
        plt.close()

    # Bar: AO per sequence
    names = [r["sequence"] for r in rows]
    plt.figure(figsize=(max(7, 0.35 * len(rows)), 4))
    plt.bar(range(len(rows)), [r["ao"] for r in rows])
    plt.axhline(report.ao, color="k", linestyle="--", linewidth=1, label=f"mean AO={report.ao:.3f}")
    plt.xticks(range(len(rows)), names, rotation=90, fontsize=6)
    plt.ylabel("AO")
    plt.title("Average overlap per sequence")
    plt.legend()
    plt.tight_layout()
    plt.savefig(out_dir / "ao_per_sequence.png", dpi=200)
    plt.close()

    # Line: IoU over time for every sequence
    plt.figure(figsize=(7, 4))
    for s in report.sequences.values():
        plt.plot(range(2, s.frames + 2), s.trace, alpha=0.35, linewidth=1)
    plt.xlabel("Frame")
    plt.ylabel("IoU")
    plt.title("IoU traces")
    plt.grid(True, alpha=0.3)
    plt.tight_layout()
    plt.savefig(out_dir / "iou_traces.png", dpi=200)
    plt.close()


def save_summary_stats(rows: list[dict], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)

    def series(key: str) -> list[float]:
        vals: list[float] = []
        for r in rows:
            v = r.get(key)
            if isinstance(v, (int, float)):
                vals.append(float(v))
        return vals

    def stat(vals: list[float]) -> dict:
        if not vals:
            return {"n": 0}
        return {
            "n": len(vals),
            "min": round(min(vals), 6),
            "p50": round(statistics.median(vals), 6),
            "mean": round(statistics.mean(vals), 6),
            "max": round(max(vals), 6),
        }

    stats = {key: stat(series(key)) for key in ("ao", "sr50", "sr75", "auc", "precision20", "updates", "mean_score", "fps")}
    (out_dir / "summary_stats.json").write_text(json.dumps(stats, indent=2), encoding="utf-8")


def main() -> None:
    ap = argparse.ArgumentParser(description="Track a benchmark split with a checkpoint and write CSV + plots.")
    ap.add_argument("data", type=str, help="Benchmark split folder (one sub-folder per sequence)")
    ap.add_argument("--checkpoint", required=True, help="Trained checkpoint")
    ap.add_argument("--out", type=str, default="eval/out", help="Output folder")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    out_dir = Path(args.out)
    try:
        model = load_model(Path(args.checkpoint))
        records = load_benchmark(Path(args.data))
        report, rows = track_benchmark(records, model, model.settings, workers=args.workers, out_dir=out_dir)
    except TrackerError as e:
        raise SystemExit(f"benchmark failed: {e}")

    csv_path = write_rows(rows, out_dir / "results.csv")
    write_report(report, out_dir)
    save_plots(report, rows, out_dir / "plots")
    save_summary_stats(rows, out_dir)
    print(f"Wrote: {csv_path}")
    print(f"AO={report.ao:.4f} SR50={report.sr50:.4f} SR75={report.sr75:.4f}")


if __name__ == "__main__":
    main()
