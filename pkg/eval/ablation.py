from __future__ import annotations

import argparse
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.core.config import Settings, load_settings  # noqa: E402
from app.core.errors import TrackerError  # noqa: E402
from app.core.model import Model  # noqa: E402
from app.core.pruning import flops  # noqa: E402
from app.core.storage import SequenceRecord, fmt, load_benchmark, write_json  # noqa: E402
from app.core.train import train  # noqa: E402
from eval.benchmark import track_benchmark  # noqa: E402
from eval.run_meta import run_meta_dict  # noqa: E402
from eval.synthetic import generate_benchmark  # noqa: E402

TABLES = ("scales", "dynamic", "keep_ratio")
KEEP_RATIOS = (1.0, 0.9, 0.8, 0.7, 0.6)

FIELDNAMES = [
    "table",
    "label",
    "scales",
    "dynamic",
    "keep_ratio",
    "ao",
    "sr50",
    "sr75",
    "auc",
    "gmacs",
    "flops_reduction_pct",
    "final_loss",
    "train_s",
    "track_s",
    "config_hash",
]


@dataclass(frozen=True)
class AblationConfig:
    """One row of an ablation table.

    ``overrides`` apply to training and tracking; ``runtime`` only to tracking,
    so rows that differ in runtime knobs alone share a trained model.
    """

    table: str
    label: str
    overrides: Dict[str, object] = field(default_factory=dict)
    runtime: Dict[str, object] = field(default_factory=dict)


def scale_sweep(max_scales: int = 4) -> List[AblationConfig]:
    """Static-only models with 1..max_scales template scales spread over [2, 4]."""
    out = []
    for n in range(1, max_scales + 1):
        ks = (2.0,) if n == 1 else tuple(float(round(k, 3)) for k in np.linspace(2.0, 4.0, n))
        out.append(AblationConfig("scales", f"K={list(ks)}", {"scales": ks, "dynamic": False}))
    return out


def dynamic_sweep() -> List[AblationConfig]:
    return [
        AblationConfig("dynamic", "K=[2.0] static", {"scales": (2.0,), "dynamic": False}),
        AblationConfig("dynamic", "K=[2.0] + dynamic", {"scales": (2.0,), "dynamic": True}),
        AblationConfig("dynamic", "K=[2.0, 4.0] + dynamic", {"scales": (2.0, 4.0), "dynamic": True}),
    ]


def keep_ratio_sweep(ratios: Sequence[float] = KEEP_RATIOS) -> List[AblationConfig]:
    return [AblationConfig("keep_ratio", f"rho={r:g}", runtime={"keep_ratio": float(r)}) for r in ratios]


def build_configs(tables: Sequence[str], ratios: Sequence[float] = KEEP_RATIOS) -> List[AblationConfig]:
    builders = {"scales": scale_sweep, "dynamic": dynamic_sweep, "keep_ratio": lambda: keep_ratio_sweep(ratios)}
    unknown = [t for t in tables if t not in builders]
    if unknown:
        raise ValueError(f"Unknown ablation table(s): {', '.join(unknown)} (choose from {', '.join(TABLES)})")
    return [cfg for t in tables for cfg in builders[t]()]


def load_splits(
    settings: Settings,
    seed: int,
    data: Optional[Path] = None,
    verbose: bool = True,
) -> Tuple[List[SequenceRecord], List[SequenceRecord]]:
    """Train/test sequences from ``data/train`` + ``data/test``, or freshly generated from ``seed``."""
    if data is not None:
        return load_benchmark(data / "train"), load_benchmark(data / "test")
    splits = generate_benchmark(settings.bench_config(), seed, verbose=verbose)
    return splits["train"], splits["test"]


def run_ablation(
    base: Settings,
    configs: Sequence[AblationConfig],
    train_set: Sequence[SequenceRecord],
    test_set: Sequence[SequenceRecord],
    *,
    seed: int = 0,
    workers: int = 1,
    verbose: bool = True,
) -> List[dict]:
    """Train, track, evaluate and count FLOPs for every config; models are cached by training settings."""
    trained: Dict[str, Tuple[Model, float, float]] = {}
    rows: List[dict] = []
    for cfg in configs:
        train_settings = base.with_overrides(**cfg.overrides)
        track_settings = train_settings.with_overrides(**cfg.runtime)
        key = train_settings.config_hash()
        if key not in trained:
            if verbose:
                print(f"[ablate] training {cfg.table}/{cfg.label} ({key})")
            result = train(train_set, train_settings, seed=seed, workers=workers, verbose=verbose)
            trained[key] = (result.model, result.epoch_losses[-1], result.seconds)
        model, final_loss, train_s = trained[key]

        report, seq_rows = track_benchmark(test_set, model, track_settings, workers=workers, verbose=False)
        enc = track_settings.encoder_config()
        pruned = flops(enc, track_settings.prune_config())
        dense = flops(enc, None)
        row = {
            "table": cfg.table,
            "label": cfg.label,
            "scales": " ".join(f"{k:g}" for k in track_settings.scales),
            "dynamic": "on" if track_settings.dynamic else "off",
            "keep_ratio": fmt(track_settings.keep_ratio),
            "ao": fmt(report.ao),
            "sr50": fmt(report.sr50),
            "sr75": fmt(report.sr75),
            "auc": fmt(report.auc),
            "gmacs": fmt(pruned.total / 1e9),
            "flops_reduction_pct": fmt(pruned.reduction_vs(dense)),
            "final_loss": fmt(final_loss),
            "train_s": fmt(train_s),
            "track_s": fmt(sum(r["track_s"] for r in seq_rows)),
            "config_hash": track_settings.config_hash(),
        }
        rows.append(row)
        if verbose:
            print(f"[ablate] {cfg.table}/{cfg.label}: AO={report.ao:.4f} SR50={report.sr50:.4f} GMACs={row['gmacs']}")
    return rows


def write_results(rows: Sequence[dict], out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "ablation_results.csv"
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=FIELDNAMES)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in FIELDNAMES})
    return path


def format_tables(rows: Sequence[dict]) -> str:
    """Markdown: one table per ablation, in first-seen order."""
    titles = {
        "scales": "Number of template scales",
        "dynamic": "Dynamic templates",
        "keep_ratio": "Keeping ratio in token pruning",
    }
    out: List[str] = []
    for table in dict.fromkeys(r["table"] for r in rows):
        out.append(f"## {titles.get(table, table)}\n")
        out.append("| config | AO | SR0.5 | SR0.75 | GMACs | reduction % |")
        out.append("|---|---|---|---|---|---|")
        for r in rows:
            if r["table"] == table:
                out.append(
                    f"| {r['label']} | {r['ao']} | {r['sr50']} | {r['sr75']} | {r['gmacs']} | {r['flops_reduction_pct']} |"
                )
        out.append("")
    return "\n".join(out)


def save_plots(rows: Sequence[dict], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for table in dict.fromkeys(r["table"] for r in rows):
        sub = [r for r in rows if r["table"] == table]
        plt.figure(figsize=(7, 4))
        if table == "keep_ratio":
            # AO vs compute: one point per keep ratio
            xs = [float(r["gmacs"]) for r in sub]
            ys = [float(r["ao"]) for r in sub]
            plt.plot(xs, ys, marker="o")
            for r, x, y in zip(sub, xs, ys):
                plt.annotate(r["label"], (x, y), fontsize=7)
            plt.xlabel("GMACs")
        else:
            plt.bar(range(len(sub)), [float(r["ao"]) for r in sub])
            plt.xticks(range(len(sub)), [r["label"] for r in sub], rotation=20, fontsize=7)
        plt.ylabel("AO")
        plt.title(f"Ablation: {table}")
        plt.tight_layout()
        plt.savefig(out_dir / f"ablation_{table}.png", dpi=200)
        plt.close()


def ablate(
    settings: Settings,
    out_dir: Path,
    *,
    tables: Sequence[str] = TABLES,
    ratios: Sequence[float] = KEEP_RATIOS,
    seed: int = 0,
    workers: int = 1,
    data: Optional[Path] = None,
    verbose: bool = True,
) -> List[dict]:
    """Run the requested tables and write CSV, markdown tables, plots and run metadata under ``out_dir``."""
    configs = build_configs(tables, ratios)
    train_set, test_set = load_splits(settings, seed, data, verbose)
    rows = run_ablation(settings, configs, train_set, test_set, seed=seed, workers=workers, verbose=verbose)

    results_path = write_results(rows, out_dir)
    (out_dir / "ablation_tables.md").write_text(format_tables(rows), encoding="utf-8")
    save_plots(rows, out_dir / "plots")
    write_json(
        out_dir / "run_meta.json",
        run_meta_dict(
            "ablate",
            settings,
            seed,
            workers,
            extra={"tables": list(tables), "train_sequences": len(train_set), "test_sequences": len(test_set)},
        ),
    )
    if verbose:
        print(f"[ablate] Wrote: {results_path}")
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description="Run the ablation tables and write ablation_results.csv")
    ap.add_argument("--config", default=None, help="Flat key = value config file")
    ap.add_argument("--data", default=None, help="Benchmark root with train/ and test/ (generated when omitted)")
    ap.add_argument("--out", default="eval/out_ablation", help="Output folder")
    ap.add_argument("--tables", default=",".join(TABLES), help="Comma-separated tables")
    ap.add_argument("--rho", default=",".join(f"{r:g}" for r in KEEP_RATIOS), help="Comma-separated keep ratios")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    tables = [t.strip() for t in str(args.tables).split(",") if t.strip()]
    ratios = [float(x.strip()) for x in str(args.rho).split(",") if x.strip()]
    try:
        settings = load_settings(Path(args.config) if args.config else None)
        ablate(
            settings,
            Path(args.out),
            tables=tables,
            ratios=ratios,
            seed=args.seed,
            workers=args.workers,
            data=Path(args.data) if args.data else None,
        )
    except (TrackerError, ValueError) as e:
        raise SystemExit(f"ablation failed: {e}")


if __name__ == "__main__":
    main()
