"""Run artifacts: delimited tables, line-delimited logs, and figures.

Every report path writes a CSV table and renders a companion PNG next to
it, so a run directory is inspectable both by scripts and by eye.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .federated import RoundLog
from .protocols import ProtocolReport


def write_rows_csv(path, rows: Sequence[Dict[str, object]], columns: Optional[List[str]] = None) -> Path:
    """Write dict rows as CSV; column order defaults to first-row order."""
    path = Path(path)
    if not rows:
        raise ValueError(f"no rows to write to {path.name}")
    if columns is None:
        columns = list(rows[0])
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})
    return path


def read_rows_csv(path) -> List[Dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_jsonl(path, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> List[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# loss curves


def write_loss_history(out_dir, history: Sequence[float], stem: str = "loss") -> Dict[str, Path]:
    """Per-epoch loss series as CSV plus a line plot."""
    out_dir = Path(out_dir)
    rows = [{"epoch": i, "loss": float(v)} for i, v in enumerate(history)]
    csv_path = write_rows_csv(out_dir / f"{stem}.csv", rows, ["epoch", "loss"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(history)), list(history), marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_title(stem.replace("_", " "))
    ax.grid(True, alpha=0.3)
    png_path = out_dir / f"{stem}.png"
    fig.savefig(png_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return {"csv": csv_path, "png": png_path}


def write_round_logs(out_dir, logs: Sequence[RoundLog], stem: str = "rounds") -> Dict[str, Path]:
    """Federated round logs as JSONL plus a global-loss plot."""
    out_dir = Path(out_dir)
    jsonl_path = write_jsonl(out_dir / f"{stem}.jsonl", (log.to_record() for log in logs))
    fig, ax = plt.subplots(figsize=(6, 4))
    rounds = [log.round_index for log in logs]
    ax.plot(rounds, [log.global_loss for log in logs], marker="o", markersize=3, label="global loss")
    ax.set_xlabel("round")
    ax.set_ylabel("weighted client loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    png_path = out_dir / f"{stem}.png"
    fig.savefig(png_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return {"jsonl": jsonl_path, "png": png_path}


# ---------------------------------------------------------------------------
# protocol reports

_LOW_DATA_GROUP = re.compile(r"^k=(\d+)/(\w+)$")


def _plot_low_data(ax, report: ProtocolReport) -> bool:
    """Per-k series with one errorbar line per arm; False if not low-data."""
    series: Dict[str, List] = {}
    for group in report.groups():
        match = _LOW_DATA_GROUP.match(group)
        if not match:
            return False
        k, arm = int(match.group(1)), match.group(2)
        mean, std = report.mean_std(group, "f1")
        series.setdefault(arm, []).append((k, mean, std))
    for arm, points in sorted(series.items()):
        points.sort()
        ks = [p[0] for p in points]
        means = [p[1] for p in points]
        stds = [p[2] for p in points]
        ax.errorbar(ks, means, yerr=stds, marker="o", capsize=3, label=arm)
    ax.set_xlabel("labeled segments per class")
    ax.set_xticks(sorted({p[0] for pts in series.values() for p in pts}))
    return True


def _plot_groups(ax, report: ProtocolReport) -> None:
    groups = report.groups()
    means = [report.mean_std(g, "f1")[0] for g in groups]
    stds = [report.mean_std(g, "f1")[1] for g in groups]
    ax.bar(range(len(groups)), means, yerr=stds, capsize=3)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(groups, rotation=30, ha="right")


def write_protocol_report(out_dir, report: ProtocolReport, stem: Optional[str] = None) -> Dict[str, Path]:
    """Per-run and summary CSVs, a config snapshot, and a figure."""
    out_dir = Path(out_dir)
    stem = stem or report.protocol
    paths = {
        "runs": write_rows_csv(out_dir / f"{stem}_runs.csv", report.run_rows(), ["group", "run", "f1", "kappa"]),
        "summary": write_rows_csv(
            out_dir / f"{stem}_summary.csv",
            report.summary_rows(),
            ["group", "n", "f1_mean", "f1_std", "kappa_mean", "kappa_std"],
        ),
    }
    config_path = out_dir / f"{stem}_config.json"
    config_path.write_text(json.dumps(report.config, indent=2, sort_keys=True, default=str) + "\n")
    paths["config"] = config_path
    fig, ax = plt.subplots(figsize=(6, 4))
    if not _plot_low_data(ax, report):
        _plot_groups(ax, report)
    ax.set_ylabel("weighted F1")
    ax.set_title(stem.replace("_", " "))
    ax.grid(True, alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    png_path = out_dir / f"{stem}.png"
    fig.savefig(png_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    paths["png"] = png_path
    return paths
