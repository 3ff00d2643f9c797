"""Report emission: aligned text tables, delimited output, and matplotlib
figures rendered to files next to the numbers they plot."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import (DISPLAY_NAMES, METRIC_NAMES, MetricReport,
                      format_relative_change)

_COLUMNS = [DISPLAY_NAMES[name] for name in METRIC_NAMES]


def _formatted(report: MetricReport) -> list[str]:
    scaled = report.scaled()
    return ["-" if scaled[name] is None else f"{scaled[name]:.2f}"
            for name in METRIC_NAMES]


def format_table(rows: list[tuple[str, MetricReport]],
                 label_header: str = "Run") -> str:
    """Aligned columns, one row per run, table-style scaling."""
    header = [label_header] + _COLUMNS
    body = [[str(label)] + _formatted(report) for label, report in rows]
    widths = [max(len(line[i]) for line in [header] + body)
              for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip()
             for line in [header] + body]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def format_sweep_table(sweep) -> str:
    rows = [(f"{fraction:.0%}", report) for fraction, report in sweep.rows]
    table = format_table(rows, label_header="Fraction")
    rc_lines = []
    for fraction, rc in sweep.rc_rows():
        cells = [format_relative_change(rc[name]) for name in METRIC_NAMES]
        rc_lines.append(
            f"{sweep.baseline_fraction:.0%} -> {fraction:.0%} RC: "
            + "  ".join(f"{DISPLAY_NAMES[n]} {c}"
                        for n, c in zip(METRIC_NAMES, cells))
        )
    return table + ("\n" + "\n".join(rc_lines) if rc_lines else "")


def write_csv(rows: list[tuple[str, MetricReport]], path: str | Path,
              label_header: str = "run") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([label_header] + _COLUMNS)
        for label, report in rows:
            scaled = report.scaled()
            writer.writerow(
                [label] + ["" if scaled[n] is None else f"{scaled[n]:.4f}"
                           for n in METRIC_NAMES]
            )


def render_metric_bars(rows: list[tuple[str, MetricReport]],
                       path: str | Path, title: str = "") -> None:
    """One subplot per metric, one bar per run."""
    labels = [str(label) for label, _ in rows]
    fig, axes = plt.subplots(2, 4, figsize=(16, 7))
    for ax, name in zip(axes.flat, METRIC_NAMES):
        values = [report.scaled()[name] for _, report in rows]
        plotted = [(lbl, v) for lbl, v in zip(labels, values) if v is not None]
        if plotted:
            ax.bar([p[0] for p in plotted], [p[1] for p in plotted],
                   color="#4c8cbf")
        ax.set_title(DISPLAY_NAMES[name])
        ax.tick_params(axis="x", rotation=45, labelsize=7)
    axes.flat[-1].axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_sweep_lines(rows: list[tuple[float, MetricReport]],
                       path: str | Path) -> None:
    """Metric trajectories over the training fraction."""
    fractions = [fraction for fraction, _ in rows]
    fig, axes = plt.subplots(2, 4, figsize=(16, 7))
    for ax, name in zip(axes.flat, METRIC_NAMES):
        values = [report.scaled()[name] for _, report in rows]
        if all(v is not None for v in values):
            ax.plot(fractions, values, marker="o", color="#bf4c4c")
        ax.set_title(DISPLAY_NAMES[name])
        ax.set_xlabel("training fraction")
    axes.flat[-1].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _load_report(payload: dict) -> MetricReport:
    return MetricReport.from_dict(payload["report"])


def generate_report_bundle(run_dir: str | Path) -> list[Path]:
    """Collect every report artifact under a run directory and render the
    delimited summary plus figures alongside it.

    Recognizes single-run report.json, ablation.json grids, and sweep.json
    tables. Returns the written paths.
    """
    run_dir = Path(run_dir)
    figures = run_dir / "figures"
    figures.mkdir(parents=True, exist_ok=True)
    written = []

    single_rows = []
    for path in sorted(run_dir.rglob("report.json")):
        payload = json.loads(path.read_text(encoding="utf-8"))
        label = payload.get("spec", {}).get("output_dir", str(path.parent.name))
        single_rows.append((Path(label).name, _load_report(payload)))
    if single_rows:
        csv_path = run_dir / "report.csv"
        write_csv(single_rows, csv_path)
        fig_path = figures / "runs.png"
        render_metric_bars(single_rows, fig_path)
        written += [csv_path, fig_path]

    for path in sorted(run_dir.rglob("ablation.json")):
        payload = json.loads(path.read_text(encoding="utf-8"))
        rows = [(row["label"], MetricReport.from_dict(row["report"]))
                for row in payload["rows"]]
        csv_path = path.parent / "ablation.csv"
        write_csv(rows, csv_path, label_header="knowledge")
        fig_path = figures / "ablation.png"
        render_metric_bars(rows, fig_path, title="Knowledge ablation")
        written += [csv_path, fig_path]

    for path in sorted(run_dir.rglob("sweep.json")):
        payload = json.loads(path.read_text(encoding="utf-8"))
        rows = [(row["fraction"], MetricReport.from_dict(row["report"]))
                for row in payload["rows"]]
        csv_path = path.parent / "sweep.csv"
        write_csv([(f"{fraction:.0%}", report) for fraction, report in rows],
                  csv_path, label_header="fraction")
        fig_path = figures / "sweep.png"
        render_sweep_lines(rows, fig_path)
        written += [csv_path, fig_path]

    return written
