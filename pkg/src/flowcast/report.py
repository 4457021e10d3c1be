"""Report rendering: aligned tables, delimited output, and figure files.

Every evaluation report is written three ways next to its JSON: an aligned
plain-text table (NRMSE scaled by 1e-2, SSIM in percent, PSNR in dB), a
CSV with one row per patient plus the aggregate, and matplotlib figures
(metric bars for single reports, curves for sweeps). Qualitative residual
slices go out both as PNG montages and as raw binary PGM dumps.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluate import MetricReport

METRIC_COLUMNS = ("nrmse", "ssim", "psnr")
TABLE_HEADERS = ("NRMSE[1e-2]", "SSIM[%]", "PSNR[dB]")


def _display(metric: str, value: float) -> float:
    if metric == "nrmse":
        return value * 100.0
    if metric == "ssim":
        return value * 100.0
    return value


def render_table(report: MetricReport, title: str = "") -> str:
    """Aligned two-row table (model and baseline aggregates)."""
    rows = [
        ("model", report.aggregate),
        ("lci", report.lci_aggregate),
    ]
    lines = []
    if title:
        lines.append(title)
    header = f"{'row':<8}" + "".join(f"{h:>14}" for h in TABLE_HEADERS)
    lines.append(header)
    lines.append("-" * len(header))
    for name, agg in rows:
        cells = "".join(f"{_display(m, agg[m]):>14.4f}" for m in METRIC_COLUMNS)
        lines.append(f"{name:<8}" + cells)
    return "\n".join(lines) + "\n"


def write_table(report: MetricReport, path: str | Path, title: str = "") -> None:
    Path(path).write_text(render_table(report, title=title))


def write_csv(report: MetricReport, path: str | Path) -> None:
    """One row per patient (model and baseline columns) plus the aggregate."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["patient"]
            + [f"model_{m}" for m in METRIC_COLUMNS]
            + [f"lci_{m}" for m in METRIC_COLUMNS]
        )
        for pid in sorted(report.per_patient):
            row = [pid]
            row += [repr(report.per_patient[pid][m]) for m in METRIC_COLUMNS]
            row += [repr(report.lci_per_patient[pid][m]) for m in METRIC_COLUMNS]
            writer.writerow(row)
        agg = ["aggregate"]
        agg += [repr(report.aggregate[m]) for m in METRIC_COLUMNS]
        agg += [repr(report.lci_aggregate[m]) for m in METRIC_COLUMNS]
        writer.writerow(agg)


def metrics_figure(report: MetricReport, path: str | Path) -> None:
    """Bar chart of model vs baseline aggregates, one panel per metric."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, metric, header in zip(axes, METRIC_COLUMNS, TABLE_HEADERS):
        values = [
            _display(metric, report.aggregate[metric]),
            _display(metric, report.lci_aggregate[metric]),
        ]
        ax.bar(["model", "lci"], values, color=["tab:blue", "tab:gray"])
        ax.set_title(header)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def sweep_figure(reports: list[MetricReport], metric: str, path: str | Path) -> None:
    """Curves of one aggregate metric along the sweep axis (one line per
    masking order when the axis is mask-order)."""
    series: dict[str, list[tuple[float, float]]] = {}
    for rep in reports:
        label = rep.meta.get("order", rep.meta.get("axis", "value"))
        series.setdefault(label, []).append(
            (float(rep.meta["value"]), _display(metric, rep.aggregate[metric]))
        )
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, points in series.items():
        points = sorted(points)
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=str(label))
    axis = reports[0].meta.get("axis", "value") if reports else "value"
    ax.set_xlabel(axis)
    header = dict(zip(METRIC_COLUMNS, TABLE_HEADERS))[metric]
    ax.set_ylabel(header)
    ax.grid(alpha=0.3)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def mid_slice(volume: np.ndarray) -> np.ndarray:
    """Middle slice along the second (depth) axis of an (H, D, W) volume."""
    return np.asarray(volume)[:, volume.shape[1] // 2, :]


def write_pgm(image: np.ndarray, path: str | Path, max_value: float | None = None) -> None:
    """Binary 8-bit PGM (P5) of a 2D non-negative image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2D image, got shape {img.shape}")
    scale = float(img.max()) if max_value is None else float(max_value)
    if scale <= 0:
        scale = 1.0
    data = np.clip(img / scale * 255.0, 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes(order="C"))


def residual_figure(
    pred: np.ndarray, gt: np.ndarray, path_png: str | Path, path_pgm: str | Path | None = None
) -> None:
    """Mid-depth slices of prediction, ground truth, and absolute residual."""
    residual = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64))
    panels = [
        ("prediction", mid_slice(pred)),
        ("target", mid_slice(gt)),
        ("|residual|", mid_slice(residual)),
    ]
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(img, cmap="gray", vmin=0.0, vmax=max(float(np.max(img)), 1e-8))
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path_png, dpi=120)
    plt.close(fig)
    if path_pgm is not None:
        write_pgm(mid_slice(residual), path_pgm, max_value=1.0)
