"""Report rendering: delimited outputs plus matplotlib figures and image grids."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image as PilImage

from .data import check_images
from .metrics import MetricsReport
from .persist import write_csv


def save_image_grid(images: np.ndarray, path: Path, ncols: int = 8, pad: int = 2) -> Path:
    """Tile an image stack into one lossless PNG."""
    images = check_images(images)
    n, h, w, c = images.shape
    ncols = min(ncols, n)
    nrows = math.ceil(n / ncols)
    canvas = np.ones((nrows * (h + pad) + pad, ncols * (w + pad) + pad, c), dtype=np.float32)
    for i, img in enumerate(images):
        r, col = divmod(i, ncols)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        canvas[y:y + h, x:x + w] = img
    arr = (canvas * 255).round().astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PilImage.fromarray(arr[..., 0] if c == 1 else arr).save(path, format="PNG")
    return path


def save_image_files(images: np.ndarray, out_dir: Path, prefix: str) -> list[Path]:
    """One lossless PNG per image."""
    images = check_images(images)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        arr = (img * 255).round().astype(np.uint8)
        path = out_dir / f"{prefix}{i:05d}.png"
        PilImage.fromarray(arr[..., 0] if img.shape[-1] == 1 else arr).save(path, format="PNG")
        paths.append(path)
    return paths


def write_scalars_csv(report: MetricsReport, path: Path) -> Path:
    rows = []
    keys = set()
    for name, entry in sorted(report.scalars.items()):
        row = {"metric": name, "value": entry["value"]}
        row.update({k: v for k, v in entry.items() if k != "value"})
        keys.update(row)
        rows.append(row)
    header = ["metric", "value"] + sorted(keys - {"metric", "value"})
    write_csv(path, header, rows)
    return Path(path)


def write_histograms_csv(report: MetricsReport, path: Path) -> Path | None:
    if not report.histograms:
        return None
    rows = []
    for name, payload in sorted(report.histograms.items()):
        edges, counts = payload["edges"], payload["counts"]
        for i, count in enumerate(counts):
            rows.append({"histogram": name, "bin_low": edges[i], "bin_high": edges[i + 1],
                         "count": count})
    write_csv(path, ["histogram", "bin_low", "bin_high", "count"], rows)
    return Path(path)


def write_sweeps_csv(report: MetricsReport, path: Path) -> Path | None:
    if not report.sweeps:
        return None
    rows = []
    keys: set[str] = set()
    for name, sweep_rows in sorted(report.sweeps.items()):
        for row in sweep_rows:
            out = {"sweep": name, **row}
            keys.update(out)
            rows.append(out)
    header = ["sweep", "tag"] + sorted(keys - {"sweep", "tag"})
    write_csv(path, header, rows)
    return Path(path)


def render_histogram_figure(report: MetricsReport, path: Path, title: str = "") -> Path | None:
    """Log-scale maximum-confidence histograms, one panel per payload."""
    if not report.histograms:
        return None
    names = sorted(report.histograms)
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3.0), squeeze=False)
    for ax, name in zip(axes[0], names):
        payload = report.histograms[name]
        edges = np.asarray(payload["edges"])
        counts = np.asarray(payload["counts"], dtype=float)
        ax.bar(edges[:-1], np.maximum(counts, 0.5), width=np.diff(edges), align="edge",
               color="#4878a8", edgecolor="white", linewidth=0.3)
        ax.set_yscale("log")
        ax.set_xlabel("max confidence")
        ax.set_title(name, fontsize=9)
    axes[0][0].set_ylabel("count (log)")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_sweep_figure(report: MetricsReport, path: Path, x_key: str = "fed",
                        title: str = "") -> Path | None:
    """Scatter of distribution distance against the recorded confidences per checkpoint."""
    if not report.sweeps:
        return None
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for name, rows in sorted(report.sweeps.items()):
        xs = [row[x_key] for row in rows]
        y_keys = [k for k in rows[0] if k.startswith("mmc")]
        for y_key in sorted(y_keys):
            ax.plot(xs, [row[y_key] for row in rows], "o-", label=f"{name}:{y_key}", markersize=4)
    ax.set_xlabel("FED to training data")
    ax.set_ylabel("MMC")
    ax.legend(fontsize=7)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def emit_report(report: MetricsReport, out_dir: Path, name: str = "report",
                figures: bool = True) -> dict[str, Path]:
    """Write the JSON report, flat CSVs, and figure renderings; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    json_path = out_dir / f"{name}.json"
    report.save(json_path)
    paths["json"] = json_path
    paths["scalars_csv"] = write_scalars_csv(report, out_dir / f"{name}.csv")
    hist = write_histograms_csv(report, out_dir / f"{name}_histograms.csv")
    if hist:
        paths["histograms_csv"] = hist
    sweep = write_sweeps_csv(report, out_dir / f"{name}_sweeps.csv")
    if sweep:
        paths["sweeps_csv"] = sweep
    if figures:
        fig_hist = render_histogram_figure(report, out_dir / f"{name}_histograms.png")
        if fig_hist:
            paths["histograms_png"] = fig_hist
        fig_sweep = render_sweep_figure(report, out_dir / f"{name}_sweep.png")
        if fig_sweep:
            paths["sweep_png"] = fig_sweep
    return paths
